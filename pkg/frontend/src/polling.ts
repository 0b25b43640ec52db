import { ApiClient, TrainStatus } from "./api.js";

export interface PollOptions {
  intervalMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

const realSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/** Poll training status once a second until it settles; onTick sees every
 * status including the final one. */
export async function pollTraining(
  client: ApiClient,
  handle: string,
  onTick: (status: TrainStatus) => void,
  opts: PollOptions = {},
): Promise<TrainStatus> {
  const interval = opts.intervalMs ?? 1000;
  const sleep = opts.sleep ?? realSleep;
  for (;;) {
    const status = await client.trainStatus(handle);
    onTick(status);
    if (status.state === "done" || status.state === "error") return status;
    await sleep(interval);
  }
}

export function progressFraction(status: TrainStatus): number {
  if (status.total_steps <= 0) return 0;
  return Math.max(0, Math.min(1, status.step / status.total_steps));
}
