/** Typed client for the scene/chat HTTP API. The UI never touches pixels;
 * every image it shows is a URL served by the backend. */

export interface SceneInfo {
  handle: string;
  views: number;
  height: number;
  width: number;
  edit_count: number;
}

export interface TrainStatus {
  state: "idle" | "running" | "done" | "error";
  step: number;
  total_steps: number;
  losses: Record<string, number>;
  error?: string;
}

export interface ChatArtifact {
  kind: "edit" | "image";
  url: string;
  handle?: string;
  edit_id?: string;
  views?: number;
}

export interface ChatResponse {
  session_id: string;
  reply: string;
  artifacts: ChatArtifact[];
}

export interface TranscriptMessage {
  role: "user" | "assistant";
  text: string;
  artifacts?: ChatArtifact[];
}

export interface Transcript {
  session_id: string;
  scene: string;
  messages: TranscriptMessage[];
}

export class BusyError extends Error {}

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function raise(resp: Response): Promise<never> {
  let code = "unknown";
  let message = resp.statusText;
  try {
    const body = await resp.json();
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body
  }
  if (resp.status === 409) throw new BusyError(message);
  throw new ApiError(resp.status, code, message);
}

export class ApiClient {
  constructor(private base: string = "") {}

  viewUrl(handle: string, t: number): string {
    return `${this.base}/api/scenes/${handle}/views/${t}.png`;
  }

  atlasUrl(handle: string, which: "fg" | "bg"): string {
    return `${this.base}/api/scenes/${handle}/atlas/${which}.png`;
  }

  async listScenes(): Promise<SceneInfo[]> {
    const resp = await fetch(`${this.base}/api/scenes`);
    if (!resp.ok) await raise(resp);
    return (await resp.json()).scenes;
  }

  async uploadScene(files: File[]): Promise<string> {
    const form = new FormData();
    for (const f of files) form.append("files", f);
    const resp = await fetch(`${this.base}/api/scenes`, { method: "POST", body: form });
    if (!resp.ok) await raise(resp);
    return (await resp.json()).handle;
  }

  async startTraining(handle: string, overrides: Record<string, number> = {}): Promise<void> {
    const resp = await fetch(`${this.base}/api/scenes/${handle}/train`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(overrides),
    });
    if (!resp.ok) await raise(resp);
  }

  async trainStatus(handle: string): Promise<TrainStatus> {
    const resp = await fetch(`${this.base}/api/scenes/${handle}/train/status`);
    if (!resp.ok) await raise(resp);
    return await resp.json();
  }

  async chat(message: string, opts: { sessionId?: string; scene?: string }): Promise<ChatResponse> {
    const body: Record<string, string> = { message };
    if (opts.sessionId) body.session_id = opts.sessionId;
    if (opts.scene) body.scene = opts.scene;
    const resp = await fetch(`${this.base}/api/chat`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) await raise(resp);
    return await resp.json();
  }

  async transcript(sessionId: string): Promise<Transcript> {
    const resp = await fetch(`${this.base}/api/sessions/${sessionId}`);
    if (!resp.ok) await raise(resp);
    return await resp.json();
  }
}
