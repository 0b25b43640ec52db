/** Chat panel: one in-flight turn at a time, artifact cards rendered from
 * server URLs, transcript restorable from the server after a refresh. */

import { ApiClient, BusyError, ChatArtifact, ChatResponse } from "./api.js";

export interface ChatEvents {
  onArtifact?: (artifact: ChatArtifact) => void;
  onSession?: (sessionId: string) => void;
}

export class ChatPanel {
  readonly root: HTMLElement;
  private log: HTMLElement;
  private input: HTMLInputElement;
  private sendButton: HTMLButtonElement;
  private toast: HTMLElement;
  private inFlight = false;
  sessionId: string | null = null;

  constructor(
    private client: ApiClient,
    private scene: string,
    private events: ChatEvents = {},
  ) {
    this.root = document.createElement("section");
    this.root.className = "chat-panel";
    this.root.innerHTML = `
      <div class="chat-log" role="log"></div>
      <div class="toast" hidden></div>
      <form class="chat-form">
        <input type="text" placeholder="describe an edit..." aria-label="chat message">
        <button type="submit">send</button>
      </form>`;
    this.log = this.root.querySelector(".chat-log") as HTMLElement;
    this.input = this.root.querySelector("input") as HTMLInputElement;
    this.sendButton = this.root.querySelector("button") as HTMLButtonElement;
    this.toast = this.root.querySelector(".toast") as HTMLElement;
    (this.root.querySelector("form") as HTMLFormElement).addEventListener(
      "submit",
      (e) => {
        e.preventDefault();
        void this.send();
      },
    );
  }

  get busy(): boolean {
    return this.inFlight;
  }

  private setBusy(value: boolean): void {
    this.inFlight = value;
    this.input.disabled = value;
    this.sendButton.disabled = value;
  }

  showToast(message: string): void {
    this.toast.textContent = message;
    this.toast.hidden = false;
  }

  appendMessage(role: "user" | "assistant", text: string, artifacts: ChatArtifact[] = []): void {
    const entry = document.createElement("div");
    entry.className = `message ${role}`;
    const body = document.createElement("p");
    body.textContent = text;
    entry.appendChild(body);
    for (const artifact of artifacts) {
      entry.appendChild(this.renderArtifact(artifact));
    }
    this.log.appendChild(entry);
  }

  private renderArtifact(artifact: ChatArtifact): HTMLElement {
    const card = document.createElement("figure");
    card.className = `artifact-card ${artifact.kind}`;
    const img = document.createElement("img");
    img.src = artifact.url;
    img.alt = artifact.kind === "edit" ? `edited scene ${artifact.handle}` : "tool image";
    card.appendChild(img);
    const caption = document.createElement("figcaption");
    caption.textContent =
      artifact.kind === "edit" ? `${artifact.handle} (${artifact.edit_id})` : "image";
    card.appendChild(caption);
    if (artifact.kind === "edit" && this.events.onArtifact) {
      const open = document.createElement("button");
      open.type = "button";
      open.className = "open-compare";
      open.textContent = "compare";
      open.addEventListener("click", () => this.events.onArtifact?.(artifact));
      card.appendChild(open);
    }
    return card;
  }

  async send(text?: string): Promise<ChatResponse | null> {
    const message = (text ?? this.input.value).trim();
    if (!message || this.inFlight) return null;
    this.setBusy(true);
    this.toast.hidden = true;
    this.appendMessage("user", message);
    this.input.value = "";
    try {
      const resp = await this.client.chat(message, {
        sessionId: this.sessionId ?? undefined,
        scene: this.sessionId ? undefined : this.scene,
      });
      this.sessionId = resp.session_id;
      this.events.onSession?.(resp.session_id);
      this.appendMessage("assistant", resp.reply, resp.artifacts);
      for (const artifact of resp.artifacts) this.events.onArtifact?.(artifact);
      return resp;
    } catch (err) {
      if (err instanceof BusyError) {
        this.showToast("a turn is already running for this session");
        return null;
      }
      this.showToast(`request failed: ${(err as Error).message}`);
      return null;
    } finally {
      this.setBusy(false);
    }
  }

  /** Rebuild the log from the server transcript (page refresh mid-session). */
  async restore(sessionId: string): Promise<void> {
    const transcript = await this.client.transcript(sessionId);
    this.sessionId = transcript.session_id;
    this.log.textContent = "";
    for (const msg of transcript.messages) {
      this.appendMessage(msg.role, msg.text, msg.artifacts ?? []);
    }
  }
}
