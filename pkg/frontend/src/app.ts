/** App shell: gallery -> scene detail (chat + atlas inspector + comparator),
 * with ?session= resume so a refresh restores the transcript. */

import { ApiClient, ChatArtifact, SceneInfo } from "./api.js";
import { ChatPanel } from "./chat.js";
import { SceneGallery } from "./gallery.js";
import { AtlasInspector } from "./inspector.js";
import { CompareSlider } from "./slider.js";

export class App {
  private client = new ApiClient("");
  private main: HTMLElement;

  constructor(root: HTMLElement) {
    root.innerHTML = `<header><h1>sceneatlas</h1></header><main></main>`;
    this.main = root.querySelector("main") as HTMLElement;
  }

  async start(): Promise<void> {
    const params = new URLSearchParams(window.location.search);
    const sessionId = params.get("session");
    if (sessionId) {
      try {
        const transcript = await this.client.transcript(sessionId);
        const scenes = await this.client.listScenes();
        const scene = scenes.find((s) => s.handle === transcript.scene) ?? {
          handle: transcript.scene,
          views: 1,
          height: 0,
          width: 0,
          edit_count: 0,
        };
        await this.openScene(scene, sessionId);
        return;
      } catch {
        // fall through to the gallery when the session is gone
      }
    }
    await this.showGallery();
  }

  private async showGallery(): Promise<void> {
    const gallery = new SceneGallery(this.client, (scene) => void this.openScene(scene));
    this.main.replaceChildren(gallery.root);
    await gallery.refresh();
  }

  private async openScene(scene: SceneInfo, resumeSession?: string): Promise<void> {
    this.main.textContent = "";
    const back = document.createElement("button");
    back.type = "button";
    back.textContent = "back to scenes";
    back.addEventListener("click", () => void this.showGallery());

    const inspector = new AtlasInspector(this.client);
    const compareHost = document.createElement("div");
    compareHost.className = "compare-host";

    const chat = new ChatPanel(this.client, scene.handle, {
      onArtifact: (artifact: ChatArtifact) => {
        if (artifact.kind === "edit" && artifact.handle) {
          inspector.show(artifact.handle);
          const slider = new CompareSlider(
            this.client, scene.handle, artifact.handle,
            artifact.views ?? scene.views,
          );
          compareHost.replaceChildren(slider.root);
        }
      },
      onSession: (id: string) => {
        const url = new URL(window.location.href);
        url.searchParams.set("session", id);
        window.history.replaceState(null, "", url.toString());
      },
    });

    this.main.append(back, chat.root, compareHost, inspector.root);
    inspector.show(scene.handle);
    if (resumeSession) {
      await chat.restore(resumeSession);
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const app = new App(document.getElementById("app") as HTMLElement);
  void app.start();
}
