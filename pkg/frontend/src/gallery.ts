/** Scene gallery: thumbnails from the server, upload flow with a training
 * progress bar driven by status polling. */

import { ApiClient, SceneInfo } from "./api.js";
import { pollTraining, progressFraction } from "./polling.js";

export class SceneGallery {
  readonly root: HTMLElement;
  private list: HTMLElement;
  private progress: HTMLProgressElement;
  private statusLine: HTMLElement;

  constructor(
    private client: ApiClient,
    private onOpen: (scene: SceneInfo) => void,
  ) {
    this.root = document.createElement("section");
    this.root.className = "gallery";
    this.root.innerHTML = `
      <h2>scenes</h2>
      <div class="scene-list"></div>
      <form class="upload-form">
        <input type="file" accept="image/png,image/jpeg" multiple aria-label="scene views">
        <button type="submit">upload views</button>
      </form>
      <progress max="1" value="0" hidden></progress>
      <p class="status-line" role="status"></p>`;
    this.list = this.root.querySelector(".scene-list") as HTMLElement;
    this.progress = this.root.querySelector("progress") as HTMLProgressElement;
    this.statusLine = this.root.querySelector(".status-line") as HTMLElement;
    (this.root.querySelector("form") as HTMLFormElement).addEventListener(
      "submit",
      (e) => {
        e.preventDefault();
        void this.upload();
      },
    );
  }

  async refresh(): Promise<void> {
    const scenes = await this.client.listScenes();
    this.list.textContent = "";
    for (const scene of scenes) {
      const card = document.createElement("button");
      card.type = "button";
      card.className = "scene-card";
      const img = document.createElement("img");
      img.src = this.client.viewUrl(scene.handle, 0);
      img.alt = `first view of ${scene.handle}`;
      const label = document.createElement("span");
      label.textContent =
        `${scene.handle} · ${scene.views} views · ${scene.width}x${scene.height}` +
        (scene.edit_count ? ` · ${scene.edit_count} edits` : "");
      card.append(img, label);
      card.addEventListener("click", () => this.onOpen(scene));
      this.list.appendChild(card);
    }
  }

  private async upload(): Promise<void> {
    const input = this.root.querySelector("input[type=file]") as HTMLInputElement;
    const files = Array.from(input.files ?? []);
    if (!files.length) {
      this.statusLine.textContent = "choose view images first";
      return;
    }
    this.statusLine.textContent = "uploading...";
    const handle = await this.client.uploadScene(files);
    this.statusLine.textContent = `uploaded as ${handle}; training...`;
    this.progress.hidden = false;
    await this.client.startTraining(handle);
    const final = await pollTraining(this.client, handle, (status) => {
      this.progress.value = progressFraction(status);
      this.statusLine.textContent =
        `training ${handle}: step ${status.step}/${status.total_steps}`;
    });
    this.progress.hidden = true;
    this.statusLine.textContent =
      final.state === "done" ? `${handle} trained` : `training failed: ${final.error}`;
    await this.refresh();
  }
}
