/** Side-by-side atlas textures; the foreground sits on a checkerboard so its
 * alpha reads visually. Works for root scenes and edit handles alike. */

import { ApiClient } from "./api.js";

export class AtlasInspector {
  readonly root: HTMLElement;
  private fgImg: HTMLImageElement;
  private bgImg: HTMLImageElement;
  private title: HTMLElement;

  constructor(private client: ApiClient) {
    this.root = document.createElement("section");
    this.root.className = "atlas-inspector";
    this.root.innerHTML = `
      <h3>atlases: <span class="which"></span></h3>
      <div class="atlas-pair">
        <figure class="checkerboard">
          <img class="fg" alt="foreground atlas">
          <figcaption>foreground</figcaption>
        </figure>
        <figure>
          <img class="bg" alt="background atlas">
          <figcaption>background</figcaption>
        </figure>
      </div>`;
    this.fgImg = this.root.querySelector(".fg") as HTMLImageElement;
    this.bgImg = this.root.querySelector(".bg") as HTMLImageElement;
    this.title = this.root.querySelector(".which") as HTMLElement;
  }

  show(handle: string): void {
    this.title.textContent = handle;
    this.fgImg.src = this.client.atlasUrl(handle, "fg");
    this.bgImg.src = this.client.atlasUrl(handle, "bg");
  }
}
