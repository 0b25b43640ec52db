/** Draggable before/after comparator: left pane is the original view, right
 * pane the edited one, split at a movable divider, with a scrubber across
 * the view index. */

import { ApiClient } from "./api.js";

export function fractionFromPointer(clientX: number, rect: { left: number; width: number }): number {
  if (rect.width <= 0) return 0;
  return Math.max(0, Math.min(1, (clientX - rect.left) / rect.width));
}

export class CompareSlider {
  readonly root: HTMLElement;
  private beforeImg: HTMLImageElement;
  private afterImg: HTMLImageElement;
  private divider: HTMLElement;
  private scrubber: HTMLInputElement;
  private viewLabel: HTMLElement;
  private fraction = 0.5;
  private dragging = false;
  private viewIndex = 0;

  constructor(
    private client: ApiClient,
    private beforeHandle: string,
    private afterHandle: string,
    private viewCount: number,
  ) {
    this.root = document.createElement("div");
    this.root.className = "compare-slider";
    this.root.innerHTML = `
      <div class="compare-stage">
        <img class="before" alt="original view" draggable="false">
        <img class="after" alt="edited view" draggable="false">
        <div class="divider" role="separator" aria-label="comparison divider"></div>
      </div>
      <label class="scrub">view
        <input type="range" min="0" value="0" step="1">
        <span class="view-label"></span>
      </label>`;
    this.beforeImg = this.root.querySelector(".before") as HTMLImageElement;
    this.afterImg = this.root.querySelector(".after") as HTMLImageElement;
    this.divider = this.root.querySelector(".divider") as HTMLElement;
    this.scrubber = this.root.querySelector("input") as HTMLInputElement;
    this.viewLabel = this.root.querySelector(".view-label") as HTMLElement;
    this.scrubber.max = String(Math.max(0, viewCount - 1));

    const stage = this.root.querySelector(".compare-stage") as HTMLElement;
    stage.addEventListener("pointerdown", (e) => {
      this.dragging = true;
      this.onPointer(e as PointerEvent, stage);
    });
    stage.addEventListener("pointermove", (e) => {
      if (this.dragging) this.onPointer(e as PointerEvent, stage);
    });
    window.addEventListener("pointerup", () => (this.dragging = false));
    this.scrubber.addEventListener("input", () => {
      this.setViewIndex(Number(this.scrubber.value));
    });
    this.setViewIndex(0);
    this.setFraction(0.5);
  }

  private onPointer(event: PointerEvent, stage: HTMLElement): void {
    event.preventDefault();
    this.setFraction(fractionFromPointer(event.clientX, stage.getBoundingClientRect()));
  }

  setFraction(fraction: number): void {
    this.fraction = Math.max(0, Math.min(1, fraction));
    const pct = this.fraction * 100;
    // right pane shows only to the right of the divider
    this.afterImg.style.clipPath = `inset(0 0 0 ${pct}%)`;
    this.divider.style.left = `${pct}%`;
  }

  getFraction(): number {
    return this.fraction;
  }

  setViewIndex(t: number): void {
    this.viewIndex = Math.max(0, Math.min(this.viewCount - 1, t));
    this.scrubber.value = String(this.viewIndex);
    this.viewLabel.textContent = `${this.viewIndex + 1}/${this.viewCount}`;
    this.beforeImg.src = this.client.viewUrl(this.beforeHandle, this.viewIndex);
    this.afterImg.src = this.client.viewUrl(this.afterHandle, this.viewIndex);
  }

  getViewIndex(): number {
    return this.viewIndex;
  }
}
