"""Image-space editing executor: rasterized atlases, merge-split, re-render.

Edits operate on rasterized textures so the trained fields are never touched:
the foreground RGBA texture carries the learned alpha (splatted from every
view pixel), and edited scenes re-render through the texture path. Each edit
lands in a fresh ``edits/<edit-id>/`` directory; pre-existing files are never
mutated.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, ToolError
from .fields import AtlasField, MappingField, render_view_from_textures, view_grid
from .scene_io import (
    SceneDirectory,
    load_checkpoint,
    read_image,
    read_image_rgba,
    write_image,
    write_manifest,
)

ATLAS_RESOLUTION = 1000
FOREGROUND_TAU = 0.5
_TOUCH_EPS = 1e-6

SquareId = Literal["foreground", "background", "merged"]


@dataclass
class AtlasImage:
    """An editable texture: RGBA for the foreground square, RGB otherwise."""

    data: np.ndarray
    square: SquareId

    def __post_init__(self) -> None:
        channels = 4 if self.square == "foreground" else 3
        if self.data.ndim != 3 or self.data.shape[2] != channels:
            raise DimensionError(
                f"{self.square} atlas must have {channels} channels, got {self.data.shape}"
            )
        if self.data.shape[0] != self.data.shape[1]:
            raise DimensionError("atlas textures are square")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        if self.square != "foreground":
            raise DimensionError("only the foreground atlas carries alpha")
        return self.data[..., 3]


@dataclass
class EditRequest:
    tool: str
    args: list[str] = field(default_factory=list)
    object_mask: np.ndarray | None = None  # (R, R) bool, atlas coordinates


@dataclass
class EditResult:
    edit_id: str
    directory: Path
    region: str
    summary: str
    view_paths: list[Path]
    artifact_paths: list[Path] = field(default_factory=list)


def _square_grid(square: str, resolution: int, dtype: torch.dtype) -> torch.Tensor:
    """Full-plane UV coordinates of an R x R texel grid covering one square."""
    lin = torch.arange(resolution, dtype=dtype) / max(resolution - 1, 1)
    off = 0.0 if square == "foreground" else 0.5
    gy, gx = torch.meshgrid(lin, lin, indexing="ij")
    uv = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1) * 0.5 + off
    return uv


def rasterize_atlases(
    mapping: MappingField,
    atlas: AtlasField,
    view_shape: tuple[int, int, int],
    resolution: int = ATLAS_RESOLUTION,
    chunk: int = 65536,
) -> tuple[AtlasImage, AtlasImage]:
    """Sample both atlas squares into textures; splat learned alpha into fg.

    The foreground alpha at each texel is the coverage-weighted average of
    the mapping's alpha over every view pixel that lands there; texels with
    negligible coverage stay fully transparent.
    """
    t_count, height, width = view_shape
    dtype = next(mapping.parameters()).dtype
    rgb = {}
    with torch.no_grad():
        for square in ("foreground", "background"):
            uv = _square_grid(square, resolution, dtype)
            out = torch.empty(uv.shape[0], 3, dtype=dtype)
            for start in range(0, uv.shape[0], chunk):
                sl = slice(start, start + chunk)
                out[sl] = atlas(uv[sl])
            rgb[square] = (
                out.reshape(resolution, resolution, 3).to(torch.float32).numpy()
            )

        acc = torch.zeros(resolution * resolution, dtype=torch.float64)
        wacc = torch.zeros(resolution * resolution, dtype=torch.float64)
        for t in range(t_count):
            pts = view_grid(t, height, width, t_count, dtype)
            for start in range(0, pts.shape[0], chunk):
                m = mapping(pts[start : start + chunk])
                px = m.uv_fg_norm.clamp(0.0, 1.0) * (resolution - 1)
                x0 = px[:, 0].long().clamp(max=resolution - 2)
                y0 = px[:, 1].long().clamp(max=resolution - 2)
                wx = (px[:, 0] - x0).to(torch.float64)
                wy = (px[:, 1] - y0).to(torch.float64)
                a = m.alpha.to(torch.float64)
                base = y0 * resolution + x0
                for idx, w in (
                    (base, (1 - wx) * (1 - wy)),
                    (base + 1, wx * (1 - wy)),
                    (base + resolution, (1 - wx) * wy),
                    (base + resolution + 1, wx * wy),
                ):
                    acc.index_add_(0, idx, w * a)
                    wacc.index_add_(0, idx, w)
    alpha = torch.where(wacc > 1e-6, acc / wacc.clamp(min=1e-6), torch.zeros(()))
    alpha_img = alpha.reshape(resolution, resolution).to(torch.float32).numpy()
    fg = AtlasImage(
        np.concatenate([rgb["foreground"], alpha_img[..., None]], axis=2),
        "foreground",
    )
    return fg, AtlasImage(rgb["background"], "background")


def merge(fg: AtlasImage, bg: AtlasImage) -> AtlasImage:
    """Overlay the foreground texture on the background, texel-wise."""
    if fg.resolution != bg.resolution:
        raise DimensionError(
            f"atlas resolutions differ: {fg.resolution} vs {bg.resolution}"
        )
    a = fg.alpha[..., None]
    return AtlasImage(a * fg.rgb + (1.0 - a) * bg.rgb, "merged")


def split(
    edited: AtlasImage,
    original_fg: AtlasImage,
    original_bg: AtlasImage,
    new_obj_mask: np.ndarray | None = None,
    tau: float = FOREGROUND_TAU,
) -> tuple[AtlasImage, AtlasImage]:
    """Separate an edited merged texture back into foreground and background.

    The combined mask (original foreground support plus any new object mask)
    scopes the foreground; background texels keep the original background
    wherever the edit left the foreground region untouched, preserving
    occluded content.
    """
    res = edited.resolution
    if original_fg.resolution != res or original_bg.resolution != res:
        raise DimensionError("split inputs must share one resolution")
    if new_obj_mask is not None and new_obj_mask.shape != (res, res):
        raise DimensionError(
            f"object mask shape {new_obj_mask.shape} does not match atlas {res}"
        )
    fg_mask = original_fg.alpha > tau
    combined = fg_mask | new_obj_mask if new_obj_mask is not None else fg_mask

    merged = merge(original_fg, original_bg)
    touched = np.any(np.abs(edited.data - merged.data) > _TOUCH_EPS, axis=2)

    # edited RGB everywhere: texels outside the mask are transparent but still
    # bleed through bilinear sampling, so they must carry the edited content
    fg_rgb = edited.rgb.copy()
    alpha = np.where(combined, original_fg.alpha, 0.0)
    if new_obj_mask is not None:
        alpha = np.where(new_obj_mask, 1.0, alpha)
    fg_out = AtlasImage(
        np.concatenate([fg_rgb, alpha[..., None].astype(np.float32)], axis=2).astype(
            np.float32
        ),
        "foreground",
    )
    keep_bg = fg_mask & ~touched
    bg_out = AtlasImage(
        np.where(keep_bg[..., None], original_bg.rgb, edited.rgb).astype(np.float32),
        "background",
    )
    return fg_out, bg_out


def dilate_mask(mask: np.ndarray, texels: int = 1) -> np.ndarray:
    """Binary dilation by a square structuring element (bilinear bleed margin)."""
    out = mask.astype(bool)
    for _ in range(texels):
        padded = np.pad(out, 1)
        out = (
            padded[1:-1, 1:-1]
            | padded[:-2, 1:-1]
            | padded[2:, 1:-1]
            | padded[1:-1, :-2]
            | padded[1:-1, 2:]
        )
    return out


def decide_region(
    tool_region: str,
    fg_alpha: np.ndarray,
    edit_mask: np.ndarray | None,
    tau: float = FOREGROUND_TAU,
) -> str:
    """Route an edit: merged when it can involve foreground content.

    Global tools always see the merged atlas; masked edits go to the merged
    path only if the (dilated) mask intersects the foreground support.
    """
    if tool_region in ("foreground", "background", "passthrough"):
        return tool_region
    if edit_mask is None:
        return "merged"
    if (dilate_mask(edit_mask) & (fg_alpha > tau)).any():
        return "merged"
    return "background"


@dataclass
class ToolContext:
    scene: SceneDirectory
    request: EditRequest
    fg: AtlasImage
    bg: AtlasImage


class SceneAssets:
    """Lazy access to one scene's trained fields, textures, and metadata."""

    def __init__(self, scene: SceneDirectory):
        self.scene = scene
        self._fields: tuple[MappingField, AtlasField] | None = None

    @property
    def manifest(self) -> dict:
        return self.scene.manifest()

    def view_shape(self) -> tuple[int, int, int]:
        man = self.manifest
        return int(man["views"]), int(man["height"]), int(man["width"])

    def fields(self) -> tuple[MappingField, AtlasField]:
        if self._fields is None:
            ckpt = self.scene.checkpoint_path
            if not ckpt.exists():
                raise ConfigurationError(
                    f"scene {self.scene.root.name} has no trained checkpoint"
                )
            self._fields = load_checkpoint(ckpt)
        return self._fields

    def atlases(
        self, resolution: int = ATLAS_RESOLUTION, base_edit: str | None = None
    ) -> tuple[AtlasImage, AtlasImage]:
        if base_edit is not None:
            base_dir = self.scene.edits_dir / base_edit
            if not base_dir.is_dir():
                raise ConfigurationError(f"edit {base_edit!r} not found under {self.scene.root}")
            return (
                AtlasImage(read_image_rgba(base_dir / "fg.png"), "foreground"),
                AtlasImage(read_image(base_dir / "bg.png"), "background"),
            )
        fg_path = self.scene.atlases_dir / "fg.png"
        bg_path = self.scene.atlases_dir / "bg.png"
        if fg_path.exists() and bg_path.exists():
            fg_data = read_image_rgba(fg_path)
            bg_data = read_image(bg_path)
            if fg_data.shape[0] == resolution:
                return AtlasImage(fg_data, "foreground"), AtlasImage(bg_data, "background")
        mapping, atlas = self.fields()
        fg, bg = rasterize_atlases(mapping, atlas, self.view_shape(), resolution)
        write_image(fg_path, fg.data)
        write_image(bg_path, bg.data)
        # reload so cached and fresh rasterizations are byte-identical
        return (
            AtlasImage(read_image_rgba(fg_path), "foreground"),
            AtlasImage(read_image(bg_path), "background"),
        )


def apply_edit(
    scene: SceneDirectory,
    request: EditRequest,
    tools: "ToolRegistry",
    resolution: int = ATLAS_RESOLUTION,
    base_edit: str | None = None,
) -> EditResult:
    """Execute one tool against a scene's atlases and re-render every view.

    All outputs land under a fresh edit directory (written atomically); the
    parent scene's files are never modified. ``base_edit`` chains the edit on
    top of a previous edit's textures instead of the scene's own atlases.
    """
    tool = tools.get(request.tool)
    assets = SceneAssets(scene)
    fg, bg = assets.atlases(resolution, base_edit=base_edit)
    region = decide_region(tool.region, fg.alpha, request.object_mask)

    ctx = ToolContext(scene=scene, request=request, fg=fg, bg=bg)

    def masked(original: np.ndarray, edited: np.ndarray) -> np.ndarray:
        if request.object_mask is None:
            return edited
        return np.where(request.object_mask[..., None], edited, original)

    try:
        if region == "merged":
            merged = merge(fg, bg)
            edited, new_mask = tool.run_image(merged.data[..., :3], ctx)
            new_fg, new_bg = split(
                AtlasImage(masked(merged.data, edited), "merged"),
                fg, bg, new_obj_mask=new_mask,
            )
        elif region == "background":
            edited, _ = tool.run_image(bg.data, ctx)
            new_fg, new_bg = fg, AtlasImage(masked(bg.data, edited), "background")
        elif region == "foreground":
            new_fg = tool.run_foreground(fg, ctx)
            new_bg = bg
        elif region == "passthrough":
            new_fg, new_bg = fg, bg
        else:
            raise ToolError(f"unknown region {region!r}")
    except ToolError:
        raise
    except Exception as exc:
        raise ToolError(f"tool {tool.spec.name!r} failed: {exc}") from exc

    mapping, _ = assets.fields()
    t_count, height, width = assets.view_shape()

    edit_id = scene.allocate_edit_id()
    final_dir = scene.edits_dir / edit_id
    tmp_dir = scene.edits_dir / f".tmp-{edit_id}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    try:
        views_dir = tmp_dir / "views"
        views_dir.mkdir(parents=True)
        write_image(tmp_dir / "fg.png", new_fg.data)
        write_image(tmp_dir / "bg.png", new_bg.data)
        # render from the quantized textures actually stored with this edit
        stored_fg = read_image_rgba(tmp_dir / "fg.png")
        stored_bg = read_image(tmp_dir / "bg.png")
        view_paths = []
        for t in range(t_count):
            img = render_view_from_textures(
                mapping, stored_fg, stored_bg, t, height, width, t_count
            )
            p = views_dir / f"{t:04d}.png"
            write_image(p, img)
            view_paths.append(final_dir / "views" / p.name)
        write_manifest(
            tmp_dir / "meta",
            {
                "tool": tool.spec.name,
                "args": ",".join(request.args),
                "region": region,
                "parent": base_edit or "root",
            },
        )
        tmp_dir.replace(final_dir)
    except Exception:
        if tmp_dir.exists():
            shutil.rmtree(tmp_dir)
        raise
    return EditResult(
        edit_id=edit_id,
        directory=final_dir,
        region=region,
        summary=f"{tool.spec.name} applied to {region} atlas",
        view_paths=view_paths,
    )
