"""Built-in deterministic visual tools and their prompt-facing annotations.

Every tool carries a four-field annotation (name, when to use it, parameter
list, and a literal input example) that the dialogue layer injects into the
planner prompt. Edit tools dispatch through the atlas editor; artifact tools
produce standalone images; metadata tools answer with text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .editor import (
    AtlasImage,
    EditRequest,
    EditResult,
    SceneAssets,
    ToolContext,
    apply_edit,
    merge,
)
from .errors import ToolError
from .scene_io import SceneDirectory, write_image


@dataclass(frozen=True)
class ToolSpec:
    """Planner-facing tool annotation; all four fields must be non-empty."""

    name: str
    description: str
    params: tuple[tuple[str, str], ...]
    input_example: str

    def __post_init__(self) -> None:
        if not (self.name and self.description and self.params and self.input_example):
            raise ValueError("tool annotations need name, description, params, example")
        if any(not p or not d for p, d in self.params):
            raise ValueError("every parameter needs a name and description")


@dataclass
class Tool:
    spec: ToolSpec
    kind: str  # edit | artifact | metadata
    region: str = "global"  # edit tools: global | foreground | background | passthrough
    image_fn: Callable | None = None
    foreground_fn: Callable | None = None
    artifact_fn: Callable | None = None
    metadata_fn: Callable | None = None

    def run_image(self, rgb: np.ndarray, ctx: ToolContext):
        out = self.image_fn(rgb, ctx)
        return out if isinstance(out, tuple) else (out, None)

    def run_foreground(self, fg: AtlasImage, ctx: ToolContext) -> AtlasImage:
        return self.foreground_fn(fg, ctx)


class ToolRegistry:
    """Ordered name -> Tool map; registration order drives prompt order."""

    def __init__(self) -> None:
        self._tools: dict[str, Tool] = {}

    def register(self, tool: Tool) -> None:
        if tool.spec.name in self._tools:
            raise ToolError(f"tool {tool.spec.name!r} registered twice")
        self._tools[tool.spec.name] = tool

    def get(self, name: str) -> Tool:
        if name not in self._tools:
            raise ToolError(f"unknown tool {name!r}")
        return self._tools[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def tools(self) -> list[Tool]:
        return list(self._tools.values())


@dataclass
class DispatchResult:
    kind: str  # edit | artifact | metadata
    summary: str
    edit: EditResult | None = None
    artifact_path: Path | None = None
    text: str | None = None


def dispatch_tool(
    scene: SceneDirectory,
    tool_name: str,
    args: list[str],
    registry: ToolRegistry,
    resolution: int | None = None,
    object_mask: np.ndarray | None = None,
    base_edit: str | None = None,
) -> DispatchResult:
    """Run one tool against a scene; args exclude the scene handle."""
    tool = registry.get(tool_name)
    expected = len(tool.spec.params) - 1  # first param is the scene handle
    if len(args) != expected:
        raise ToolError(
            f"tool {tool_name!r} takes {expected} argument(s) besides the scene, "
            f"got {len(args)}"
        )
    if tool.kind == "edit":
        request = EditRequest(tool=tool_name, args=args, object_mask=object_mask)
        kwargs = {"resolution": resolution} if resolution else {}
        result = apply_edit(scene, request, registry, base_edit=base_edit, **kwargs)
        return DispatchResult(kind="edit", summary=result.summary, edit=result)
    if tool.kind == "artifact":
        assets = SceneAssets(scene)
        img, name_hint, summary = tool.artifact_fn(assets, args, resolution)
        scene.artifacts_dir.mkdir(parents=True, exist_ok=True)
        counter = scene.artifacts_dir / ".counter"
        nxt = (int(counter.read_text()) if counter.exists() else 0) + 1
        counter.write_text(str(nxt))
        path = scene.artifacts_dir / f"{name_hint}-{nxt:04d}.png"
        write_image(path, img)
        return DispatchResult(kind="artifact", summary=summary, artifact_path=path)
    if tool.kind == "metadata":
        text = tool.metadata_fn(scene, args)
        return DispatchResult(kind="metadata", summary=text, text=text)
    raise ToolError(f"tool {tool_name!r} has unknown kind {tool.kind!r}")


# ---------------------------------------------------------------------------
# built-in tool implementations


def _grayscale(rgb: np.ndarray, ctx: ToolContext) -> np.ndarray:
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.repeat(luma[..., None], 3, axis=2).astype(np.float32)


def _hue_rotate(rgb: np.ndarray, ctx: ToolContext) -> np.ndarray:
    try:
        degrees = float(ctx.request.args[0])
    except (IndexError, ValueError) as exc:
        raise ToolError(f"hue_rotate needs a numeric angle: {exc}") from exc
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    m = np.array(
        [
            [0.299 + 0.701 * c + 0.168 * s, 0.587 - 0.587 * c + 0.330 * s,
             0.114 - 0.114 * c - 0.497 * s],
            [0.299 - 0.299 * c - 0.328 * s, 0.587 + 0.413 * c + 0.035 * s,
             0.114 - 0.114 * c + 0.292 * s],
            [0.299 - 0.300 * c + 1.250 * s, 0.587 - 0.588 * c - 1.050 * s,
             0.114 + 0.886 * c - 0.203 * s],
        ],
        dtype=np.float32,
    )
    return np.clip(rgb @ m.T, 0.0, 1.0).astype(np.float32)


def _brightness(rgb: np.ndarray, ctx: ToolContext) -> np.ndarray:
    try:
        delta = float(ctx.request.args[0])
    except (IndexError, ValueError) as exc:
        raise ToolError(f"brightness needs a numeric delta: {exc}") from exc
    return np.clip(rgb + delta, 0.0, 1.0).astype(np.float32)


def _remove_foreground(fg: AtlasImage, ctx: ToolContext) -> AtlasImage:
    data = fg.data.copy()
    data[..., 3] = 0.0
    return AtlasImage(data, "foreground")


def _whiten_background(rgb: np.ndarray, ctx: ToolContext) -> np.ndarray:
    return np.ones_like(rgb)


def _replace_foreground(fg: AtlasImage, ctx: ToolContext) -> AtlasImage:
    from .scene_io import read_image

    if not ctx.request.args:
        raise ToolError("replace_foreground needs an image path")
    path = Path(ctx.request.args[0])
    if not path.exists():
        raise ToolError(f"replacement image {path} does not exist")
    source = read_image(path)
    rows = np.where((fg.alpha > 0.5).any(axis=1))[0]
    cols = np.where((fg.alpha > 0.5).any(axis=0))[0]
    if rows.size == 0:
        raise ToolError("foreground mask is empty; nothing to replace")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    resized = np.asarray(
        Image.fromarray((source * 255).astype(np.uint8)).resize(
            (c1 - c0, r1 - r0), Image.BILINEAR
        ),
        dtype=np.float32,
    ) / 255.0
    data = fg.data.copy()
    region = data[r0:r1, c0:c1, :3]
    inside = fg.alpha[r0:r1, c0:c1] > 0.5
    data[r0:r1, c0:c1, :3] = np.where(inside[..., None], resized, region)
    return AtlasImage(data, "foreground")


def _sobel_edges(assets: SceneAssets, args: list[str], resolution: int | None):
    fg, bg = assets.atlases(resolution or 1000)
    gray = _grayscale(merge(fg, bg).data, None)[..., 0]
    padded = np.pad(gray, 1, mode="edge")
    gx = (
        padded[:-2, 2:] + 2 * padded[1:-1, 2:] + padded[2:, 2:]
        - padded[:-2, :-2] - 2 * padded[1:-1, :-2] - padded[2:, :-2]
    )
    gy = (
        padded[2:, :-2] + 2 * padded[2:, 1:-1] + padded[2:, 2:]
        - padded[:-2, :-2] - 2 * padded[:-2, 1:-1] - padded[:-2, 2:]
    )
    mag = np.sqrt(gx * gx + gy * gy) / (4.0 * math.sqrt(2.0))
    img = np.repeat(np.clip(mag, 0.0, 1.0)[..., None], 3, axis=2)
    return img, "edges", "edge map extracted from the merged atlas"


def _describe_scene(scene: SceneDirectory, args: list[str]) -> str:
    man = scene.manifest()
    parts = [
        f"{man['views']} views of {man['width']}x{man['height']} pixels",
        f"masks: {'yes' if man.get('masks') == '1' else 'no'}",
        f"inpainted: {'yes' if man.get('inpainted') == '1' else 'no'}",
        f"flow fields: {man.get('flows', '0')}",
        f"edits so far: {len(scene.edit_ids())}",
    ]
    return "; ".join(parts)


def default_registry() -> ToolRegistry:
    reg = ToolRegistry()
    scene_param = ("scene", "the scene name, e.g. ab12cd34.scn")
    entries = [
        Tool(
            ToolSpec(
                "identity",
                "useful when you want to re-render a scene without changing it, "
                "for example to duplicate it before further edits. The input is "
                "the scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="edit",
            region="passthrough",
        ),
        Tool(
            ToolSpec(
                "grayscale_stylize",
                "useful when you want to restyle the whole scene in grayscale or "
                "black-and-white. The input is the scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="edit",
            region="global",
            image_fn=_grayscale,
        ),
        Tool(
            ToolSpec(
                "hue_rotate",
                "useful when you want to shift every color in the scene around "
                "the hue wheel. The input is a comma-separated string of two: "
                "the scene name and the rotation angle in degrees.",
                (scene_param, ("degrees", "hue rotation angle in degrees")),
                "ab12cd34.scn, 90",
            ),
            kind="edit",
            region="global",
            image_fn=_hue_rotate,
        ),
        Tool(
            ToolSpec(
                "brightness",
                "useful when you want to brighten or darken the whole scene. "
                "The input is a comma-separated string of two: the scene name "
                "and a brightness delta between -1 and 1.",
                (scene_param, ("delta", "additive brightness change in [-1, 1]")),
                "ab12cd34.scn, 0.2",
            ),
            kind="edit",
            region="global",
            image_fn=_brightness,
        ),
        Tool(
            ToolSpec(
                "sobel_edge_map",
                "useful when you want an edge map image of the scene instead of "
                "an edit, for example to inspect structure. The input is the "
                "scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="artifact",
            artifact_fn=_sobel_edges,
        ),
        Tool(
            ToolSpec(
                "remove_foreground",
                "useful when you want to delete the foreground object and show "
                "the completed background. The input is the scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="edit",
            region="foreground",
            foreground_fn=_remove_foreground,
        ),
        Tool(
            ToolSpec(
                "extract_foreground",
                "useful when you want to isolate the foreground object on a "
                "white background. The input is the scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="edit",
            region="background",
            image_fn=_whiten_background,
        ),
        Tool(
            ToolSpec(
                "replace_foreground",
                "useful when you want to swap the foreground object's appearance "
                "for a provided image. The input is a comma-separated string of "
                "two: the scene name and the image path.",
                (scene_param, ("image_path", "path of the replacement image")),
                "ab12cd34.scn, /data/cat.png",
            ),
            kind="edit",
            region="foreground",
            foreground_fn=_replace_foreground,
        ),
        Tool(
            ToolSpec(
                "describe_scene",
                "useful when you want to know what a scene contains or its size "
                "and asset inventory. The input is the scene name alone.",
                (scene_param,),
                "ab12cd34.scn",
            ),
            kind="metadata",
            metadata_fn=_describe_scene,
        ),
    ]
    for tool in entries:
        reg.register(tool)
    return reg
