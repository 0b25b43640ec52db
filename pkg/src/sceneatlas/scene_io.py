"""Scene ingestion, on-disk scene layout, and model checkpoints.

A scene directory looks like:

    views/%04d.png        required source views
    masks/%04d.png        optional binary foreground masks
    inpainted/%04d.png    optional background-completed views
    flows/%04d_%04d.flo3  optional per-pair optical flow + confidence
    atlases/{fg.png,bg.png}
    ckpt/*.hat            binary checkpoints
    edits/<edit-id>/...   immutable edit outputs
    artifacts/*.png       tool-produced images that are not edits
    manifest.txt          key=value metadata
"""

from __future__ import annotations

import binascii
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    DecodeError,
    DimensionError,
    NumericError,
)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
FLOW_MAGIC = b"FLO3"
CHECKPOINT_MAGIC = b"HATC"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.txt"


# ---------------------------------------------------------------------------
# domain types


@dataclass
class FlowField:
    """Optical flow from view ``src`` to view ``dst``, in pixel units."""

    src: int
    dst: int
    vec: np.ndarray  # (H, W, 2) float32, (dx, dy)
    conf: np.ndarray  # (H, W) float32 in [0, 1]


@dataclass
class ViewSet:
    """The T-view image stack with optional supervision assets.

    ``views`` is (T, H, W, 3) float32 in [0, 1]. Optional assets must match
    the view count and dimensions exactly.
    """

    views: np.ndarray
    fg_masks: np.ndarray | None = None
    inpainted: np.ndarray | None = None
    flows: list[FlowField] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.views.ndim != 4 or self.views.shape[3] != 3:
            raise DimensionError(f"views must be (T, H, W, 3), got {self.views.shape}")
        if self.views.shape[0] < 1:
            raise DimensionError("need at least one view")
        t, h, w, _ = self.views.shape
        if self.fg_masks is not None and self.fg_masks.shape != (t, h, w):
            raise DimensionError(
                f"fg_masks shape {self.fg_masks.shape} does not match views {(t, h, w)}"
            )
        if self.inpainted is not None and self.inpainted.shape != (t, h, w, 3):
            raise DimensionError(
                f"inpainted shape {self.inpainted.shape} does not match views"
            )
        for fl in self.flows:
            if fl.vec.shape != (h, w, 2) or fl.conf.shape != (h, w):
                raise DimensionError(f"flow {fl.src}->{fl.dst} has wrong shape")
            if not (0 <= fl.src < t and 0 <= fl.dst < t) or fl.src == fl.dst:
                raise DimensionError(f"flow pair ({fl.src}, {fl.dst}) invalid for T={t}")

    @property
    def num_views(self) -> int:
        return self.views.shape[0]

    @property
    def height(self) -> int:
        return self.views.shape[1]

    @property
    def width(self) -> int:
        return self.views.shape[2]


# ---------------------------------------------------------------------------
# raster + flow file helpers


def read_image(path: Path) -> np.ndarray:
    """Read an 8-bit raster image as float32 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise DecodeError(f"cannot decode image {path.name}: {exc}") from exc
    return arr

def read_image_rgba(path: Path) -> np.ndarray:
    """Read an 8-bit raster image as float32 RGBA in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path.name}: {exc}") from exc
    return arr


def write_image(path: Path, img: np.ndarray) -> None:
    """Write float [0,1] RGB/RGBA/gray as 8-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_mask(path: Path) -> np.ndarray:
    """Read a binary mask PNG as float32 {0, 1}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except Exception as exc:
        raise DecodeError(f"cannot decode mask {path.name}: {exc}") from exc
    return (arr > 127).astype(np.float32)


def write_flow(path: Path, flow: FlowField) -> None:
    h, w = flow.conf.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.concatenate(
        [flow.vec.astype("<f4"), flow.conf[..., None].astype("<f4")], axis=2
    )
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<4I", h, w, flow.src, flow.dst))
        f.write(payload.tobytes())


def read_flow(path: Path) -> FlowField:
    data = path.read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise DecodeError(f"{path.name}: bad flow magic")
    h, w, src, dst = struct.unpack_from("<4I", data, 4)
    body = data[20:]
    expected = h * w * 3 * 4
    if len(body) != expected:
        raise DecodeError(f"{path.name}: expected {expected} payload bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w, 3).astype(np.float32)
    return FlowField(src=src, dst=dst, vec=arr[..., :2].copy(), conf=arr[..., 2].copy())


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    entries: dict[str, str] = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DecodeError(f"manifest line not key = value: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


# ---------------------------------------------------------------------------
# scene directory


class SceneDirectory:
    """Accessor for one scene's on-disk layout."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    @property
    def views_dir(self) -> Path:
        return self.root / "views"

    @property
    def masks_dir(self) -> Path:
        return self.root / "masks"

    @property
    def inpainted_dir(self) -> Path:
        return self.root / "inpainted"

    @property
    def flows_dir(self) -> Path:
        return self.root / "flows"

    @property
    def atlases_dir(self) -> Path:
        return self.root / "atlases"

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "ckpt"

    @property
    def edits_dir(self) -> Path:
        return self.root / "edits"

    @property
    def artifacts_dir(self) -> Path:
        return self.root / "artifacts"

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def checkpoint_path(self) -> Path:
        return self.ckpt_dir / "model.hat"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise DecodeError(f"{self.root} has no {MANIFEST_NAME}")
        return read_manifest(self.manifest_path)

    def edit_ids(self) -> list[str]:
        if not self.edits_dir.is_dir():
            return []
        return sorted(p.name for p in self.edits_dir.iterdir() if p.is_dir())

    def allocate_edit_id(self) -> str:
        """Monotone edit ids that survive deletions (counter file)."""
        self.edits_dir.mkdir(parents=True, exist_ok=True)
        counter = self.edits_dir / ".counter"
        last = int(counter.read_text()) if counter.exists() else 0
        nxt = last + 1
        counter.write_text(str(nxt))
        return f"e{nxt:04d}"

    @staticmethod
    def create(root: Path | str, viewset: ViewSet, source: str = "import") -> "SceneDirectory":
        scene = SceneDirectory(root)
        scene.root.mkdir(parents=True, exist_ok=True)
        for t in range(viewset.num_views):
            write_image(scene.views_dir / f"{t:04d}.png", viewset.views[t])
        if viewset.fg_masks is not None:
            for t in range(viewset.num_views):
                write_image(scene.masks_dir / f"{t:04d}.png", viewset.fg_masks[t])
        if viewset.inpainted is not None:
            for t in range(viewset.num_views):
                write_image(scene.inpainted_dir / f"{t:04d}.png", viewset.inpainted[t])
        for fl in viewset.flows:
            write_flow(scene.flows_dir / f"{fl.src:04d}_{fl.dst:04d}.flo3", fl)
        write_manifest(
            scene.manifest_path,
            {
                "format_version": 1,
                "height": viewset.height,
                "width": viewset.width,
                "views": viewset.num_views,
                "masks": int(viewset.fg_masks is not None),
                "inpainted": int(viewset.inpainted is not None),
                "flows": len(viewset.flows),
                "source": source,
                "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            },
        )
        return scene


def _load_image_stack(directory: Path, reader, what: str) -> tuple[np.ndarray, list[Path]]:
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise DecodeError(f"no {what} found in {directory}")
    stack = [reader(p) for p in paths]
    shapes = {a.shape for a in stack}
    if len(shapes) > 1:
        raise DimensionError(f"{what} in {directory} have mixed shapes: {sorted(shapes)}")
    return np.stack(stack), paths


def load_scene(path: Path | str) -> ViewSet:
    """Load a scene directory (or a flat directory of view images)."""
    root = Path(path)
    if not root.is_dir():
        raise DecodeError(f"{root} is not a directory")
    scene = SceneDirectory(root)
    views_dir = scene.views_dir if scene.views_dir.is_dir() else root
    try:
        views, _ = _load_image_stack(views_dir, read_image, "views")
    except FileNotFoundError as exc:
        raise DecodeError(f"no views found in {views_dir}") from exc
    t, h, w, _ = views.shape

    fg_masks = None
    if scene.masks_dir.is_dir() and any(scene.masks_dir.iterdir()):
        fg_masks, _ = _load_image_stack(scene.masks_dir, read_mask, "masks")
        if fg_masks.shape != (t, h, w):
            raise DimensionError(
                f"masks shape {fg_masks.shape} does not match views {(t, h, w)}"
            )
    inpainted = None
    if scene.inpainted_dir.is_dir() and any(scene.inpainted_dir.iterdir()):
        inpainted, _ = _load_image_stack(scene.inpainted_dir, read_image, "inpainted views")
        if inpainted.shape != (t, h, w, 3):
            raise DimensionError(
                f"inpainted shape {inpainted.shape} does not match views"
            )
    flows: list[FlowField] = []
    if scene.flows_dir.is_dir():
        for p in sorted(scene.flows_dir.glob("*.flo3")):
            fl = read_flow(p)
            if fl.conf.shape != (h, w):
                raise DimensionError(f"flow {p.name} shape does not match views")
            flows.append(fl)
    return ViewSet(views=views, fg_masks=fg_masks, inpainted=inpainted, flows=flows)


# ---------------------------------------------------------------------------
# synthetic scene fixture


@dataclass
class SynthSpec:
    """Parameters for the procedurally generated drifting-sprite scene."""

    num_views: int = 16
    height: int = 96
    width: int = 96
    sprite_radius: float = 13.0
    sprite_start: tuple[float, float] = (30.0, 44.0)  # (cx, cy) in pixels
    sprite_step: tuple[float, float] = (1.0, 0.0)  # per-view drift in pixels
    texture_seed: int = 7


def _background_texture(h: int, w: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    xn, yn = xx / max(w - 1, 1), yy / max(h - 1, 1)
    img = np.zeros((h, w, 3), dtype=np.float32)
    for c in range(3):
        acc = np.full((h, w), 0.5, dtype=np.float32)
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 4.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.06, 0.16)
            acc += amp * np.sin(2 * np.pi * (fx * xn + fy * yn) + ph).astype(np.float32)
        img[..., c] = acc
    return np.clip(img, 0.02, 0.98)


def _sprite_texture(dx: np.ndarray, dy: np.ndarray, radius: float) -> np.ndarray:
    """Sprite color as a function of sprite-local offsets, translation invariant."""
    r = np.sqrt(dx * dx + dy * dy) / max(radius, 1e-6)
    ang = np.arctan2(dy, dx)
    red = 0.75 + 0.2 * np.cos(3 * ang)
    green = 0.25 + 0.3 * (1 - r)
    blue = 0.2 + 0.25 * np.sin(5 * r * np.pi)
    return np.clip(np.stack([red, green, blue], axis=-1), 0.02, 0.98).astype(np.float32)


def synth_scene(spec: SynthSpec | None = None) -> ViewSet:
    """Generate the drifting-sprite fixture with exact masks, inpainted views, and flows."""
    spec = spec or SynthSpec()
    t_count, h, w = spec.num_views, spec.height, spec.width
    r = spec.sprite_radius
    if 2 * r > min(h, w):
        raise ConfigurationError(
            f"sprite radius {r} does not fit a {h}x{w} frame"
        )
    centers = [
        (spec.sprite_start[0] + t * spec.sprite_step[0],
         spec.sprite_start[1] + t * spec.sprite_step[1])
        for t in range(t_count)
    ]
    for t, (cx, cy) in enumerate(centers):
        if not (r <= cx <= w - 1 - r and r <= cy <= h - 1 - r):
            raise ConfigurationError(f"sprite exits frame at view {t}")

    bg = _background_texture(h, w, spec.texture_seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    views = np.empty((t_count, h, w, 3), dtype=np.float32)
    masks = np.empty((t_count, h, w), dtype=np.float32)
    for t, (cx, cy) in enumerate(centers):
        dx, dy = xx - cx, yy - cy
        m = (dx * dx + dy * dy) <= r * r
        masks[t] = m.astype(np.float32)
        sprite = _sprite_texture(dx, dy, r)
        views[t] = np.where(m[..., None], sprite, bg)
    inpainted = np.repeat(bg[None], t_count, axis=0)

    def flow_between(src: int, dst: int) -> FlowField:
        delta = (centers[dst][0] - centers[src][0], centers[dst][1] - centers[src][1])
        vec = np.zeros((h, w, 2), dtype=np.float32)
        vec[masks[src] > 0] = delta
        # background pixels that the sprite covers in the target view have
        # no valid correspondence
        conf = np.where(
            masks[src] > 0, 1.0, np.where(masks[dst] > 0, 0.0, 1.0)
        ).astype(np.float32)
        return FlowField(src=src, dst=dst, vec=vec, conf=conf)

    # adjacent pairs in both directions, plus anchors onto view 0 so that
    # cross-view consistency does not have to propagate through a chain
    pairs = [(t + d, t + 1 - d) for t in range(t_count - 1) for d in (0, 1)]
    pairs += [(t, 0) for t in range(2, t_count)]
    flows = [flow_between(src, dst) for src, dst in pairs]
    return ViewSet(views=views, fg_masks=masks, inpainted=inpainted, flows=flows)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(mapping, atlas, path: Path | str) -> None:
    """Serialize both fields to a versioned, little-endian binary file."""
    path = Path(path)
    tensors = []
    blobs = []
    for prefix, module in (("mapping", mapping), ("atlas", atlas)):
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            if not np.isfinite(arr).all():
                raise NumericError(f"{prefix}.{name} contains non-finite values")
            raw = np.ascontiguousarray(arr).astype("<f4").tobytes()
            tensors.append(
                {"name": f"{prefix}.{name}", "shape": list(arr.shape), "dtype": "float32"}
            )
            blobs.append(raw)
    payload = b"".join(blobs)
    header = {
        "mapping": mapping.config_dict(),
        "atlas": atlas.config_dict(),
        "tensors": tensors,
        "payload_crc32": binascii.crc32(payload) & 0xFFFFFFFF,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path: Path | str, dtype=None):
    """Restore (mapping, atlas) saved by :func:`save_checkpoint`."""
    import torch

    from .fields import AtlasField, MappingField

    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path.name}: bad checkpoint magic")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path.name}: file is version {version}, reader supports version "
            f"{CHECKPOINT_VERSION}"
        )
    header_end = 12 + header_len
    if len(data) < header_end:
        raise CheckpointIntegrityError(f"{path.name}: truncated header")
    header = json.loads(data[12:header_end].decode("utf-8"))
    payload = data[header_end:]
    expected = sum(
        4 * int(np.prod(t["shape"])) if t["shape"] else 4 for t in header["tensors"]
    )
    if len(payload) != expected:
        raise CheckpointIntegrityError(
            f"{path.name}: payload is {len(payload)} bytes, expected {expected}"
        )
    if (binascii.crc32(payload) & 0xFFFFFFFF) != header["payload_crc32"]:
        raise CheckpointIntegrityError(f"{path.name}: payload checksum mismatch")

    dtype = dtype or torch.float32
    mapping = MappingField.from_config(header["mapping"], dtype=dtype)
    atlas = AtlasField.from_config(header["atlas"], dtype=dtype)
    states: dict[str, dict] = {"mapping": {}, "atlas": {}}
    offset = 0
    for meta in header["tensors"]:
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(
            meta["shape"]
        )
        offset += 4 * count
        prefix, name = meta["name"].split(".", 1)
        states[prefix][name] = torch.from_numpy(arr.copy()).to(dtype)
    mapping.load_state_dict(states["mapping"])
    atlas.load_state_dict(states["atlas"])
    return mapping, atlas
