"""The two learned fields and the compositing/rendering pipeline.

The mapping field sends a normalized pixel coordinate (x, y, t) to a pair of
atlas UV coordinates plus a foreground weight. Interval membership of the
outputs is built into the heads (scaled logistics), never clipped. The atlas
field turns a full-plane UV coordinate into RGB through a hash-grid encoding
and a small color network shared by both atlas squares: the foreground square
is [0, 0.5]^2 and the background square [0.5, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, DomainError, NumericError
from .hash_grid import HashGrid, HashGridConfig


@dataclass(frozen=True)
class PixelCoord:
    """Normalized image coordinates: x, y and view time t, all in [0, 1]."""

    x: float
    y: float
    t: float

    def __post_init__(self) -> None:
        for name, val in (("x", self.x), ("y", self.y), ("t", self.t)):
            if not 0.0 <= val <= 1.0:
                raise DomainError(f"{name}={val} outside [0, 1]")


class MappingOutput(NamedTuple):
    """Head outputs; foreground UV in [0, 0.5], background UV in [0.5, 1]."""

    u1: torch.Tensor
    v1: torch.Tensor
    u2: torch.Tensor
    v2: torch.Tensor
    alpha: torch.Tensor

    @property
    def uv_fg(self) -> torch.Tensor:
        return torch.stack([self.u1, self.v1], dim=-1)

    @property
    def uv_bg(self) -> torch.Tensor:
        return torch.stack([self.u2, self.v2], dim=-1)

    @property
    def uv_fg_norm(self) -> torch.Tensor:
        """Foreground UV rescaled to its own [0, 1]^2 frame."""
        return 2.0 * self.uv_fg

    @property
    def uv_bg_norm(self) -> torch.Tensor:
        return 2.0 * (self.uv_bg - 0.5)


def _init_linear(layer: nn.Linear, generator: torch.Generator, final: bool) -> None:
    fan_in = layer.weight.shape[1]
    with torch.no_grad():
        if final:
            layer.weight.uniform_(-1e-4, 1e-4, generator=generator)
        else:
            bound = math.sqrt(6.0 / fan_in)  # He-uniform for ReLU
            layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.zero_()


class _FusedReluMLP(torch.autograd.Function):
    """Linear/ReLU chain with a single backward node to keep step cost low."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, n_layers: int, *params: torch.Tensor):
        acts = [x]
        h = x
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            h = torch.addmm(b, h, w.t())
            if i < n_layers - 1:
                h = torch.relu_(h)
            acts.append(h)
        ctx.n_layers = n_layers
        ctx.save_for_backward(*acts[:-1], *params[0::2])
        return h

    @staticmethod
    def backward(ctx, gout: torch.Tensor):
        n = ctx.n_layers
        saved = ctx.saved_tensors
        acts, weights = saved[:n], saved[n:]
        grads: list[torch.Tensor | None] = [None] * (2 * n)
        dz = gout
        for i in range(n - 1, -1, -1):
            grads[2 * i] = dz.t().mm(acts[i])
            grads[2 * i + 1] = dz.sum(0)
            if i > 0:
                dh = dz.mm(weights[i])
                # single-pass ReLU backward: zero where the saved activation is
                dz = torch.ops.aten.threshold_backward(dh, acts[i], 0)
        dx = dz.mm(weights[0]) if ctx.needs_input_grad[0] else None
        return (dx, None, *grads)


class _ReluMLP(nn.Module):
    """Plain fully connected stack; fused autograd path when grads are on."""

    def __init__(self, dims: list[int], generator: torch.Generator, dtype: torch.dtype):
        super().__init__()
        layers = [nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)]
        self.layers = nn.ModuleList(layers)
        for i, layer in enumerate(layers):
            _init_linear(layer, generator, final=(i == len(layers) - 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if torch.is_grad_enabled():
            params = [p for layer in self.layers for p in (layer.weight, layer.bias)]
            return _FusedReluMLP.apply(x, len(self.layers), *params)
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = torch.addmm(layer.bias, h, layer.weight.t())
            if i < last:
                h = torch.relu_(h)
        return h


class MappingField(nn.Module):
    """Coordinate network (x, y, t) -> (u1, v1, u2, v2, alpha)."""

    def __init__(
        self,
        depth: int = 8,
        width: int = 256,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.depth, self.width = depth, width
        gen = torch.Generator().manual_seed(seed)
        dims = [3] + [width] * (depth - 1) + [5]
        self.net = _ReluMLP(dims, gen, dtype)

    def config_dict(self) -> dict:
        return {"depth": self.depth, "width": self.width}

    @classmethod
    def from_config(cls, cfg: dict, dtype: torch.dtype = torch.float32) -> "MappingField":
        return cls(depth=cfg["depth"], width=cfg["width"], dtype=dtype)

    def forward(self, pts: torch.Tensor) -> MappingOutput:
        """Map (N, 3) normalized coordinates; heads enforce the UV intervals."""
        raw = self.net(pts)
        s = torch.sigmoid(raw)
        return MappingOutput(
            u1=0.5 * s[:, 0],
            v1=0.5 * s[:, 1],
            u2=0.5 + 0.5 * s[:, 2],
            v2=0.5 + 0.5 * s[:, 3],
            alpha=s[:, 4],
        )


class AtlasField(nn.Module):
    """Hash-encoded color network over the full [0, 1]^2 atlas plane."""

    def __init__(
        self,
        grid_config: HashGridConfig | None = None,
        hidden: int = 64,
        hidden_layers: int = 2,
        seed: int = 1,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.hidden, self.hidden_layers = hidden, hidden_layers
        self.grid = HashGrid(grid_config, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        dims = [self.grid.config.output_dim] + [hidden] * hidden_layers + [3]
        self.net = _ReluMLP(dims, gen, dtype)
        with torch.no_grad():
            self.grid.tables.uniform_(-1e-4, 1e-4, generator=gen)

    def config_dict(self) -> dict:
        g = self.grid.config
        return {
            "hidden": self.hidden,
            "hidden_layers": self.hidden_layers,
            "grid": {
                "levels": g.levels,
                "base_resolution": g.base_resolution,
                "per_level_scale": g.per_level_scale,
                "table_size": g.table_size,
                "feature_dim": g.feature_dim,
            },
        }

    @classmethod
    def from_config(cls, cfg: dict, dtype: torch.dtype = torch.float32) -> "AtlasField":
        return cls(
            grid_config=HashGridConfig(**cfg["grid"]),
            hidden=cfg["hidden"],
            hidden_layers=cfg["hidden_layers"],
            dtype=dtype,
        )

    def forward(self, uv: torch.Tensor) -> torch.Tensor:
        """RGB in [0, 1] for (N, 2) full-plane UV coordinates."""
        feats = self.grid.encode(uv)
        return 0.5 * (torch.tanh(self.net(feats)) + 1.0)


def map_point(p: PixelCoord, mapping: MappingField) -> MappingOutput:
    """Single-point convenience wrapper around the batched forward."""
    for param in mapping.parameters():
        if not torch.isfinite(param).all():
            raise NumericError("mapping parameters are non-finite")
    pts = torch.tensor(
        [[p.x, p.y, p.t]], dtype=next(mapping.parameters()).dtype
    )
    with torch.no_grad():
        return mapping(pts)


def atlas_color(uv: torch.Tensor, atlas: AtlasField) -> torch.Tensor:
    """Evaluate the shared color network at full-plane UV coordinates."""
    return atlas(uv)


def composite(c_f: torch.Tensor, c_b: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Convex blend of foreground and background colors (per channel)."""
    a = alpha.unsqueeze(-1)
    return a * c_f + (1.0 - a) * c_b


def view_grid(
    t_index: int, height: int, width: int, num_views: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """All (x, y, t) coordinates of one view, row-major, shape (H*W, 3)."""
    xs = torch.arange(width, dtype=dtype) / max(width - 1, 1)
    ys = torch.arange(height, dtype=dtype) / max(height - 1, 1)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    tn = torch.full_like(gx, t_index / max(num_views - 1, 1))
    return torch.stack([gx.reshape(-1), gy.reshape(-1), tn.reshape(-1)], dim=1)


def render_view(
    mapping: MappingField,
    atlas: AtlasField,
    t_index: int,
    height: int,
    width: int,
    num_views: int,
    chunk: int = 65536,
) -> np.ndarray:
    """Render one view by chaining mapping, atlas colors, and compositing."""
    pts = view_grid(t_index, height, width, num_views, next(mapping.parameters()).dtype)
    out = torch.empty(height * width, 3, dtype=pts.dtype)
    with torch.no_grad():
        for start in range(0, pts.shape[0], chunk):
            sl = slice(start, start + chunk)
            m = mapping(pts[sl])
            c_f = atlas(m.uv_fg)
            c_b = atlas(m.uv_bg)
            out[sl] = composite(c_f, c_b, m.alpha)
    return out.reshape(height, width, 3).to(torch.float32).numpy()


def sample_texture(tex: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Bilinear texture sample; xy in [0, 1]^2 with x -> column, y -> row."""
    r = tex.shape[0]
    px = xy[:, 0].clamp(0.0, 1.0) * (r - 1)
    py = xy[:, 1].clamp(0.0, 1.0) * (r - 1)
    x0 = px.long().clamp(max=r - 2)
    y0 = py.long().clamp(max=r - 2)
    wx = (px - x0).unsqueeze(-1)
    wy = (py - y0).unsqueeze(-1)
    flat = tex.reshape(-1, tex.shape[-1])
    i00 = y0 * r + x0
    e00, e10 = flat[i00], flat[i00 + 1]
    e01, e11 = flat[i00 + r], flat[i00 + r + 1]
    top = e00 * (1 - wx) + e10 * wx
    bot = e01 * (1 - wx) + e11 * wx
    return top * (1 - wy) + bot * wy


def render_view_from_textures(
    mapping: MappingField,
    fg_tex: np.ndarray,
    bg_tex: np.ndarray,
    t_index: int,
    height: int,
    width: int,
    num_views: int,
    chunk: int = 65536,
) -> np.ndarray:
    """Render one view from rasterized atlas textures instead of the color field.

    The foreground texture's alpha channel (the rasterized learned alpha)
    drives the blend, so alpha edits change the renders.
    """
    if fg_tex.shape[:2] != bg_tex.shape[:2]:
        raise DimensionError(
            f"texture resolutions differ: {fg_tex.shape[:2]} vs {bg_tex.shape[:2]}"
        )
    if fg_tex.shape[-1] != 4 or bg_tex.shape[-1] != 3:
        raise DimensionError("foreground texture must be RGBA and background RGB")
    dtype = next(mapping.parameters()).dtype
    fg_t = torch.from_numpy(np.ascontiguousarray(fg_tex)).to(dtype)
    bg_t = torch.from_numpy(np.ascontiguousarray(bg_tex)).to(dtype)
    pts = view_grid(t_index, height, width, num_views, dtype)
    out = torch.empty(height * width, 3, dtype=dtype)
    with torch.no_grad():
        for start in range(0, pts.shape[0], chunk):
            sl = slice(start, start + chunk)
            m = mapping(pts[sl])
            fg = sample_texture(fg_t, m.uv_fg_norm)
            bg = sample_texture(bg_t, m.uv_bg_norm)
            out[sl] = composite(fg[:, :3], bg, fg[:, 3])
    return out.reshape(height, width, 3).to(torch.float32).numpy()
