"""Multiresolution hash-grid feature encoding for 2D coordinates.

Each level overlays the unit square with an N_l x N_l cell grid. Cell-corner
features live either in a dense table (when the corner grid fits) or in a
fixed-size hashed table, and are bilinearly interpolated. Gradients with
respect to both the table entries and the query coordinates are analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DomainError

HASH_PRIME_X = 1
HASH_PRIME_Y = 2654435761


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 16
    per_level_scale: float = 1.5
    table_size: int = 2**15
    feature_dim: int = 2

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must be > 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")

    def level_resolution(self, level: int) -> int:
        """Cells per side at ``level``: floor(base * scale**level)."""
        if not 0 <= level < self.levels:
            raise IndexError(f"level {level} out of range [0, {self.levels})")
        return math.floor(self.base_resolution * self.per_level_scale**level)

    def level_is_dense(self, level: int) -> bool:
        n = self.level_resolution(level)
        return (n + 1) * (n + 1) <= self.table_size

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim


def cell_index(ix: int, iy: int, level: int, config: HashGridConfig) -> int:
    """Table index of integer corner (ix, iy) at ``level``.

    Dense row-major indexing when the corner grid fits into the table,
    otherwise the spatial hash (ix * p1 XOR iy * p2) mod table_size.
    """
    n = config.level_resolution(level)
    if config.level_is_dense(level):
        return ix + iy * (n + 1)
    return ((ix * HASH_PRIME_X) ^ (iy * HASH_PRIME_Y)) % config.table_size


class HashGrid(nn.Module):
    """Learnable multiresolution feature tables over [0, 1]^2."""

    def __init__(self, config: HashGridConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config or HashGridConfig()
        cfg = self.config
        tables = torch.empty(cfg.levels, cfg.table_size, cfg.feature_dim, dtype=dtype)
        tables.uniform_(-1e-4, 1e-4)
        self.tables = nn.Parameter(tables)

        res = [cfg.level_resolution(l) for l in range(cfg.levels)]
        self.register_buffer(
            "_res", torch.tensor(res, dtype=dtype).unsqueeze(1), persistent=False
        )
        self.register_buffer(
            "_res_m1", torch.tensor(res, dtype=torch.long).unsqueeze(1) - 1, persistent=False
        )
        self.register_buffer(
            "_stride", torch.tensor([n + 1 for n in res], dtype=torch.long).unsqueeze(1),
            persistent=False,
        )
        self.register_buffer(
            "_dense", torch.tensor([cfg.level_is_dense(l) for l in range(cfg.levels)]).unsqueeze(1),
            persistent=False,
        )
        self.register_buffer(
            "_offset",
            (torch.arange(cfg.levels, dtype=torch.long) * cfg.table_size).unsqueeze(1),
            persistent=False,
        )

    def _corner_data(self, uv: torch.Tensor):
        """Corner table indices and bilinear weights for a (N, 2) query batch.

        Returns flat indices into tables.view(-1, F) per corner, shape (4, L, N),
        and fractional offsets wx, wy of shape (L, N).
        """
        u, v = uv[:, 0], uv[:, 1]
        x = self._res * u.unsqueeze(0)
        y = self._res * v.unsqueeze(0)
        ix = torch.minimum(x.long(), self._res_m1)  # u == 1.0 clamps to last cell
        iy = torch.minimum(y.long(), self._res_m1)
        wx = x - ix.to(x.dtype)
        wy = y - iy.to(y.dtype)

        # all four corners in one fused index computation: (4, L, N)
        ax = torch.stack([ix, ix + 1, ix, ix + 1])
        ay = torch.stack([iy, iy, iy + 1, iy + 1])
        dense = ax + ay * self._stride
        hashed = ((ax * HASH_PRIME_X) ^ (ay * HASH_PRIME_Y)) & (self.config.table_size - 1)
        idx = torch.where(self._dense, dense, hashed) + self._offset
        return idx, wx, wy

    def encode(self, uv: torch.Tensor) -> torch.Tensor:
        """Encode (N, 2) coordinates in [0, 1]^2 to (N, levels * feature_dim)."""
        if uv.ndim != 2 or uv.shape[1] != 2:
            raise DomainError(f"expected (N, 2) coordinates, got {tuple(uv.shape)}")
        if uv.numel() and not bool(((uv >= 0.0) & (uv <= 1.0)).all()):
            raise DomainError("coordinates must lie in [0, 1]^2 and be finite")
        return _HashEncode.apply(self.tables, uv, self)

    forward = encode

    def encode_backward(self, uv: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
        """Analytic per-entry table gradients for ``upstream`` feature gradients.

        ``upstream`` is (N, levels * feature_dim); the result matches
        ``tables`` in shape. Colliding corners accumulate.
        """
        cfg = self.config
        with torch.no_grad():
            idx, wx, wy = self._corner_data(uv)
            weights = _corner_weights(wx, wy)
            g = (
                upstream.reshape(-1, cfg.levels, cfg.feature_dim)
                .permute(1, 0, 2)
                .to(self.tables.dtype)
            )
            grad = torch.zeros(
                cfg.levels * cfg.table_size, cfg.feature_dim, dtype=self.tables.dtype
            )
            for k in range(4):
                grad.index_add_(
                    0, idx[k].reshape(-1), (weights[k].unsqueeze(-1) * g).reshape(-1, cfg.feature_dim)
                )
        return grad.reshape_as(self.tables)


def _corner_weights(wx: torch.Tensor, wy: torch.Tensor) -> torch.Tensor:
    return torch.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy])


class _HashEncode(torch.autograd.Function):
    """Bilinear hash-table gather with hand-written backward."""

    @staticmethod
    def forward(ctx, tables: torch.Tensor, uv: torch.Tensor, grid: HashGrid):
        cfg = grid.config
        with torch.no_grad():
            idx, wx, wy = grid._corner_data(uv)
            flat = tables.reshape(-1, cfg.feature_dim)
            e = flat.gather(
                0, idx.reshape(-1, 1).expand(-1, cfg.feature_dim)
            ).reshape(4, cfg.levels, uv.shape[0], cfg.feature_dim)
            w = _corner_weights(wx, wy).unsqueeze(-1)
            out = e[0] * w[0] + e[1] * w[1] + e[2] * w[2] + e[3] * w[3]
        ctx.save_for_backward(idx, wx, wy, e)
        ctx.grid = grid
        return out.permute(1, 0, 2).reshape(uv.shape[0], cfg.output_dim)

    @staticmethod
    def backward(ctx, gout: torch.Tensor):
        idx, wx, wy, e = ctx.saved_tensors
        grid: HashGrid = ctx.grid
        cfg = grid.config
        n = gout.shape[0]
        g = gout.reshape(n, cfg.levels, cfg.feature_dim).permute(1, 0, 2).contiguous()

        grad_tables = None
        if ctx.needs_input_grad[0]:
            w = _corner_weights(wx, wy)
            grad_flat = torch.zeros(
                cfg.levels * cfg.table_size, cfg.feature_dim, dtype=g.dtype
            )
            gw = g.reshape(-1, cfg.feature_dim)
            for k in range(4):
                grad_flat.index_add_(
                    0, idx[k].reshape(-1), w[k].reshape(-1).unsqueeze(-1) * gw
                )
            grad_tables = grad_flat.reshape(cfg.levels, cfg.table_size, cfg.feature_dim)

        grad_uv = None
        if ctx.needs_input_grad[1]:
            # d(out)/du = N_l * [(1-wy)(e10-e00) + wy(e11-e01)], likewise for v
            res = grid._res.to(g.dtype)
            du = ((1 - wy).unsqueeze(-1) * (e[1] - e[0]) + wy.unsqueeze(-1) * (e[3] - e[2]))
            dv = ((1 - wx).unsqueeze(-1) * (e[2] - e[0]) + wx.unsqueeze(-1) * (e[3] - e[1]))
            gu = (du * g).sum(-1) * res
            gv = (dv * g).sum(-1) * res
            grad_uv = torch.stack([gu.sum(0), gv.sum(0)], dim=1)
        return grad_tables, grad_uv, None
