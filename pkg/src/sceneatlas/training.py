"""Loss stack, phase schedule, and the optimizer loop.

The total objective is

    total = [step < pos_phase] * pos
          + [step < alpha_phase] * (alpha_ce + lambda_sparse * alpha_sparse)
          + rec_ori + lambda_pro * rec_pro
          + lambda_rigid * rigid + lambda_flow * flow

where the positional and alpha terms are pre-training terms that switch off
at their phase boundaries, and terms whose assets are missing contribute
zero and are flagged in the report.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, DomainError, NumericError, TrainingError
from .fields import AtlasField, MappingField, MappingOutput, composite
from .scene_io import ViewSet

@dataclass
class TrainConfig:
    total_steps: int = 100_000
    batch_size: int = 10_000
    lr_mapping: float = 1e-3
    lr_atlas: float = 1e-2
    pos_phase_steps: int = 1_000
    alpha_phase_steps: int = 30_000
    lambda_pro: float = 1.0
    lambda_rigid: float = 1.0
    lambda_flow: float = 1.0
    lambda_sparse: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    rigid_delta_px: float = 1.0
    # per-step probe counts for the rigidity / flow regularizers; the terms
    # are estimated on the leading slice of the (uniformly sampled) batch
    rigid_samples: int = 128
    flow_samples: int = 384
    pos_loss_mode: str = "normalized"  # or "literal": raw-UV variant of the pos term

    def __post_init__(self) -> None:
        if min(self.total_steps, self.batch_size, self.pos_phase_steps,
               self.alpha_phase_steps) <= 0:
            raise ConfigurationError("steps and batch sizes must be positive")
        if self.lr_mapping <= 0 or self.lr_atlas <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not self.pos_phase_steps <= self.alpha_phase_steps:
            raise ConfigurationError("pos phase must not outlast the alpha phase")
        if self.pos_loss_mode not in ("normalized", "literal"):
            raise ConfigurationError(f"unknown pos_loss_mode {self.pos_loss_mode!r}")


def train_config_from_file(path: Path | str) -> TrainConfig:
    """Read a TrainConfig from a manifest-style key = value file."""
    from .scene_io import read_manifest

    entries = read_manifest(Path(path))
    kwargs = {}
    valid = {f.name: f.type for f in dc_fields(TrainConfig)}
    for key, value in entries.items():
        if key not in valid:
            raise ConfigurationError(f"unknown train config key {key!r}")
        kwargs[key] = value if key == "pos_loss_mode" else (
            int(value) if valid[key] == "int" else float(value)
        )
    return TrainConfig(**kwargs)


@dataclass
class LossReport:
    step: int
    pos: float = 0.0
    alpha_ce: float = 0.0
    alpha_sparse: float = 0.0
    rec_ori: float = 0.0
    rec_pro: float = 0.0
    rigid: float = 0.0
    flow: float = 0.0
    total: float = 0.0
    pos_active: bool = False
    alpha_active: bool = False
    pro_active: bool = False
    flow_active: bool = False

    CSV_FIELDS = (
        "step", "pos", "alpha_ce", "alpha_sparse", "rec_ori", "rec_pro",
        "rigid", "flow", "total",
    )

    def term_values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.CSV_FIELDS[1:]}


def write_history_csv(history: list[LossReport], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LossReport.CSV_FIELDS)
        for rep in history:
            writer.writerow([rep.step] + [f"{getattr(rep, k):.8g}" for k in rep.CSV_FIELDS[1:]])


# ---------------------------------------------------------------------------
# batches and tensorized scene data


@dataclass
class PixelBatch:
    """Sampled pixels: integer indices plus normalized (x, y, t) coordinates."""

    t_idx: torch.Tensor  # (N,) long
    rows: torch.Tensor  # (N,) long
    cols: torch.Tensor  # (N,) long
    xyt: torch.Tensor  # (N, 3) float

    def __len__(self) -> int:
        return self.t_idx.shape[0]

    def head(self, n: int) -> "PixelBatch":
        n = min(n, len(self))
        return PixelBatch(self.t_idx[:n], self.rows[:n], self.cols[:n], self.xyt[:n])

    @staticmethod
    def from_indices(t_idx, rows, cols, shape: tuple[int, int, int],
                     dtype: torch.dtype = torch.float32) -> "PixelBatch":
        t_count, h, w = shape
        t_idx = torch.as_tensor(t_idx, dtype=torch.long)
        rows = torch.as_tensor(rows, dtype=torch.long)
        cols = torch.as_tensor(cols, dtype=torch.long)
        xyt = torch.stack(
            [
                cols.to(dtype) / max(w - 1, 1),
                rows.to(dtype) / max(h - 1, 1),
                t_idx.to(dtype) / max(t_count - 1, 1),
            ],
            dim=1,
        )
        return PixelBatch(t_idx, rows, cols, xyt)


class SceneTensors:
    """ViewSet assets flattened into torch tensors for batched lookups."""

    def __init__(self, viewset: ViewSet, dtype: torch.dtype = torch.float32):
        t, h, w = viewset.num_views, viewset.height, viewset.width
        self.shape = (t, h, w)
        self.dtype = dtype
        self.views = torch.from_numpy(viewset.views.reshape(t * h * w, 3)).to(dtype)
        self.masks = (
            torch.from_numpy(viewset.fg_masks.reshape(t * h * w)).to(dtype)
            if viewset.fg_masks is not None else None
        )
        self.inpainted = (
            torch.from_numpy(viewset.inpainted.reshape(t * h * w, 3)).to(dtype)
            if viewset.inpainted is not None else None
        )
        # flow records grouped per source view, concatenated for vector lookup
        self.flow_counts = torch.zeros(t, dtype=torch.long)
        self.flow_offsets = torch.zeros(t, dtype=torch.long)
        recs = sorted(viewset.flows, key=lambda fl: (fl.src, fl.dst))
        if recs:
            for fl in recs:
                self.flow_counts[fl.src] += 1
            self.flow_offsets[1:] = torch.cumsum(self.flow_counts, 0)[:-1]
            order = []
            seen = [0] * t
            slots = [0] * len(recs)
            for i, fl in enumerate(recs):
                slots[i] = int(self.flow_offsets[fl.src]) + seen[fl.src]
                seen[fl.src] += 1
            order = np.argsort(slots)
            self.flow_dst = torch.tensor([recs[i].dst for i in order], dtype=torch.long)
            self.flow_vec = torch.from_numpy(
                np.stack([recs[i].vec.reshape(h * w, 2) for i in order])
            ).to(dtype)
            self.flow_conf = torch.from_numpy(
                np.stack([recs[i].conf.reshape(h * w) for i in order])
            ).to(dtype)
        else:
            self.flow_dst = torch.zeros(0, dtype=torch.long)
            self.flow_vec = torch.zeros(0, h * w, 2, dtype=dtype)
            self.flow_conf = torch.zeros(0, h * w, dtype=dtype)

    @property
    def has_flows(self) -> bool:
        return self.flow_dst.shape[0] > 0

    def flat_index(self, batch: PixelBatch) -> torch.Tensor:
        _, h, w = self.shape
        return (batch.t_idx * h + batch.rows) * w + batch.cols

    def sample(self, n: int, gen: torch.Generator, view: int | None = None) -> PixelBatch:
        t, h, w = self.shape
        t_idx = (
            torch.full((n,), view, dtype=torch.long)
            if view is not None
            else torch.randint(t, (n,), generator=gen)
        )
        rows = torch.randint(h, (n,), generator=gen)
        cols = torch.randint(w, (n,), generator=gen)
        return PixelBatch.from_indices(t_idx, rows, cols, self.shape, self.dtype)


# ---------------------------------------------------------------------------
# individual loss terms


def _pos_value(xyt: torch.Tensor, out: MappingOutput, mode: str) -> torch.Tensor:
    x, y = xyt[:, 0], xyt[:, 1]
    if mode == "literal":
        u1, v1, u2, v2 = out.u1, out.v1, out.u2, out.v2
    else:
        u1, v1 = 2.0 * out.u1, 2.0 * out.v1
        u2, v2 = 2.0 * (out.u2 - 0.5), 2.0 * (out.v2 - 0.5)
    return (
        (x - u1).abs() + (x - u2).abs() + (y - v1).abs() + (y - v2).abs()
    ).mean()


def loss_pos(batch: PixelBatch, mapping, mode: str = "normalized") -> torch.Tensor:
    """Positional pre-training loss; batch must come from view 0 only."""
    if bool((batch.xyt[:, 2] != 0).any()):
        raise DomainError("positional loss batch must be drawn from view 0")
    return _pos_value(batch.xyt, mapping(batch.xyt), mode)


def _alpha_parts(alpha: torch.Tensor, mask_vals: torch.Tensor, c_f: torch.Tensor):
    bce = torch.nn.functional.binary_cross_entropy(alpha, mask_vals)
    sparse = ((1.0 - alpha).unsqueeze(-1) * c_f).abs().mean()
    return bce, sparse


def loss_alpha(
    batch: PixelBatch, mapping, atlas, scene: SceneTensors, lambda_sparse: float = 0.1
) -> torch.Tensor:
    """Alpha pre-training loss: mask cross-entropy plus foreground sparsity."""
    if scene.masks is None:
        raise ConfigurationError("alpha loss requires foreground masks")
    out = mapping(batch.xyt)
    c_f = atlas(out.uv_fg)
    m = scene.masks[scene.flat_index(batch)]
    bce, sparse = _alpha_parts(out.alpha, m, c_f)
    return bce + lambda_sparse * sparse


def _rec_parts(c_p, gt, c_b, gt_pro, mask_vals):
    rec_ori = ((c_p - gt) ** 2).mean()
    if gt_pro is None or mask_vals is None:
        return rec_ori, None
    m = mask_vals.unsqueeze(-1)
    denom = m.sum() * c_b.shape[-1]
    if float(denom) == 0.0:
        return rec_ori, c_b.sum() * 0.0
    rec_pro = (m * (c_b - gt_pro) ** 2).sum() / denom
    return rec_ori, rec_pro


def loss_rec(batch: PixelBatch, mapping, atlas, scene: SceneTensors):
    """Reconstruction losses: (composite vs view, background vs inpainted)."""
    out = mapping(batch.xyt)
    c_f, c_b = atlas(out.uv_fg), atlas(out.uv_bg)
    c_p = composite(c_f, c_b, out.alpha)
    flat = scene.flat_index(batch)
    gt = scene.views[flat]
    gt_pro = scene.inpainted[flat] if scene.inpainted is not None else None
    mask_vals = scene.masks[flat] if scene.masks is not None else None
    rec_ori, rec_pro = _rec_parts(c_p, gt, c_b, gt_pro, mask_vals)
    return rec_ori, (rec_pro if rec_pro is not None else torch.zeros(()))


def _rigid_value(
    base: MappingOutput, off_x: MappingOutput, off_y: MappingOutput, sigma: float
) -> torch.Tensor:
    total = None
    for attr in ("uv_fg_norm", "uv_bg_norm"):
        d_x = getattr(off_x, attr) - getattr(base, attr)
        d_y = getattr(off_y, attr) - getattr(base, attr)
        term = (
            (d_x.norm(dim=1) - sigma).abs()
            + (d_y.norm(dim=1) - sigma).abs()
            + (d_x * d_y).sum(dim=1).abs() / sigma**2
        )
        total = term if total is None else total + term
    return total.mean()


def _rigid_points(xyt: torch.Tensor, delta_px: float, width: int, height: int):
    """Base and offset probe coordinates; bases near the far edge are pulled
    inside so the offsets stay in the image."""
    dx = delta_px / max(width - 1, 1)
    dy = delta_px / max(height - 1, 1)
    x0 = xyt[:, 0].clamp(max=1.0 - dx)
    y0 = xyt[:, 1].clamp(max=1.0 - dy)
    t = xyt[:, 2]
    base = torch.stack([x0, y0, t], 1)
    off_x = torch.stack([x0 + dx, y0, t], 1)
    off_y = torch.stack([x0, y0 + dy, t], 1)
    return base, off_x, off_y


def rigid_sigma(delta_px: float, width: int, height: int) -> float:
    return delta_px / max(max(width, height) - 1, 1)


def loss_rigid(
    batch: PixelBatch, mapping, delta_px: float, width: int, height: int
) -> torch.Tensor:
    """Local scale-preserving orthogonality penalty on the mapping."""
    if delta_px < 1.0:
        raise ConfigurationError("rigidity step must be at least one pixel")
    base, off_x, off_y = _rigid_points(batch.xyt, delta_px, width, height)
    n = len(batch)
    out = mapping(torch.cat([base, off_x, off_y]))
    parts = MappingOutput(*(t.reshape(3, n) for t in out))
    base_o = MappingOutput(*(t[0] for t in parts))
    ox = MappingOutput(*(t[1] for t in parts))
    oy = MappingOutput(*(t[2] for t in parts))
    return _rigid_value(base_o, ox, oy, rigid_sigma(delta_px, width, height))


def _flow_targets(batch: PixelBatch, scene: SceneTensors):
    """Correspondence targets for each batch sample that has a flow record.

    Records for a view are cycled by sample position; samples whose view has
    no record or whose target leaves the image are dropped.
    """
    t_count, h, w = scene.shape
    counts = scene.flow_counts[batch.t_idx]
    has = counts > 0
    ridx = torch.arange(len(batch)) % counts.clamp(min=1)
    rec = scene.flow_offsets[batch.t_idx] + ridx
    rec = rec.clamp(max=max(scene.flow_dst.shape[0] - 1, 0))
    pix = batch.rows * w + batch.cols
    vec = scene.flow_vec[rec, pix]
    conf = scene.flow_conf[rec, pix]
    dst = scene.flow_dst[rec]
    x2 = batch.xyt[:, 0] + vec[:, 0] / max(w - 1, 1)
    y2 = batch.xyt[:, 1] + vec[:, 1] / max(h - 1, 1)
    t2 = dst.to(batch.xyt.dtype) / max(t_count - 1, 1)
    keep = has & (x2 >= 0) & (x2 <= 1) & (y2 >= 0) & (y2 <= 1)
    target = torch.stack([x2, y2, t2], 1)
    return keep, target, conf


def _flow_value(src: MappingOutput, dst: MappingOutput, conf: torch.Tensor) -> torch.Tensor:
    if conf.shape[0] == 0:
        return torch.zeros(())
    l1 = sum((getattr(src, f) - getattr(dst, f)).abs() for f in src._fields)
    return (conf * l1).mean()


def loss_flow(batch: PixelBatch, mapping, scene: SceneTensors) -> torch.Tensor:
    """Confidence-weighted mapping consistency across corresponding points."""
    if not scene.has_flows:
        raise ConfigurationError("flow loss requires flow fields")
    keep, target, conf = _flow_targets(batch, scene)
    src_out = mapping(batch.xyt[keep])
    dst_out = mapping(target[keep])
    return _flow_value(src_out, dst_out, conf[keep])


# ---------------------------------------------------------------------------
# scheduled total


def total_loss(
    step: int,
    batch: PixelBatch,
    mapping: MappingField,
    atlas: AtlasField,
    scene: SceneTensors,
    config: TrainConfig,
    pos_batch: PixelBatch | None = None,
):
    """Scheduled weighted sum of all active terms for one batch.

    All mapping evaluations (main batch, rigidity probes, flow targets, and
    the positional view-0 batch) run as a single fused forward pass. Returns
    the autograd-capable total and a float report.
    """
    t_count, h, w = scene.shape
    n = len(batch)
    pos_on = step < config.pos_phase_steps
    alpha_on = step < config.alpha_phase_steps and scene.masks is not None
    pro_on = scene.inpainted is not None and scene.masks is not None
    flow_on = scene.has_flows

    if pos_on:
        if pos_batch is None:
            raise ConfigurationError("positional phase requires a view-0 batch")
        if bool((pos_batch.xyt[:, 2] != 0).any()):
            raise DomainError("positional loss batch must be drawn from view 0")

    segments = [batch.xyt]
    rigid_batch = batch.head(config.rigid_samples)
    rb, rx, ry = _rigid_points(rigid_batch.xyt, config.rigid_delta_px, w, h)
    segments += [rb, rx, ry]
    if flow_on:
        flow_batch = batch.head(config.flow_samples)
        keep, target, conf = _flow_targets(flow_batch, scene)
        segments.append(target[keep])
    if pos_on:
        segments.append(pos_batch.xyt)

    out_all = mapping(torch.cat(segments))
    sizes = [seg.shape[0] for seg in segments]
    slices = []
    at = 0
    for s in sizes:
        slices.append(slice(at, at + s))
        at += s
    pick = lambda sl: MappingOutput(*(t[sl] for t in out_all))

    main = pick(slices[0])
    rigid_val = _rigid_value(
        pick(slices[1]), pick(slices[2]), pick(slices[3]),
        rigid_sigma(config.rigid_delta_px, w, h),
    )
    cursor = 4
    flow_val = torch.zeros(())
    if flow_on:
        dst_out = pick(slices[cursor])
        src_out = MappingOutput(*(t[slices[0]][: len(flow_batch)][keep] for t in out_all))
        flow_val = _flow_value(src_out, dst_out, conf[keep])
        cursor += 1
    pos_val = torch.zeros(())
    if pos_on:
        pos_val = _pos_value(pos_batch.xyt, pick(slices[cursor]), config.pos_loss_mode)

    c_both = atlas(torch.cat([main.uv_fg, main.uv_bg]))
    c_f, c_b = c_both[:n], c_both[n:]
    c_p = composite(c_f, c_b, main.alpha)
    flat = scene.flat_index(batch)
    gt = scene.views[flat]
    gt_pro = scene.inpainted[flat] if pro_on else None
    mask_vals = scene.masks[flat] if scene.masks is not None else None
    rec_ori, rec_pro = _rec_parts(c_p, gt, c_b, gt_pro, mask_vals if pro_on else None)
    if rec_pro is None:
        rec_pro = torch.zeros(())

    alpha_ce = torch.zeros(())
    alpha_sp = torch.zeros(())
    if alpha_on:
        alpha_ce, alpha_sp = _alpha_parts(main.alpha, mask_vals, c_f)

    total = rec_ori + config.lambda_pro * rec_pro + config.lambda_rigid * rigid_val \
        + config.lambda_flow * flow_val
    if alpha_on:
        total = total + alpha_ce + config.lambda_sparse * alpha_sp
    if pos_on:
        total = total + pos_val

    report = LossReport(
        step=step,
        pos=pos_val.item(),
        alpha_ce=alpha_ce.item(),
        alpha_sparse=alpha_sp.item(),
        rec_ori=rec_ori.item(),
        rec_pro=rec_pro.item(),
        rigid=rigid_val.item(),
        flow=flow_val.item(),
        total=total.item(),
        pos_active=pos_on,
        alpha_active=alpha_on,
        pro_active=pro_on,
        flow_active=flow_on,
    )
    return total, report


# ---------------------------------------------------------------------------
# optimizer loop


@dataclass
class FitResult:
    mapping: MappingField
    atlas: AtlasField
    history: list[LossReport] = field(default_factory=list)

    @property
    def final_report(self) -> LossReport:
        return self.history[-1]


def build_optimizer(mapping: MappingField, atlas: AtlasField, config: TrainConfig):
    """AdamW with decoupled decay on dense-layer weights only."""
    map_w = [l.weight for l in mapping.net.layers]
    map_b = [l.bias for l in mapping.net.layers]
    atlas_w = [l.weight for l in atlas.net.layers]
    atlas_nodecay = [l.bias for l in atlas.net.layers] + [atlas.grid.tables]
    groups = [
        {"params": map_w, "lr": config.lr_mapping, "weight_decay": config.weight_decay},
        {"params": map_b, "lr": config.lr_mapping, "weight_decay": 0.0},
        {"params": atlas_w, "lr": config.lr_atlas, "weight_decay": config.weight_decay},
        {"params": atlas_nodecay, "lr": config.lr_atlas, "weight_decay": 0.0},
    ]
    kwargs = {"betas": (0.9, 0.999), "eps": 1e-8}
    try:
        return torch.optim.AdamW(groups, fused=True, **kwargs)
    except (RuntimeError, ValueError):
        return torch.optim.AdamW(groups, foreach=True, **kwargs)


def fit(
    viewset: ViewSet,
    config: TrainConfig | None = None,
    mapping: MappingField | None = None,
    atlas: AtlasField | None = None,
    callback=None,
) -> FitResult:
    """Fit both fields to the view stack; deterministic under a fixed seed."""
    config = config or TrainConfig()
    scene = SceneTensors(viewset)
    mapping = mapping or MappingField(seed=config.seed)
    atlas = atlas or AtlasField(seed=config.seed + 1)
    opt = build_optimizer(mapping, atlas, config)
    gen = torch.Generator().manual_seed(config.seed)
    history: list[LossReport] = []

    for step in range(config.total_steps):
        batch = scene.sample(config.batch_size, gen)
        pos_batch = (
            scene.sample(config.batch_size, gen, view=0)
            if step < config.pos_phase_steps else None
        )
        try:
            total, report = total_loss(step, batch, mapping, atlas, scene, config, pos_batch)
        except (DomainError, NumericError) as exc:
            raise TrainingError(
                f"non-finite field outputs while evaluating losses at step {step}: {exc}"
            ) from exc
        for name, value in report.term_values().items():
            if not np.isfinite(value):
                raise TrainingError(f"loss term {name!r} became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append(report)
        if callback is not None:
            callback(step, report)
    return FitResult(mapping=mapping, atlas=atlas, history=history)
