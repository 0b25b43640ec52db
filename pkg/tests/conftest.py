"""Shared fixtures: a small synthetic scene and a quickly trained copy.

The quick fixture trades fidelity for speed; tests that need a well-converged
decomposition (quality thresholds) live in the acceptance module, which
trains the full-size fixture with the scaled schedule.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from sceneatlas import SynthSpec, TrainConfig, fit, save_checkpoint, synth_scene
from sceneatlas.scene_io import SceneDirectory
from sceneatlas.training import write_history_csv

QUICK_SPEC = SynthSpec(
    num_views=8,
    height=48,
    width=48,
    sprite_radius=8.0,
    sprite_start=(16.0, 22.0),
    sprite_step=(1.0, 0.0),
)
QUICK_TRAIN = TrainConfig(
    total_steps=1200,
    batch_size=1024,
    pos_phase_steps=150,
    alpha_phase_steps=1200,
    seed=11,
)
QUICK_ATLAS_RES = 96


@pytest.fixture(scope="session")
def quick_viewset():
    return synth_scene(QUICK_SPEC)


@pytest.fixture(scope="session")
def quick_fit(quick_viewset):
    torch.set_num_threads(max(torch.get_num_threads(), 2))
    return fit(quick_viewset, QUICK_TRAIN)


@pytest.fixture(scope="session")
def quick_scene_dir(tmp_path_factory, quick_viewset, quick_fit) -> Path:
    """A fully populated on-disk scene with a trained checkpoint."""
    root = tmp_path_factory.mktemp("scene") / "quick"
    scene = SceneDirectory.create(root, quick_viewset, source="synthetic")
    save_checkpoint(quick_fit.mapping, quick_fit.atlas, scene.checkpoint_path)
    write_history_csv(quick_fit.history, scene.ckpt_dir / "loss_history.csv")
    return root


@pytest.fixture()
def fresh_scene_dir(tmp_path, quick_scene_dir) -> Path:
    """Per-test mutable copy of the trained quick scene."""
    import shutil

    dst = tmp_path / "scene"
    shutil.copytree(quick_scene_dir, dst)
    return dst


def hash_tree(root: Path, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    """Content hashes for every file under root, for no-mutation checks."""
    import hashlib

    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_dir():
            continue
        rel = p.relative_to(root)
        if any(part in exclude for part in rel.parts):
            continue
        out[str(rel)] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
