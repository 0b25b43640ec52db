"""Scene loading, the synthetic fixture, flow files, and checkpoints."""

from pathlib import Path

import numpy as np
import pytest
import torch

from sceneatlas import (
    SynthSpec,
    ViewSet,
    load_checkpoint,
    load_scene,
    save_checkpoint,
    synth_scene,
)
from sceneatlas.errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    DecodeError,
    DimensionError,
    NumericError,
)
from sceneatlas.fields import AtlasField, MappingField
from sceneatlas.scene_io import (
    FlowField,
    SceneDirectory,
    read_flow,
    read_image,
    read_manifest,
    write_flow,
    write_image,
    write_manifest,
)


def _random_viewset(t=3, h=20, w=24, seed=0, with_assets=False):
    rng = np.random.default_rng(seed)
    views = rng.random((t, h, w, 3), dtype=np.float32)
    kwargs = {}
    if with_assets:
        kwargs["fg_masks"] = (rng.random((t, h, w)) > 0.5).astype(np.float32)
        kwargs["inpainted"] = rng.random((t, h, w, 3), dtype=np.float32)
        kwargs["flows"] = [
            FlowField(0, 1, rng.random((h, w, 2), dtype=np.float32),
                      rng.random((h, w), dtype=np.float32))
        ]
    return ViewSet(views=views, **kwargs)


class TestViewSet:
    def test_mismatched_mask_count_rejected(self):
        views = np.zeros((3, 8, 8, 3), dtype=np.float32)
        with pytest.raises(DimensionError):
            ViewSet(views=views, fg_masks=np.zeros((4, 8, 8), dtype=np.float32))

    def test_flow_target_must_differ(self):
        views = np.zeros((2, 8, 8, 3), dtype=np.float32)
        fl = FlowField(1, 1, np.zeros((8, 8, 2), np.float32), np.ones((8, 8), np.float32))
        with pytest.raises(DimensionError):
            ViewSet(views=views, flows=[fl])


class TestLoadScene:
    def test_flat_directory_of_pngs(self, tmp_path):
        rng = np.random.default_rng(1)
        for t in range(16):
            write_image(tmp_path / f"{t:04d}.png", rng.random((96, 96, 3)))
        vs = load_scene(tmp_path)
        assert (vs.num_views, vs.height, vs.width) == (16, 96, 96)
        assert vs.fg_masks is None and vs.inpainted is None and vs.flows == []

    def test_empty_directory_is_decode_error(self, tmp_path):
        with pytest.raises(DecodeError, match="no views found"):
            load_scene(tmp_path)

    def test_mask_count_mismatch_is_dimension_error(self, tmp_path):
        vs = _random_viewset(t=4)
        scene = SceneDirectory.create(tmp_path / "s", vs)
        write_image(scene.masks_dir / "9999.png", np.ones((20, 24)))
        with pytest.raises(DimensionError):
            load_scene(scene.root)

    def test_unreadable_image_names_file(self, tmp_path):
        (tmp_path / "0000.png").write_bytes(b"not a png")
        with pytest.raises(DecodeError, match="0000.png"):
            load_scene(tmp_path)

    def test_round_trip_quantization_bound(self, tmp_path):
        vs = _random_viewset(t=2, with_assets=True)
        scene = SceneDirectory.create(tmp_path / "s", vs)
        back = load_scene(scene.root)
        assert np.abs(back.views - vs.views).max() <= 1.0 / 255.0 + 1e-7
        assert np.array_equal(back.fg_masks, vs.fg_masks)
        assert np.abs(back.inpainted - vs.inpainted).max() <= 1.0 / 255.0 + 1e-7
        # flow files are bit-exact, not quantized
        assert np.array_equal(back.flows[0].vec, vs.flows[0].vec)
        assert np.array_equal(back.flows[0].conf, vs.flows[0].conf)


class TestManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "manifest.txt"
        write_manifest(path, {"height": 96, "name": "demo scene"})
        entries = read_manifest(path)
        assert entries == {"height": "96", "name": "demo scene"}

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("height 96\n")
        with pytest.raises(DecodeError):
            read_manifest(path)


class TestFlowFiles:
    def test_header_and_payload_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        fl = FlowField(3, 4, rng.standard_normal((10, 12, 2)).astype(np.float32),
                       rng.random((10, 12)).astype(np.float32))
        path = tmp_path / "0003_0004.flo3"
        write_flow(path, fl)
        back = read_flow(path)
        assert (back.src, back.dst) == (3, 4)
        assert np.array_equal(back.vec, fl.vec)
        assert np.array_equal(back.conf, fl.conf)

    def test_truncated_flow_rejected(self, tmp_path):
        fl = FlowField(0, 1, np.zeros((4, 4, 2), np.float32), np.ones((4, 4), np.float32))
        path = tmp_path / "f.flo3"
        write_flow(path, fl)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DecodeError):
            read_flow(path)


class TestSynthScene:
    def test_defaults_populate_all_assets(self):
        vs = synth_scene()
        assert (vs.num_views, vs.height, vs.width) == (16, 96, 96)
        assert vs.fg_masks is not None and vs.inpainted is not None
        assert len(vs.flows) == 30  # adjacent pairs, both directions
        for fl in vs.flows:
            delta = np.array([fl.dst - fl.src, 0.0]) * 1.0  # 1 px/view in x
            on_sprite = vs.fg_masks[fl.src] > 0
            assert np.allclose(fl.vec[on_sprite], delta)
            assert np.all(fl.vec[~on_sprite] == 0)

    def test_zero_motion_gives_zero_flows(self):
        vs = synth_scene(SynthSpec(sprite_step=(0.0, 0.0)))
        for fl in vs.flows:
            assert np.all(fl.vec == 0)
            assert np.all(fl.conf == 1.0)

    def test_composite_identity_invariant(self):
        vs = synth_scene()
        off_sprite = vs.fg_masks == 0
        assert np.array_equal(vs.views[off_sprite], vs.inpainted[off_sprite])
        recomposed = np.where(vs.fg_masks[..., None] > 0, vs.views, vs.inpainted)
        assert np.array_equal(recomposed, vs.views)

    def test_sprite_exiting_frame_rejected(self):
        with pytest.raises(ConfigurationError, match="exits frame"):
            synth_scene(SynthSpec(sprite_start=(90.0, 44.0), sprite_step=(2.0, 0.0)))

    def test_oversized_sprite_rejected(self):
        with pytest.raises(ConfigurationError):
            synth_scene(SynthSpec(sprite_radius=50.0, sprite_step=(1.0, 0.0)))

    def test_flow_confidence_zero_under_occlusion(self):
        vs = synth_scene()
        fl = vs.flows[0]  # 0 -> 1
        occluded = (vs.fg_masks[0] == 0) & (vs.fg_masks[1] > 0)
        assert occluded.any()
        assert np.all(fl.conf[occluded] == 0)
        assert np.all(fl.conf[vs.fg_masks[0] > 0] == 1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        mapping, atlas = MappingField(seed=3), AtlasField(seed=4)
        path = tmp_path / "model.hat"
        save_checkpoint(mapping, atlas, path)
        m2, a2 = load_checkpoint(path)
        for (k1, v1), (k2, v2) in zip(mapping.state_dict().items(), m2.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)
        for (k1, v1), (k2, v2) in zip(atlas.state_dict().items(), a2.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)

    def test_wrong_magic_is_integrity_error(self, tmp_path):
        path = tmp_path / "model.hat"
        save_checkpoint(MappingField(seed=0), AtlasField(seed=1), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointIntegrityError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        path = tmp_path / "model.hat"
        save_checkpoint(MappingField(seed=0), AtlasField(seed=1), path)
        data = bytearray(path.read_bytes())
        data[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError, match=r"version 2.*version 1"):
            load_checkpoint(path)

    def test_truncated_file_is_integrity_error(self, tmp_path):
        path = tmp_path / "model.hat"
        save_checkpoint(MappingField(seed=0), AtlasField(seed=1), path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_non_finite_fields_refused(self, tmp_path):
        mapping = MappingField(seed=0)
        with torch.no_grad():
            mapping.net.layers[0].weight[0, 0] = float("nan")
        with pytest.raises(NumericError):
            save_checkpoint(mapping, AtlasField(seed=1), tmp_path / "m.hat")


class TestSceneDirectory:
    def test_edit_ids_are_never_reused(self, tmp_path):
        scene = SceneDirectory.create(tmp_path / "s", _random_viewset())
        first = scene.allocate_edit_id()
        (scene.edits_dir / first).mkdir()
        second = scene.allocate_edit_id()
        assert second != first
        import shutil

        shutil.rmtree(scene.edits_dir / first)
        third = scene.allocate_edit_id()
        assert third not in (first, second)

    def test_manifest_contents(self, tmp_path):
        vs = _random_viewset(with_assets=True)
        scene = SceneDirectory.create(tmp_path / "s", vs, source="unit-test")
        man = scene.manifest()
        assert man["views"] == "3"
        assert man["masks"] == "1"
        assert man["flows"] == "1"
        assert man["source"] == "unit-test"
