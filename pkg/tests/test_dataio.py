"""Depth-image format, synthetic scenes, sparsification, and manifests."""

import numpy as np
import pytest
from PIL import Image

from geodepth.camera import DepthMap
from geodepth.dataio import (
    SceneSpec,
    generate_corpus,
    hflip_sample,
    load_sample,
    read_depth_png,
    read_manifest,
    read_rgb_png,
    sparsify,
    synth_scene,
    write_depth_png,
    write_rgb_png,
)
from geodepth.errors import ConfigError, DataFormatError


class TestDepthPng:
    def test_raw_256_is_one_meter(self, tmp_path):
        path = tmp_path / "d.png"
        Image.fromarray(np.array([[256, 0]], dtype=np.uint16)).save(path)
        dm = read_depth_png(path)
        assert dm.depth[0, 0] == 1.0 and dm.valid[0, 0]
        assert dm.depth[0, 1] == 0.0 and not dm.valid[0, 1]

    def test_round_trip_bitwise_for_quantized_depths(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 65536, size=(12, 9))
        dm = DepthMap(depth=raw / 256.0, valid=raw > 0)
        path = tmp_path / "d.png"
        write_depth_png(dm, path)
        back = read_depth_png(path)
        assert np.array_equal(back.depth, dm.depth)
        assert np.array_equal(back.valid, dm.valid)

    def test_quantization_error_bounded(self, tmp_path):
        rng = np.random.default_rng(1)
        depth = rng.uniform(0.5, 80.0, size=(8, 8))
        dm = DepthMap(depth=depth, valid=np.ones((8, 8), bool))
        path = tmp_path / "d.png"
        write_depth_png(dm, path)
        assert np.abs(read_depth_png(path).depth - depth).max() <= 1 / 512

    def test_invalid_everywhere_writes_zero_image(self, tmp_path):
        dm = DepthMap(depth=np.zeros((4, 4)), valid=np.zeros((4, 4), bool))
        path = tmp_path / "d.png"
        write_depth_png(dm, path)
        assert np.array_equal(np.asarray(Image.open(path)), np.zeros((4, 4)))

    def test_clamp_overrange_with_one_warning(self, tmp_path):
        dm = DepthMap(depth=np.array([[300.0]]), valid=np.ones((1, 1), bool))
        path = tmp_path / "d.png"
        with pytest.warns(UserWarning, match="clamped") as record:
            write_depth_png(dm, path)
        assert len(record) == 1
        assert np.asarray(Image.open(path))[0, 0] == 65535

    def test_wrong_bit_depth_rejected(self, tmp_path):
        path = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        with pytest.raises(DataFormatError, match="16-bit"):
            read_depth_png(path)

    def test_multichannel_rejected(self, tmp_path):
        path = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(path)
        with pytest.raises(DataFormatError):
            read_depth_png(path)


class TestSynthScene:
    def test_same_seed_bitwise_identical(self):
        a = synth_scene(SceneSpec(seed=5))
        b = synth_scene(SceneSpec(seed=5))
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1].depth, b[1].depth)
        assert np.array_equal(a[2].depth, b[2].depth)
        assert np.array_equal(a[2].valid, b[2].valid)
        assert a[3] == b[3]

    def test_gt_dense_and_sparse_has_exactly_n(self):
        spec = SceneSpec(seed=6, sparsity=300)
        rgb, gt, sparse, intrinsics = synth_scene(spec)
        assert gt.valid.all()
        assert sparse.valid_count == 300
        assert rgb.shape == (3, 64, 64)
        assert 0.5 <= gt.depth.min() and gt.depth.max() <= 80.0

    def test_zbuffer_matches_replayed_layout(self):
        # replay the documented draw order to reconstruct the analytic
        # plane and box list, then check the composite per pixel
        spec = SceneSpec(seed=7)
        _, gt, _, _ = synth_scene(spec)
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        h, w = spec.height, spec.width
        vs = np.arange(h)[:, None]
        us = np.arange(w)[None, :]
        z0 = rng.uniform(*spec.ground_range)
        tilt_v = rng.uniform(-spec.tilt_max, spec.tilt_max)
        tilt_u = rng.uniform(-spec.tilt_max, spec.tilt_max)
        plane = np.clip(
            z0 + tilt_v * (vs - (h - 1) / 2) / (h - 1) + tilt_u * (us - (w - 1) / 2) / (w - 1),
            0.5, 80.0)
        expected = np.broadcast_to(plane, (h, w)).copy()
        count = int(rng.integers(spec.box_count_range[0], spec.box_count_range[1] + 1))
        assert count >= 1
        for _ in range(count):
            bw = max(2, int(round(rng.uniform(*spec.box_size_range) * w)))
            bh = max(2, int(round(rng.uniform(*spec.box_size_range) * h)))
            u0 = int(rng.integers(0, max(1, w - bw)))
            v0 = int(rng.integers(0, max(1, h - bh)))
            zb = rng.uniform(*spec.box_depth_range)
            rng.uniform(0.4, 1.0, size=3)
            region = (slice(v0, v0 + bh), slice(u0, u0 + bw))
            expected[region] = np.minimum(expected[region], zb)
            # visible box pixels sit strictly in front of the plane
            visible = expected[region] == zb
            if visible.any():
                assert (zb < plane[region][visible] + 1e-12).all()
        assert np.array_equal(gt.depth, expected)

    def test_intrinsics_centered(self):
        _, _, _, intrinsics = synth_scene(SceneSpec(seed=8, height=32, width=48))
        assert intrinsics.fx == 48.0 and intrinsics.fy == 48.0
        assert intrinsics.cx == 23.5 and intrinsics.cy == 15.5

    def test_extent_must_divide_by_eight(self):
        with pytest.raises(ConfigError):
            SceneSpec(seed=0, height=30, width=64)


class TestSparsify:
    def test_identity_when_n_equals_valid(self):
        _, gt, _, _ = synth_scene(SceneSpec(seed=9, height=16, width=16, sparsity=100))
        out = sparsify(gt, gt.valid_count, seed=0)
        assert np.array_equal(out.depth, gt.depth)

    def test_kept_pixels_bitwise_and_count(self):
        _, gt, _, _ = synth_scene(SceneSpec(seed=10))
        out = sparsify(gt, 500, seed=3)
        assert out.valid_count == 500
        assert np.array_equal(out.depth[out.valid], gt.depth[out.valid])
        assert (out.depth[~out.valid] == 0).all()

    def test_clamped_with_warning(self):
        _, gt, _, _ = synth_scene(SceneSpec(seed=11, height=16, width=16, sparsity=100))
        with pytest.warns(UserWarning, match="clamped"):
            out = sparsify(gt, 10**6, seed=0)
        assert out.valid_count == gt.valid_count

    def test_deterministic_per_seed(self):
        _, gt, _, _ = synth_scene(SceneSpec(seed=12))
        a = sparsify(gt, 100, seed=4)
        b = sparsify(gt, 100, seed=4)
        c = sparsify(gt, 100, seed=5)
        assert np.array_equal(a.valid, b.valid)
        assert not np.array_equal(a.valid, c.valid)


class TestHflip:
    def test_double_flip_is_identity(self):
        rgb, gt, sparse, intrinsics = synth_scene(SceneSpec(seed=13))
        r2, s2, g2, k2 = hflip_sample(*hflip_sample(rgb, sparse, gt, intrinsics))
        assert np.array_equal(r2, rgb)
        assert np.array_equal(s2.depth, sparse.depth)
        assert np.array_equal(g2.depth, gt.depth)
        assert k2 == intrinsics

    def test_cx_mirrored(self):
        rgb, gt, sparse, intrinsics = synth_scene(SceneSpec(seed=14))
        _, _, _, flipped = hflip_sample(rgb, sparse, gt, intrinsics)
        assert flipped.cx == (sparse.width - 1) - intrinsics.cx
        assert flipped.cy == intrinsics.cy


class TestCorpus:
    def test_manifest_round_trip_and_loadable(self, tmp_path):
        manifest = generate_corpus(tmp_path, count=3, base_seed=100,
                                   template=SceneSpec(seed=0, height=16, width=16, sparsity=40))
        entries = read_manifest(manifest)
        assert len(entries) == 3
        rgb, sparse, gt, intrinsics = load_sample(entries[0])
        assert rgb.shape == (3, 16, 16)
        assert sparse.valid_count == 40
        assert gt.valid.all()
        assert intrinsics.fx == 16.0

    def test_regeneration_is_bitwise_identical(self, tmp_path):
        template = SceneSpec(seed=0, height=16, width=16, sparsity=30)
        m1 = generate_corpus(tmp_path / "a", count=2, base_seed=7, template=template)
        m2 = generate_corpus(tmp_path / "b", count=2, base_seed=7, template=template)
        for e1, e2 in zip(read_manifest(m1), read_manifest(m2)):
            assert e1.rgb.read_bytes() == e2.rgb.read_bytes()
            assert e1.gt.read_bytes() == e2.gt.read_bytes()
            assert e1.sparse.read_bytes() == e2.sparse.read_bytes()
            assert e1.intrinsics.read_text() == e2.intrinsics.read_text()

    def test_disjoint_seed_ranges_differ(self, tmp_path):
        template = SceneSpec(seed=0, height=16, width=16, sparsity=30)
        train = generate_corpus(tmp_path / "train", count=2, base_seed=0, template=template)
        val = generate_corpus(tmp_path / "val", count=2, base_seed=1000, template=template)
        t0 = read_manifest(train)[0]
        v0 = read_manifest(val)[0]
        assert t0.gt.read_bytes() != v0.gt.read_bytes()

    def test_bad_manifest_line_rejected(self, tmp_path):
        bad = tmp_path / "manifest.txt"
        bad.write_text("a.png b.png\n")
        with pytest.raises(DataFormatError, match="4 paths"):
            read_manifest(bad)


class TestRgbPng:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(15)
        rgb = rng.uniform(size=(3, 8, 8))
        path = tmp_path / "rgb.png"
        write_rgb_png(rgb, path)
        assert np.abs(read_rgb_png(path) - rgb).max() <= 0.5 / 255

    def test_non_rgb_rejected(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        with pytest.raises(DataFormatError):
            read_rgb_png(path)
