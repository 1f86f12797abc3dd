"""Encoder/decoder contracts, full forward composition, and training steps."""

import numpy as np
import pytest

import geodepth.autodiff as ad
from geodepth.camera import DepthMap, backproject
from geodepth.dataio import SceneSpec, synth_scene
from geodepth.embedding import DgrConfig, dgr_embed, embed_to_map
from geodepth.errors import ConfigError, EmptyInputError
from geodepth.network import CompletionNet, NetConfig, train_step


def small_config(**kw):
    base = dict(
        color_widths=(8, 12, 16),
        geometry_widths=(8, 12, 16),
        decoder_widths=(12, 8, 8),
        dgr=DgrConfig(layer_dims=(8, 16), k=4, embed_dim=16),
    )
    base.update(kw)
    return NetConfig(**base)


def scene(seed=0, size=32, sparsity=120):
    return synth_scene(SceneSpec(seed=seed, height=size, width=size, sparsity=sparsity))


class TestEncoders:
    def test_scale_contract_64(self):
        model = CompletionNet(small_config(), seed=0)
        x = ad.Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        pyr = model.encode_color(x)
        assert [p.shape[2:] for p in pyr] == [(32, 32), (16, 16), (8, 8)]
        assert [p.shape[1] for p in pyr] == [8, 12, 16]

    def test_zero_input_zero_pyramid(self):
        model = CompletionNet(small_config(), seed=1)
        x = ad.Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        for p in model.encode_color(x, mode="eval"):
            assert np.array_equal(p.data, np.zeros_like(p.data))

    def test_geometry_branch_takes_17_channels(self):
        model = CompletionNet(NetConfig(), seed=2)
        assert model.config.geometry_channels == 17
        x = ad.Tensor(np.zeros((1, 17, 32, 32), dtype=np.float32))
        pyr = model.encode_geometry(x, mode="eval")
        assert [p.shape[2:] for p in pyr] == [(16, 16), (8, 8), (4, 4)]
        for p in pyr:
            assert np.array_equal(p.data, np.zeros_like(p.data))

    def test_indivisible_extent_rejected(self):
        model = CompletionNet(small_config(), seed=3)
        with pytest.raises(ConfigError):
            model.encode_color(ad.Tensor(np.zeros((1, 3, 30, 30), dtype=np.float32)))


class TestDecoder:
    def _pyramids(self, model, rng, size=32):
        fc = model.encode_color(ad.Tensor(rng.normal(size=(1, 3, size, size)),
                                          dtype=np.float32), "eval")
        geo = ad.Tensor(rng.normal(size=(1, model.config.geometry_channels, size, size)),
                        dtype=np.float32)
        fg = model.encode_geometry(geo, "eval")
        return fc, fg

    def test_output_extent_matches_input(self):
        model = CompletionNet(small_config(), seed=4)
        fc, fg = self._pyramids(model, np.random.default_rng(5))
        out = model.decode(fc, fg, "eval")
        assert out.shape == (1, 1, 32, 32)

    def test_zeroed_geometry_changes_output(self):
        model = CompletionNet(small_config(), seed=6)
        fc, fg = self._pyramids(model, np.random.default_rng(7))
        zero_fg = [ad.Tensor(np.zeros_like(p.data)) for p in fg]
        a = model.decode(fc, fg, "eval").data
        b = model.decode(fc, zero_fg, "eval").data
        assert not np.array_equal(a, b)


class TestForward:
    def test_eval_forward_deterministic_and_nonnegative(self):
        rgb, gt, sparse, intrinsics = scene(seed=8)
        model = CompletionNet(small_config(), seed=9)
        a = model.forward(rgb, sparse, intrinsics)
        b = model.forward(rgb, sparse, intrinsics)
        assert np.array_equal(a.depth, b.depth)
        assert a.valid.all()
        assert (a.depth >= 0).all()

    def test_matches_manually_composed_stages(self):
        rgb, gt, sparse, intrinsics = scene(seed=10, size=64, sparsity=200)
        model = CompletionNet(small_config(), seed=11)
        pred = model.forward(rgb, sparse, intrinsics)

        points = backproject(sparse, intrinsics)
        emb = dgr_embed(points, model.dgr, "eval")
        grid = embed_to_map(emb, points, 64, 64).values
        geo = ad.reshape(grid, (1, 17, 64, 64))
        fc = model.encode_color(
            ad.reshape(ad.Tensor(rgb, dtype=ad.default_dtype()), (1, 3, 64, 64)), "eval")
        fg = model.encode_geometry(geo, "eval")
        manual = model.decode(fc, fg, "eval").data[0, 0]
        assert np.array_equal(pred.depth, np.maximum(manual.astype(np.float64), 0.0))

    def test_guidance_liveness_single_channel_perturbation(self):
        rgb, gt, sparse, intrinsics = scene(seed=12)
        model = CompletionNet(small_config(), seed=13)
        points = backproject(sparse, intrinsics)
        emb = dgr_embed(points, model.dgr, "eval")

        def run(emb_rows):
            grid = ad.scatter_rows_to_grid(ad.Tensor(emb_rows), points.pixel[:, 1],
                                           points.pixel[:, 0], 32, 32)
            fg = model.encode_geometry(ad.reshape(grid, (1, 17, 32, 32)), "eval")
            fc = model.encode_color(
                ad.reshape(ad.Tensor(rgb, dtype=ad.default_dtype()), (1, 3, 32, 32)), "eval")
            return model.decode(fc, fg, "eval").data

        base_rows = emb.per_point.data.copy()
        bumped = base_rows.copy()
        bumped[3, 5] += 0.5
        assert not np.array_equal(run(base_rows), run(bumped))

    def test_depth_guidance_baseline_single_channel(self):
        rgb, gt, sparse, intrinsics = scene(seed=14)
        model = CompletionNet(small_config(guidance="depth"), seed=15)
        assert model.dgr is None
        assert model.config.geometry_channels == 1
        pred = model.forward(rgb, sparse, intrinsics)
        assert pred.depth.shape == (32, 32)

    def test_too_few_valid_pixels_rejected(self):
        rgb, gt, sparse, intrinsics = scene(seed=16)
        one = np.zeros((32, 32), bool)
        one[3, 3] = True
        starved = DepthMap(np.where(one, 2.0, 0.0), one)
        model = CompletionNet(small_config(), seed=17)
        with pytest.raises(EmptyInputError):
            model.forward(rgb, starved, intrinsics)


class TestTrainStep:
    def test_zero_loss_leaves_parameters_unchanged(self):
        rgb, gt, sparse, intrinsics = scene(seed=18)
        model = CompletionNet(small_config(), seed=19)
        out = model._forward_tensor(rgb, sparse, intrinsics, "train")
        fake_gt = DepthMap(depth=out.data[0, 0].astype(np.float64),
                           valid=np.ones((32, 32), bool))
        before = {p.name: p.tensor.data.copy() for p in model.parameters()}
        loss = train_step(model, [(rgb, sparse, fake_gt, intrinsics)], lr=0.01,
                          rng=np.random.default_rng(0))
        assert loss == 0.0
        for p in model.parameters():
            assert np.array_equal(p.tensor.data, before[p.name]), p.name

    def test_loss_decreases_over_50_steps(self):
        rgb, gt, sparse, intrinsics = scene(seed=20)
        model = CompletionNet(small_config(), seed=21)
        rng = np.random.default_rng(1)
        losses = [train_step(model, [(rgb, sparse, gt, intrinsics)], 1e-3, rng)
                  for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_fixed_seed_reproduces_loss_sequence_bitwise(self):
        rgb, gt, sparse, intrinsics = scene(seed=22)

        def run():
            model = CompletionNet(small_config(), seed=23)
            rng = np.random.default_rng(2)
            return [train_step(model, [(rgb, sparse, gt, intrinsics)], 1e-3, rng)
                    for _ in range(5)]

        assert run() == run()

    def test_batch_loss_averages_samples(self):
        s1 = scene(seed=24)
        s2 = scene(seed=25)
        model = CompletionNet(small_config(), seed=26)
        batch = [(s1[0], s1[2], s1[1], s1[3]), (s2[0], s2[2], s2[1], s2[3])]
        loss = train_step(model, batch, 1e-3, np.random.default_rng(3))
        assert np.isfinite(loss) and loss > 0

    def test_empty_batch_rejected(self):
        model = CompletionNet(small_config(), seed=27)
        with pytest.raises(EmptyInputError):
            train_step(model, [], 1e-3, np.random.default_rng(4))


class TestConfigValidation:
    def test_decoder_width_contract(self):
        with pytest.raises(ConfigError, match="mirror"):
            NetConfig(color_widths=(8, 12, 16), geometry_widths=(8, 12, 16),
                      decoder_widths=(9, 9, 9))

    def test_bad_switch_values(self):
        with pytest.raises(ConfigError):
            NetConfig(loss_reduction="median")
        with pytest.raises(ConfigError):
            NetConfig(sampling="grid")
        with pytest.raises(ConfigError):
            NetConfig(guidance="none")


class TestStateDict:
    def test_checkpoint_prefixes_present(self):
        model = CompletionNet(NetConfig(), seed=28)
        names = list(model.state_dict())
        for prefix in ("dgr.", "enc_c.", "enc_g.", "dec."):
            assert any(n.startswith(prefix) for n in names), prefix

    def test_save_load_round_trip_preserves_eval(self, tmp_path):
        from geodepth.checkpoint import load_checkpoint, save_checkpoint

        rgb, gt, sparse, intrinsics = scene(seed=29)
        model = CompletionNet(small_config(), seed=30)
        train_step(model, [(rgb, sparse, gt, intrinsics)], 1e-3, np.random.default_rng(5))
        before = model.forward(rgb, sparse, intrinsics).depth
        path = tmp_path / "model.bin"
        save_checkpoint(model.state_dict(), path)
        fresh = CompletionNet(small_config(), seed=99)
        fresh.load_state_dict(load_checkpoint(path))
        after = fresh.forward(rgb, sparse, intrinsics).depth
        assert np.array_equal(before, after)

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        from geodepth.checkpoint import load_checkpoint, save_checkpoint

        model = CompletionNet(small_config(), seed=31)
        path = tmp_path / "model.bin"
        save_checkpoint(model.state_dict(), path)
        other = CompletionNet(small_config(guidance="depth"), seed=32)
        with pytest.raises(ConfigError, match="checkpoint"):
            other.load_state_dict(load_checkpoint(path))
