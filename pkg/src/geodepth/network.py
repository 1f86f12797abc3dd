"""Bi-branch encoder plus geometry-guided decoder for dense depth.

The color branch and the geometry branch share one structure (two
conv+norm+ReLU blocks per scale, the first at stride 2) and differ only in
input channels: 3 for color, 17 for the geometric embedding grid (1 when
the geometry branch is fed raw sparse depth for the ablation baseline).
Both produce pyramids at 1/2, 1/4 and 1/8 scale.

The decoder starts from the deepest scale with the channel-concatenated
color and geometry maps, and per scale upsamples with a stride-2 transposed
convolution after summing the running map with the color features and
concatenating the geometry features. A 1x1 convolution with a ReLU clamp
produces the non-negative dense depth.

Training is single-writer over the parameters; eval-mode inference is pure
and may run concurrently across images. Parameters persist through the
checkpoint format under the prefixes ``enc_c.``, ``enc_g.``, ``dec.`` and
``dgr.``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import (
    CameraIntrinsics,
    DepthMap,
    PointSet,
    backproject,
    sample_farthest,
    sample_random,
)
from .embedding import DgrConfig, DgrModule, dgr_embed
from .errors import ConfigError, EmptyInputError, ShapeError


@dataclass(frozen=True)
class NetConfig:
    """Widths and switches for the completion network.

    Decoder widths at the two intermediate scales must equal the color
    widths there (the summation fusion requires matching shapes); only the
    full-resolution width is free.
    """

    color_widths: tuple = (16, 32, 64)
    geometry_widths: tuple = (16, 32, 64)
    decoder_widths: tuple = (32, 16, 16)
    dgr: DgrConfig = field(default_factory=DgrConfig)
    loss_reduction: str = "mean"
    sampling: str = "random"       # random | fps, applied in train mode only
    sample_count: int = 8000
    guidance: str = "dgr"          # dgr | depth (ablation baseline)
    eval_point_cap: int | None = None

    def __post_init__(self):
        for name in ("color_widths", "geometry_widths", "decoder_widths"):
            w = getattr(self, name)
            if len(w) != 3 or any(int(c) < 1 for c in w):
                raise ConfigError(f"{name} must be three positive widths, got {w}")
            object.__setattr__(self, name, tuple(int(c) for c in w))
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")
        if self.sampling not in ("random", "fps"):
            raise ConfigError(f"sampling must be random or fps, got {self.sampling!r}")
        if self.sample_count < 1:
            raise ConfigError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.guidance not in ("dgr", "depth"):
            raise ConfigError(f"guidance must be dgr or depth, got {self.guidance!r}")
        if self.decoder_widths[0] != self.color_widths[1] or self.decoder_widths[1] != self.color_widths[0]:
            raise ConfigError(
                "decoder widths at the fusion scales must mirror the color widths: "
                f"decoder {self.decoder_widths} vs color {self.color_widths}"
            )

    @property
    def k(self) -> int:
        return self.dgr.k

    @property
    def geometry_channels(self) -> int:
        return self.dgr.out_channels if self.guidance == "dgr" else 1


class _ConvBlock:
    """conv -> batch norm -> ReLU. The norm supplies the bias."""

    def __init__(self, prefix, cin, cout, rng, stride=1, kernel=3):
        self.stride = stride
        self.padding = 1
        self.weight = ad.Parameter(
            f"{prefix}.weight",
            ad.kaiming_uniform((cout, cin, kernel, kernel), fan_in=cin * kernel * kernel, rng=rng),
        )
        self.bn_gain = ad.Parameter(f"{prefix}.bn.gain", np.ones(cout, dtype=ad.default_dtype()))
        self.bn_shift = ad.Parameter(f"{prefix}.bn.shift", np.zeros(cout, dtype=ad.default_dtype()))
        self.bn_state = ad.BatchNormState(cout)
        self._prefix = prefix

    def forward(self, x, mode):
        y = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return _bn_relu_nchw(y, self.bn_gain, self.bn_shift, self.bn_state, mode)

    def parameters(self):
        return [self.weight, self.bn_gain, self.bn_shift]

    def stats(self):
        return {f"{self._prefix}.bn": self.bn_state}


class _UpBlock:
    """Stride-2 transposed conv -> batch norm -> ReLU (doubles the extent)."""

    def __init__(self, prefix, cin, cout, rng):
        self.weight = ad.Parameter(
            f"{prefix}.weight", ad.kaiming_uniform((cin, cout, 4, 4), fan_in=cin * 16, rng=rng)
        )
        self.bn_gain = ad.Parameter(f"{prefix}.bn.gain", np.ones(cout, dtype=ad.default_dtype()))
        self.bn_shift = ad.Parameter(f"{prefix}.bn.shift", np.zeros(cout, dtype=ad.default_dtype()))
        self.bn_state = ad.BatchNormState(cout)
        self._prefix = prefix

    def forward(self, x, mode):
        y = ad.conv_transpose2d(x, self.weight, stride=2, padding=1)
        return _bn_relu_nchw(y, self.bn_gain, self.bn_shift, self.bn_state, mode)

    def parameters(self):
        return [self.weight, self.bn_gain, self.bn_shift]

    def stats(self):
        return {f"{self._prefix}.bn": self.bn_state}


def _bn_relu_nchw(x, gain, shift, state, mode):
    b, c, h, w = x.shape
    flat = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    flat = ad.relu(ad.batch_norm(flat, gain, shift, state, mode))
    return ad.transpose(ad.reshape(flat, (b, h, w, c)), (0, 3, 1, 2))


class Encoder:
    """Three stride-2 stages producing 1/2, 1/4 and 1/8 scale feature maps."""

    def __init__(self, prefix, in_channels, widths, rng):
        self.stages = []
        cin = in_channels
        for i, cout in enumerate(widths):
            # kernel 4 halves even extents exactly ((H + 2 - 4) / 2 + 1 = H / 2)
            down = _ConvBlock(f"{prefix}.stage{i}.down", cin, cout, rng, stride=2, kernel=4)
            keep = _ConvBlock(f"{prefix}.stage{i}.conv", cout, cout, rng, stride=1)
            self.stages.append((down, keep))
            cin = cout

    def forward(self, x, mode):
        _, _, h, w = x.shape
        if h % 8 or w % 8:
            raise ConfigError(f"encoder input extent {h}x{w} must be divisible by 8")
        pyramid = []
        for down, keep in self.stages:
            x = keep.forward(down.forward(x, mode), mode)
            pyramid.append(x)
        return pyramid

    def parameters(self):
        return [p for down, keep in self.stages for p in down.parameters() + keep.parameters()]

    def stats(self):
        out = {}
        for down, keep in self.stages:
            out.update(down.stats())
            out.update(keep.stats())
        return out


class Decoder:
    """Geometry-guided upsampling back to full resolution plus the depth head."""

    def __init__(self, prefix, config: NetConfig, rng):
        cw, gw, dw = config.color_widths, config.geometry_widths, config.decoder_widths
        self.up3 = _UpBlock(f"{prefix}.up3", cw[2] + gw[2], dw[0], rng)
        self.up2 = _UpBlock(f"{prefix}.up2", dw[0] + gw[1], dw[1], rng)
        self.up1 = _UpBlock(f"{prefix}.up1", dw[1] + gw[0], dw[2], rng)
        self.head_weight = ad.Parameter(
            f"{prefix}.head.weight", ad.kaiming_uniform((1, dw[2], 1, 1), fan_in=dw[2], rng=rng)
        )
        self.head_bias = ad.Parameter(f"{prefix}.head.bias", np.zeros(1, dtype=ad.default_dtype()))

    def forward(self, fc, fg, mode):
        if len(fc) != 3 or len(fg) != 3:
            raise ShapeError("decode expects two 3-level pyramids")
        for a, b in zip(fc, fg):
            if a.shape[2:] != b.shape[2:]:
                raise ShapeError(f"pyramid extents differ: {a.shape} vs {b.shape}")
        p = self.up3.forward(ad.concat([fc[2], fg[2]], axis=1), mode)
        p = self.up2.forward(ad.concat([ad.add(p, fc[1]), fg[1]], axis=1), mode)
        p = self.up1.forward(ad.concat([ad.add(p, fc[0]), fg[0]], axis=1), mode)
        return ad.relu(ad.conv2d(p, self.head_weight, bias=self.head_bias))

    def parameters(self):
        out = []
        for blk in (self.up3, self.up2, self.up1):
            out.extend(blk.parameters())
        out.extend([self.head_weight, self.head_bias])
        return out

    def stats(self):
        out = {}
        for blk in (self.up3, self.up2, self.up1):
            out.update(blk.stats())
        return out


class CompletionNet:
    """The full sparse-to-dense model; construction is deterministic per seed."""

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(seed))
        self.dgr = DgrModule(config.dgr, rng, prefix="dgr") if config.guidance == "dgr" else None
        self.enc_c = Encoder("enc_c", 3, config.color_widths, rng)
        self.enc_g = Encoder("enc_g", config.geometry_channels, config.geometry_widths, rng)
        self.dec = Decoder("dec", config, rng)

    # -- parameter/state plumbing -------------------------------------------------

    def parameters(self):
        out = []
        if self.dgr is not None:
            out.extend(self.dgr.parameters())
        out.extend(self.enc_c.parameters())
        out.extend(self.enc_g.parameters())
        out.extend(self.dec.parameters())
        return out

    def stats(self):
        out = {}
        if self.dgr is not None:
            out.update(self.dgr.stats())
        out.update(self.enc_c.stats())
        out.update(self.enc_g.stats())
        out.update(self.dec.stats())
        return out

    def state_dict(self) -> dict:
        """Name -> array snapshot: parameters plus batch-norm running stats."""
        out = {}
        for p in self.parameters():
            out[p.name] = p.tensor.data
        for name, st in self.stats().items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def load_state_dict(self, record: dict) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(record))
        extra = sorted(set(record) - set(expected))
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match the model: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for p in self.parameters():
            arr = np.asarray(record[p.name])
            if arr.shape != p.tensor.data.shape:
                raise ConfigError(
                    f"checkpoint shape {arr.shape} for {p.name!r}, model has {p.tensor.data.shape}"
                )
            p.tensor.data = arr.astype(p.tensor.data.dtype)
        for name, st in self.stats().items():
            st.load(record[f"{name}.running_mean"], record[f"{name}.running_var"])

    # -- forward stages ------------------------------------------------------------

    def encode_color(self, rgb, mode="eval"):
        return self.enc_c.forward(rgb, mode)

    def encode_geometry(self, geo, mode="eval"):
        return self.enc_g.forward(geo, mode)

    def decode(self, fc, fg, mode="eval"):
        return self.dec.forward(fc, fg, mode)

    def _select_points(self, points: PointSet, mode: str, rng) -> PointSet:
        cfg = self.config
        if mode == "train":
            if points.n <= cfg.sample_count:
                return points
            if cfg.sampling == "fps":
                return sample_farthest(points, cfg.sample_count, start_index=0)
            seed = int(rng.integers(0, 2**63)) if rng is not None else 0
            return sample_random(points, cfg.sample_count, seed)
        if cfg.eval_point_cap is not None and points.n > cfg.eval_point_cap:
            return sample_random(points, cfg.eval_point_cap, seed=0)
        return points

    def _geometry_grid(self, points: PointSet, height, width, mode):
        """[1, C, H, W] geometry-branch input: DGR embedding or raw depth."""
        if self.dgr is not None:
            emb = dgr_embed(points, self.dgr, mode)
            grid = ad.scatter_rows_to_grid(
                emb.per_point, points.pixel[:, 1], points.pixel[:, 0], height, width
            )
        else:
            feats = ad.Tensor(points.depth[:, None], dtype=ad.default_dtype())
            grid = ad.scatter_rows_to_grid(
                feats, points.pixel[:, 1], points.pixel[:, 0], height, width
            )
        return ad.reshape(grid, (1,) + grid.shape)

    def _forward_tensor(self, rgb, sparse: DepthMap, intrinsics: CameraIntrinsics,
                        mode: str, rng=None) -> ad.Tensor:
        rgb = rgb if isinstance(rgb, ad.Tensor) else ad.Tensor(rgb, dtype=ad.default_dtype())
        if rgb.data.ndim != 3 or rgb.data.shape[0] != 3:
            raise ShapeError(f"rgb must be [3, H, W], got {rgb.data.shape}")
        h, w = sparse.height, sparse.width
        if rgb.data.shape[1:] != (h, w):
            raise ShapeError(f"rgb {rgb.data.shape[1:]} does not match depth {h}x{w}")
        if h % 8 or w % 8:
            raise ConfigError(f"input extent {h}x{w} must be divisible by 8")
        if sparse.valid_count < 2:
            raise EmptyInputError("forward needs at least 2 valid sparse depths")
        points = self._select_points(backproject(sparse, intrinsics), mode, rng)
        geo = self._geometry_grid(points, h, w, mode)
        fc = self.enc_c.forward(ad.reshape(rgb, (1,) + rgb.data.shape), mode)
        fg = self.enc_g.forward(geo, mode)
        return self.dec.forward(fc, fg, mode)

    def forward(self, rgb, sparse: DepthMap, intrinsics: CameraIntrinsics,
                mode: str = "eval", rng=None) -> DepthMap:
        """Densify a sparse depth map; the output mask is all-true."""
        pred = self._forward_tensor(rgb, sparse, intrinsics, mode, rng)
        depth = np.asarray(pred.data[0, 0], dtype=np.float64)
        return DepthMap(depth=np.maximum(depth, 0.0), valid=np.ones_like(depth, dtype=bool))


def train_step(model: CompletionNet, batch, lr: float, rng,
               beta1: float = 0.9, beta2: float = 0.999) -> float:
    """One optimization step over a batch of (rgb, sparse, gt, intrinsics).

    Per-sample masked MSE losses are averaged so the step is batch-size
    independent; returns the pre-step loss value.
    """
    if not batch:
        raise EmptyInputError("train_step: empty batch")
    reduction = model.config.loss_reduction
    with ad.Tape() as tape:
        total = None
        for rgb, sparse, gt, intrinsics in batch:
            pred = model._forward_tensor(rgb, sparse, intrinsics, "train", rng)
            flat = ad.reshape(pred, (gt.height, gt.width))
            loss = ad.mse_masked(flat, gt.depth, gt.valid, reduction=reduction)
            total = loss if total is None else ad.add(total, loss)
        if len(batch) > 1:
            total = ad.scale(total, 1.0 / len(batch))
    value = total.item()
    tape.backward(total)
    ad.adam_step(model.parameters(), lr, beta1=beta1, beta2=beta2)
    return value
