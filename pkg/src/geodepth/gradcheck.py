"""Central finite-difference verification of every differentiable op.

Each check builds small random instances, scalarizes the op output with a
fixed random coefficient array, and compares the taped gradient of every
input element against (f(x+h) - f(x-h)) / 2h. Everything runs at 64-bit
regardless of the process-wide training precision. Instances for kinked
ops (ReLU, neighbor max) are built with a margin so no element sits within
h of a non-differentiable point.

``run_op_checks(corrupt=<name>)`` flips the sign of that op's analytic
gradient before comparison; it exists so the harness itself can be shown
to catch a broken backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import CameraIntrinsics
from .dataio import SceneSpec, synth_scene
from .network import CompletionNet, NetConfig

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    instances: int


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)),
                float(np.abs(analytic).max(initial=0.0)), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(fn, tensors, h: float = DEFAULT_STEP, flip_sign: bool = False) -> float:
    """Max norm-relative error of the taped gradients of ``fn()`` w.r.t. ``tensors``.

    ``fn`` must rebuild the graph from the given leaf tensors on every call
    and return a scalar tensor.
    """
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        if flip_sign:
            analytic = -analytic
        t.grad = None
        numeric = np.zeros_like(t.data)
        for i in range(t.data.size):
            idx = np.unravel_index(i, t.data.shape)
            saved = t.data[idx]
            t.data[idx] = saved + h
            hi = fn().item()
            t.data[idx] = saved - h
            lo = fn().item()
            t.data[idx] = saved
            numeric[idx] = (hi - lo) / (2 * h)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _coeff(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _kink_free(rng, shape, margin=1e-2):
    # magnitudes bounded away from zero so ReLU never sees |x| < margin
    mag = rng.uniform(margin, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


# -- one builder per op: returns (fn, leaf tensors) --------------------------------


def _build_linear(rng):
    x, w, b = _leaf(rng, (4, 3)), _leaf(rng, (3, 5)), _leaf(rng, (5,))
    c = _coeff(rng, (4, 5))
    return lambda: ad.weighted_sum(ad.linear(x, w, b), c), [x, w, b]


def _build_relu(rng):
    x = ad.Tensor(_kink_free(rng, (5, 7)), requires_grad=True)
    c = _coeff(rng, (5, 7))
    return lambda: ad.weighted_sum(ad.relu(x), c), [x]


def _build_add(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    c = _coeff(rng, (3, 4))
    return lambda: ad.weighted_sum(ad.add(a, b), c), [a, b]


def _build_sub(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    c = _coeff(rng, (3, 4))
    return lambda: ad.weighted_sum(ad.sub(a, b), c), [a, b]


def _build_scale(rng):
    a = _leaf(rng, (4, 4))
    c = _coeff(rng, (4, 4))
    factor = float(rng.uniform(0.5, 2.0))
    return lambda: ad.weighted_sum(ad.scale(a, factor), c), [a]


def _build_reshape(rng):
    a = _leaf(rng, (3, 8))
    c = _coeff(rng, (6, 4))
    return lambda: ad.weighted_sum(ad.reshape(a, (6, 4)), c), [a]


def _build_transpose(rng):
    a = _leaf(rng, (2, 3, 4))
    c = _coeff(rng, (4, 2, 3))
    return lambda: ad.weighted_sum(ad.transpose(a, (2, 0, 1)), c), [a]


def _build_concat(rng):
    parts = [_leaf(rng, (4, d)) for d in (2, 3, 1)]
    c = _coeff(rng, (4, 6))
    return lambda: ad.weighted_sum(ad.concat(parts, axis=1), c), parts


def _build_gather_rows(rng):
    a = _leaf(rng, (6, 3))
    idx = rng.integers(0, 6, size=(5, 4))   # repeats exercise scatter-add
    c = _coeff(rng, (5, 4, 3))
    return lambda: ad.weighted_sum(ad.gather_rows(a, idx), c), [a]


def _build_scatter_grid(rng):
    a = _leaf(rng, (5, 2))
    pix = rng.choice(6 * 7, size=5, replace=False)
    rows, cols = pix // 7, pix % 7
    c = _coeff(rng, (2, 6, 7))
    return lambda: ad.weighted_sum(ad.scatter_rows_to_grid(a, rows, cols, 6, 7), c), [a]


def _build_max_over_neighbors(rng):
    n, k, d = 4, 5, 3
    base = rng.uniform(-0.2, 0.2, size=(n, k, d)) + 0.5 * np.arange(k)[None, :, None]
    perm = rng.permutation(k)
    x = ad.Tensor(np.ascontiguousarray(base[:, perm, :]), requires_grad=True)
    c = _coeff(rng, (n, d))
    return lambda: ad.weighted_sum(ad.max_over_neighbors(x)[0], c), [x]


def _build_batchnorm_train(rng):
    x, gain, shift = _leaf(rng, (8, 4)), _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
    state = ad.BatchNormState(4)
    c = _coeff(rng, (8, 4))
    fn = lambda: ad.weighted_sum(ad.batch_norm(x, gain, shift, state, "train"), c)
    return fn, [x, gain, shift]


def _build_batchnorm_eval(rng):
    x, gain, shift = _leaf(rng, (8, 4)), _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
    state = ad.BatchNormState(4)
    state.load(rng.uniform(-0.5, 0.5, 4), rng.uniform(0.3, 2.0, 4))
    c = _coeff(rng, (8, 4))
    fn = lambda: ad.weighted_sum(ad.batch_norm(x, gain, shift, state, "eval"), c)
    return fn, [x, gain, shift]


def _build_conv2d(rng):
    x, w, b = _leaf(rng, (1, 2, 5, 5)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    c = _coeff(rng, (1, 3, 5, 5))
    fn = lambda: ad.weighted_sum(ad.conv2d(x, w, b, stride=1, padding=1), c)
    return fn, [x, w, b]


def _build_conv2d_strided(rng):
    x, w = _leaf(rng, (2, 2, 6, 6)), _leaf(rng, (3, 2, 2, 2))
    c = _coeff(rng, (2, 3, 3, 3))
    fn = lambda: ad.weighted_sum(ad.conv2d(x, w, stride=2, padding=0), c)
    return fn, [x, w]


def _build_conv_transpose2d(rng):
    x, w, b = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (3,))
    c = _coeff(rng, (1, 3, 6, 6))
    fn = lambda: ad.weighted_sum(ad.conv_transpose2d(x, w, b, stride=2, padding=1), c)
    return fn, [x, w, b]


def _build_mse_sum(rng):
    pred = _leaf(rng, (4, 5))
    target = rng.uniform(-1, 1, (4, 5))
    mask = rng.uniform(0, 1, (4, 5)) > 0.4
    mask.flat[0] = True
    return lambda: ad.mse_masked(pred, target, mask, reduction="sum"), [pred]


def _build_mse_mean(rng):
    pred = _leaf(rng, (4, 5))
    target = rng.uniform(-1, 1, (4, 5))
    mask = rng.uniform(0, 1, (4, 5)) > 0.4
    mask.flat[0] = True
    return lambda: ad.mse_masked(pred, target, mask, reduction="mean"), [pred]


def _build_weighted_sum(rng):
    a = _leaf(rng, (3, 5))
    c = _coeff(rng, (3, 5))
    return lambda: ad.weighted_sum(a, c), [a]


OP_CHECKS = (
    ("linear", _build_linear),
    ("relu", _build_relu),
    ("add", _build_add),
    ("sub", _build_sub),
    ("scale", _build_scale),
    ("reshape", _build_reshape),
    ("transpose", _build_transpose),
    ("concat", _build_concat),
    ("gather_rows", _build_gather_rows),
    ("scatter_rows_to_grid", _build_scatter_grid),
    ("max_over_neighbors", _build_max_over_neighbors),
    ("batch_norm_train", _build_batchnorm_train),
    ("batch_norm_eval", _build_batchnorm_eval),
    ("conv2d", _build_conv2d),
    ("conv2d_strided", _build_conv2d_strided),
    ("conv_transpose2d", _build_conv_transpose2d),
    ("mse_masked_sum", _build_mse_sum),
    ("mse_masked_mean", _build_mse_mean),
    ("weighted_sum", _build_weighted_sum),
)


def run_op_checks(instances: int = 20, tol: float = DEFAULT_TOL, seed: int = 0,
                  corrupt: str | None = None) -> list[CheckResult]:
    """Finite-difference every op at 64-bit; returns one result row per op."""
    results = []
    with ad.precision(np.float64):
        for name, builder in OP_CHECKS:
            rng = np.random.Generator(np.random.PCG64(seed))
            worst = 0.0
            for _ in range(instances):
                fn, tensors = builder(rng)
                worst = max(worst, check_gradients(fn, tensors, flip_sign=(name == corrupt)))
            results.append(CheckResult(name, worst < tol, worst, instances))
    return results


def check_end_to_end(height: int = 16, width: int = 16, n_params: int = 10,
                     seed: int = 0, tol: float = END_TO_END_TOL) -> CheckResult:
    """Finite-difference the full training loss through the whole model.

    Perturbs ``n_params`` randomly chosen scalar parameter entries of a
    seeded model on one small synthetic scene, at 64-bit.
    """
    with ad.precision(np.float64):
        rng = np.random.Generator(np.random.PCG64(seed))
        rgb, gt, sparse, intrinsics = synth_scene(
            SceneSpec(seed=seed, height=height, width=width, sparsity=40)
        )
        model = CompletionNet(NetConfig(), seed=seed)
        params = model.parameters()

        def loss_fn():
            pred = model._forward_tensor(rgb, sparse, intrinsics, "train")
            flat = ad.reshape(pred, (gt.height, gt.width))
            return ad.mse_masked(flat, gt.depth, gt.valid, reduction="mean")

        with ad.Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        grads = {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None
                          else np.zeros_like(p.tensor.data)) for p in params}
        ad.zero_grads(params)

        h = DEFAULT_STEP
        worst = 0.0
        for _ in range(n_params):
            p = params[int(rng.integers(len(params)))]
            flat = p.tensor.data.reshape(-1)
            i = int(rng.integers(flat.size))
            saved = flat[i]
            flat[i] = saved + h
            hi = loss_fn().item()
            flat[i] = saved - h
            lo = loss_fn().item()
            flat[i] = saved
            numeric = (hi - lo) / (2 * h)
            analytic = grads[p.name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-10)
            worst = max(worst, err)
    return CheckResult("end_to_end_16x16", worst < tol, worst, n_params)
