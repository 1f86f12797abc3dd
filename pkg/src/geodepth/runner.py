"""Training and evaluation loops over corpus manifests.

These are thin deterministic drivers: one seeded generator feeds sample
shuffling, optional horizontal flipping, and any in-network point sampling,
so a (manifest, config, seed) triple fixes every artifact bit-for-bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .dataio import hflip_sample, load_sample
from .errors import EmptyInputError
from .metrics import MetricReport, aggregate, evaluate
from .network import CompletionNet, train_step


def load_samples(entries) -> list:
    return [load_sample(e) for e in entries]


def train(model: CompletionNet, samples, tcfg: TrainConfig, seed: int,
          out_dir=None) -> list[tuple[int, float]]:
    """Run the configured epochs; returns the (step, loss) curve.

    With ``out_dir`` set, writes one checkpoint per epoch plus a final
    ``checkpoint.bin`` and a ``loss_log.txt`` with one ``step loss`` line
    per step.
    """
    if not samples:
        raise EmptyInputError("train: empty sample list")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    curve = []
    step = 0
    done = False
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(samples), tcfg.batch_size):
            batch = []
            for i in order[lo:lo + tcfg.batch_size]:
                sample = samples[int(i)]
                if tcfg.augment_hflip and rng.random() < 0.5:
                    sample = hflip_sample(*sample)
                batch.append(sample)
            loss = train_step(model, batch, tcfg.lr, rng, tcfg.beta1, tcfg.beta2)
            step += 1
            curve.append((step, loss))
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                done = True
                break
        if out_dir is not None:
            save_checkpoint(model.state_dict(), out_dir / f"ckpt_epoch_{epoch:03d}.bin")
        if done:
            break
    if out_dir is not None:
        save_checkpoint(model.state_dict(), out_dir / "checkpoint.bin")
        write_loss_log(curve, out_dir / "loss_log.txt")
    return curve


def write_loss_log(curve, path) -> None:
    with open(path, "w") as fh:
        for step, loss in curve:
            fh.write(f"{step} {loss!r}\n")


def evaluate_model(model: CompletionNet, samples) -> tuple[list[MetricReport], MetricReport]:
    """Eval-mode inference over all samples; per-image reports plus the pool."""
    reports = []
    for rgb, sparse, gt, intrinsics in samples:
        pred = model.forward(rgb, sparse, intrinsics, mode="eval")
        reports.append(evaluate(pred, gt))
    return reports, aggregate(reports)


def rmse_on(model: CompletionNet, samples) -> float:
    """Pooled RMSE in meters (convenience for experiment scripts)."""
    _, pooled = evaluate_model(model, samples)
    return pooled.rmse / 1000.0
