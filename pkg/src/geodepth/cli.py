"""Command-line entry point for batch experiments.

Subcommands: ``synth`` (generate a corpus), ``train``, ``eval``, ``infer``,
``embed`` (per-point embedding dump), and ``gradcheck``. All flags are long
form. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical failure. Identical arguments and seed reproduce identical
artifacts bit for bit.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import backproject, read_intrinsics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import default_configs, load_config
from .dataio import SceneSpec, generate_corpus, read_depth_png, read_rgb_png, read_manifest, write_depth_png
from .embedding import dgr_embed
from .errors import ConfigError, ContractError, DataFormatError, EmptyInputError, ShapeError
from .gradcheck import check_end_to_end, run_op_checks
from .metrics import report_lines, report_record
from .network import CompletionNet
from .runner import evaluate_model, load_samples, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract here is 1
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="geodepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--points", type=int, default=500, help="valid pixels per sparse map")

    p = sub.add_parser("train", help="train a model over a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file to write")
    p.add_argument("--config", default=None)

    p = sub.add_parser("infer", help="densify one sparse map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--sparse", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("embed", help="dump per-point geometric embeddings as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sparse", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check every op at 64-bit")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _configs(path):
    return load_config(path) if path else default_configs()


def _load_model(config_path, checkpoint_path) -> CompletionNet:
    net_cfg, _ = _configs(config_path)
    model = CompletionNet(net_cfg, seed=0)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    return model


def _cmd_synth(args) -> int:
    template = SceneSpec(seed=args.seed, height=args.height, width=args.width,
                         sparsity=args.points)
    manifest = generate_corpus(args.out, args.count, args.seed, template)
    print(f"wrote {args.count} scenes; manifest at {manifest}")
    return 0


def _cmd_train(args) -> int:
    net_cfg, train_cfg = _configs(args.config)
    entries = read_manifest(args.manifest)
    if not entries:
        raise DataFormatError(f"{args.manifest}: empty manifest")
    samples = load_samples(entries)
    model = CompletionNet(net_cfg, seed=args.seed)
    curve = train(model, samples, train_cfg, seed=args.seed, out_dir=args.out)
    print(f"trained {len(curve)} steps; first loss {curve[0][1]:.6g}, last {curve[-1][1]:.6g}")
    print(f"checkpoint at {Path(args.out) / 'checkpoint.bin'}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.config, args.checkpoint)
    entries = read_manifest(args.manifest)
    if not entries:
        raise DataFormatError(f"{args.manifest}: empty manifest")
    samples = load_samples(entries)
    reports, pooled = evaluate_model(model, samples)
    lines = [f"image {i} {report_record(r)}" for i, r in enumerate(reports)]
    lines.append(f"pooled {report_record(pooled)}")
    text = "\n".join(lines) + "\n"
    with open(args.out, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    for line in report_lines(pooled):
        print(line)
    return 0


def _cmd_infer(args) -> int:
    model = _load_model(args.config, args.checkpoint)
    rgb = read_rgb_png(args.rgb)
    sparse = read_depth_png(args.sparse)
    intrinsics = read_intrinsics(args.intrinsics)
    pred = model.forward(rgb, sparse, intrinsics, mode="eval")
    write_depth_png(pred, args.out)
    print(f"wrote dense depth to {args.out}")
    return 0


def _cmd_embed(args) -> int:
    # run at 64-bit so the dumped depth channel is a bitwise copy of z
    with ad.precision(np.float64):
        model = _load_model(args.config, args.checkpoint)
        sparse = read_depth_png(args.sparse)
        intrinsics = read_intrinsics(args.intrinsics)
        points = backproject(sparse, intrinsics)
        if model.dgr is None:
            raise ConfigError("embed requires a model with guidance=dgr")
        emb = dgr_embed(points, model.dgr, mode="eval").per_point.data
    with open(args.out, "w") as fh:
        for i in range(points.n):
            u, v = points.pixel[i]
            coords = [repr(float(c)) for c in points.coords[i]]
            feats = [repr(float(c)) for c in emb[i]]
            fh.write(" ".join([str(u), str(v), *coords, *feats]) + "\n")
    print(f"wrote {points.n} embedding rows to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_op_checks(seed=args.seed)
    results.append(check_end_to_end(seed=args.seed))
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  max_rel_err={r.max_rel_err:.3e}  n={r.instances}")
        failures += 0 if r.passed else 1
    if failures:
        print(f"{failures} op(s) failed the finite-difference check")
        return 3
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "embed": _cmd_embed,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (DataFormatError, ConfigError, ShapeError, EmptyInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
