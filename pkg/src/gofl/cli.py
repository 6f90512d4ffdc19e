"""Command-line pipeline driver.

Subcommands: gen-data, proxy, train, finetune, eval, viz, gradcheck.
Exit codes: 0 success, 1 usage error, 2 runtime or data error. Outputs are
files and tables only; every command is deterministic given its inputs and
seeds, and none mutates its inputs. ``GOFL_THREADS`` caps worker processes
(default: machine parallelism).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, proxy, trainer
from .dataset import generate_synthetic, load_manifest
from .flow_io import flow_to_color, load_flo, save_image
from .model import ModelConfig, load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _workers() -> int:
    env = os.environ.get("GOFL_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"GOFL_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"--size must look like 64x64, got {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="gofl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with exact ground truth")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("proxy", help="produce classical proxy flow for every manifest pair")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hs-alpha", type=float, default=15.0)
    p.add_argument("--hs-iters", type=int, default=100)
    p.add_argument("--levels", type=int, default=4)

    p = sub.add_parser("train", help="stage 1: proxy-guided training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-channels", type=int, default=16)

    p = sub.add_parser("finetune", help="stage 2: add the reconstruction guide")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="average endpoint error against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="optional summary file")

    p = sub.add_parser("viz", help="render flow with the Middlebury color wheel")
    p.add_argument("--flo", help="flow file to render")
    p.add_argument("--ckpt", help="checkpoint; renders the prediction for --pair")
    p.add_argument("--pair", help="pair id, used with --ckpt")
    p.add_argument("--manifest", help="manifest providing the pair, used with --ckpt")
    p.add_argument("--max-magnitude", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


def _cmd_gen_data(args) -> int:
    manifest = generate_synthetic(args.count, _parse_size(args.size), args.seed, args.out)
    train = len(manifest.subset("train"))
    test = len(manifest.subset("test"))
    print(f"wrote {train} train + {test} test pairs under {args.out}")
    return 0


def _cmd_proxy(args) -> int:
    cfg = proxy.HSConfig(smoothness_alpha=args.hs_alpha,
                         iterations_per_level=args.hs_iters,
                         pyramid_levels=args.levels)
    manifest = load_manifest(args.manifest)
    out_manifest, report = proxy.generate_proxy(manifest, cfg, args.out, workers=_workers())
    for pair_id, reason in report.skipped:
        print(f"skipped {pair_id}: {reason}", file=sys.stderr)
    print(f"wrote {report.generated} proxy flows under {args.out}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = trainer.load_config(args.config)
    if cfg.stage != "guided":
        raise UsageError(f"train expects a guided-stage config, got stage={cfg.stage}")
    model_cfg = ModelConfig(base_channels=args.base_channels)
    params, report = trainer.train_guided(model_cfg, manifest, cfg, out_dir=args.out)
    out = Path(args.out)
    report.write_log(out / "train_log.txt")
    report.write_summary(out / "train_summary.txt")
    print(f"final loss {report.losses[-1]:.6f}; checkpoint {report.final_checkpoint}")
    return 0


def _cmd_finetune(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = trainer.load_config(args.config)
    if cfg.stage != "finetune":
        raise UsageError(f"finetune expects a finetune-stage config, got stage={cfg.stage}")
    params, _ = load_checkpoint(args.init)
    params, report = trainer.finetune(params, manifest, cfg, out_dir=args.out)
    out = Path(args.out)
    report.write_log(out / "train_log.txt")
    report.write_summary(out / "train_summary.txt")
    print(f"final loss {report.losses[-1]:.6f}; checkpoint {report.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    params, _ = load_checkpoint(args.ckpt)
    result = trainer.evaluate(params, manifest, args.split)
    print(f"{'pair':<12}\tepe\tzero-flow")
    for pair_id, epe, zero in result.per_pair:
        print(f"{pair_id:<12}\t{epe:.4f}\t{zero:.4f}")
    print(f"{'MEAN':<12}\t{result.mean_epe:.4f}\t{result.zero_flow_epe:.4f}")
    if args.out:
        result.write_summary(args.out)
    return 0


def _cmd_viz(args) -> int:
    if args.flo and (args.ckpt or args.pair):
        raise UsageError("use either --flo or --ckpt/--pair, not both")
    if args.flo:
        flow = load_flo(args.flo)
    elif args.ckpt:
        if not args.pair or not args.manifest:
            raise UsageError("--ckpt rendering needs --pair and --manifest")
        manifest = load_manifest(args.manifest)
        entry = next((e for e in manifest.entries if e.pair_id == args.pair), None)
        if entry is None:
            raise ValueError(f"pair {args.pair!r} not found in {args.manifest}")
        from .dataset import load_sample
        from .model import predict_full

        params, _ = load_checkpoint(args.ckpt)
        sample = load_sample(manifest, entry, with_gt=False, with_proxy=False)
        flow = predict_full(params, sample.i1, sample.i2)
    else:
        raise UsageError("viz needs --flo or --ckpt")
    save_image(flow_to_color(flow, args.max_magnitude), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = checks.run_all(points=args.points, tol=args.tol)
    for r in results:
        print(r)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "proxy": _cmd_proxy,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "viz": _cmd_viz,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
