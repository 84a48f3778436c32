"""``delnet`` command line: inference, training, evaluation and model accounting.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go to
stderr prefixed with ``delnet: error:`` or ``delnet: usage error:``.
"""

from __future__ import annotations

import argparse
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import (DEFAULT_CONFIG, VARIANTS, ArchConfig, ConfigError, InputRangeError,
                   WeightsFormatError, forward, init_params, load_params, parse_kv)
from .complexity import count_model
from .dataio import DataError, PairDataset, load_raw, load_rgb, write_image, write_synthetic_dataset
from .losses import LossConfig, RandomFeatureExtractor
from .metrics import MetricError, MetricReport, evaluate
from .tensor import ShapeError, Tensor, TapeError
from .tensorio import TensorFormatError
from .trainer import TrainingError, dataset_loss, train

PROG = "delnet"

ARCH_FLAGS = {
    "variant": str, "stem_width": int, "eam_count": int, "eam_dilations": str,
    "unet_levels": int, "unet_widths": str, "sca_per_level": int, "spatial_kernel": int,
}
LOSS_KEYS = {"lambda1": float, "lambda2": float, "lambda3": float, "epsilon": float,
             "extractor_seed": int}
TRAIN_KEYS = {"lr": float, "weight_decay": float, "batch_size": int, "steps": int,
              "checkpoint_every": int}

RUNTIME_ERRORS = (DataError, ShapeError, InputRangeError, WeightsFormatError,
                  TensorFormatError, TrainingError, MetricError, TapeError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{PROG}: usage error: {message}\n")


def parse_extent(text: str) -> tuple[int, int]:
    """``HxW`` -> ``(H, W)``."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def _common(p: argparse.ArgumentParser, arch: bool = True, loss: bool = False) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for init, shuffling and synthesis")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    if arch or loss:
        p.add_argument("--config", default=None,
                       help="key = value config file, or 'default' for the calibrated config")
    if arch:
        g = p.add_argument_group("architecture overrides")
        g.add_argument("--variant", choices=VARIANTS)
        g.add_argument("--stem-width", type=int)
        g.add_argument("--eam-count", type=int)
        g.add_argument("--eam-dilations", help="comma separated, e.g. 1,2,3")
        g.add_argument("--unet-levels", type=int)
        g.add_argument("--unet-widths", help="comma separated, one per level")
        g.add_argument("--sca-per-level", type=int)
        g.add_argument("--spatial-kernel", type=int)
    if loss:
        g = p.add_argument_group("loss overrides")
        for key in ("lambda1", "lambda2", "lambda3", "epsilon"):
            g.add_argument(f"--{key}", type=float)
        g.add_argument("--extractor-seed", type=int, help="seed of the frozen feature extractor")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Learned RAW-to-sRGB pipeline tools.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("infer", help="run the network on one raw image and write a PNG")
    _common(p)
    p.add_argument("--input", required=True, help="raw mosaic (.png or .dlt)")
    p.add_argument("--output", required=True, help="output PNG path")
    p.add_argument("--weights", help="DLW1 weights (default: freshly initialized from --seed)")
    p.add_argument("--bit-depth", type=int, help="override raw bit depth, e.g. 10")

    p = sub.add_parser("train", help="train on a dataset directory")
    _common(p, loss=True)
    p.add_argument("--data", required=True, help="dataset root with raw/ and rgb/")
    p.add_argument("--index", help="optional id list file")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-augment", action="store_true", help="disable flip augmentation")
    p.add_argument("--bit-depth", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="metrics CSV for model outputs or a prediction directory")
    _common(p)
    p.add_argument("--data", required=True, help="dataset root with raw/ and rgb/")
    p.add_argument("--index", help="optional id list file")
    p.add_argument("--weights", help="DLW1 weights (default: freshly initialized from --seed)")
    p.add_argument("--pred-dir", help="compare <pred-dir>/<id>.png instead of running the model")
    p.add_argument("--output", help="write the CSV here instead of stdout")
    p.add_argument("--bit-depth", type=int)

    p = sub.add_parser("complexity", help="analytic Mult-Adds and parameter count")
    _common(p)
    p.add_argument("--input", type=parse_extent, default=(2976, 4000), help="HxW (default 2976x4000)")
    p.add_argument("--per-layer", action="store_true", help="print every layer")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, arch=False)
    p.add_argument("--skip-end-to-end", action="store_true")

    p = sub.add_parser("ablate", help="parameter / Mult-Adds table of the four variants")
    _common(p)
    p.add_argument("--input", type=parse_extent, default=(2976, 4000),
                   help="HxW used for Mult-Adds (default 2976x4000)")
    p.add_argument("--probe", type=parse_extent, default=(64, 64),
                   help="HxW of the forward smoke run (default 64x64)")

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    _common(p, arch=False)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=parse_extent, default=(64, 64), help="HxW (default 64x64)")
    return parser


def _file_values(args) -> dict[str, str]:
    if args.config in (None, "default"):
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    values = parse_kv(path.read_text())
    unknown = set(values) - set(ARCH_FLAGS) - set(LOSS_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)} in {path}")
    return values


def resolve_arch(args) -> ArchConfig:
    values = {k: v for k, v in _file_values(args).items() if k in ARCH_FLAGS}
    for key in ARCH_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    return ArchConfig.from_mapping(values) if values else DEFAULT_CONFIG


def resolve_loss(args) -> LossConfig:
    file_values = _file_values(args)
    kw = {k: LOSS_KEYS[k](v) for k, v in file_values.items() if k in LOSS_KEYS}
    for key in LOSS_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            kw[key] = flag
    seed = kw.pop("extractor_seed", 0)
    return LossConfig(extractor=RandomFeatureExtractor(seed), **kw)


def resolve_train(args) -> dict:
    values = {k: TRAIN_KEYS[k](v) for k, v in _file_values(args).items() if k in TRAIN_KEYS}
    defaults = {"lr": 1e-4, "weight_decay": 0.0, "batch_size": 2, "steps": 100, "checkpoint_every": 0}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        values[key] = flag if flag is not None else values.get(key, default)
    return values


def _require_file(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _require_dir(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _params(args, config: ArchConfig):
    if args.weights:
        return load_params(args.weights, config)
    return init_params(config, args.seed)


def cmd_infer(args) -> int:
    _require_file(args.input, "input")
    _require_file(args.weights, "weights")
    config = resolve_arch(args)
    raw = load_raw(args.input, args.bit_depth)
    out = forward(raw.data, config, _params(args, config))
    write_image(out, args.output)
    print(f"wrote {args.output} ({out.shape[2]}x{out.shape[3]}x3)")
    return 0


def cmd_train(args) -> int:
    _require_dir(args.data, "dataset root")
    _require_file(args.index, "index file")
    config, loss_config, hyper = resolve_arch(args), resolve_loss(args), resolve_train(args)
    dataset = PairDataset(args.data, args.index, bit_depth=args.bit_depth)
    pairs = list(dataset)
    start = time.perf_counter()
    result = train(config, loss_config, pairs, hyper["steps"], hyper["batch_size"], args.seed,
                   augment=not args.no_augment, lr=hyper["lr"], weight_decay=hyper["weight_decay"],
                   checkpoint_every=hyper["checkpoint_every"], out_dir=args.out,
                   verbose=not args.quiet)
    final = dataset_loss(result.params, config, loss_config, pairs)
    print(f"trained {hyper['steps']} steps in {time.perf_counter() - start:.1f}s; "
          f"dataset loss {final:.6f}; checkpoint {Path(args.out) / 'final.dlw'}")
    return 0


def cmd_eval(args) -> int:
    _require_dir(args.data, "dataset root")
    _require_dir(args.pred_dir, "prediction directory")
    _require_file(args.index, "index file")
    _require_file(args.weights, "weights")
    dataset = PairDataset(args.data, args.index, bit_depth=args.bit_depth)
    rows = ["id,psnr,ssim,ms_ssim,delta_e00"]
    reports: list[MetricReport] = []
    if args.pred_dir is None:
        config = resolve_arch(args)
        params = _params(args, config)
    for pair in dataset:
        if args.pred_dir is not None:
            pred = load_rgb(Path(args.pred_dir) / f"{pair.id}.png")
        else:
            pred = forward(pair.raw.data, config, params)
        report = evaluate(pair.target, pred)
        reports.append(report)
        rows.append(f"{pair.id},{report.row()}")
    if reports:
        mean = MetricReport(*(float(np.mean([getattr(r, f) for r in reports]))
                              for f in ("psnr", "ssim", "ms_ssim", "delta_e00")))
        rows.append(f"mean,{mean.row()}")
    text = "\n".join(rows) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _check_extent(config: ArchConfig, extent: tuple[int, int], flag: str) -> None:
    try:
        config.check_input(*extent)
    except ShapeError as exc:
        raise UsageError(f"{flag}: {exc}") from None


def cmd_complexity(args) -> int:
    config = resolve_arch(args)
    _check_extent(config, args.input, "--input")
    h, w = args.input
    report = count_model(config, h, w)
    if args.per_layer:
        print(report.format_table())
    else:
        print(f"variant: {config.variant}")
        print(f"input: {h}x{w}x1")
        print(f"Mult-Adds (10^12): {report.tera_mult_adds:.4f}")
        print(f"Params (10^6): {report.mega_params:.4f}")
        print(f"mult_adds: {report.total_mult_adds}")
        print(f"params: {report.total_params}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.seed, include_end_to_end=not args.skip_end_to_end)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  rel_error={r.rel_error:.3e}  tol={r.tolerance:.0e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{PROG}: error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def ablation_rows(base: ArchConfig, size: tuple[int, int], probe: tuple[int, int], seed: int = 0):
    """``(variant, params, mult_adds, forward_ok)`` for every variant, sorted by params."""
    rng = np.random.default_rng(seed)
    raw = Tensor(rng.uniform(0, 1, (1, 1) + probe).astype(np.float32))
    rows = []
    for variant in VARIANTS:
        config = base.with_variant(variant)
        report = count_model(config, *size)
        out = forward(raw, config, init_params(config, seed))
        ok = out.shape == (1, 3) + probe and bool(np.all(np.isfinite(out.data)))
        rows.append((variant, report.total_params, report.total_mult_adds, ok))
    return sorted(rows, key=lambda r: r[1])


def cmd_ablate(args) -> int:
    base = resolve_arch(args)
    _check_extent(base, args.input, "--input")
    _check_extent(base, args.probe, "--probe")
    rows = ablation_rows(base, args.input, args.probe, args.seed)
    h, w = args.input
    print(f"{'variant':<10} {'SCA':>4} {'EAM':>4} {'params':>12} {'Mult-Adds(1e12)':>16} forward@{args.probe[0]}x{args.probe[1]}")
    for variant, params, macs, ok in rows:
        cfg = base.with_variant(variant)
        print(f"{variant:<10} {'yes' if cfg.has_sca else 'no':>4} {'yes' if cfg.has_eam else 'no':>4} "
              f"{params:>12,d} {macs / 1e12:>16.4f} {'ok' if ok else 'FAILED'}")
    print(f"(Mult-Adds at {h}x{w}x1)")
    return 0 if all(r[3] for r in rows) else 1


def cmd_synth(args) -> int:
    h, w = args.size
    if args.count < 1:
        raise UsageError("--count must be positive")
    ids = write_synthetic_dataset(args.out, args.count, h, w, args.seed)
    print(f"wrote {len(ids)} pairs to {args.out}")
    return 0


COMMANDS = {
    "infer": cmd_infer, "train": cmd_train, "eval": cmd_eval, "complexity": cmd_complexity,
    "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "synth-data": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print(f"{PROG}: usage error: --threads must be >= 1", file=sys.stderr)
        return 2
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # malformed values in a config file or override
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
