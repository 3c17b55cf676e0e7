"""Command-line entry points: ``dsfuse synth|fuse|train|eval|gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or
malformed data (including mismatched volume dims), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DSFuseError, FormatError, NumericalError, ShapeError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-3

log = logging.getLogger("dsfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def exit_code(exc: BaseException) -> int:
    """Map an exception to the exit code reported for it."""
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, ShapeError, OSError)):
        return EXIT_DATA
    # bad arguments, bad configs and unsatisfiable phantom settings
    return EXIT_USAGE


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


# --- synth ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import PhantomConfig, generate_dataset, split_sizes

    cfg = PhantomConfig.from_dict(_read_json(args.config)) if args.config else PhantomConfig()
    if args.count < 1:
        raise UsageError(f"--count must be at least 1, got {args.count}")
    manifest = generate_dataset(cfg, args.count, args.seed, args.out)
    n_train, n_val, n_test = split_sizes(args.count)
    print(f"manifest={manifest}")
    print(f"cases={args.count} train={n_train} val={n_val} test={n_test}")
    return EXIT_OK


# --- fuse ----------------------------------------------------------------

def _load_prob(path):
    from .volume import load_volume

    vol = load_volume(path)
    d = vol.data
    if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
        raise FormatError(f"{path} is not a probability map (values outside [0, 1])")
    return vol


def cmd_fuse(args) -> int:
    from .fusion import baseline_fuse, binarize, fuse_volumes
    from .volume import save_volume

    seg_a, seg_b = _load_prob(args.prob_a), _load_prob(args.prob_b)
    result = fuse_volumes(seg_a, seg_b)
    fused = result.fused if args.strategy == "dempster" else baseline_fuse(args.strategy, seg_a, seg_b)
    mask = binarize(fused, args.threshold)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [save_volume(fused, f"{prefix}_prob"),
             save_volume(result.conflict, f"{prefix}_conflict"),
             save_volume(mask, f"{prefix}_mask")]
    print(f"strategy={args.strategy}")
    print(f"mean_conflict={float(np.mean(result.conflict.data, dtype=np.float64)):.6f}")
    print(f"foreground_fraction={float(np.mean(mask.data, dtype=np.float64)):.6f}")
    for p in paths:
        print(f"wrote={p}")
    return EXIT_OK


# --- train ---------------------------------------------------------------

def _train_config(args):
    from .training import AugmentConfig, TrainConfig

    d = _read_json(args.config) if args.config else {}
    overrides = {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
                 "warmup_epochs": args.warmup_epochs, "batch_size": args.batch_size,
                 "optimizer": args.optimizer}
    d.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig.from_dict(d)
    if args.no_augment:
        from dataclasses import replace

        cfg = replace(cfg, augment=AugmentConfig(affine=False, elastic=False))
    return cfg


def cmd_train(args) -> int:
    from .training import train

    cfg = _train_config(args)
    out = Path(args.out)
    _, _, history = train(cfg, args.manifest, out, resume=args.resume,
                          evaluate_test=not args.skip_test)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    last = history.epochs[-1] if history.epochs else None
    print(f"epochs={len(history.epochs)} best_epoch={history.best_epoch} "
          f"stopped_early={history.stopped_early}")
    if last is not None:
        print(f"loss_all={last.loss_all:.6f} val_loss_all={last.val_loss_all:.6f}")
    if history.test is not None:
        print(history.test.format())
        (out / "test_report.txt").write_text(history.test.key_values())
        (out / "test_report.csv").write_text(history.test.to_csv())
    return EXIT_OK


# --- eval ----------------------------------------------------------------

def cmd_eval(args) -> int:
    from .nn import load_checkpoint
    from .training import evaluate

    if args.run:
        path_a, path_b = Path(args.run) / "best_a.ckpt", Path(args.run) / "best_b.ckpt"
    elif args.checkpoint_a and args.checkpoint_b:
        path_a, path_b = Path(args.checkpoint_a), Path(args.checkpoint_b)
    else:
        raise UsageError("give --run DIR or both --checkpoint-a and --checkpoint-b")
    model_a, model_b = load_checkpoint(path_a), load_checkpoint(path_b)
    table = evaluate(model_a, model_b, args.manifest, args.split, args.threshold)
    print(table.format())
    print(table.key_values(), end="")
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(table.key_values())
        report.with_suffix(".csv").write_text(table.to_csv())
    return EXIT_OK


# --- gradcheck -----------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .nn import ModelConfig, init_model
    from .training.check import graph_grad_check

    mcfg = ModelConfig(levels=args.levels, base_channels=args.base_channels)
    if args.size < 1 or args.size % mcfg.divisor:
        raise UsageError(f"--size must be a positive multiple of {mcfg.divisor}")
    rng = np.random.default_rng(args.seed)
    n = args.size
    x_a, x_b = rng.standard_normal((2, n, n, n))
    mask = np.zeros((n, n, n))
    lo = n // 4
    mask[lo:n - lo, lo:n - lo, lo:n - lo] = 1.0
    model_a = init_model(mcfg, args.seed, np.float64)
    model_b = init_model(mcfg, args.seed + 1, np.float64)
    fd_dtype = None if args.no_extended else np.longdouble
    rep = graph_grad_check(model_a, model_b, x_a, x_b, mask, h=args.step,
                           n_samples=args.samples, seed=args.seed, fd_dtype=fd_dtype)
    print(f"max_rel_err={rep.max_rel_err:.3e}")
    print(f"checked={rep.n_checked} kinks={rep.n_kinks} worst={rep.worst_param}{list(rep.worst_index)}")
    return EXIT_OK if rep.max_rel_err <= GRADCHECK_LIMIT else EXIT_NUMERIC


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .fusion import STRATEGIES

    common = _Parser(add_help=False)
    # SUPPRESS keeps a subcommand from resetting a flag given before it
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap BLAS/OpenMP threads; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")

    parser = _Parser(prog="dsfuse", parents=[common],
                     description="Evidential fusion of two-modality segmentation maps.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset",
                       description="Write synthetic paired-modality cases and a manifest.")
    p.add_argument("--config", help="JSON file with phantom options")
    p.add_argument("--count", type=int, default=60, help="number of cases (default 60)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", parents=[common], help="fuse two probability volumes",
                       description="Fuse two probability maps and write PROB, CONFLICT and MASK volumes.")
    p.add_argument("prob_a", help="modality-A probability volume (.json header)")
    p.add_argument("prob_b", help="modality-B probability volume (.json header)")
    p.add_argument("--out", required=True, help="output prefix; writes <out>_prob/_conflict/_mask")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")
    p.add_argument("--strategy", choices=STRATEGIES, default="dempster",
                   help="combination rule (default dempster)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", parents=[common], help="train both branches jointly",
                       description="Train the two branches through the fusion layer.")
    p.add_argument("--manifest", required=True, help="dataset manifest or its directory")
    p.add_argument("--config", help="JSON file with training options")
    p.add_argument("--out", required=True, help="run directory for checkpoints and history")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--epochs", type=int, help="overrides the config epoch count")
    p.add_argument("--lr", type=float, help="overrides the config learning rate")
    p.add_argument("--batch-size", type=int, help="overrides the config batch size")
    p.add_argument("--optimizer", choices=("adam", "sgd"), help="overrides the config optimizer")
    p.add_argument("--warmup-epochs", type=int, help="epochs trained on the Dice terms only")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--resume", action="store_true", help="continue from the run directory")
    p.add_argument("--skip-test", action="store_true", help="do not evaluate the test split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score trained branches",
                       description="Print per-method Dice, precision and recall on a split.")
    p.add_argument("--manifest", required=True, help="dataset manifest or its directory")
    p.add_argument("--run", help="run directory holding best_a.ckpt and best_b.ckpt")
    p.add_argument("--checkpoint-a", help="branch-A checkpoint")
    p.add_argument("--checkpoint-b", help="branch-B checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split to score (default test)")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")
    p.add_argument("--report", help="write key=value report here and a CSV table next to it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the graph",
                       description="Check backprop through both branches, fusion and loss.")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs (default 0)")
    p.add_argument("--size", type=int, default=8, help="cube edge of the input (default 8)")
    p.add_argument("--levels", type=int, default=2, help="model depth (default 2)")
    p.add_argument("--base-channels", type=int, default=2, help="first-level width (default 2)")
    p.add_argument("--samples", type=int, default=200, help="parameters to check (default 200)")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("--no-extended", action="store_true",
                   help="evaluate differences in float64 instead of long double")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    verbose = getattr(args, "verbose", False)
    threads = getattr(args, "threads", None)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if threads is not None and threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(threads):
            return args.func(args)
    except (DSFuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


if __name__ == "__main__":
    sys.exit(main())
