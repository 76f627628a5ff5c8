"""Command-line harness: ``uamf <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
Seed precedence: ``--seed`` flag, then ``UAMF_SEED``, then the config file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "UAMF_SEED"

log = logging.getLogger("uamf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _resolve_seed(flag: Optional[int], fallback: int) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return env if env is not None else fallback


def _load(args):
    from .config import HarnessConfig, load_config

    cfg = load_config(args.config) if args.config else HarnessConfig()
    cfg = cfg.with_seed(_resolve_seed(getattr(args, "seed", None), cfg.train.seed))
    if getattr(args, "run_dir", None):
        cfg.output.run_dir = args.run_dir
    train_overrides = {k: getattr(args, k, None) for k in ("epochs", "max_steps")}
    for key, value in train_overrides.items():
        if value is not None:
            setattr(cfg.train, key, value)
    cfg.train.__post_init__()
    base = Path(args.config).parent if args.config else None
    return cfg, base


# -- subcommands -----------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .events import SynthConfig, write_synth_tree

    seed = _resolve_seed(args.seed, 0)
    cfg = SynthConfig(num_classes=args.classes, width=args.width, height=args.height)
    manifest = write_synth_tree(args.out, args.per_class, seed, cfg)
    print(f"wrote {args.per_class * args.classes} streams, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import save_resolved
    from .training import build_model, train

    cfg, base = _load(args)
    run_dir = Path(cfg.output.run_dir)
    save_resolved(cfg, run_dir)
    data = cfg.data.load(base)
    train_set, val_set = data.datasets(cfg.model.num_frames, cfg.model.input_hw)
    model = build_model(cfg.model, cfg.train.seed)
    report = train(model, train_set, cfg.train, val_set, run_dir)
    report.write_csv(run_dir / "report.csv")
    report.write_json(run_dir / "report.json")
    last = report.epochs[-1]
    print(f"epochs {len(report.epochs)} final loss {last.train_loss:.6f} "
          f"train top1 {last.train_top1} best val top1 {report.best_val_top1}")
    print(f"best checkpoint {report.best_checkpoint}")
    return EXIT_OK


def _config_for_checkpoint(args, ckpt_path: Path):
    """Explicit --config, else the resolved config saved beside the run."""
    from .config import HarnessConfig

    if args.config:
        return _load(args)
    resolved = ckpt_path.parent.parent / "config.resolved.json"
    if resolved.exists():
        args.config = str(resolved)
        return _load(args)
    return HarnessConfig(), None


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, model_from_checkpoint
    from .training import ArrayDataset, evaluate_top1

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    if args.manifest:
        from .events import read_manifest

        dataset = ArrayDataset.from_streams(read_manifest(args.manifest), model.cfg.num_frames, model.cfg.input_hw)
    else:
        cfg, base = _config_for_checkpoint(args, ckpt_path)
        train_set, val_set = cfg.data.load(base).datasets(model.cfg.num_frames, model.cfg.input_hw)
        dataset = train_set if args.split == "train" or val_set is None else val_set
    top1 = evaluate_top1(model, dataset)
    print(f"top1 {top1!r} on {len(dataset)} samples")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .config import save_resolved
    from .training import run_ablation

    cfg, base = _load(args)
    run_dir = Path(cfg.output.run_dir)
    save_resolved(cfg, run_dir)
    results = run_ablation(cfg.data.load(base), cfg.model, cfg.train, out_csv=run_dir / "ablation.csv",
                           run_dir=run_dir)
    for r in results:
        print(f"row {r.row.number}: top1 {100 * r.top1:.2f} (reference {r.row.paper_result:.2f}) "
              f"params {r.num_parameters}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .config import save_resolved
    from .training import run_sweep

    cfg, base = _load(args)
    run_dir = Path(cfg.output.run_dir)
    save_resolved(cfg, run_dir)
    rows = run_sweep(args.axis, cfg.data.load(base), cfg.model, cfg.train, values=args.values,
                     out_csv=run_dir / f"sweep_{args.axis}.csv", run_dir=run_dir)
    for value, top1 in rows:
        print(f"{args.axis}={value}: top1 {100 * top1:.2f}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    from .checkpoint import load_checkpoint, model_from_checkpoint
    from .export import export_feature_maps

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    cfg, base = _config_for_checkpoint(args, ckpt_path)
    train_set, val_set = cfg.data.load(base).datasets(model.cfg.num_frames, model.cfg.input_hw)
    dataset = val_set if val_set is not None else train_set
    out = Path(args.out) if args.out else Path(cfg.output.run_dir) / "exports"
    export_feature_maps(model, dataset.x[: args.count], out)
    print(f"exported {min(args.count, len(dataset))} samples to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = _resolve_seed(args.seed, 0)
    results = run_suite(seed, include_model=not args.no_model)
    worst = 0.0
    for r in results:
        print(f"{r.name:<28s} max rel err {r.max_rel_error:.3e}  skipped {r.skipped}")
        worst = max(worst, r.max_rel_error)
    print(f"max relative error {worst:.3e}")
    if not np.isfinite(worst) or worst >= args.tolerance:
        print(f"FAILED: exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uamf", description="Event-stream classifier harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", help="write synthetic moving-bar .evs files and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--seed", type=int)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(func=cmd_synth_data)

    def run_flags(q):
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--run-dir")
        q.add_argument("--epochs", type=int)
        q.add_argument("--max-steps", type=int)

    s = sub.add_parser("train", help="train one model")
    run_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="top-1 of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--manifest", help="evaluate these streams instead of the config's data")
    s.add_argument("--split", choices=("val", "train"), default="val")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train the five component-ablation rows")
    run_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    run_flags(s)
    s.add_argument("--axis", required=True, choices=("tokens", "token_dim", "frames", "blocks"))
    s.add_argument("--values", type=int, nargs="+")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("export-features", help="dump per-block feature maps and token norms")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_export_features)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    s.add_argument("--seed", type=int)
    s.add_argument("--no-model", action="store_true")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
