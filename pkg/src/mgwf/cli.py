"""Command-line entry points: synth, featurize, train, eval, gradcheck.

Every command exits 0 on success; failures print a single machine-parseable
line `mgwf-error<TAB><kind><TAB><detail>` to stderr and exit nonzero. Values
come from the sectioned config file (see persist.load_run_config) and any
flag, including the generic `--set section.key=value`, overrides the file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import persist
from .core import RngHandle
from .dataset import build_dataset
from .pipeline import evaluate_split, featurize_manifest, train_on_manifest
from .train import default_gradcheck_setup, grad_check


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _collect_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError("bad-flag", f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def _run_config(args, extra: dict[str, str] | None = None) -> persist.RunConfig:
    overrides = _collect_overrides(args)
    overrides.update(extra or {})
    return persist.load_run_config(getattr(args, "config", None), overrides)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="run config file (key = value sections)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config value")


def cmd_synth(args) -> int:
    extra = {}
    if args.classes is not None:
        extra["synth.classes"] = str(args.classes)
    if args.tabs is not None:
        extra["synth.tabs"] = args.tabs
    if args.instances is not None:
        extra["synth.instances_per_combination"] = str(args.instances)
    cfg = _run_config(args, extra).synth
    manifest = build_dataset(
        num_classes=cfg.classes,
        tabs=cfg.tabs,
        instances_per_combination=cfg.instances_per_combination,
        out_dir=args.out_dir,
        rng=RngHandle(args.seed),
        defense=cfg.defense,
        offset_max=cfg.offset_max,
        train_frac=cfg.train_frac,
        val_frac=cfg.val_frac,
    )
    sizes = {split: len(entries) for split, entries in manifest.splits.items()}
    print(f"wrote dataset to {args.out_dir} (classes={cfg.classes} tabs={cfg.tabs} sizes={sizes})")
    return 0


def cmd_featurize(args) -> int:
    run = _run_config(args)
    written = featurize_manifest(args.out_dir, run.featurize, splits=args.splits)
    print(f"featurized {len(written)} traces (L={run.featurize.num_slots()}) under {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    out_dir = Path(args.out_dir)

    def progress(stats):
        parts = [f"epoch {stats.epoch}", f"loss {stats.loss:.6f}"]
        if stats.train_p is not None:
            parts.append(f"train_p {stats.train_p:.4f}")
        if stats.val_p is not None:
            parts.append(f"val_p {stats.val_p:.4f}")
        print("  ".join(parts))

    _, report = train_on_manifest(
        args.data_dir, run, seed=args.seed, out_dir=out_dir,
        progress=progress if not args.quiet else None,
    )
    print(f"checkpoint: {report.checkpoint_path}")
    print(f"report: {out_dir / 'train_report.txt'} ({report.wall_time_seconds:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    eval_overrides = {}
    if args.k:
        eval_overrides["eval.k"] = ",".join(str(k) for k in args.k)
        eval_overrides["eval.k_policy"] = "fixed"
    if args.k_policy:
        eval_overrides["eval.k_policy"] = args.k_policy
    if eval_overrides:
        run = _run_config(args, eval_overrides)

    model = persist.load_model(args.checkpoint)
    manifest = persist.load_manifest(Path(args.data_dir) / "manifest.json")
    expected_l = run.featurize.num_slots()
    if model.config.input_length != expected_l:
        raise CommandError(
            "checkpoint-config-mismatch",
            f"checkpoint expects L={model.config.input_length}, featurize config gives L={expected_l}",
        )
    if model.config.num_classes != manifest.num_classes:
        raise CommandError(
            "checkpoint-config-mismatch",
            f"checkpoint has {model.config.num_classes} classes, dataset has {manifest.num_classes}",
        )
    result = evaluate_split(model, args.data_dir, args.split, run)
    table = result.to_table()
    print(table, end="")
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.tsv").write_text(table)
    return 0


def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    gc = run.gradcheck
    tolerance = args.tolerance if args.tolerance is not None else gc.tolerance
    model, m, label, loss_mode = default_gradcheck_setup(seed=gc.seed)
    report = grad_check(model, m, label, loss_mode, step=gc.step)
    print(report.to_text(tolerance), end="")
    return 0 if report.passed(tolerance) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgwf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    _add_common(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--tabs", type=str, default=None, help="tab count or 'mixed'")
    p.add_argument("--instances", type=int, default=None, help="instances per class combination")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write slot-feature matrices beside the dataset's traces")
    _add_common(p)
    p.add_argument("--out-dir", type=Path, required=True, help="dataset directory (holds manifest.json)")
    p.add_argument("--splits", nargs="*", default=None)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, required=True, help="dataset directory")
    p.add_argument("--out-dir", type=Path, required=True, help="where checkpoint and report go")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, action="append", help="fixed K (repeatable)")
    p.add_argument("--k-policy", choices=("fixed", "per-instance"), default=None)
    p.add_argument("--out-dir", type=Path, default=None, help="also write the table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny reference model")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"mgwf-error\t{exc.kind}\t{exc}", file=sys.stderr)
        return 2
    except persist.UnknownFormatVersionError as exc:
        print(f"mgwf-error\tunknown-format-version\t{exc}", file=sys.stderr)
        return 2
    except persist.CheckpointMismatchError as exc:
        print(f"mgwf-error\tcheckpoint-config-mismatch\t{exc}", file=sys.stderr)
        return 2
    except persist.CorruptFileError as exc:
        print(f"mgwf-error\tcorrupt-file\t{exc}", file=sys.stderr)
        return 2
    except (persist.MissingFileError, FileNotFoundError) as exc:
        print(f"mgwf-error\tmissing-file\t{exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mgwf-error\tinvalid-config\t{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
