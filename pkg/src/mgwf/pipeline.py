"""End-to-end wiring: manifests -> features -> training runs -> evaluation."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .featurize import featurize
from .metrics import EvalResult, compute_eval
from .model import MultiGranularityClassifier
from .persist import (
    DatasetManifest,
    EvalSettings,
    FeaturizeSettings,
    FormatError,
    ModelSettings,
    RunConfig,
    feature_path_for,
    load_manifest,
    read_feature_matrix,
    read_trace,
    save_checkpoint,
    write_feature_matrix,
)
from .train import Bundle, TrainReport, model_scores, train_loop

__all__ = [
    "featurize_manifest",
    "load_bundle",
    "evaluate_split",
    "evaluate_bundle",
    "train_on_manifest",
    "ablation_variant",
    "ABLATION_VARIANTS",
]


def featurize_manifest(
    manifest_dir, settings: FeaturizeSettings, splits: tuple[str, ...] | None = None
) -> list[Path]:
    """Write a .mat file beside every trace of the chosen splits; idempotent."""
    manifest_dir = Path(manifest_dir)
    manifest = load_manifest(manifest_dir / "manifest.json")
    mask = settings.mask()
    written = []
    for split in splits or sorted(manifest.splits):
        for entry in manifest.entries(split):
            trace = read_trace(manifest_dir / entry.trace_path)
            fm = featurize(trace, settings.slot_seconds, settings.max_seconds, mask)
            out = feature_path_for(manifest_dir / entry.trace_path)
            write_feature_matrix(out, fm)
            written.append(out)
    return written


def load_bundle(
    manifest_dir,
    manifest: DatasetManifest,
    split: str,
    settings: FeaturizeSettings,
) -> Bundle:
    """Load one split's features, computing any matrix that was not materialized.

    A materialized matrix whose slotting parameters disagree with `settings`
    is an error: silently mixing featurizations would poison comparisons.
    """
    manifest_dir = Path(manifest_dir)
    mask = settings.mask()
    feats = []
    labels = []
    for entry in manifest.entries(split):
        mat_path = feature_path_for(manifest_dir / entry.trace_path)
        if mat_path.exists():
            fm = read_feature_matrix(mat_path)
            if fm.slot_seconds != settings.slot_seconds or fm.max_seconds != settings.max_seconds:
                raise FormatError(
                    f"{mat_path}: featurized with dt={fm.slot_seconds} T={fm.max_seconds}, "
                    f"run config wants dt={settings.slot_seconds} T={settings.max_seconds}; re-run featurize"
                )
            values = fm.values
            rows = mask.zeroed_rows()
            if rows:
                values = values.copy()
                values[list(rows)] = 0.0
        else:
            values = featurize(
                read_trace(manifest_dir / entry.trace_path),
                settings.slot_seconds,
                settings.max_seconds,
                mask,
            ).values
        feats.append(values)
        labels.append(entry.label_vector(manifest.num_classes))
    if not feats:
        raise ValueError(f"split {split!r} is empty")
    return Bundle(features=np.stack(feats), labels=labels)


def evaluate_bundle(
    model: MultiGranularityClassifier, bundle: Bundle, settings: EvalSettings
) -> EvalResult:
    scores = model_scores(model, bundle.features)
    return compute_eval(scores, bundle.labels, k_policy=settings.k_policy, ks=settings.ks)


def evaluate_split(
    model: MultiGranularityClassifier,
    manifest_dir,
    split: str,
    run_config: RunConfig,
) -> EvalResult:
    manifest = load_manifest(Path(manifest_dir) / "manifest.json")
    bundle = load_bundle(manifest_dir, manifest, split, run_config.featurize)
    return evaluate_bundle(model, bundle, run_config.eval)


def train_on_manifest(
    manifest_dir,
    run_config: RunConfig,
    seed: int,
    out_dir=None,
    progress=None,
) -> tuple[MultiGranularityClassifier, TrainReport]:
    """Train per the run config; optionally write checkpoint + report to out_dir."""
    manifest_dir = Path(manifest_dir)
    manifest = load_manifest(manifest_dir / "manifest.json")
    loss_mode = run_config.resolve_loss_mode(manifest)
    train_bundle = load_bundle(manifest_dir, manifest, "train", run_config.featurize)
    val_bundle = None
    if manifest.splits.get("val"):
        val_bundle = load_bundle(manifest_dir, manifest, "val", run_config.featurize)

    model_config = run_config.model.to_model_config(
        num_classes=manifest.num_classes,
        input_length=run_config.featurize.num_slots(),
        loss_mode=loss_mode,
    )
    train_config = run_config.train.to_train_config(seed=seed, loss_mode=loss_mode)
    model, report = train_loop(train_bundle, model_config, train_config, val_bundle, progress)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(ckpt, model)
        report.checkpoint_path = str(ckpt)
        (out_dir / "train_report.txt").write_text(report.to_text())
    return model, report


ABLATION_VARIANTS = ("full", "no_ri", "no_ri_gi", "single_g")


def ablation_variant(settings: ModelSettings, variant: str) -> ModelSettings:
    """Model settings for the architecture-sensitivity variants.

    full       the model as configured
    no_ri      router interaction sublayer removed
    no_ri_gi   router and inter-granularity interaction both removed
    single_g   one branch (the first kernel) with intra-granularity attention only
    """
    if variant == "full":
        return settings
    if variant == "no_ri":
        return replace(settings, enable_router_interact=False)
    if variant == "no_ri_gi":
        return replace(settings, enable_router_interact=False, enable_inter_granularity=False)
    if variant == "single_g":
        return replace(
            settings,
            kernels=settings.kernels[:1],
            enable_router_interact=False,
            enable_inter_granularity=False,
        )
    raise ValueError(f"unknown variant {variant!r} (choose from {ABLATION_VARIANTS})")
