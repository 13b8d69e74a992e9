"""Reproducible dataset generation: profiles -> per-instance mixed traces -> files.

Instance i draws everything from rng streams forked on the instance index,
so datasets regenerate byte-identically from (config, seed) and generation
could be parallelized per instance without changing the output.
"""

from __future__ import annotations

import math
from pathlib import Path

from .core import RngHandle, rng_fork
from .persist import DatasetManifest, ManifestEntry, save_manifest, write_trace
from .synth import FrontParams, front_pad, gen_site_profile, gen_trace, mix_tabs

__all__ = ["build_dataset", "MIXED_TAB_CHOICES"]

MIXED_TAB_CHOICES = (2, 3, 4, 5)


def _total_instances(num_classes: int, tabs, instances_per_combination: int) -> int:
    # For fixed tab counts the dataset is sized as instances-per-combination
    # times the number of class combinations (combinations themselves are
    # sampled with replacement). "mixed" uses the 2-tab combination count.
    k = 2 if tabs == "mixed" else tabs
    return instances_per_combination * math.comb(num_classes, k)


def build_dataset(
    num_classes: int,
    tabs,
    instances_per_combination: int,
    out_dir,
    rng: RngHandle,
    defense: FrontParams | None = None,
    offset_max: float = 5.0,
    train_frac: float = 0.7,
    val_frac: float = 0.1,
) -> DatasetManifest:
    """Generate train/val/test trace files plus a manifest under out_dir."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if tabs == "mixed":
        if num_classes < max(MIXED_TAB_CHOICES):
            raise ValueError(f"mixed tabs needs at least {max(MIXED_TAB_CHOICES)} classes")
    elif isinstance(tabs, int):
        if not (1 <= tabs <= num_classes):
            raise ValueError(f"tabs must lie in [1, {num_classes}], got {tabs}")
    else:
        raise ValueError(f"tabs must be an integer or 'mixed', got {tabs!r}")
    if instances_per_combination < 1:
        raise ValueError("instances_per_combination must be >= 1")
    if offset_max < 0:
        raise ValueError("offset_max must be >= 0")
    if not (0 <= train_frac <= 1 and 0 <= val_frac <= 1 and train_frac + val_frac <= 1):
        raise ValueError("split fractions must be non-negative and sum to at most 1")

    out_dir = Path(out_dir)
    profiles_rng = rng_fork(rng, "profiles")
    profiles = [gen_site_profile(c, profiles_rng) for c in range(num_classes)]

    total = _total_instances(num_classes, tabs, instances_per_combination)
    n_train = int(total * train_frac)
    n_val = int(total * val_frac)
    boundaries = (("train", 0, n_train), ("val", n_train, n_train + n_val), ("test", n_train + n_val, total))

    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    for split, lo, hi in boundaries:
        split_dir = out_dir / "traces" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(lo, hi):
            inst = rng_fork(rng, f"instance/{i}")
            g = rng_fork(inst, "draw").generator()
            k = tabs if isinstance(tabs, int) else int(g.choice(MIXED_TAB_CHOICES))
            classes = sorted(int(c) for c in g.choice(num_classes, size=k, replace=False))
            offsets = g.uniform(0.0, offset_max, size=k) if offset_max > 0 else [0.0] * k
            tab_traces = [
                gen_trace(profiles[c], rng_fork(inst, f"tab/{j}")) for j, c in enumerate(classes)
            ]
            mixed, label = mix_tabs(tab_traces, offsets, num_classes)
            if defense is not None:
                mixed = front_pad(mixed, defense, rng_fork(inst, "front"))
            rel = f"traces/{split}/{i:05d}.trace"
            write_trace(out_dir / rel, mixed)
            splits[split].append(ManifestEntry(trace_path=rel, labels=tuple(sorted(label.active))))

    manifest = DatasetManifest(
        num_classes=num_classes,
        tabs=tabs,
        seed=rng.seed,
        offset_max=offset_max,
        instances_per_combination=instances_per_combination,
        splits={k: tuple(v) for k, v in splits.items()},
        defense=defense,
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest
