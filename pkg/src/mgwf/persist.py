"""Bit-exact on-disk formats and run configuration.

Formats (all versioned; unknown versions are rejected, never best-effort
parsed):

  trace      text, one `timestamp<TAB>direction` packet per line with
             round-trippable decimal timestamps; `#` comment lines allowed
  matrix     one ASCII header line `mgwf-mat v1 rows=.. cols=.. dt=.. T=..`
             followed by row-major float64 little-endian bytes
  checkpoint magic line, JSON header (model config + array manifest),
             concatenated raw arrays, trailing sha256 over the content
  manifest   sorted-key JSON describing dataset splits, seeds and defense

Writers are deterministic: the same inputs always produce the same bytes.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import LabelVector, PacketEvent, Trace
from .featurize import NUM_CHANNELS, FeatureChannelMask, FeatureMatrix, slot_count
from .model import ModelConfig, MultiGranularityClassifier
from .synth import FrontParams
from .train import TrainConfig, TrainReport

__all__ = [
    "FormatError",
    "UnknownFormatVersionError",
    "CorruptFileError",
    "CheckpointMismatchError",
    "MissingFileError",
    "write_trace",
    "read_trace",
    "write_feature_matrix",
    "read_feature_matrix",
    "feature_path_for",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
    "file_sha256",
    "ManifestEntry",
    "DatasetManifest",
    "save_manifest",
    "load_manifest",
    "FeaturizeSettings",
    "ModelSettings",
    "TrainSettings",
    "EvalSettings",
    "SynthSettings",
    "GradcheckSettings",
    "RunConfig",
    "load_run_config",
]


class FormatError(ValueError):
    """Base for all file-format problems."""


class UnknownFormatVersionError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class CheckpointMismatchError(FormatError):
    pass


class MissingFileError(FileNotFoundError):
    pass


TRACE_MAGIC = "# mgwf-trace v1"
MATRIX_MAGIC = "mgwf-mat v1"
CHECKPOINT_MAGIC = b"mgwf-ckpt v1"
MANIFEST_FORMAT = "mgwf-dataset"
MANIFEST_VERSION = 1


def _fmt_time(t: float) -> str:
    return np.format_float_positional(t, unique=True, min_digits=6)


# ---------------------------------------------------------------------------
# Trace files


def write_trace(path, trace: Trace):
    path = Path(path)
    lines = [TRACE_MAGIC]
    if trace.origin_class is not None:
        lines.append(f"# origin-class: {trace.origin_class}")
    for e in trace.events:
        lines.append(f"{_fmt_time(e.timestamp)}\t{e.direction}")
    path.write_text("\n".join(lines) + "\n")


def read_trace(path) -> Trace:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"trace file not found: {path}")
    origin = None
    events = []
    with path.open() as f:
        first = f.readline().rstrip("\n")
        if first != TRACE_MAGIC:
            raise UnknownFormatVersionError(f"{path}: expected '{TRACE_MAGIC}' header, got {first!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("origin-class:"):
                    origin = int(body.split(":", 1)[1])
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorruptFileError(f"{path}:{lineno}: expected 'timestamp<TAB>direction'")
            events.append(PacketEvent(float(parts[0]), int(parts[1])))
    return Trace(tuple(events), origin_class=origin)


# ---------------------------------------------------------------------------
# Feature matrix files


def feature_path_for(trace_path) -> Path:
    return Path(trace_path).with_suffix(".mat")


def write_feature_matrix(path, fm: FeatureMatrix):
    header = (
        f"{MATRIX_MAGIC} rows={fm.values.shape[0]} cols={fm.values.shape[1]}"
        f" dt={fm.slot_seconds!r} T={fm.max_seconds!r}\n"
    )
    with Path(path).open("wb") as f:
        f.write(header.encode("ascii"))
        f.write(fm.values.astype("<f8").tobytes(order="C"))


def read_feature_matrix(path) -> FeatureMatrix:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"feature matrix not found: {path}")
    with path.open("rb") as f:
        header = f.readline().decode("ascii", errors="replace").rstrip("\n")
        payload = f.read()
    fields = header.split()
    if fields[:2] != MATRIX_MAGIC.split():
        raise UnknownFormatVersionError(f"{path}: expected '{MATRIX_MAGIC}' header, got {header!r}")
    try:
        kv = dict(part.split("=", 1) for part in fields[2:])
        rows, cols = int(kv["rows"]), int(kv["cols"])
        dt, t_max = float(kv["dt"]), float(kv["T"])
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"{path}: malformed matrix header {header!r}") from exc
    if rows != NUM_CHANNELS:
        raise CorruptFileError(f"{path}: expected {NUM_CHANNELS} rows, header says {rows}")
    expected = rows * cols * 8
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    try:
        return FeatureMatrix(values=values, slot_seconds=dt, max_seconds=t_max)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Checkpoints


_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


def _config_to_json(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def _config_from_json(data: dict) -> ModelConfig:
    kwargs = dict(data)
    for key in ("kernels", "pools", "conv_channels"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def save_checkpoint(path, model: MultiGranularityClassifier):
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    manifest = []
    payload = io.BytesIO()
    for name in sorted(arrays):
        arr = arrays[name]
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"cannot serialize array {name} with dtype {arr.dtype}")
        raw = arr.astype(dtype).tobytes(order="C")
        manifest.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(raw)}
        )
        payload.write(raw)
    header = json.dumps(
        {"config": _config_to_json(model.config), "arrays": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("ascii")

    body = io.BytesIO()
    body.write(CHECKPOINT_MAGIC + b"\n")
    body.write(str(len(header)).encode("ascii") + b"\n")
    body.write(header + b"\n")
    body.write(payload.getvalue())
    digest = hashlib.sha256(body.getvalue()).hexdigest()
    body.write(b"sha256:" + digest.encode("ascii") + b"\n")
    Path(path).write_bytes(body.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0 or blob[:nl] != CHECKPOINT_MAGIC:
        raise UnknownFormatVersionError(f"{path}: not a '{CHECKPOINT_MAGIC.decode()}' checkpoint")
    nl2 = blob.find(b"\n", nl + 1)
    try:
        header_len = int(blob[nl + 1 : nl2])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: bad header length line") from exc
    header_start = nl2 + 1
    header = blob[header_start : header_start + header_len]
    payload_start = header_start + header_len + 1  # skip the newline after the header
    tail = blob.rfind(b"sha256:")
    if tail < 0:
        raise CorruptFileError(f"{path}: missing checksum trailer")
    recorded = blob[tail + len(b"sha256:") : -1].decode("ascii", errors="replace")
    actual = hashlib.sha256(blob[:tail]).hexdigest()
    if recorded != actual:
        raise CorruptFileError(f"{path}: checksum mismatch (file is corrupt)")
    try:
        meta = json.loads(header)
        config = _config_from_json(meta["config"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: bad checkpoint header: {exc}") from exc
    arrays = {}
    offset = payload_start
    for spec in meta["arrays"]:
        dtype = spec["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise CorruptFileError(f"{path}: disallowed dtype {dtype}")
        nbytes = int(spec["nbytes"])
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise CorruptFileError(f"{path}: truncated array payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != tail:
        raise CorruptFileError(f"{path}: {tail - offset} unexplained payload bytes")
    return config, arrays


def load_model(path) -> MultiGranularityClassifier:
    """Rebuild the model from a checkpoint; any shape mismatch fails loudly."""
    config, arrays = load_checkpoint(path)
    float_dtypes = {a.dtype for a in arrays.values() if a.dtype.kind == "f"}
    dtype = torch.float64 if np.dtype("<f8") in float_dtypes else torch.float32
    model = MultiGranularityClassifier(config).to(dtype)
    expected = model.state_dict()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointMismatchError(f"{path}: array names disagree (missing {missing}, extra {extra})")
    state = {}
    for name, tensor in expected.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointMismatchError(
                f"{path}: shape mismatch for {name}: checkpoint {arr.shape}, config implies {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass(frozen=True)
class ManifestEntry:
    trace_path: str  # relative to the manifest directory
    labels: tuple[int, ...]

    def label_vector(self, num_classes: int) -> LabelVector:
        return LabelVector(num_classes=num_classes, active=frozenset(self.labels))


@dataclass(frozen=True)
class DatasetManifest:
    num_classes: int
    tabs: int | str
    seed: int
    offset_max: float
    instances_per_combination: int
    splits: dict[str, tuple[ManifestEntry, ...]]
    defense: FrontParams | None = None

    def entries(self, split: str) -> tuple[ManifestEntry, ...]:
        if split not in self.splits:
            raise KeyError(f"manifest has no split {split!r} (has {sorted(self.splits)})")
        return self.splits[split]


def save_manifest(path, manifest: DatasetManifest):
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_classes": manifest.num_classes,
        "tabs": manifest.tabs,
        "seed": manifest.seed,
        "offset_max": manifest.offset_max,
        "instances_per_combination": manifest.instances_per_combination,
        "defense": None if manifest.defense is None else dataclasses.asdict(manifest.defense),
        "splits": {
            split: [{"trace": e.trace_path, "labels": list(e.labels)} for e in entries]
            for split, entries in manifest.splits.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise UnknownFormatVersionError(
            f"{path}: expected {MANIFEST_FORMAT} v{MANIFEST_VERSION}, got {doc.get('format')!r} v{doc.get('version')!r}"
        )
    num_classes = int(doc["num_classes"])
    splits = {}
    seen_paths = set()
    for split, items in doc["splits"].items():
        entries = []
        for item in items:
            labels = tuple(int(c) for c in item["labels"])
            if any(c < 0 or c >= num_classes for c in labels):
                raise CorruptFileError(f"{path}: label out of range in split {split}: {labels}")
            rel = item["trace"]
            if rel in seen_paths:
                raise CorruptFileError(f"{path}: trace {rel} appears in more than one split")
            seen_paths.add(rel)
            if check_files and not (path.parent / rel).exists():
                raise MissingFileError(f"{path}: referenced trace missing: {rel}")
            entries.append(ManifestEntry(trace_path=rel, labels=labels))
        splits[split] = tuple(entries)
    defense = None if doc.get("defense") is None else FrontParams(**doc["defense"])
    tabs = doc["tabs"]
    return DatasetManifest(
        num_classes=num_classes,
        tabs=tabs if isinstance(tabs, int) else str(tabs),
        seed=int(doc["seed"]),
        offset_max=float(doc["offset_max"]),
        instances_per_combination=int(doc["instances_per_combination"]),
        splits=splits,
        defense=defense,
    )


# ---------------------------------------------------------------------------
# Run configuration (INI-style, flat key = value under sections)


@dataclass(frozen=True)
class FeaturizeSettings:
    slot_seconds: float = 0.02
    max_seconds: float = 160.0
    include_counts: bool = True
    include_transitions: bool = True
    include_intervals: bool = True

    def mask(self) -> FeatureChannelMask:
        return FeatureChannelMask(
            include_counts=self.include_counts,
            include_transitions=self.include_transitions,
            include_intervals=self.include_intervals,
        )

    def num_slots(self) -> int:
        return slot_count(self.max_seconds, self.slot_seconds)


@dataclass(frozen=True)
class ModelSettings:
    embed_dim: int = 256
    kernels: tuple[int, ...] = (15, 11, 7, 5)
    num_blocks: int = 3
    num_heads: int = 8
    w_intra: int = 5
    w_inter: int = 3
    ffn_width: int = 1024
    dropout: float = 0.1
    pools: tuple[int, int, int] = (3, 3, 3)
    conv_channels: tuple[int, ...] | None = None
    enable_inter_granularity: bool = True
    enable_router_interact: bool = True

    def to_model_config(self, num_classes: int, input_length: int, loss_mode: str) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            input_length=input_length,
            kernels=self.kernels,
            embed_dim=self.embed_dim,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            w_intra=self.w_intra,
            w_inter=self.w_inter,
            ffn_width=self.ffn_width,
            dropout=self.dropout,
            conv_channels=self.conv_channels,
            pools=self.pools,
            loss_mode=loss_mode,
            enable_inter_granularity=self.enable_inter_granularity,
            enable_router_interact=self.enable_router_interact,
        )


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    eval_every: int = 1
    early_stop_train_p: float | None = None
    dtype: str = "float64"
    loss_mode: str = "auto"  # resolved against the dataset at train time

    def to_train_config(self, seed: int, loss_mode: str) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            seed=seed,
            loss_mode=loss_mode,
            eval_every=self.eval_every,
            early_stop_train_p=self.early_stop_train_p,
            dtype=self.dtype,
        )


@dataclass(frozen=True)
class EvalSettings:
    k_policy: str = "per-instance"
    ks: tuple[int, ...] = ()

    def __post_init__(self):
        if self.k_policy not in ("fixed", "per-instance"):
            raise ValueError("k_policy must be 'fixed' or 'per-instance'")
        if self.k_policy == "fixed" and not self.ks:
            raise ValueError("fixed k policy needs at least one k")


@dataclass(frozen=True)
class SynthSettings:
    classes: int = 10
    tabs: int | str = 2
    instances_per_combination: int = 5
    offset_max: float = 5.0
    train_frac: float = 0.7
    val_frac: float = 0.1
    defense: FrontParams | None = None


@dataclass(frozen=True)
class GradcheckSettings:
    tolerance: float = 1e-4
    step: float = 1e-5
    seed: int = 7


@dataclass(frozen=True)
class RunConfig:
    featurize: FeaturizeSettings = field(default_factory=FeaturizeSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)

    def resolve_loss_mode(self, manifest: DatasetManifest) -> str:
        if self.train.loss_mode != "auto":
            return self.train.loss_mode
        return "single" if manifest.tabs == 1 else "multi"


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_int_tuple(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read the sectioned key=value config file and apply CLI overrides.

    `overrides` keys are "section.key" strings; values are unparsed text and
    always win over the file.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config file not found: {path}")
        parser.read(path)
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if not name:
            raise ValueError(f"override key must look like section.key, got {key!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    def get(section, name, cast, default):
        if parser.has_option(section, name):
            raw = parser.get(section, name).strip()
            if raw == "":
                return None
            return cast(raw)
        return default

    feat = FeaturizeSettings(
        slot_seconds=get("featurize", "slot_seconds", float, 0.02),
        max_seconds=get("featurize", "max_seconds", float, 160.0),
        include_counts=get("featurize", "include_counts", _parse_bool, True),
        include_transitions=get("featurize", "include_transitions", _parse_bool, True),
        include_intervals=get("featurize", "include_intervals", _parse_bool, True),
    )
    model = ModelSettings(
        embed_dim=get("model", "embed_dim", int, 256),
        kernels=get("model", "kernels", _parse_int_tuple, (15, 11, 7, 5)),
        num_blocks=get("model", "blocks", int, 3),
        num_heads=get("model", "heads", int, 8),
        w_intra=get("model", "w_intra", int, 5),
        w_inter=get("model", "w_inter", int, 3),
        ffn_width=get("model", "ffn_width", int, 1024),
        dropout=get("model", "dropout", float, 0.1),
        pools=get("model", "pools", _parse_int_tuple, (3, 3, 3)),
        conv_channels=get("model", "conv_channels", _parse_int_tuple, None),
        enable_inter_granularity=get("model", "inter_granularity", _parse_bool, True),
        enable_router_interact=get("model", "router_interact", _parse_bool, True),
    )
    train = TrainSettings(
        epochs=get("train", "epochs", int, 80),
        batch_size=get("train", "batch_size", int, 16),
        learning_rate=get("train", "learning_rate", float, 1e-3),
        clip_norm=get("train", "clip_norm", float, 1.0),
        eval_every=get("train", "eval_every", int, 1),
        early_stop_train_p=get("train", "early_stop_train_p", float, None),
        dtype=get("train", "dtype", str, "float64"),
        loss_mode=get("train", "loss_mode", str, "auto"),
    )
    eval_settings = EvalSettings(
        k_policy=get("eval", "k_policy", str, "per-instance"),
        ks=get("eval", "k", _parse_int_tuple, ()) or (),
    )

    def parse_tabs(v: str):
        return v if v.strip() == "mixed" else int(v)

    defense_kind = get("synth", "defense", str, "none")
    defense = None
    if defense_kind == "front":
        defense = FrontParams(
            max_client_dummies=get("synth", "front_max_client_dummies", int, 120),
            max_server_dummies=get("synth", "front_max_server_dummies", int, 120),
            window_min=get("synth", "front_window_min", float, 0.5),
            window_max=get("synth", "front_window_max", float, 2.0),
        )
    elif defense_kind not in ("none", None):
        raise ValueError(f"unknown defense {defense_kind!r} (use 'none' or 'front')")
    synth = SynthSettings(
        classes=get("synth", "classes", int, 10),
        tabs=get("synth", "tabs", parse_tabs, 2),
        instances_per_combination=get("synth", "instances_per_combination", int, 5),
        offset_max=get("synth", "offset_max", float, 5.0),
        train_frac=get("synth", "train_frac", float, 0.7),
        val_frac=get("synth", "val_frac", float, 0.1),
        defense=defense,
    )
    gradcheck = GradcheckSettings(
        tolerance=get("gradcheck", "tolerance", float, 1e-4),
        step=get("gradcheck", "step", float, 1e-5),
        seed=get("gradcheck", "seed", int, 7),
    )
    return RunConfig(
        featurize=feat,
        model=model,
        train=train,
        eval=eval_settings,
        synth=synth,
        gradcheck=gradcheck,
    )
