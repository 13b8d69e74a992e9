"""Losses, the training loop, and the finite-difference gradient validator."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import LabelVector, RngHandle, rng_fork
from .model import TORCH_DTYPES, ModelConfig, MultiGranularityClassifier, build_model

__all__ = [
    "TrainConfig",
    "TrainReport",
    "EpochStats",
    "TrainingDivergedError",
    "loss_single",
    "loss_multi",
    "loss_single_batch",
    "loss_multi_batch",
    "train_loop",
    "grad_check",
    "GradCheckReport",
    "analytic_gradients",
    "fd_gradient",
    "max_relative_error",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0
    loss_mode: str = "multi"
    eval_every: int = 1               # epochs between metric reports
    early_stop_train_p: float | None = None  # stop once train P@|active| reaches this
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate must be >= 0 and clip_norm > 0")
        if self.loss_mode not in ("single", "multi"):
            raise ValueError("loss_mode must be 'single' or 'multi'")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.dtype not in TORCH_DTYPES:
            raise ValueError(f"dtype must be one of {sorted(TORCH_DTYPES)}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_p: float | None = None
    train_map: float | None = None
    val_p: float | None = None
    val_map: float | None = None


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_seconds: float = 0.0
    checkpoint_path: str | None = None

    def to_text(self) -> str:
        """Line-oriented report; wall time is deliberately not serialized so
        reruns from the same seed produce byte-identical files."""
        def fmt(v):
            return "-" if v is None else f"{v:.10g}"

        lines = ["epoch\tloss\ttrain_p\ttrain_map\tval_p\tval_map"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch}\t{fmt(e.loss)}\t{fmt(e.train_p)}\t{fmt(e.train_map)}"
                f"\t{fmt(e.val_p)}\t{fmt(e.val_map)}"
            )
        return "\n".join(lines) + "\n"


def _single_target(label: LabelVector) -> int:
    if label.cardinality != 1:
        raise ValueError("single-tab loss needs exactly one active class")
    return next(iter(label.active))


def loss_single(logits, label: LabelVector) -> torch.Tensor:
    """Cross-entropy of the softmax over logits against the one active class."""
    t = logits if isinstance(logits, torch.Tensor) else torch.as_tensor(logits, dtype=torch.float64)
    c = _single_target(label)
    return torch.logsumexp(t, dim=-1) - t[..., c]


def loss_multi(logits, label: LabelVector) -> torch.Tensor:
    """Per-class binary cross-entropy with logits, averaged over classes.

    Uses the log-sum form max(o,0) - o*y + log(1 + exp(-|o|)) so saturated
    logits neither overflow nor lose the gradient path.
    """
    t = logits if isinstance(logits, torch.Tensor) else torch.as_tensor(logits, dtype=torch.float64)
    y = torch.as_tensor(label.to_multi_hot(), dtype=t.dtype)
    return (torch.clamp(t, min=0) - t * y + torch.log1p(torch.exp(-torch.abs(t)))).mean()


def loss_single_batch(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    per = torch.logsumexp(logits, dim=1) - logits[torch.arange(logits.shape[0]), targets]
    return per.mean()


def loss_multi_batch(logits: torch.Tensor, multi_hot: torch.Tensor) -> torch.Tensor:
    y = multi_hot.to(logits.dtype)
    per = torch.clamp(logits, min=0) - logits * y + torch.log1p(torch.exp(-torch.abs(logits)))
    return per.mean()


@dataclass
class Bundle:
    """An in-memory split: stacked feature matrices plus their labels."""

    features: np.ndarray          # (n, 6, L) float64
    labels: list[LabelVector]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3 or self.features.shape[0] != len(self.labels):
            raise ValueError("features must be (n, channels, L) with one label per instance")

    def __len__(self) -> int:
        return len(self.labels)

    def target_indices(self) -> np.ndarray:
        return np.array([_single_target(y) for y in self.labels], dtype=np.int64)

    def multi_hot(self) -> np.ndarray:
        return np.stack([y.to_multi_hot() for y in self.labels])


def model_scores(model: MultiGranularityClassifier, features, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for a stack of feature matrices."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(features)).to(dtype)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(model(x[start : start + batch_size]).double().numpy())
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


def _bundle_metrics(model, bundle: Bundle, cache: dict) -> tuple[float, float]:
    from .metrics import compute_eval

    scores = model_scores(model, cache["tensor"], batch_size=cache["batch"])
    res = compute_eval(scores, bundle.labels, k_policy="per-instance")
    row = res.rows[0]
    return row.precision, row.mean_ap


def train_loop(
    train_bundle: Bundle,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_bundle: Bundle | None = None,
    progress=None,
) -> tuple[MultiGranularityClassifier, TrainReport]:
    """Adam with gradient-norm clipping over shuffled minibatches.

    Deterministic for a fixed TrainConfig.seed: model init, dropout masks,
    and shuffles all derive from it. Metrics are computed every
    `eval_every` epochs (and on the final epoch) with per-instance K; the
    early-stop rule is checked only on those epochs.
    """
    if model_config.loss_mode != train_config.loss_mode:
        raise ValueError("model and train loss modes disagree")
    cardinalities = {y.cardinality for y in train_bundle.labels}
    if train_config.loss_mode == "single" and cardinalities != {1}:
        raise ValueError("single-tab loss mode needs single-label data")

    start = time.monotonic()
    dtype = TORCH_DTYPES[train_config.dtype]
    root = RngHandle(train_config.seed)
    model = build_model(model_config, rng_fork(root, "init"), dtype=dtype)
    drop_gen = torch.Generator()
    drop_gen.manual_seed(int(rng_fork(root, "dropout").seed % 2**63))
    model.set_dropout_generator(drop_gen)

    n = len(train_bundle)
    x = torch.as_tensor(train_bundle.features).to(dtype)
    if train_config.loss_mode == "single":
        targets = torch.as_tensor(train_bundle.target_indices())
    else:
        targets = torch.as_tensor(train_bundle.multi_hot()).to(dtype)

    opt = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    shuffle = rng_fork(root, "shuffle").generator()
    train_cache = {"tensor": train_bundle.features, "batch": max(train_config.batch_size, 32)}
    val_cache = {"tensor": val_bundle.features, "batch": 32} if val_bundle is not None else None

    report = TrainReport()
    for epoch in range(train_config.epochs):
        model.train()
        perm = shuffle.permutation(n)
        total = 0.0
        for s in range(0, n, train_config.batch_size):
            idx = torch.as_tensor(perm[s : s + train_config.batch_size])
            logits = model(x[idx])
            if train_config.loss_mode == "single":
                loss = loss_single_batch(logits, targets[idx])
            else:
                loss = loss_multi_batch(logits, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()!r} at epoch {epoch}, batch offset {s}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.clip_norm)
            opt.step()
            total += loss.item() * len(idx)
        mean_loss = total / n

        report_epoch = (
            (epoch + 1) % train_config.eval_every == 0 or epoch == train_config.epochs - 1
        )
        train_p = train_map = val_p = val_map = None
        if report_epoch:
            train_p, train_map = _bundle_metrics(model, train_bundle, train_cache)
            if val_bundle is not None:
                val_p, val_map = _bundle_metrics(model, val_bundle, val_cache)
        report.epochs.append(EpochStats(epoch, mean_loss, train_p, train_map, val_p, val_map))
        if progress is not None:
            progress(report.epochs[-1])
        if (
            train_config.early_stop_train_p is not None
            and train_p is not None
            and train_p >= train_config.early_stop_train_p
        ):
            break

    model.eval()
    report.wall_time_seconds = time.monotonic() - start
    return model, report


# ---------------------------------------------------------------------------
# Gradient checking


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """Largest elementwise |a-b| / max(floor, |a|, |b|)."""
    a = a.double()
    b = b.double()
    denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


def _instance_loss(module: torch.nn.Module, m: torch.Tensor, label: LabelVector, loss_mode: str):
    logits = module(m)
    return loss_single(logits, label) if loss_mode == "single" else loss_multi(logits, label)


def analytic_gradients(
    module: torch.nn.Module, m: torch.Tensor, label: LabelVector, loss_mode: str
) -> dict[str, torch.Tensor]:
    module.eval()  # frozen norm statistics, no dropout
    module.zero_grad(set_to_none=True)
    loss = _instance_loss(module, m, label, loss_mode)
    loss.backward()
    grads = {}
    for name, p in module.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    module.zero_grad(set_to_none=True)
    return grads


def fd_gradient(
    module: torch.nn.Module,
    m: torch.Tensor,
    label: LabelVector,
    param_name: str,
    loss_mode: str,
    step: float = 1e-5,
) -> torch.Tensor:
    """Central finite differences of the loss w.r.t. one named parameter array."""
    module.eval()
    param = dict(module.named_parameters())[param_name]
    flat = param.data.view(-1)
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = _instance_loss(module, m, label, loss_mode).item()
            flat[i] = orig - step
            down = _instance_loss(module, m, label, loss_mode).item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
    return out.view(param.shape)


@dataclass(frozen=True)
class GradCheckReport:
    per_array: dict[str, float]
    step: float

    @property
    def max_error(self) -> float:
        return max(self.per_array.values()) if self.per_array else 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance

    def to_text(self, tolerance: float | None = None) -> str:
        lines = []
        for name in sorted(self.per_array, key=lambda n: -self.per_array[n]):
            lines.append(f"{self.per_array[name]:.3e}\t{name}")
        if tolerance is not None:
            verdict = "PASS" if self.passed(tolerance) else "FAIL"
            lines.append(f"max {self.max_error:.3e} vs tolerance {tolerance:g}: {verdict}")
        return "\n".join(lines) + "\n"


def grad_check(
    module: torch.nn.Module,
    m: torch.Tensor,
    label: LabelVector,
    loss_mode: str = "multi",
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, per array."""
    analytic = analytic_gradients(module, m, label, loss_mode)
    per_array = {}
    for name in analytic:
        fd = fd_gradient(module, m, label, name, loss_mode, step)
        per_array[name] = max_relative_error(analytic[name], fd)
    return GradCheckReport(per_array=per_array, step=step)


def default_gradcheck_setup(seed: int = 7) -> tuple[MultiGranularityClassifier, torch.Tensor, LabelVector, str]:
    """Tiny double-precision model plus a fixed random input/label pair."""
    config = ModelConfig(
        num_classes=5,
        input_length=64,
        kernels=(7, 5),
        embed_dim=8,
        num_blocks=1,
        num_heads=2,
        w_intra=5,
        w_inter=3,
        ffn_width=16,
        dropout=0.0,
        pools=(2, 1, 1),
        loss_mode="multi",
    )
    rng = RngHandle(seed)
    model = build_model(config, rng_fork(rng, "model"), dtype=torch.float64)
    g = rng_fork(rng, "input").generator()
    m = torch.as_tensor(g.normal(0.0, 1.0, size=(6, config.input_length)))
    label = LabelVector(num_classes=5, active=frozenset({1, 3}))
    return model, m, label, "multi"
