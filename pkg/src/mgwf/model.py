"""Multi-granularity attention classifier over slot-feature matrices.

Pipeline: G parallel 1D-conv branches (one kernel size each) turn the 6 x L
feature matrix into per-granularity patch-token sequences of differing
lengths; a learnable router token is appended to each sequence; stacked
attention blocks then run, in order,

  1. inter-granularity interaction  - each coarser sequence's patch tokens
     cross-attend to a small window of the next-finer sequence's patch
     tokens (routers excluded, all pairs read pre-interaction state),
  2. intra-granularity interaction  - windowed patch self-attention, the
     router cross-attending over all refreshed patches, and a feed-forward
     sublayer over the whole sequence,
  3. router interaction             - self-attention among the G routers,
     written back in place with patches untouched.

The final routers are concatenated and mapped linearly to class logits.

All attention sublayers use pre-normalization residuals; window restrictions
are realized by adding -inf to out-of-window scores before the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .core import RngHandle, rng_fork
from .featurize import NUM_CHANNELS

__all__ = [
    "ModelConfig",
    "center_index",
    "window_indices",
    "MultiGranularityClassifier",
    "build_model",
    "init_parameters",
    "count_parameters",
]

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every parameter shape follows from these."""

    num_classes: int
    input_length: int
    kernels: tuple[int, ...] = (15, 11, 7, 5)
    embed_dim: int = 256
    num_blocks: int = 3
    num_heads: int = 8
    w_intra: int = 5
    w_inter: int = 3
    ffn_width: int = 1024
    dropout: float = 0.1
    conv_channels: tuple[int, ...] | None = None
    pools: tuple[int, int, int] = (3, 3, 3)
    loss_mode: str = "multi"
    enable_inter_granularity: bool = True
    enable_router_interact: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "pools", tuple(int(p) for p in self.pools))
        if self.conv_channels is not None:
            object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.input_length < 1:
            raise ValueError("input_length must be >= 1")
        if not self.kernels:
            raise ValueError("need at least one branch kernel")
        if any(k < 1 for k in self.kernels):
            raise ValueError("kernels must be >= 1")
        if any(a <= b for a, b in zip(self.kernels, self.kernels[1:])):
            raise ValueError("kernels must be strictly descending (coarse to fine)")
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be a positive multiple of num_heads")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        for name, w in (("w_intra", self.w_intra), ("w_inter", self.w_inter)):
            if w < 1 or w % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer")
        if self.ffn_width < 1:
            raise ValueError("ffn_width must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if len(self.pools) != 3 or any(p < 1 for p in self.pools):
            raise ValueError("pools must be three integers >= 1")
        if self.loss_mode not in ("single", "multi"):
            raise ValueError("loss_mode must be 'single' or 'multi'")
        ch = self.branch_channels()
        if len(ch) != 6 or any(c < 1 for c in ch):
            raise ValueError("conv channel plan must be six positive integers")
        if ch[-1] != self.embed_dim:
            raise ValueError("last conv channel count must equal embed_dim")
        counts = self.token_counts()
        if any(a > b for a, b in zip(counts, counts[1:])):
            raise ValueError(f"token counts {counts} must be non-decreasing coarse to fine")

    @property
    def num_granularities(self) -> int:
        return len(self.kernels)

    def branch_channels(self) -> tuple[int, ...]:
        if self.conv_channels is not None:
            return self.conv_channels
        d = self.embed_dim
        if d % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 to derive the conv channel plan")
        return (d // 4, d // 4, d // 2, d // 2, d, d)

    def token_counts(self) -> tuple[int, ...]:
        """Patch tokens per branch: three rounds of two valid convs plus a pool."""
        counts = []
        for k in self.kernels:
            n = self.input_length
            for p in self.pools:
                for _ in range(2):
                    n = n - k + 1
                    if n < 1:
                        raise ValueError(f"kernel {k} exhausts the sequence (length reached {n}) for input_length={self.input_length}")
                n = n // p
                if n < 1:
                    raise ValueError(f"pooling by {p} exhausts the sequence for kernel {k}, input_length={self.input_length}")
            counts.append(n)
        return tuple(counts)

    def head_width(self) -> int:
        return self.num_granularities * self.embed_dim


def center_index(n: int, num_coarse: int, num_fine: int) -> int:
    """Fine-sequence index aligned with the center of coarse patch n (0-based)."""
    if not (0 <= n < num_coarse <= num_fine):
        raise ValueError(f"need 0 <= n < num_coarse <= num_fine, got ({n}, {num_coarse}, {num_fine})")
    # floor((n + 0.5) * num_fine / num_coarse), kept in exact integer arithmetic
    return ((2 * n + 1) * num_fine) // (2 * num_coarse)


def window_indices(center: int, window: int, num_fine: int) -> range:
    """Inclusive index window of width <= `window` around `center`, clamped to bounds."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if not (0 <= center < num_fine):
        raise ValueError(f"center {center} out of range [0, {num_fine})")
    half = window // 2
    lo = max(0, center - half)
    hi = min(num_fine - 1, center + half)
    return range(lo, hi + 1)


def _window_table(centers, window: int, num_keys: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-query gather indices and validity for clamped windows around centers.

    Softmax over the gathered valid entries equals softmax over the full key
    axis with out-of-window scores at -inf; the gather just skips the zeros.
    """
    half = window // 2
    offsets = torch.arange(-half, half + 1, dtype=torch.int64)
    raw = torch.as_tensor(list(centers), dtype=torch.int64).unsqueeze(1) + offsets
    valid = (raw >= 0) & (raw < num_keys)
    return raw.clamp(0, num_keys - 1), valid


def _inter_window_table(num_coarse: int, num_fine: int, window: int):
    centers = [center_index(n, num_coarse, num_fine) for n in range(num_coarse)]
    return _window_table(centers, window, num_fine)


def _intra_window_table(num_tokens: int, window: int):
    return _window_table(range(num_tokens), window, num_tokens)


class SeededDropout(nn.Module):
    """Dropout fed by an explicit torch.Generator so training runs replay exactly."""

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device) < keep
        return x * mask.to(x.dtype) / keep


class MultiheadAttention(nn.Module):
    """Multi-head attention, optionally restricted to per-query key windows.

    The restriction is the usual "out-of-window scores at -inf before the
    softmax"; with a window table the out-of-window keys are skipped by a
    gather instead of materializing the full score matrix, which computes
    the same softmax over the same key subset.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, keyvalue, window=None, attn_sink=None):
        b, nq, _ = query.shape
        nk = keyvalue.shape[1]
        h, hd = self.heads, self.head_dim
        q = self.q_proj(query).view(b, nq, h, hd).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, nk, h, hd).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, nk, h, hd).transpose(1, 2)
        if window is None:
            scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
            weights = torch.softmax(scores, dim=-1)
            out = weights @ v
        else:
            idx, valid = window
            kg = k[:, :, idx, :]  # (b, h, nq, w, hd)
            vg = v[:, :, idx, :]
            scores = torch.einsum("bhnd,bhnwd->bhnw", q, kg) / math.sqrt(hd)
            scores = scores.masked_fill(~valid, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            out = torch.einsum("bhnw,bhnwd->bhnd", weights, vg)
        if attn_sink is not None:
            attn_sink.append(weights.detach())
        out = out.transpose(1, 2).reshape(b, nq, self.dim)
        return self.out_proj(out)


class ConvBlock(nn.Module):
    """conv-norm-relu twice, then max-pool and dropout."""

    def __init__(self, c_in: int, c_mid: int, c_out: int, kernel: int, pool: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_mid, kernel)
        self.bn1 = nn.BatchNorm1d(c_mid)
        self.conv2 = nn.Conv1d(c_mid, c_out, kernel)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.pool = nn.MaxPool1d(pool)
        self.drop = SeededDropout(dropout)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.relu(self.bn2(self.conv2(x)))
        return self.drop(self.pool(x))


class ConvBranch(nn.Module):
    """One granularity's feature extractor; output is (batch, tokens, embed_dim)."""

    def __init__(self, config: ModelConfig, kernel: int):
        super().__init__()
        ch = config.branch_channels()
        ins = (NUM_CHANNELS, ch[1], ch[3])
        self.blocks = nn.ModuleList(
            ConvBlock(ins[b], ch[2 * b], ch[2 * b + 1], kernel, config.pools[b], config.dropout)
            for b in range(3)
        )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x.transpose(1, 2)


class InterGranularityInteraction(nn.Module):
    """Coarse patches query a window of the adjacent finer granularity's patches.

    Every pair reads pre-interaction patch states, so the per-pair updates
    commute; the finest granularity and all router tokens pass through
    unchanged.
    """

    def __init__(self, config: ModelConfig, token_counts: tuple[int, ...]):
        super().__init__()
        d = config.embed_dim
        npairs = len(token_counts) - 1
        self.ln_q = nn.ModuleList(nn.LayerNorm(d) for _ in range(npairs))
        self.ln_kv = nn.ModuleList(nn.LayerNorm(d) for _ in range(npairs))
        self.attn = nn.ModuleList(MultiheadAttention(d, config.num_heads) for _ in range(npairs))
        for i in range(npairs):
            idx, valid = _inter_window_table(token_counts[i], token_counts[i + 1], config.w_inter)
            self.register_buffer(f"idx_{i}", idx, persistent=False)
            self.register_buffer(f"valid_{i}", valid, persistent=False)

    def forward(self, sets, attn_sink=None):
        pre = [s[:, :-1, :] for s in sets]
        out = []
        for i, s in enumerate(sets):
            if i < len(sets) - 1:
                window = (getattr(self, f"idx_{i}"), getattr(self, f"valid_{i}"))
                upd = pre[i] + self.attn[i](
                    self.ln_q[i](pre[i]), self.ln_kv[i](pre[i + 1]), window, attn_sink
                )
                out.append(torch.cat([upd, s[:, -1:, :]], dim=1))
            else:
                out.append(s)
        return out


class IntraGranularityInteraction(nn.Module):
    """Windowed patch self-attention, router-over-patches cross-attention, FFN."""

    def __init__(self, config: ModelConfig, num_tokens: int):
        super().__init__()
        d = config.embed_dim
        self.ln_patch = nn.LayerNorm(d)
        self.attn_local = MultiheadAttention(d, config.num_heads)
        self.ln_router_q = nn.LayerNorm(d)
        self.ln_router_kv = nn.LayerNorm(d)
        self.attn_router = MultiheadAttention(d, config.num_heads)
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn_up = nn.Linear(d, config.ffn_width)
        self.ffn_down = nn.Linear(config.ffn_width, d)
        idx, valid = _intra_window_table(num_tokens, config.w_intra)
        self.register_buffer("idx_local", idx, persistent=False)
        self.register_buffer("valid_local", valid, persistent=False)

    def forward(self, tokens, attn_sink=None):
        patches, router = tokens[:, :-1, :], tokens[:, -1:, :]
        normed = self.ln_patch(patches)
        patches = patches + self.attn_local(
            normed, normed, (self.idx_local, self.valid_local), attn_sink
        )
        router = router + self.attn_router(
            self.ln_router_q(router), self.ln_router_kv(patches), None, attn_sink
        )
        x = torch.cat([patches, router], dim=1)
        return x + self.ffn_down(torch.relu(self.ffn_up(self.ln_ffn(x))))


class RouterInteraction(nn.Module):
    """Self-attention over the G router tokens; patch tokens are left untouched."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln = nn.LayerNorm(config.embed_dim)
        self.attn = MultiheadAttention(config.embed_dim, config.num_heads)

    def forward(self, sets, attn_sink=None):
        routers = torch.cat([s[:, -1:, :] for s in sets], dim=1)
        normed = self.ln(routers)
        routers = routers + self.attn(normed, normed, None, attn_sink)
        return [
            torch.cat([s[:, :-1, :], routers[:, i : i + 1, :]], dim=1)
            for i, s in enumerate(sets)
        ]


class AttentionBlock(nn.Module):
    def __init__(self, config: ModelConfig, token_counts: tuple[int, ...]):
        super().__init__()
        self.inter = (
            InterGranularityInteraction(config, token_counts)
            if config.enable_inter_granularity and len(token_counts) > 1
            else None
        )
        self.intra = nn.ModuleList(
            IntraGranularityInteraction(config, n) for n in token_counts
        )
        self.router_interact = RouterInteraction(config) if config.enable_router_interact else None

    def forward(self, sets, attn_sink=None):
        if self.inter is not None:
            sets = self.inter(sets, attn_sink)
        sets = [stage(s, attn_sink) for stage, s in zip(self.intra, sets)]
        if self.router_interact is not None:
            sets = self.router_interact(sets, attn_sink)
        return sets


class MultiGranularityClassifier(nn.Module):
    """Full network: conv branches, router injection, attention blocks, linear head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        counts = config.token_counts()
        d = config.embed_dim
        self.branches = nn.ModuleList(ConvBranch(config, k) for k in config.kernels)
        self.pos_embeds = nn.ParameterList(nn.Parameter(torch.zeros(n, d)) for n in counts)
        self.routers = nn.ParameterList(
            nn.Parameter(torch.zeros(1, d)) for _ in range(config.num_granularities)
        )
        self.blocks = nn.ModuleList(
            AttentionBlock(config, counts) for _ in range(config.num_blocks)
        )
        self.head = nn.Linear(config.head_width(), config.num_classes)

    def set_dropout_generator(self, generator: torch.Generator | None):
        for mod in self.modules():
            if isinstance(mod, SeededDropout):
                mod.generator = generator

    def branch_tokens(self, m: torch.Tensor, branch: int) -> torch.Tensor:
        return self.branches[branch](m)

    def inject_router(self, tokens: torch.Tensor, branch: int) -> torch.Tensor:
        """Add positional embeddings and append this granularity's router token."""
        b = tokens.shape[0]
        router = self.routers[branch].unsqueeze(0).expand(b, -1, -1)
        return torch.cat([tokens + self.pos_embeds[branch], router], dim=1)

    def token_sets(self, m: torch.Tensor) -> list[torch.Tensor]:
        return [
            self.inject_router(self.branch_tokens(m, i), i)
            for i in range(self.config.num_granularities)
        ]

    def forward(self, m: torch.Tensor, attn_sink: list | None = None) -> torch.Tensor:
        single = m.dim() == 2
        x = m.unsqueeze(0) if single else m
        sets = self.token_sets(x)
        for block in self.blocks:
            sets = block(sets, attn_sink)
        z = torch.cat([s[:, -1, :] for s in sets], dim=-1)
        logits = self.head(z)
        return logits.squeeze(0) if single else logits


def _fill_uniform(param: torch.Tensor, g: np.random.Generator, bound: float):
    values = g.uniform(-bound, bound, size=tuple(param.shape))
    with torch.no_grad():
        param.copy_(torch.from_numpy(values).to(param.dtype))


def _fill_normal(param: torch.Tensor, g: np.random.Generator, scale: float):
    values = g.normal(0.0, scale, size=tuple(param.shape))
    with torch.no_grad():
        param.copy_(torch.from_numpy(values).to(param.dtype))


def init_parameters(model: MultiGranularityClassifier, rng: RngHandle):
    """Deterministically (re)initialize every parameter from a keyed rng stream.

    Each array gets its own stream derived from its qualified name, so the
    initialization is independent of traversal order and of torch's global
    RNG state. Conv/linear weights and biases draw uniform(+-1/sqrt(fan_in)),
    router and positional embeddings draw normal(0, 0.02), normalization
    layers reset to identity.
    """
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv1d, nn.Linear)):
            if isinstance(mod, nn.Conv1d):
                fan_in = mod.in_channels * mod.kernel_size[0]
            else:
                fan_in = mod.in_features
            bound = 1.0 / math.sqrt(fan_in)
            _fill_uniform(mod.weight, rng_fork(rng, f"init/{name}.weight").generator(), bound)
            if mod.bias is not None:
                _fill_uniform(mod.bias, rng_fork(rng, f"init/{name}.bias").generator(), bound)
        elif isinstance(mod, (nn.BatchNorm1d, nn.LayerNorm)):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
                if isinstance(mod, nn.BatchNorm1d):
                    mod.running_mean.zero_()
                    mod.running_var.fill_(1.0)
                    mod.num_batches_tracked.zero_()
    for i, p in enumerate(model.pos_embeds):
        _fill_normal(p, rng_fork(rng, f"init/pos_embeds.{i}").generator(), 0.02)
    for i, p in enumerate(model.routers):
        _fill_normal(p, rng_fork(rng, f"init/routers.{i}").generator(), 0.02)


def build_model(
    config: ModelConfig,
    rng: RngHandle,
    dtype: torch.dtype = torch.float64,
) -> MultiGranularityClassifier:
    """Construct, cast, and deterministically initialize a model."""
    model = MultiGranularityClassifier(config).to(dtype)
    init_parameters(model, rng)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
