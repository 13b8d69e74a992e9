"""Independent reference implementations used as test oracles.

Nothing here shares code paths with the package: slotting is done by
bisecting explicit boundary arrays, attention windows come from exact
integer arithmetic, attention itself is computed per-query in plain numpy
loops, and the full forward pass is replayed as straight-line numpy over a
checkpoint-style state dict.
"""

from __future__ import annotations

import bisect
import math

import numpy as np

from mgwf.core import Trace
from mgwf.featurize import slot_count


# ---------------------------------------------------------------------------
# Featurization: literal per-slot scan


def naive_featurize(trace: Trace, dt: float, t_max: float) -> np.ndarray:
    """Bucket packets by explicit slot boundaries, then scan each slot's
    subsequence exactly as written: counts, adjacent direction flips, and
    mean flip gaps. Shares only the L = ceil(T/dt) convention with the
    implementation under test."""
    num_slots = slot_count(t_max, dt)
    edges = [j * dt for j in range(num_slots + 1)]
    buckets: list[list[tuple[float, int]]] = [[] for _ in range(num_slots)]
    for e in trace.events:
        if e.timestamp >= t_max:
            continue
        j = bisect.bisect_right(edges, e.timestamp)  # 1-based slot
        j = min(j, num_slots)  # guard the float corner where L*dt < T
        buckets[j - 1].append((e.timestamp, e.direction))

    m = np.zeros((6, num_slots), dtype=np.float64)
    for j, sub in enumerate(buckets):
        if not sub:
            continue
        c_out = sum(1 for _, d in sub if d == 1)
        c_in = sum(1 for _, d in sub if d == -1)
        n_oi = n_io = 0
        s_oi = s_io = 0.0
        for (t0, d0), (t1, d1) in zip(sub, sub[1:]):
            if d0 == 1 and d1 == -1:
                n_oi += 1
                s_oi += t1 - t0
            elif d0 == -1 and d1 == 1:
                n_io += 1
                s_io += t1 - t0
        m[0, j] = c_out
        m[1, j] = c_in
        m[2, j] = n_oi
        m[3, j] = n_io
        m[4, j] = s_oi / n_oi if n_oi > 0 else 0.0
        m[5, j] = s_io / n_io if n_io > 0 else 0.0
    return m


# ---------------------------------------------------------------------------
# Window geometry via exact integer arithmetic


def closed_form_center(n: int, num_coarse: int, num_fine: int) -> int:
    # floor((n + 1/2) * num_fine / num_coarse) without floats
    return ((2 * n + 1) * num_fine) // (2 * num_coarse)


def closed_form_window(center: int, window: int, num_fine: int) -> list[int]:
    half = window // 2
    return [k for k in range(center - half, center + half + 1) if 0 <= k < num_fine]


def inter_windows(num_coarse: int, num_fine: int, window: int) -> list[list[int]]:
    return [
        closed_form_window(closed_form_center(n, num_coarse, num_fine), window, num_fine)
        for n in range(num_coarse)
    ]


def intra_windows(num_tokens: int, window: int) -> list[list[int]]:
    return [closed_form_window(n, window, num_tokens) for n in range(num_tokens)]


# ---------------------------------------------------------------------------
# Attention: brute-force full attention with -inf out-of-window scores


def brute_masked_attention(
    query: np.ndarray,
    keyvalue: np.ndarray,
    heads: int,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray,
    windows: list[list[int]] | None = None,
) -> np.ndarray:
    """Multi-head attention computed head by head, query row by query row,
    over the full score matrix with out-of-window entries set to -inf.
    Weight matrices follow the (out_features, in_features) convention."""
    nq, dim = query.shape
    nk = keyvalue.shape[0]
    hd = dim // heads
    q = query @ wq.T + bq
    k = keyvalue @ wk.T + bk
    v = keyvalue @ wv.T + bv
    out = np.zeros((nq, dim), dtype=np.float64)
    for h in range(heads):
        qs = q[:, h * hd : (h + 1) * hd]
        ks = k[:, h * hd : (h + 1) * hd]
        vs = v[:, h * hd : (h + 1) * hd]
        for n in range(nq):
            scores = np.full(nk, -np.inf)
            for j in range(nk):
                if windows is None or j in windows[n]:
                    scores[j] = float(qs[n] @ ks[j]) / math.sqrt(hd)
            scores -= scores.max()
            weights = np.exp(scores)
            weights /= weights.sum()
            out[n, h * hd : (h + 1) * hd] = weights @ vs
    return out @ wo.T + bo


def attention_params_from(module) -> dict[str, np.ndarray]:
    """Pull q/k/v/out projection arrays out of a torch attention module."""
    return {
        "wq": module.q_proj.weight.detach().numpy().astype(np.float64),
        "bq": module.q_proj.bias.detach().numpy().astype(np.float64),
        "wk": module.k_proj.weight.detach().numpy().astype(np.float64),
        "bk": module.k_proj.bias.detach().numpy().astype(np.float64),
        "wv": module.v_proj.weight.detach().numpy().astype(np.float64),
        "bv": module.v_proj.bias.detach().numpy().astype(np.float64),
        "wo": module.out_proj.weight.detach().numpy().astype(np.float64),
        "bo": module.out_proj.bias.detach().numpy().astype(np.float64),
    }


# ---------------------------------------------------------------------------
# Straight-line numpy forward pass (eval mode)

_EPS = 1e-5  # normalization epsilon shared by batch and layer norm


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    c_out, c_in, k = w.shape
    length = x.shape[1] - k + 1
    out = np.empty((c_out, length), dtype=np.float64)
    windows = np.stack([x[:, i : i + length] for i in range(k)], axis=-1)  # (c_in, length, k)
    for co in range(c_out):
        out[co] = np.einsum("ilk,ik->l", windows, w[co]) + b[co]
    return out


def _batchnorm_eval(x, gamma, beta, mean, var):
    return (x - mean[:, None]) / np.sqrt(var[:, None] + _EPS) * gamma[:, None] + beta[:, None]


def _maxpool(x: np.ndarray, p: int) -> np.ndarray:
    length = x.shape[1] // p
    return x[:, : length * p].reshape(x.shape[0], length, p).max(axis=-1)


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _EPS) * gamma + beta


def _subset_attention(query, keyvalue, heads, p, windows):
    """Same attention arithmetic, but realized by gathering each query's key
    subset and taking the softmax over the subset only (no masking)."""
    nq, dim = query.shape
    hd = dim // heads
    q = query @ p["wq"].T + p["bq"]
    k = keyvalue @ p["wk"].T + p["bk"]
    v = keyvalue @ p["wv"].T + p["bv"]
    out = np.zeros((nq, dim), dtype=np.float64)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for n in range(nq):
            idx = windows[n] if windows is not None else list(range(keyvalue.shape[0]))
            scores = (k[idx, sl] @ q[n, sl]) / math.sqrt(hd)
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[n, sl] = w @ v[idx, sl]
    return out @ p["wo"].T + p["bo"]


def _attn_params(state, prefix):
    return {
        "wq": state[prefix + ".q_proj.weight"],
        "bq": state[prefix + ".q_proj.bias"],
        "wk": state[prefix + ".k_proj.weight"],
        "bk": state[prefix + ".k_proj.bias"],
        "wv": state[prefix + ".v_proj.weight"],
        "bv": state[prefix + ".v_proj.bias"],
        "wo": state[prefix + ".out_proj.weight"],
        "bo": state[prefix + ".out_proj.bias"],
    }


def straightline_logits(config, state: dict[str, np.ndarray], m: np.ndarray) -> np.ndarray:
    """Replay the whole eval-mode forward pass in numpy from named arrays."""
    state = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
    heads = config.num_heads
    num_granularities = len(config.kernels)

    token_sets = []
    for i in range(num_granularities):
        x = np.asarray(m, dtype=np.float64)
        for b in range(3):
            pre = f"branches.{i}.blocks.{b}"
            for conv, bn in (("conv1", "bn1"), ("conv2", "bn2")):
                x = _conv1d(x, state[f"{pre}.{conv}.weight"], state[f"{pre}.{conv}.bias"])
                x = _batchnorm_eval(
                    x,
                    state[f"{pre}.{bn}.weight"],
                    state[f"{pre}.{bn}.bias"],
                    state[f"{pre}.{bn}.running_mean"],
                    state[f"{pre}.{bn}.running_var"],
                )
                x = np.maximum(x, 0.0)
            x = _maxpool(x, config.pools[b])
        tokens = x.T + state[f"pos_embeds.{i}"]
        token_sets.append(np.vstack([tokens, state[f"routers.{i}"]]))

    counts = [ts.shape[0] - 1 for ts in token_sets]
    for b in range(config.num_blocks):
        blk = f"blocks.{b}"
        if config.enable_inter_granularity and num_granularities > 1:
            pre_patches = [ts[:-1] for ts in token_sets]
            for i in range(num_granularities - 1):
                wins = inter_windows(counts[i], counts[i + 1], config.w_inter)
                qn = _layernorm(
                    pre_patches[i],
                    state[f"{blk}.inter.ln_q.{i}.weight"],
                    state[f"{blk}.inter.ln_q.{i}.bias"],
                )
                kn = _layernorm(
                    pre_patches[i + 1],
                    state[f"{blk}.inter.ln_kv.{i}.weight"],
                    state[f"{blk}.inter.ln_kv.{i}.bias"],
                )
                upd = pre_patches[i] + _subset_attention(
                    qn, kn, heads, _attn_params(state, f"{blk}.inter.attn.{i}"), wins
                )
                token_sets[i] = np.vstack([upd, token_sets[i][-1:]])

        new_sets = []
        for i, ts in enumerate(token_sets):
            pre = f"{blk}.intra.{i}"
            patches, router = ts[:-1], ts[-1:]
            normed = _layernorm(patches, state[f"{pre}.ln_patch.weight"], state[f"{pre}.ln_patch.bias"])
            patches = patches + _subset_attention(
                normed, normed, heads, _attn_params(state, f"{pre}.attn_local"),
                intra_windows(counts[i], config.w_intra),
            )
            rq = _layernorm(router, state[f"{pre}.ln_router_q.weight"], state[f"{pre}.ln_router_q.bias"])
            rkv = _layernorm(patches, state[f"{pre}.ln_router_kv.weight"], state[f"{pre}.ln_router_kv.bias"])
            router = router + _subset_attention(
                rq, rkv, heads, _attn_params(state, f"{pre}.attn_router"), None
            )
            x = np.vstack([patches, router])
            h = _layernorm(x, state[f"{pre}.ln_ffn.weight"], state[f"{pre}.ln_ffn.bias"])
            h = np.maximum(h @ state[f"{pre}.ffn_up.weight"].T + state[f"{pre}.ffn_up.bias"], 0.0)
            x = x + h @ state[f"{pre}.ffn_down.weight"].T + state[f"{pre}.ffn_down.bias"]
            new_sets.append(x)
        token_sets = new_sets

        if config.enable_router_interact:
            routers = np.vstack([ts[-1:] for ts in token_sets])
            normed = _layernorm(
                routers,
                state[f"{blk}.router_interact.ln.weight"],
                state[f"{blk}.router_interact.ln.bias"],
            )
            routers = routers + _subset_attention(
                normed, normed, heads, _attn_params(state, f"{blk}.router_interact.attn"), None
            )
            token_sets = [
                np.vstack([ts[:-1], routers[i : i + 1]]) for i, ts in enumerate(token_sets)
            ]

    z = np.concatenate([ts[-1] for ts in token_sets])
    return z @ state["head.weight"].T + state["head.bias"]


def state_to_numpy(model) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------------------
# Ranking metrics straight from the definitions


def brute_top_k(scores, k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda c: (-float(scores[c]), c))
    return order[:k]


def brute_precision_at_k(scores, active: set, k: int) -> float:
    ranked = brute_top_k(scores, k)
    return sum(1 for c in ranked if c in active) / k


def brute_map_at_k(scores, active: set, k: int) -> float:
    terms = np.array([brute_precision_at_k(scores, active, i) for i in range(1, k + 1)])
    return float(np.mean(terms))
