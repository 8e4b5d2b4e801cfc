"""Modality-routed attention and FFN with a cross-modal bridge.

Rows of the hidden state whose modality flag is True (vision) are projected
with the visual expert, the rest with the frozen language weights. When a
query and a key come from different modalities, the key (and value) is
replaced by its bridged version ``K + X W'``. We implement that as

    scores = Q K^T + [cross] * (Q dK^T),   out = P V + (P * [cross]) dV

with ``dK = X W'_K`` and ``dV = X W'_V`` routed per row. The two forms agree
exactly, and with a zero bridge the extra terms vanish bit-for-bit.

Layer parameters are a flat dict with these keys (``D`` = model width)::

    lm.norm1 lm.norm2 lm.wq lm.wk lm.wv lm.wo lm.ffn.wg lm.ffn.wu lm.ffn.wd
    vx.norm1 vx.norm2 vx.{q,k,v,o}.A (D x r) vx.{q,k,v,o}.B (r x D) vx.ffn.wg vx.ffn.wu vx.ffn.wd
    br.{k_img,k_txt,v_img,v_txt}.A (D x r') br.{...}.B (r' x D)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class RoutingConfig:
    n_heads: int = 4
    route_output_proj: bool = True
    route_norms: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-6


def compose_low_rank(A, B) -> nc.Tensor:
    A, B = nc.tensor(A), nc.tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise nc.ShapeError(f"compose_low_rank: {A.shape} x {B.shape}")
    return nc.matmul(A, B)


def _as3(x):
    x = nc.tensor(x)
    return (x, False) if x.ndim == 3 else (nc.reshape(x, (1,) + x.shape), True)


def _mask3(mask, x):
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None]
    if m.shape != x.shape[:2]:
        raise nc.ShapeError(f"modality mask {m.shape} does not match input rows {x.shape[:2]}")
    return m


def route_rows(x, mask, lang_fn, vis_fn) -> nc.Tensor:
    """Row-wise dispatch: ``vis_fn`` on rows where ``mask`` is set, ``lang_fn`` elsewhere."""
    if not mask.any():
        return lang_fn(x)
    if mask.all():
        return vis_fn(x)
    return nc.where(mask[..., None], vis_fn(x), lang_fn(x))


def expert_weight(lp, name):
    return compose_low_rank(lp[f"vx.{name}.A"], lp[f"vx.{name}.B"])


def bridge_weight(lp, name):
    return compose_low_rank(lp[f"br.{name}.A"], lp[f"br.{name}.B"])


def routed_qkv(X, modality, lp):
    """Per-row Q, K, V: expert weights on vision rows, language weights on the others."""
    x, squeeze = _as3(X)
    m = _mask3(modality, x)
    out = []
    for n in ("q", "k", "v"):
        w_t, w_i = lp[f"lm.w{n}"], expert_weight(lp, n)
        r = route_rows(x, m, lambda t: t @ w_t, lambda t: t @ w_i)
        out.append(nc.reshape(r, r.shape[1:]) if squeeze else r)
    return tuple(out)


def bridge_delta(X, modality, lp, kind: str) -> nc.Tensor:
    """``X W'`` with the vision-side bridge on vision rows and the text-side bridge on text rows."""
    x, squeeze = _as3(X)
    m = _mask3(modality, x)
    w_img, w_txt = bridge_weight(lp, f"{kind}_img"), bridge_weight(lp, f"{kind}_txt")
    d = route_rows(x, m, lambda t: t @ w_txt, lambda t: t @ w_img)
    return nc.reshape(d, d.shape[1:]) if squeeze else d


def bridge_keys(K, X, modality, lp):
    """(keys for same-modality pairs, keys for cross-modality pairs)."""
    return K, nc.add(K, bridge_delta(X, modality, lp, "k"))


def bridge_values(V, X, modality, lp):
    return V, nc.add(V, bridge_delta(X, modality, lp, "v"))


def _split_heads(t, n_heads):
    b, length, d = t.shape
    return nc.transpose(nc.reshape(t, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(t):
    b, h, length, dh = t.shape
    return nc.reshape(nc.transpose(t, (0, 2, 1, 3)), (b, length, h * dh))


def _rope(length, dh, cfg, dtype):
    return nc.rotary_tables(length, dh, cfg.rope_base, dtype)


def routed_attention(X, modality, lp, cfg: RoutingConfig, capture: list | None = None) -> nc.Tensor:
    """Causal multi-head attention over a mixed sequence, output already projected.

    ``X`` is the normalized layer input, shape (L, D) or (B, L, D). When
    ``capture`` is a list, the (B, H, L, L) probability array is appended.
    """
    x, squeeze = _as3(X)
    m = _mask3(modality, x)
    b, length, d = x.shape
    if length == 0:
        raise ValueError("routed_attention: empty sequence")
    h = cfg.n_heads
    dh = d // h
    q, k, v = routed_qkv(x, m, lp)
    cos, sin = _rope(length, dh, cfg, x.data.dtype)
    qh = nc.rotary(_split_heads(q, h), cos, sin)
    kh = nc.rotary(_split_heads(k, h), cos, sin)
    vh = _split_heads(v, h)

    causal = nc.tril_mask(length)
    cross = (m[:, :, None] != m[:, None, :])[:, None]  # (B, 1, L, L)
    any_cross = bool(np.any(cross & causal))

    scores = qh @ nc.swap_last(kh)
    if any_cross:
        dk = nc.rotary(_split_heads(bridge_delta(x, m, lp, "k"), h), cos, sin)
        zeros = np.zeros(scores.shape, dtype=scores.data.dtype)
        scores = scores + nc.where(cross, qh @ nc.swap_last(dk), zeros)
    probs = nc.softmax(nc.scale(scores, dh ** -0.5), mask=causal)
    if capture is not None:
        capture.append(probs.data)
    out = probs @ vh
    if any_cross:
        dv = _split_heads(bridge_delta(x, m, lp, "v"), h)
        zeros = np.zeros(probs.shape, dtype=probs.data.dtype)
        out = out + nc.where(cross, probs, zeros) @ dv
    o = _merge_heads(out)
    w_t = lp["lm.wo"]
    if cfg.route_output_proj:
        w_i = expert_weight(lp, "o")
        o = route_rows(o, m, lambda t: t @ w_t, lambda t: t @ w_i)
    else:
        o = o @ w_t
    return nc.reshape(o, o.shape[1:]) if squeeze else o


def ffn(x, wg, wu, wd) -> nc.Tensor:
    return (nc.silu(x @ wg) * (x @ wu)) @ wd


def routed_ffn(X, modality, lp) -> nc.Tensor:
    x, squeeze = _as3(X)
    m = _mask3(modality, x)
    r = route_rows(
        x, m,
        lambda t: ffn(t, lp["lm.ffn.wg"], lp["lm.ffn.wu"], lp["lm.ffn.wd"]),
        lambda t: ffn(t, lp["vx.ffn.wg"], lp["vx.ffn.wu"], lp["vx.ffn.wd"]),
    )
    return nc.reshape(r, r.shape[1:]) if squeeze else r


def routed_norm(x, m, lp, which: str, cfg: RoutingConfig) -> nc.Tensor:
    g_t = lp[f"lm.{which}"]
    if not cfg.route_norms:
        return nc.rms_norm(x, g_t, cfg.norm_eps)
    g_i = lp[f"vx.{which}"]
    return route_rows(x, m, lambda t: nc.rms_norm(t, g_t, cfg.norm_eps),
                      lambda t: nc.rms_norm(t, g_i, cfg.norm_eps))


def routed_layer(x, modality, lp, cfg: RoutingConfig, capture: list | None = None) -> nc.Tensor:
    """Pre-norm residual block: x + attn(norm(x)), then + ffn(norm(.))."""
    x, squeeze = _as3(x)
    m = _mask3(modality, x)
    x = x + routed_attention(routed_norm(x, m, lp, "norm1", cfg), m, lp, cfg, capture)
    x = x + routed_ffn(routed_norm(x, m, lp, "norm2", cfg), m, lp)
    return nc.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------- plain language layer


def causal_attention(x, wq, wk, wv, wo, n_heads, rope_base=10000.0, capture=None) -> nc.Tensor:
    b, length, d = x.shape
    dh = d // n_heads
    cos, sin = nc.rotary_tables(length, dh, rope_base, x.data.dtype)
    q = nc.rotary(_split_heads(x @ wq, n_heads), cos, sin)
    k = nc.rotary(_split_heads(x @ wk, n_heads), cos, sin)
    v = _split_heads(x @ wv, n_heads)
    scores = q @ nc.swap_last(k)
    probs = nc.softmax(nc.scale(scores, dh ** -0.5), mask=nc.tril_mask(length))
    if capture is not None:
        capture.append(probs.data)
    return _merge_heads(probs @ v) @ wo


def language_layer(x, lp, cfg: RoutingConfig, capture=None) -> nc.Tensor:
    """The frozen backbone block on its own, with no routing."""
    x, squeeze = _as3(x)
    h = nc.rms_norm(x, lp["lm.norm1"], cfg.norm_eps)
    x = x + causal_attention(h, lp["lm.wq"], lp["lm.wk"], lp["lm.wv"], lp["lm.wo"], cfg.n_heads,
                             cfg.rope_base, capture)
    h = nc.rms_norm(x, lp["lm.norm2"], cfg.norm_eps)
    x = x + ffn(h, lp["lm.ffn.wg"], lp["lm.ffn.wu"], lp["lm.ffn.wd"])
    return nc.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------- init


def init_language_layer(rng, d: int, hidden: int, n_layers: int) -> dict[str, np.ndarray]:
    s_out = d ** -0.5 / np.sqrt(2 * n_layers)
    return {
        "lm.norm1": np.ones(d), "lm.norm2": np.ones(d),
        "lm.wq": rng.normal(0, d ** -0.5, (d, d)), "lm.wk": rng.normal(0, d ** -0.5, (d, d)),
        "lm.wv": rng.normal(0, d ** -0.5, (d, d)), "lm.wo": rng.normal(0, s_out, (d, d)),
        "lm.ffn.wg": rng.normal(0, d ** -0.5, (d, hidden)), "lm.ffn.wu": rng.normal(0, d ** -0.5, (d, hidden)),
        "lm.ffn.wd": rng.normal(0, hidden ** -0.5 / np.sqrt(2 * n_layers), (hidden, d)),
    }


def init_vision_side(rng, lang: dict[str, np.ndarray], d: int, expert_rank: int,
                     bridge_rank: int) -> dict[str, np.ndarray]:
    """Expert A ~ N(0, 1/sqrt(D)) with B = 0, bridge B' = 0, FFN and norms copied from the language layer."""
    p = {}
    std = 1.0 / np.sqrt(d)
    for n in ("q", "k", "v", "o"):
        p[f"vx.{n}.A"] = rng.normal(0, std, (d, expert_rank))
        p[f"vx.{n}.B"] = np.zeros((expert_rank, d))
    for n in ("k_img", "k_txt", "v_img", "v_txt"):
        p[f"br.{n}.A"] = rng.normal(0, std, (d, bridge_rank))
        p[f"br.{n}.B"] = np.zeros((bridge_rank, d))
    for n in ("ffn.wg", "ffn.wu", "ffn.wd", "norm1", "norm2"):
        p[f"vx.{n}"] = lang[f"lm.{n}"].copy()
    return p
