"""Oracle and invariant suites shared by ``libra-toy verify`` and the test-suite.

Everything here runs on tiny random configurations in 64-bit arithmetic.
Each suite returns a list of :class:`CheckResult`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .imgtok import TokenizerConfig, _sign, decoder_forward, entropy_terms, init_tokenizer_params
from .model import LibraConfig, LibraModel, forward
from .routed import (RoutingConfig, bridge_keys, bridge_values, causal_attention, language_layer, routed_ffn,
                     routed_attention, routed_layer, routed_qkv)
from .seeding import stream
from .seqio import MultimodalSequence, collate

TINY = dict(vocab_size=12, d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, max_len=32, expert_rank=2,
            bridge_rank=2, bits=2, d_c=3, d_b=2)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} value={self.value:.3e} tol={self.tolerance:.0e}"


def _result(name, value, tol, strict=False) -> CheckResult:
    ok = value < tol if strict else value <= tol
    return CheckResult(name, float(value), float(tol), bool(ok))


# ---------------------------------------------------------------- random fixtures


def random_layer(rng, d=8, hidden=8, rank=2, bridge_rank=2, scale=0.5) -> dict[str, np.ndarray]:
    """A routed layer with every factor (bridge included) set to random non-zero values."""
    def n(*shape):
        return rng.normal(0.0, scale, shape)

    p = {"lm.norm1": 1 + n(d) * 0.2, "lm.norm2": 1 + n(d) * 0.2, "vx.norm1": 1 + n(d) * 0.2,
         "vx.norm2": 1 + n(d) * 0.2}
    for w in ("wq", "wk", "wv", "wo"):
        p[f"lm.{w}"] = n(d, d)
    for s in ("lm", "vx"):
        p[f"{s}.ffn.wg"], p[f"{s}.ffn.wu"], p[f"{s}.ffn.wd"] = n(d, hidden), n(d, hidden), n(hidden, d)
    for w in ("q", "k", "v", "o"):
        p[f"vx.{w}.A"], p[f"vx.{w}.B"] = n(d, rank), n(rank, d)
    for w in ("k_img", "k_txt", "v_img", "v_txt"):
        p[f"br.{w}.A"], p[f"br.{w}.B"] = n(d, bridge_rank), n(bridge_rank, d)
    return p


def random_model(rng, **overrides) -> LibraModel:
    cfg = LibraConfig(**{**TINY, **overrides})
    model = LibraModel.create(cfg, seed=int(rng.integers(2 ** 31)))
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(0.0, 0.3, v.shape)
    return model


def random_sequence(rng, cfg: LibraConfig, n_patches: int, n_text: int, kind: str = "pretrain",
                    route_specials: bool = False) -> MultimodalSequence:
    """``<BOI> v.. <EOI> \\n t.. <EOS>`` with random ids and features; supervision as in the builders."""
    tokens = np.concatenate([[1], np.zeros(n_patches, int), [2, 3],
                             rng.integers(5, cfg.vocab_size, n_text), [4]]).astype(np.int64)
    n = len(tokens)
    is_patch = np.zeros(n, bool)
    is_patch[1:1 + n_patches] = True
    modality = is_patch.copy()
    if route_specials:
        modality[0] = modality[n_patches + 1] = True
    vis = np.zeros((n, 2), np.int64)
    vis[is_patch] = rng.integers(0, 2 ** cfg.bits, (n_patches, 2))
    cont = np.zeros((n, cfg.d_c))
    cont[is_patch] = rng.normal(size=(n_patches, cfg.d_c))
    nl = n_patches + 2
    if kind == "pretrain":
        sup = np.ones(n, bool)
        sup[-1] = False
        sup[nl - 1] = False
        meta = {"newline_pos": nl}
    else:
        first = nl + 1 + max(1, n_text // 2)
        sup = np.zeros(n, bool)
        sup[first - 1:n - 1] = True
        meta = {"newline_pos": nl, "answer_span": (first, n)}
    return MultimodalSequence(tokens, is_patch, modality, vis, cont, sup, False, kind, meta)


def random_modality(rng, length, batch=None) -> np.ndarray:
    shape = (length,) if batch is None else (batch, length)
    return rng.random(shape) < 0.5


# ---------------------------------------------------------------- references


def brute_force_attention(X: np.ndarray, modality: np.ndarray, lp: dict, cfg: RoutingConfig) -> np.ndarray:
    """Loop over every (query, key) pair and pick inner or bridged keys/values by an explicit modality test."""
    X = np.asarray(X, dtype=np.float64)
    L, D = X.shape
    H = cfg.n_heads
    dh = D // H
    m = np.asarray(modality, bool)

    def proj(name, i):
        w = lp[f"vx.{name}.A"] @ lp[f"vx.{name}.B"] if m[i] else lp[f"lm.w{name}"]
        return X[i] @ w

    def bridge(kind, i):
        side = "img" if m[i] else "txt"
        return X[i] @ (lp[f"br.{kind}_{side}.A"] @ lp[f"br.{kind}_{side}.B"])

    cos, sin = nc.rotary_tables(L, dh, cfg.rope_base)

    def rope(vec, pos):
        half = dh // 2
        rot = np.concatenate([-vec[half:], vec[:half]])
        return vec * cos[pos] + rot * sin[pos]

    out = np.zeros((L, D))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        for q in range(L):
            qv = rope(proj("q", q)[sl], q)
            scores, values = [], []
            for k in range(q + 1):
                key, val = proj("k", k)[sl], proj("v", k)[sl]
                if m[q] != m[k]:
                    key = key + bridge("k", k)[sl]
                    val = val + bridge("v", k)[sl]
                scores.append(float(qv @ rope(key, k)) / np.sqrt(dh))
                values.append(val)
            s = np.array(scores)
            p = np.exp(s - s.max())
            p /= p.sum()
            out[q, sl] = p @ np.array(values)
    o = np.zeros((L, D))
    for i in range(L):
        if cfg.route_output_proj and m[i]:
            o[i] = out[i] @ (lp["vx.o.A"] @ lp["vx.o.B"])
        else:
            o[i] = out[i] @ lp["lm.wo"]
    return o


def simple_expert_attention(X, modality, lp, cfg: RoutingConfig) -> nc.Tensor:
    """Visual-expert attention without any bridge: routed Q/K/V, plain causal softmax, routed output."""
    x = nc.tensor(X)
    x = x if x.ndim == 3 else nc.reshape(x, (1,) + x.shape)
    m = np.asarray(modality, bool).reshape(x.shape[:2])
    b, L, D = x.shape
    H = cfg.n_heads
    dh = D // H
    q, k, v = routed_qkv(x, m, lp)
    cos, sin = nc.rotary_tables(L, dh, cfg.rope_base)

    def split(t):
        return nc.transpose(nc.reshape(t, (b, L, H, dh)), (0, 2, 1, 3))

    qh, kh, vh = nc.rotary(split(q), cos, sin), nc.rotary(split(k), cos, sin), split(v)
    probs = nc.softmax(nc.scale(qh @ nc.swap_last(kh), dh ** -0.5), mask=nc.tril_mask(L))
    o = nc.reshape(nc.transpose(probs @ vh, (0, 2, 1, 3)), (b, L, D))
    w_i = lp["vx.o.A"] @ lp["vx.o.B"]
    if cfg.route_output_proj and m.any():
        o = o @ w_i if m.all() else nc.where(m[..., None], o @ w_i, o @ lp["lm.wo"])
    else:
        o = o @ lp["lm.wo"]
    return o


# ---------------------------------------------------------------- suites


_OP_PARAMS = {
    "routed_qkv": ("lm.wq", "lm.wk", "lm.wv", "vx.q.", "vx.k.", "vx.v."),
    "bridge": ("br.",),
    "routed_attention": ("lm.w", "vx.q.", "vx.k.", "vx.v.", "vx.o.", "br."),
    "routed_ffn": ("lm.ffn.", "vx.ffn."),
}


def _pick(lp, key):
    return sorted(k for k in lp if k.startswith(_OP_PARAMS[key]))


def gradient_suite(seed: int = 0, n_seeds: int = 20, tol: float = 1e-5) -> list[CheckResult]:
    """Analytic vs central-difference gradients for the routed ops, both losses and the LFQ path.

    For the two losses each seed differentiates a rotating fifth of the parameter
    arrays (the rest held fixed), so every array is covered four times over 20 seeds.
    """
    rc = RoutingConfig(n_heads=2)
    worst: dict[str, float] = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    def check(fn, lp, key, *inputs):
        names = _pick(lp, key)
        fixed = {k: v for k, v in lp.items() if k not in names}

        def f(*ts):
            return fn(*ts[:len(inputs)], {**fixed, **dict(zip(names, ts[len(inputs):]))})

        return nc.finite_diff_check(f, list(inputs) + [lp[k] for k in names])

    for s in range(n_seeds):
        rng = stream(seed, f"checks.grad.{s}")
        lp = random_layer(rng)
        L = int(rng.integers(2, 7))
        m = random_modality(rng, L)
        m[0], m[-1] = True, False
        x = rng.normal(size=(L, 8))
        w = rng.normal(size=(L, 8))
        kv = rng.normal(size=(L, 8))

        note("routed_qkv", check(lambda X, p: nc.sum_(
            sum((t * w * (i + 1) for i, t in enumerate(routed_qkv(X, m, p))), nc.tensor(0.0))), lp, "routed_qkv", x))
        note("bridge_keys", check(
            lambda X, K, p: nc.sum_(nc.tanh(bridge_keys(K, X, m, p)[1]) * w), lp, "bridge", x, kv))
        note("bridge_values", check(
            lambda X, V, p: nc.sum_(nc.tanh(bridge_values(V, X, m, p)[1]) * w), lp, "bridge", x, kv))
        note("routed_attention", check(
            lambda X, p: nc.sum_(routed_attention(X, m, p, rc) * w), lp, "routed_attention", x))
        note("routed_ffn", check(lambda X, p: nc.sum_(routed_ffn(X, m, p) * w), lp, "routed_ffn", x))

        model = random_model(rng)
        all_names = sorted(model.params)
        names = all_names[s % 5::5]
        fixed = {k: v for k, v in model.params.items() if k not in names}
        from .train import pretrain_loss, sft_loss
        for kind, fn in (("pretrain", pretrain_loss), ("sft", sft_loss)):
            seqs = [random_sequence(rng, model.cfg, int(rng.integers(1, 4)), int(rng.integers(2, 5)), kind)
                    for _ in range(2)]
            batch = collate(seqs)

            def loss(*ts, fn=fn, batch=batch):
                P = {**nc.leaves(fixed), **dict(zip(names, ts))}
                return fn(P, batch, model.cfg)[0]

            note(f"{kind}_loss", nc.finite_diff_check(loss, [model.params[k] for k in names]))

        note("lfq_straight_through", _lfq_check(rng))

    return [_result(f"grad.{k}", v, tol, strict=True) for k, v in worst.items()]


def _lfq_check(rng) -> float:
    """The straight-through gradient equals the derivative of the surrogate with a frozen quantization offset."""
    cfg = TokenizerConfig(image_size=4, patch=2, d_c=4, n_layers=1, n_heads=2, bits=2, dec_hidden=8,
                          dec_context=False)
    P = init_tokenizer_params(cfg, seed=int(rng.integers(2 ** 31)))
    z0 = rng.normal(size=(1, 4, 2 * cfg.bits))
    target = rng.random((1, 4, cfg.patch_dim))
    dec = {k: P[k] for k in P if k.startswith("dec.")}
    dnames = sorted(dec)
    offset = _sign(z0) - z0

    def loss(zq, ws):
        recon = decoder_forward(dict(zip(dnames, ws)), zq, cfg)
        sh, ch = entropy_terms(z_, cfg)
        return nc.mse(recon, target) + nc.scale(sh - ch, 0.1)

    z_ = None

    def analytic(z, *ws):
        nonlocal z_
        z_ = z
        return loss(nc.straight_through(z, _sign), ws)

    def surrogate(z, *ws):
        nonlocal z_
        z_ = z
        return loss(z + nc.tensor(offset), ws)

    arrays = [z0] + [dec[k] for k in dnames]
    ana = nc.analytic_grad(analytic, arrays)
    num = nc.numeric_grad(surrogate, arrays)
    return max(float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))) for a, n in zip(ana, num))


def oracle_suite(seed: int = 0, n_configs: int = 50, tol: float = 1e-10) -> list[CheckResult]:
    """Vectorized routed attention vs the per-pair loop, L <= 8."""
    worst = 0.0
    for c in range(n_configs):
        rng = stream(seed, f"checks.oracle.{c}")
        H = int(rng.choice([1, 2, 4]))
        d = H * 2 * int(rng.integers(1, 3))
        L = int(rng.integers(1, 9))
        rc = RoutingConfig(n_heads=H, route_output_proj=bool(rng.integers(2)))
        lp = random_layer(rng, d=d, hidden=4, rank=int(rng.integers(1, d + 1)),
                          bridge_rank=int(rng.integers(1, d + 1)))
        m = random_modality(rng, L)
        x = rng.normal(size=(L, d))
        fast = routed_attention(x, m, lp, rc).data
        worst = max(worst, float(np.max(np.abs(fast - brute_force_attention(x, m, lp, rc)))))
    return [_result("oracle.block_attention", worst, tol)]


def ablation_suite(seed: int = 0, n_cases: int = 10) -> list[CheckResult]:
    """Zero bridge -> simple visual expert; identity expert + zero bridge -> vanilla causal attention."""
    bridge_gap = vanilla_gap = layer_gap = 0.0
    for c in range(n_cases):
        rng = stream(seed, f"checks.ablation.{c}")
        d, L = 8, int(rng.integers(2, 9))
        rc = RoutingConfig(n_heads=2)
        lp = random_layer(rng, d=d)
        for w in ("k_img", "k_txt", "v_img", "v_txt"):
            lp[f"br.{w}.B"] = np.zeros_like(lp[f"br.{w}.B"])
        m = random_modality(rng, L, batch=2)
        x = rng.normal(size=(2, L, d))
        got = routed_attention(x, m, lp, rc).data
        ref = simple_expert_attention(x, m, lp, rc).data
        bridge_gap = max(bridge_gap, float(np.max(np.abs(got - ref))) if not np.array_equal(got, ref) else 0.0)

        tied = dict(lp)
        for w in ("q", "k", "v", "o"):
            tied[f"vx.{w}.A"], tied[f"vx.{w}.B"] = lp[f"lm.w{w}"].copy(), np.eye(d)
        for w in ("ffn.wg", "ffn.wu", "ffn.wd", "norm1", "norm2"):
            tied[f"vx.{w}"] = lp[f"lm.{w}"].copy()
        got = routed_attention(x, m, tied, rc).data
        ref = causal_attention(nc.tensor(x), lp["lm.wq"], lp["lm.wk"], lp["lm.wv"], lp["lm.wo"], 2).data
        vanilla_gap = max(vanilla_gap, 0.0 if np.array_equal(got, ref) else float(np.max(np.abs(got - ref))))
        got = routed_layer(x, m, tied, rc).data
        ref = language_layer(x, lp, rc).data
        layer_gap = max(layer_gap, 0.0 if np.array_equal(got, ref) else float(np.max(np.abs(got - ref))))
    return [_result("ablation.zero_bridge_equals_simple_expert", bridge_gap, 0.0),
            _result("ablation.tied_expert_equals_vanilla_attention", vanilla_gap, 0.0),
            _result("ablation.tied_layer_equals_language_layer", layer_gap, 0.0)]


def frozen_lm_suite(seed: int = 0, n_cases: int = 10, tol: float = 1e-12) -> list[CheckResult]:
    """Text-only sequences through the full model give the standalone backbone's logits."""
    worst = 0.0
    for c in range(n_cases):
        rng = stream(seed, f"checks.frozen.{c}")
        model = random_model(rng, n_layers=2)
        tokens = rng.integers(0, model.cfg.vocab_size, (2, int(rng.integers(1, 12))))
        L = tokens.shape[1]
        seqs = [MultimodalSequence(t, np.zeros(L, bool), np.zeros(L, bool), np.zeros((L, 2), np.int64),
                                   np.zeros((L, model.cfg.d_c)), np.ones(L, bool)) for t in tokens]
        full = model.logits(seqs)[0]
        worst = max(worst, float(np.max(np.abs(full - model.backbone_logits(tokens)))))
    return [_result("frozen_lm.text_only_matches_backbone", worst, tol)]


def _perturbed(seq: MultimodalSequence, j: int, rng) -> MultimodalSequence:
    tokens, vis, cont = seq.tokens.copy(), seq.vis_ids.copy(), seq.contiguous.copy()
    if seq.is_patch[j]:
        vis[j] = (vis[j] + 1) % 4
        cont[j] = cont[j] + rng.normal(size=cont.shape[1])
    else:
        tokens[j] = 5 + (tokens[j] - 4) % 7
    return MultimodalSequence(tokens, seq.is_patch, seq.modality, vis, cont, seq.supervised,
                              seq.disable_contiguous, seq.kind, seq.meta)


def causality_suite(seed: int = 0, n_cases: int = 20) -> list[CheckResult]:
    """Perturbing position j leaves every output at positions < j exactly unchanged."""
    leak = 0.0
    moved = True
    for c in range(n_cases):
        rng = stream(seed, f"checks.causal.{c}")
        model = random_model(rng, n_layers=2)
        seq = random_sequence(rng, model.cfg, int(rng.integers(1, 5)), int(rng.integers(1, 6)))
        j = int(rng.integers(1, len(seq)))
        base = model.logits([seq])
        pert = model.logits([_perturbed(seq, j, rng)])
        for a, b in zip(base, pert):
            leak = max(leak, float(np.max(np.abs(a[0, :j] - b[0, :j]))))
            moved = moved and not np.array_equal(a[0, j:], b[0, j:])
    return [_result("causality.prefix_unchanged", leak, 0.0),
            CheckResult("causality.suffix_changes", float(moved), 1.0, bool(moved))]


def v_text_inertness_suite(seed: int = 0, n_cases: int = 10) -> list[CheckResult]:
    """With every vision position ahead of every text position, the text-side value bridge is unreachable.

    Only vision queries see cross-modal keys, and those keys are text rows that come
    later, so the causal mask removes them.
    """
    gap = 0.0
    for c in range(n_cases):
        rng = stream(seed, f"checks.vtext.{c}")
        model = random_model(rng, n_layers=2, route_specials=True)
        seqs = [random_sequence(rng, model.cfg, int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                                route_specials=True) for _ in range(2)]
        batch = collate(seqs)
        base = forward(model.leaves(), batch, model.cfg)
        P = dict(model.params)
        for i in range(model.cfg.n_layers):
            for f in ("A", "B"):
                k = f"L{i}.br.v_txt.{f}"
                P[k] = P[k] + rng.normal(size=P[k].shape)
        pert = forward(nc.leaves(P), batch, model.cfg)
        gap = max(gap, max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(base, pert)))
    return [_result("bridge.text_values_inert_image_first", gap, 0.0)]


def _relabel(seq: MultimodalSequence, positions, rng) -> MultimodalSequence:
    tokens, vis = seq.tokens.copy(), seq.vis_ids.copy()
    for p in positions:
        if seq.is_patch[p]:
            vis[p] = rng.integers(0, 4, 2)
        else:
            tokens[p] = rng.integers(5, 12)
    return MultimodalSequence(tokens, seq.is_patch, seq.modality, vis, seq.contiguous, seq.supervised,
                              seq.disable_contiguous, seq.kind, seq.meta)


def mask_law_suite(seed: int = 0, n_cases: int = 10) -> list[CheckResult]:
    """Unsupervised labels do not enter the loss; SFT never touches the vision heads."""
    from .train import pretrain_loss, sft_loss

    nl_gap = instr_gap = head_grad = 0.0
    for c in range(n_cases):
        rng = stream(seed, f"checks.mask.{c}")
        model = random_model(rng)
        P = model.leaves()
        seq = random_sequence(rng, model.cfg, 2, 4)
        nl = seq.meta["newline_pos"]
        # relabel the newline target; the newline token is also an input, so only swap its label
        batch = collate([seq])
        alt = collate([seq])
        alt.lang_target[0, nl - 1] = (alt.lang_target[0, nl - 1] + 1) % model.cfg.vocab_size
        a, b = pretrain_loss(P, batch, model.cfg)[0].data, pretrain_loss(P, alt, model.cfg)[0].data
        nl_gap = max(nl_gap, abs(float(a) - float(b)))

        sft = random_sequence(rng, model.cfg, 2, 6, kind="sft")
        first = sft.meta["answer_span"][0]
        batch = collate([sft])
        alt = collate([sft])
        off = ~alt.supervised[0]
        alt.lang_target[0, off] = (alt.lang_target[0, off] + 3) % model.cfg.vocab_size
        alt.vis_target[0, off] = (alt.vis_target[0, off] + 1) % 4
        a, b = sft_loss(P, batch, model.cfg)[0].data, sft_loss(P, alt, model.cfg)[0].data
        instr_gap = max(instr_gap, abs(float(a) - float(b)))

        P = model.leaves("sft")
        loss, _ = sft_loss(P, collate([sft]), model.cfg)
        nc.backward(loss)
        for k in ("vis.head1", "vis.head2"):
            g = P[k].grad
            head_grad = max(head_grad, 0.0 if g is None else float(np.max(np.abs(g))))
    return [_result("mask.newline_label_ignored", nl_gap, 0.0),
            _result("mask.instruction_labels_ignored", instr_gap, 0.0),
            _result("mask.sft_vision_head_grad_zero", head_grad, 0.0)]


SUITES = {
    "gradients": gradient_suite,
    "oracle": oracle_suite,
    "ablation": ablation_suite,
    "frozen_lm": frozen_lm_suite,
    "causality": causality_suite,
    "v_text_inertness": v_text_inertness_suite,
    "masking": mask_law_suite,
}


def run_all(seed: int = 0, suites=None) -> list[CheckResult]:
    out = []
    for name in suites or SUITES:
        out.extend(SUITES[name](seed))
    return out
