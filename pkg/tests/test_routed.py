import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from libra_toy import numcore as nc
from libra_toy import routed
from libra_toy.checks import brute_force_attention, random_layer, simple_expert_attention
from libra_toy.routed import RoutingConfig


def _rank(m, tol=1e-10):
    """Row-reduction rank, no SVD."""
    a = np.array(m, dtype=float)
    r = 0
    rows, cols = a.shape
    for c in range(cols):
        piv = r + np.argmax(np.abs(a[r:, c])) if r < rows else None
        if piv is None or abs(a[piv, c]) < tol:
            continue
        a[[r, piv]] = a[[piv, r]]
        a[r + 1:] -= np.outer(a[r + 1:, c] / a[r, c], a[r])
        r += 1
        if r == rows:
            break
    return r


def test_compose_low_rank():
    rng = np.random.default_rng(0)
    assert not routed.compose_low_rank(np.zeros((8, 2)), rng.normal(size=(2, 8))).data.any()
    w = routed.compose_low_rank(rng.normal(size=(8, 2)), rng.normal(size=(2, 8))).data
    assert _rank(w) <= 2
    with pytest.raises(nc.ShapeError):
        routed.compose_low_rank(np.zeros((8, 2)), np.zeros((3, 8)))


def test_default_ranks():
    from libra_toy.model import LibraConfig

    cfg = LibraConfig()
    assert cfg.expert_rank == 16 and cfg.bridge_rank == 8


def test_qkv_all_language_is_plain_projection():
    rng = np.random.default_rng(1)
    lp = random_layer(rng)
    x = rng.normal(size=(5, 8))
    q, k, v = routed.routed_qkv(x, np.zeros(5, bool), lp)
    assert np.array_equal(q.data, x @ lp["lm.wq"])
    assert np.array_equal(v.data, x @ lp["lm.wv"])


def test_qkv_tied_experts_ignore_mask():
    rng = np.random.default_rng(2)
    lp = random_layer(rng)
    for n in "qkv":
        lp[f"vx.{n}.A"], lp[f"vx.{n}.B"] = lp[f"lm.w{n}"].copy(), np.eye(8)
    x = rng.normal(size=(6, 8))
    a = routed.routed_qkv(x, rng.random(6) < 0.5, lp)
    b = routed.routed_qkv(x, np.zeros(6, bool), lp)
    for s, t in zip(a, b):
        assert np.array_equal(s.data, t.data)


def test_qkv_two_rows_hand_set():
    lp = random_layer(np.random.default_rng(3), d=2, hidden=2, rank=1, bridge_rank=1)
    lp["lm.wq"] = np.array([[1.0, 2.0], [3.0, 4.0]])
    lp["vx.q.A"], lp["vx.q.B"] = np.array([[1.0], [0.0]]), np.array([[5.0, -1.0]])
    x = np.array([[1.0, 1.0], [2.0, -1.0]])
    q, _, _ = routed.routed_qkv(x, np.array([True, False]), lp)
    assert np.array_equal(q.data, [[5.0, -1.0], [-1.0, 0.0]])


def test_bridge_keys_values():
    rng = np.random.default_rng(4)
    lp = random_layer(rng)
    x, k = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    m = np.array([True, True, False, False, True])
    inner, cross = routed.bridge_keys(k, x, m, lp)
    assert inner.data is k or np.array_equal(inner.data, k)
    for i in range(5):
        side = "img" if m[i] else "txt"
        expect = k[i] + x[i] @ (lp[f"br.k_{side}.A"] @ lp[f"br.k_{side}.B"])
        np.testing.assert_allclose(cross.data[i], expect, rtol=0, atol=1e-12)
    for w in ("k_img", "k_txt", "v_img", "v_txt"):
        lp[f"br.{w}.B"] = np.zeros_like(lp[f"br.{w}.B"])
    assert np.array_equal(routed.bridge_keys(k, x, m, lp)[1].data, k)
    assert np.array_equal(routed.bridge_values(k, x, m, lp)[1].data, k)


def test_single_token_attention():
    rng = np.random.default_rng(5)
    lp = random_layer(rng)
    x = rng.normal(size=(1, 8))
    cap = []
    out = routed.routed_attention(x, np.array([False]), lp, RoutingConfig(n_heads=2), capture=cap)
    np.testing.assert_allclose(out.data, x @ lp["lm.wv"] @ lp["lm.wo"], rtol=0, atol=1e-12)
    assert cap[0].shape == (1, 2, 1, 1) and np.all(cap[0] == 1.0)


def test_all_language_equals_plain_causal_attention():
    rng = np.random.default_rng(6)
    lp = random_layer(rng)
    x = rng.normal(size=(1, 7, 8))
    got = routed.routed_attention(x, np.zeros((1, 7), bool), lp, RoutingConfig(n_heads=2)).data
    ref = routed.causal_attention(nc.tensor(x), lp["lm.wq"], lp["lm.wk"], lp["lm.wv"], lp["lm.wo"], 2).data
    assert np.array_equal(got, ref)


def test_fixed_l4_block_oracle():
    rng = np.random.default_rng(7)
    lp = random_layer(rng, d=4, hidden=4, rank=1, bridge_rank=2)
    x = rng.normal(size=(4, 4))
    m = np.array([True, True, False, False])
    cfg = RoutingConfig(n_heads=1)
    got = routed.routed_attention(x, m, lp, cfg).data
    assert np.max(np.abs(got - brute_force_attention(x, m, lp, cfg))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 8), st.sampled_from([1, 2]), st.booleans())
def test_block_oracle_random(seed, length, heads, route_out):
    rng = np.random.default_rng(seed)
    lp = random_layer(rng, d=4, hidden=4, rank=2, bridge_rank=2)
    x = rng.normal(size=(length, 4))
    m = rng.random(length) < 0.5
    cfg = RoutingConfig(n_heads=heads, route_output_proj=route_out)
    got = routed.routed_attention(x, m, lp, cfg).data
    assert np.max(np.abs(got - brute_force_attention(x, m, lp, cfg))) <= 1e-10


def test_zero_bridge_matches_simple_expert_bitwise():
    rng = np.random.default_rng(8)
    lp = random_layer(rng)
    for w in ("k_img", "k_txt", "v_img", "v_txt"):
        lp[f"br.{w}.B"] = np.zeros_like(lp[f"br.{w}.B"])
    x = rng.normal(size=(2, 6, 8))
    m = rng.random((2, 6)) < 0.5
    cfg = RoutingConfig(n_heads=2)
    assert np.array_equal(routed.routed_attention(x, m, lp, cfg).data, simple_expert_attention(x, m, lp, cfg).data)


def test_capture_is_observation_only():
    rng = np.random.default_rng(9)
    lp = random_layer(rng)
    x = rng.normal(size=(5, 8))
    m = np.array([True, True, False, False, False])
    cfg = RoutingConfig(n_heads=2)
    cap = []
    a = routed.routed_attention(x, m, lp, cfg, capture=cap).data
    assert np.array_equal(a, routed.routed_attention(x, m, lp, cfg).data)
    np.testing.assert_allclose(cap[0].sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.triu(cap[0][0, 0], 1) == 0)


def test_ffn_routing():
    rng = np.random.default_rng(10)
    lp = random_layer(rng)
    x = rng.normal(size=(6, 8))
    m = np.array([True, False, True, False, False, True])
    out = routed.routed_ffn(x, m, lp).data
    for i in range(6):
        s = "vx" if m[i] else "lm"
        ref = routed.ffn(nc.tensor(x[i:i + 1]), lp[f"{s}.ffn.wg"], lp[f"{s}.ffn.wu"], lp[f"{s}.ffn.wd"]).data[0]
        np.testing.assert_allclose(out[i], ref, rtol=0, atol=1e-12)
    vis = routed.routed_ffn(x, np.ones(6, bool), lp).data
    assert np.array_equal(vis, routed.ffn(nc.tensor(x), lp["vx.ffn.wg"], lp["vx.ffn.wu"], lp["vx.ffn.wd"]).data)
    for n in ("wg", "wu", "wd"):
        lp[f"vx.ffn.{n}"] = lp[f"lm.ffn.{n}"]
    assert np.array_equal(routed.routed_ffn(x, m, lp).data, routed.routed_ffn(x, ~m, lp).data)


def test_mask_shape_error():
    lp = random_layer(np.random.default_rng(11))
    with pytest.raises(nc.ShapeError):
        routed.routed_qkv(np.zeros((4, 8)), np.zeros(3, bool), lp)


def test_init_vision_side():
    rng = np.random.default_rng(12)
    lang = routed.init_language_layer(rng, 16, 32, 2)
    vis = routed.init_vision_side(rng, lang, 16, 4, 8)
    assert vis["vx.q.A"].shape == (16, 4) and not vis["vx.q.B"].any()
    assert vis["br.v_txt.A"].shape == (16, 8) and not vis["br.v_txt.B"].any()
    assert np.array_equal(vis["vx.ffn.wg"], lang["lm.ffn.wg"])
    assert vis["vx.ffn.wg"] is not lang["lm.ffn.wg"]
