import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from libra_toy import probe
from libra_toy.checks import random_model, random_sequence
from libra_toy.probe import AttentionRecord


def _rec(maps):
    maps = np.asarray(maps, dtype=float)
    return AttentionRecord(maps, (0, maps.shape[2]), (0, maps.shape[3]))


def test_cross_layer_hand_case():
    r = _rec([[[[0.2, 0.8]]], [[[0.6, 0.4]]]])  # N=2, H=1
    assert probe.cross_layer_diff(r).tolist() == [0.2, 0.2]


def test_inner_layer_hand_case():
    r = _rec([[[[1.0, 0.0]], [[0.0, 1.0]]]])  # N=1, H=2
    assert probe.inner_layer_diff(r).tolist() == [[0.5, 0.5]]


def test_single_layer_and_single_head_are_zero():
    rng = np.random.default_rng(0)
    assert probe.cross_layer_diff(_rec(rng.random((1, 3, 2, 5)))).tolist() == [0.0]
    assert not probe.inner_layer_diff(_rec(rng.random((3, 1, 2, 5)))).any()


def test_identical_maps_give_exact_zeros():
    m = np.random.default_rng(1).random((1, 1, 2, 6))
    r = _rec(np.tile(m, (4, 3, 1, 1)))
    assert np.all(probe.cross_layer_diff(r) == 0.0)
    assert np.all(probe.inner_layer_diff(r) == 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_diffs_nonnegative_and_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    maps = rng.random((3, 4, 2, 5))
    r = _rec(maps)
    pl, ph = rng.permutation(3), rng.permutation(4)
    r2 = _rec(maps[pl][:, ph])
    cross, inner = probe.cross_layer_diff(r), probe.inner_layer_diff(r)
    assert np.all(cross >= 0) and np.all(inner >= 0)
    np.testing.assert_allclose(probe.cross_layer_diff(r2), cross[pl], rtol=0, atol=1e-15)
    np.testing.assert_allclose(probe.inner_layer_diff(r2), inner[pl][:, ph], rtol=0, atol=1e-15)


def test_activation_map_uniform_and_one_hot():
    u = _rec(np.full((2, 2, 1, 16), 1 / 16))
    assert np.all(probe.activation_map(u) == 1 / 16)
    one = np.zeros((2, 2, 1, 16))
    one[..., 7] = 1.0
    g = probe.activation_map(_rec(one), layer=1)
    assert g.shape == (4, 4) and np.count_nonzero(g) == 1 and g[1, 3] == 1.0
    with pytest.raises(ValueError):
        probe.activation_map(_rec(np.zeros((1, 1, 1, 5))))
    with pytest.raises(ValueError):
        probe.activation_map(_rec(np.zeros((1, 1, 2, 4))))


def test_record_attention_shapes_and_sums():
    rng = np.random.default_rng(2)
    model = random_model(rng, n_layers=2)
    seq = random_sequence(rng, model.cfg, 4, 3)
    q = len(seq) - 2
    r = probe.record_attention(model, seq, (q, q + 1), (1, 5))
    assert r.maps.shape == (2, 2, 1, 4)
    full = probe.record_attention(model, seq, (q, q + 1), (0, q + 1))
    np.testing.assert_allclose(full.maps.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(r.maps.sum(-1) <= 1.0 + 1e-12)
    with pytest.raises(ValueError):
        probe.record_attention(model, seq, (3, 3), (1, 5))
    with pytest.raises(ValueError):
        probe.record_attention(model, seq, (0, 1), (0, len(seq) + 1))


def test_capture_does_not_change_logits():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    seq = random_sequence(rng, model.cfg, 2, 2)
    before = model.logits([seq])
    cap = []
    during = model.logits([seq], capture=cap)
    assert cap
    for a, b in zip(before, during):
        assert np.array_equal(a, b)


def test_writers(tmp_path):
    r = _rec([[[[0.2, 0.8]], [[0.4, 0.6]]], [[[0.6, 0.4]], [[0.5, 0.5]]]])
    rows = probe.diff_rows(0, r)
    probe.write_diff_csv(tmp_path / "d.csv", rows)
    got = list(csv.reader(open(tmp_path / "d.csv")))
    assert got[0] == ["sample_id", "layer", "head", "diff"]
    assert len(got) == 1 + 2 + 4
    probe.write_grids(tmp_path / "g.json", {0: np.eye(2)})
    assert json.loads((tmp_path / "g.json").read_text()) == {"0": [[1.0, 0.0], [0.0, 1.0]]}
