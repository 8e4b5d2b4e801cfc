import numpy as np
import pytest

from libra_toy import model as M
from libra_toy.checkpoint import CheckpointError, load_arrays
from libra_toy.checks import random_model, random_sequence
from libra_toy.imgtok import ImageTokens
from libra_toy.seqio import VOCAB, build_pretrain_sequence, build_text_sequence, collate


def _seq(rng, cfg, n_patches=3, n_text=4):
    return random_sequence(rng, cfg, n_patches, n_text)


def test_logit_shapes():
    model = M.LibraModel.create(M.LibraConfig(), seed=0)
    rng = np.random.default_rng(0)
    img = ImageTokens(rng.normal(size=(16, 32)), rng.integers(0, 32, (16, 2)))
    seq = build_pretrain_sequence(img, "abcdefghij")
    lang, v1, v2 = model.logits([seq])
    assert lang.shape == (1, 30, len(VOCAB)) and v1.shape == (1, 30, 32) and v2.shape == (1, 30, 32)


def test_text_only_is_bit_identical_to_backbone():
    rng = np.random.default_rng(1)
    model = random_model(rng, n_layers=2)
    seq = build_text_sequence("abc", d_c=model.cfg.d_c)
    seq.tokens = np.minimum(seq.tokens, model.cfg.vocab_size - 1)
    assert np.array_equal(model.logits([seq])[0], model.backbone_logits(seq.tokens[None]))


def test_appending_keeps_prefix_logits():
    rng = np.random.default_rng(2)
    model = random_model(rng, n_layers=2)
    seq = _seq(rng, model.cfg)
    longer = M.append_text(seq, 6)
    a, b = model.logits([seq]), model.logits([longer])
    for x, y in zip(a, b):
        assert np.array_equal(x[0], y[0, :len(seq)])


def test_length_limit():
    model = M.LibraModel.create(M.LibraConfig(max_len=8))
    with pytest.raises(ValueError, match="max_len"):
        model.backbone_logits(np.zeros((1, 9), int))


def test_generation_is_deterministic():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    prefix = M.truncate(_seq(rng, model.cfg), 3 + 3)  # through the newline
    out = model.generate_text(prefix, 5)
    assert out == model.generate_text(prefix, 5)
    assert len(out) <= 5


def test_one_hot_eos_logits_give_empty_generation(monkeypatch):
    rng = np.random.default_rng(4)
    model = random_model(rng)
    prefix = M.truncate(_seq(rng, model.cfg), 6)

    def fake_forward(P, batch, cfg, capture=None, heads=("lang", "vis")):
        lang = np.zeros(batch.tokens.shape + (cfg.vocab_size,))
        lang[..., VOCAB.eos] = 1.0
        return M.nc.tensor(lang), None, None

    monkeypatch.setattr(M, "forward", fake_forward)
    assert model.generate_text(prefix, 5) == []


def test_generation_needs_newline():
    rng = np.random.default_rng(4)
    model = random_model(rng)
    with pytest.raises(ValueError):
        model.generate_text(M.truncate(_seq(rng, model.cfg), 2), 3)


def test_complete_image_emits_ids_in_range():
    rng = np.random.default_rng(5)
    model = random_model(rng)
    img = ImageTokens(rng.normal(size=(4, model.cfg.d_c)), rng.integers(0, 4, (4, 2)))
    ids = model.complete_image(M.image_prefix(img, 3), 4)
    assert ids.shape == (4, 2)
    assert np.array_equal(ids[:3], img.ids[:3])
    assert ids.min() >= 0 and ids.max() < model.cfg.codebook_size
    full = model.complete_image(M.image_prefix(img, 0), 4)
    assert np.array_equal(full, model.complete_image(M.image_prefix(img, 0), 4))
    with pytest.raises(ValueError):
        model.complete_image(M.image_prefix(img, 4), 4)


def test_image_prefix_contiguous_switch():
    rng = np.random.default_rng(6)
    img = ImageTokens(rng.normal(size=(4, 3)), rng.integers(0, 4, (4, 2)))
    off = M.image_prefix(img, 2)
    on = M.image_prefix(img, 2, disable_contiguous=False)
    assert off.disable_contiguous and not off.contiguous.any()
    assert np.array_equal(on.contiguous[1:], img.contiguous[:2])


def test_stage_partition():
    model = M.LibraModel.create(M.LibraConfig(n_layers=2))
    names = set(model.params)
    lm = M.trainable_names(names, "lm")
    pre = M.trainable_names(names, "pretrain")
    assert lm and pre and not (lm & pre)
    assert M.trainable_names(names, "sft") == names
    assert all(M.is_backbone(n) for n in lm)
    with pytest.raises(ValueError):
        M.trainable_names(names, "rlhf")


def test_vision_init():
    model = M.LibraModel.create(M.LibraConfig(n_layers=1))
    p = model.params
    assert not p["vis.head1"].any() and not p["L0.vx.q.B"].any() and not p["L0.br.k_img.B"].any()
    assert np.array_equal(p["L0.vx.ffn.wu"], p["L0.lm.ffn.wu"])
    assert np.array_equal(p["vis.norm_f"], p["lm.norm_f"])


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    model = random_model(rng)
    model.save(tmp_path / "m.ckpt")
    back = M.LibraModel.load(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    for _ in range(5):
        seq = _seq(rng, model.cfg, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        for a, b in zip(model.logits([seq]), back.logits([seq])):
            assert np.array_equal(a, b)
    _, header = load_arrays(tmp_path / "m.ckpt")
    names = [e["name"] for e in header["arrays"]]
    assert sorted(names) == sorted(model.params) and len(names) == len(set(names))


def test_load_with_mismatched_width_fails(tmp_path):
    model = M.LibraModel.create(M.LibraConfig(d_model=16, n_heads=2, n_layers=1))
    model.save(tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="d_model"):
        M.LibraModel.load(tmp_path / "m.ckpt", M.LibraConfig(d_model=32, n_heads=2, n_layers=1))


def test_config_validation():
    with pytest.raises(ValueError):
        M.LibraConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        M.LibraConfig.from_dict({"d_model": 8, "wings": 2})


def test_batch_padding_does_not_change_real_positions():
    rng = np.random.default_rng(8)
    model = random_model(rng)
    a, b = _seq(rng, model.cfg, 2, 2), _seq(rng, model.cfg, 3, 5)
    solo = model.logits([a])
    both = model.logits(collate([a, b]))
    for x, y in zip(solo, both):
        np.testing.assert_allclose(x[0], y[0, :len(a)], rtol=0, atol=1e-12)
