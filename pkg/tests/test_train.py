import json

import numpy as np
import pytest

from libra_toy import numcore as nc
from libra_toy import train as T
from libra_toy.checks import random_model, random_sequence
from libra_toy.model import LibraModel
from libra_toy.optim import AdamW, OptimizerConfig, cosine_lr
from libra_toy.seqio import VOCAB, build_text_sequence, collate


def test_untrained_heads_give_uniform_vision_ce():
    rng = np.random.default_rng(0)
    model = LibraModel.create(random_model(rng).cfg, seed=0)
    seqs = [random_sequence(rng, model.cfg, 3, 4) for _ in range(2)]
    _, parts = T.pretrain_loss(model.leaves(), collate(seqs), model.cfg)
    assert parts["vis_ce1"] == pytest.approx(np.log(4), abs=1e-12)
    assert parts["vis_ce2"] == pytest.approx(np.log(4), abs=1e-12)


def test_pretrain_loss_is_mean_over_supervised_positions():
    rng = np.random.default_rng(1)
    model = random_model(rng)
    seq = random_sequence(rng, model.cfg, 2, 3)
    loss, parts = T.pretrain_loss(model.leaves(), collate([seq]), model.cfg)
    lang, v1, v2 = model.logits([seq])
    total = 0.0
    for l in np.flatnonzero(seq.supervised):
        if seq.target_is_patch[l]:
            for j, v in enumerate((v1, v2)):
                total -= nc.log_softmax_np(v[0, l])[seq.vis_target[l, j]]
        else:
            total -= nc.log_softmax_np(lang[0, l])[seq.lang_target[l]]
    assert float(loss.data) == pytest.approx(total / seq.supervised.sum(), rel=1e-12)


def test_perfect_answer_gives_zero_loss():
    rng = np.random.default_rng(2)
    model = random_model(rng)
    seq = random_sequence(rng, model.cfg, 2, 4, kind="sft")
    P = model.leaves()
    b = collate([seq])
    logits = np.full(b.tokens.shape + (model.cfg.vocab_size,), -1e4)
    np.put_along_axis(logits, b.lang_target[..., None], 0.0, axis=-1)
    ce = nc.cross_entropy(nc.tensor(logits), b.lang_target, b.supervised.astype(float))
    assert float(ce.data) == 0.0
    assert float(T.sft_loss(P, b, model.cfg)[0].data) > 0


def test_losses_reject_unsupervised_batches():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    seq = random_sequence(rng, model.cfg, 2, 3)
    seq.supervised[:] = False
    for fn in (T.pretrain_loss, T.sft_loss, T.lm_loss):
        with pytest.raises(ValueError):
            fn(model.leaves(), collate([seq]), model.cfg)


def test_schedule_peak_floor_and_continuity():
    cfg = OptimizerConfig(lr=1e-3, total_steps=100, warmup_steps=10)
    assert cosine_lr(10, cfg) == pytest.approx(1e-3)
    assert cosine_lr(100, cfg) == pytest.approx(0.0, abs=1e-18)
    assert abs(cosine_lr(9, cfg) - cosine_lr(10, cfg)) < 1.5e-4
    assert abs(cosine_lr(11, cfg) - cosine_lr(10, cfg)) < 1e-6
    assert cosine_lr(1, cfg) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        OptimizerConfig(total_steps=10, warmup_steps=10)


def test_adamw_clips_and_masks():
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    mask = {"w": np.array([[1.0, 0.0], [1.0, 1.0]])}
    opt = AdamW(params, ["w", "b"], OptimizerConfig(lr=0.1, total_steps=10, warmup_steps=0), mask)
    info = opt.step({"w": np.full((2, 2), 100.0), "b": np.zeros(2)})
    assert info["grad_norm"] == pytest.approx(np.sqrt(3 * 100.0 ** 2))
    assert params["w"][0, 1] == 1.0  # masked entries do not move at all, decay included
    assert params["w"][0, 0] < 1.0
    assert np.all(params["b"] == 1.0)  # vectors are not decayed


def _lm_data(n=8):
    return [build_text_sequence(t) for t in ["a red square", "a blue circle", "a green triangle"] * n]


def test_lm_stage_learns_and_freezes_newline_row():
    model = LibraModel.create(random_model(np.random.default_rng(4), vocab_size=len(VOCAB)).cfg, seed=0)
    before = model.params["lm.embed"][VOCAB.newline].copy()
    vision = model.params["vis.bank1"].copy()
    rows = T.train_loop(model, _lm_data(), T.stage_config("lm", steps=60, batch_size=8, log_every=10))
    assert rows[-1]["loss"] < rows[0]["loss"]
    assert np.array_equal(model.params["lm.embed"][VOCAB.newline], before)
    assert np.array_equal(model.params["vis.bank1"], vision)


def test_pretrain_step_keeps_backbone_checksum():
    rng = np.random.default_rng(5)
    model = random_model(rng, vocab_size=len(VOCAB))
    ck = model.backbone_checksum()
    data = [random_sequence(rng, model.cfg, 2, 3) for _ in range(4)]
    T.train_loop(model, data, T.stage_config("pretrain", steps=3, batch_size=2))
    assert model.backbone_checksum() == ck


def test_training_is_deterministic(tmp_path):
    rng = np.random.default_rng(6)
    base = random_model(rng, vocab_size=len(VOCAB))
    data = [random_sequence(rng, base.cfg, 2, 3) for _ in range(6)]
    outs = []
    for run in ("a", "b"):
        model = LibraModel(base.cfg, {k: v.copy() for k, v in base.params.items()})
        w = T.MetricsWriter(tmp_path / run / "m.jsonl")
        T.train_loop(model, data, T.stage_config("pretrain", steps=6, batch_size=3, log_every=1), metrics=w)
        w.close(tmp_path / run / "m.csv")
        outs.append(((tmp_path / run / "m.jsonl").read_bytes(), (tmp_path / run / "m.csv").read_bytes()))
    assert outs[0] == outs[1]
    first = json.loads(outs[0][0].splitlines()[0])
    assert {"step", "loss", "grad_norm", "lr", "text_ce", "vis_ce1", "vis_ce2"} <= set(first)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_dump(tmp_path):
    rng = np.random.default_rng(7)
    model = random_model(rng, vocab_size=len(VOCAB))
    model.params["vis.head1"][:] = np.inf
    data = [random_sequence(rng, model.cfg, 2, 3)]
    with pytest.raises(T.TrainingAborted):
        T.train_loop(model, data, T.stage_config("pretrain", steps=2, batch_size=1), ckpt_dir=tmp_path)
    dump = json.loads((tmp_path / "abort_step000001.json").read_text())
    assert dump["params"]["vis.head1"]["finite"] is False


def test_stage_config_shortened_warmup():
    assert T.stage_config("pretrain").warmup == 100
    assert T.stage_config("pretrain", steps=20).warmup == 2
    assert T.stage_config("pretrain", steps=20, warmup=5).warmup == 5
