"""Losses, staged training loops, metrics and evaluation helpers."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .model import LibraModel, backbone_forward, forward, grad_masks, trainable_names
from .optim import AdamW, OptimizerConfig, cosine_lr  # noqa: F401  (re-exported)
from .seeding import stream
from .seqio import VOCAB, Batch, MultimodalSequence, collate

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def _weights(batch: Batch):
    lang_w = (batch.supervised & ~batch.target_is_patch).astype(np.float64)
    vis_w = (batch.supervised & batch.target_is_patch).astype(np.float64)
    return lang_w, vis_w


def pretrain_loss(P: dict, batch: Batch, cfg):
    """Mean over supervised positions of text CE, or CE(head1) + CE(head2) where the target is a patch."""
    n = int(batch.supervised.sum())
    if n == 0:
        raise ValueError("pretrain_loss: batch has no supervised positions")
    lang_w, vis_w = _weights(batch)
    lang, v1, v2 = forward(P, batch, cfg)
    text = nc.cross_entropy(lang, batch.lang_target, lang_w)
    parts = {"text_ce": float(text.data) / max(1.0, lang_w.sum())}
    total = text
    if vis_w.any():
        c1 = nc.cross_entropy(v1, batch.vis_target[..., 0], vis_w)
        c2 = nc.cross_entropy(v2, batch.vis_target[..., 1], vis_w)
        total = total + c1 + c2
        parts["vis_ce1"] = float(c1.data) / vis_w.sum()
        parts["vis_ce2"] = float(c2.data) / vis_w.sum()
    return nc.scale(total, 1.0 / n), parts


def sft_loss(P: dict, batch: Batch, cfg):
    """Mean text CE over answer targets (and the closing <EOS>); vision heads are not evaluated."""
    n = int(batch.supervised.sum())
    if n == 0:
        raise ValueError("sft_loss: batch has no supervised positions")
    lang, _, _ = forward(P, batch, cfg, heads=("lang",))
    w = batch.supervised.astype(np.float64)
    text = nc.cross_entropy(lang, batch.lang_target, w)
    return nc.scale(text, 1.0 / n), {"text_ce": float(text.data) / n}


def lm_loss(P: dict, batch: Batch, cfg):
    """Backbone-only next-token loss on language sequences."""
    n = int(batch.supervised.sum())
    if n == 0:
        raise ValueError("lm_loss: batch has no supervised positions")
    logits = backbone_forward(P, batch.tokens, cfg)
    text = nc.cross_entropy(logits, batch.lang_target, batch.supervised.astype(np.float64))
    return nc.scale(text, 1.0 / n), {"text_ce": float(text.data) / n}


LOSSES = {"lm": lm_loss, "pretrain": pretrain_loss, "sft": sft_loss}


def stage_grads(loss_fn, model: LibraModel, batch: Batch, stage: str):
    """(loss value, parts, grads for every trainable name; zeros where the graph does not reach)."""
    P = model.leaves(stage)
    loss, parts = loss_fn(P, batch, model.cfg)
    nc.backward(loss)
    names = trainable_names(model.params, stage)
    grads = {k: P[k].grad if P[k].grad is not None else np.zeros_like(model.params[k]) for k in names}
    return float(loss.data), parts, grads


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    clip_norm: float = 1.0
    log_every: int = 50
    ckpt_every: int = 0
    contiguous_dropout: float = 0.0
    seed: int = 0

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, total_steps=self.steps, warmup_steps=self.warmup,
                               betas=tuple(self.betas), eps=self.eps, weight_decay=self.weight_decay,
                               clip_norm=self.clip_norm)


STAGE_DEFAULTS = {
    "lm": dict(steps=1500, lr=3e-3, warmup=100, batch_size=16),
    "pretrain": dict(steps=2000, lr=3e-4, warmup=100, batch_size=16, contiguous_dropout=0.3),
    "sft": dict(steps=500, lr=1e-4, warmup=30, batch_size=16),
}

# full-size recipe for reference; unused at toy scale
LARGE_SCALE = {
    "pretrain": dict(steps=40000, warmup=2000, batch_size=1280, lr=1e-4),
    "sft": dict(steps=7000, warmup=300, batch_size=128, lr=2e-5),
}


def stage_config(stage: str, **overrides) -> TrainConfig:
    """Stage defaults with overrides; a shortened run gets warmup capped at a tenth of its steps."""
    merged = {**STAGE_DEFAULTS[stage], **overrides}
    if "warmup" not in overrides:
        merged["warmup"] = min(merged["warmup"], merged["steps"] // 10)
    return TrainConfig(stage=stage, **merged)


class MetricsWriter:
    """JSONL stream of per-step metrics plus a CSV summary written on close."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")
        else:
            self._fh = None

    def __call__(self, row: dict) -> None:
        for k, v in row.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise TrainingAborted(f"non-finite metric {k} at step {row.get('step')}")
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self, summary_path=None) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None
        if summary_path and self.rows:
            keys = sorted({k for r in self.rows for k in r})
            with open(summary_path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=keys)
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: (f"{r[k]:.10g}" if isinstance(r.get(k), float) else r.get(k, "")) for k in keys})


def _round(v):
    return float(f"{v:.10g}") if isinstance(v, float) else v


def train_loop(model: LibraModel, data: list[MultimodalSequence], cfg: TrainConfig, metrics=None,
               ckpt_dir=None) -> list[dict]:
    """Run ``cfg.steps`` optimizer steps of ``cfg.stage`` on ``data``; parameters update in place."""
    if not data:
        raise ValueError("train_loop: no training data")
    stage = cfg.stage
    loss_fn = LOSSES[stage]
    names = trainable_names(model.params, stage)
    opt = AdamW(model.params, names, cfg.optimizer(), grad_masks(model.params, stage))
    rng = stream(cfg.seed, f"train.{stage}.batches")
    drop_rng = stream(cfg.seed, f"train.{stage}.contiguous_dropout")
    rows = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        batch = collate([data[i] for i in idx])
        if cfg.contiguous_dropout:
            batch.disable_contiguous = batch.disable_contiguous | (drop_rng.random(len(idx)) < cfg.contiguous_dropout)
        try:
            loss, parts, grads = stage_grads(loss_fn, model, batch, stage)
        except nc.NonFiniteError as e:
            _abort(ckpt_dir, step, str(e), model)
        if not np.isfinite(loss):
            _abort(ckpt_dir, step, f"loss {loss}", model)
        info = opt.step(grads)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "loss": _round(loss), **{k: _round(v) for k, v in parts.items()},
                   "grad_norm": _round(info["grad_norm"]), "lr": _round(info["lr"])}
            rows.append(row)
            if metrics is not None:
                metrics(row)
        if ckpt_dir and cfg.ckpt_every and step % cfg.ckpt_every == 0:
            model.save(Path(ckpt_dir) / f"{stage}_step{step:06d}.ckpt", {"stage": stage, "step": step})
    return rows


def _abort(ckpt_dir, step, reason, model):
    if ckpt_dir:
        dump = Path(ckpt_dir) / f"abort_step{step:06d}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        stats = {k: {"absmax": float(np.max(np.abs(v))), "finite": bool(np.isfinite(v).all())}
                 for k, v in model.params.items()}
        dump.write_text(json.dumps({"step": step, "reason": reason, "params": stats}, indent=1, sort_keys=True))
    raise TrainingAborted(f"step {step}: {reason}")


# ---------------------------------------------------------------- evaluation


def _chunks(seqs, size):
    for s in range(0, len(seqs), size):
        yield collate(seqs[s:s + size])


def _caption_targets(b):
    """Supervised positions whose target is a caption character or the closing <EOS>."""
    return b.supervised & ~b.target_is_patch & ~b.is_patch & (b.tokens != VOCAB.eoi) & (b.tokens != VOCAB.boi)


def text_view(seq: MultimodalSequence) -> MultimodalSequence:
    """Drop the patch positions: ``<BOI><EOI>\\n text``, the layout the backbone is trained on."""
    keep = ~seq.is_patch
    return MultimodalSequence(seq.tokens[keep], seq.is_patch[keep], np.zeros(int(keep.sum()), bool),
                              seq.vis_ids[keep], seq.contiguous[keep], seq.supervised[keep],
                              seq.disable_contiguous, seq.kind, dict(seq.meta))


def caption_stats(model: LibraModel, seqs: list[MultimodalSequence], text_only: bool = False,
                  chunk: int = 32) -> dict:
    """Mean CE and argmax accuracy over language targets inside the caption (chars + <EOS>).

    ``text_only`` evaluates the standalone backbone instead of the full model.
    """
    ce_sum, correct, count = 0.0, 0, 0
    P = model.leaves()
    if text_only:
        seqs = [text_view(s) for s in seqs]
    for b in _chunks(seqs, chunk):
        if text_only:
            lang = backbone_forward(P, b.tokens, model.cfg).data
        else:
            lang = forward(P, b, model.cfg, heads=("lang",))[0].data
        w = _caption_targets(b)
        logp = nc.log_softmax_np(lang)
        picked = np.take_along_axis(logp, b.lang_target[..., None], axis=-1)[..., 0]
        ce_sum += float(-picked[w].sum())
        correct += int((lang.argmax(-1) == b.lang_target)[w].sum())
        count += int(w.sum())
    return {"ce": ce_sum / count, "accuracy": correct / count, "count": count}


def vision_ce(model: LibraModel, seqs: list[MultimodalSequence], chunk: int = 32) -> tuple[float, float]:
    sums, count = np.zeros(2), 0
    P = model.leaves()
    for b in _chunks(seqs, chunk):
        _, v1, v2 = forward(P, b, model.cfg, heads=("vis",))
        w = b.supervised & b.target_is_patch
        for j, v in enumerate((v1.data, v2.data)):
            logp = nc.log_softmax_np(v)
            sums[j] -= np.take_along_axis(logp, b.vis_target[..., j:j + 1], axis=-1)[..., 0][w].sum()
        count += int(w.sum())
    return float(sums[0] / count), float(sums[1] / count)


def unigram_accuracy(train_captions: list[str], eval_seqs: list[MultimodalSequence]) -> float:
    """Accuracy of always predicting the most frequent caption token (chars and <EOS>)."""
    counts: dict[int, int] = {}
    for c in train_captions:
        for t in VOCAB.encode(c) + [VOCAB.eos]:
            counts[t] = counts.get(t, 0) + 1
    best = max(counts, key=lambda t: (counts[t], -t))
    hit = total = 0
    for s in eval_seqs:
        w = _caption_targets(s)
        hit += int((s.lang_target[w] == best).sum())
        total += int(w.sum())
    return hit / total


def save_run_config(out_dir, **sections) -> Path:
    """Effective-config snapshot written beside a run's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"

    def conv(v):
        if hasattr(v, "__dataclass_fields__"):
            return asdict(v)
        return v

    path.write_text(json.dumps({k: conv(v) for k, v in sections.items()}, indent=2, sort_keys=True, default=str))
    return path
