"""Run orchestration: corpus, tokenizer, backbone, staged training, decoding and probes.

Each ``*_run`` function owns one output directory and writes its artifacts
there (checkpoints, ``metrics.jsonl``, ``metrics.csv``, ``eval.json``,
``effective_config.json``). The CLI is a thin layer over these.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import imgtok, probe, seqio
from .checks import SUITES
from .model import LibraConfig, LibraModel, caption_prefix, image_prefix, truncate
from .seqio import VOCAB, build_pretrain_sequence, build_sft_sequence, build_text_sequence
from .train import (MetricsWriter, TrainConfig, caption_stats, save_run_config, stage_config, train_loop,
                    unigram_accuracy, vision_ce)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


SECTIONS = {
    "data": {"n_train": 2000, "n_eval": 200, "image_size": 16},
    "tokenizer": asdict(imgtok.TokenizerConfig()),
    "tokenizer_train": {k: v for k, v in asdict(imgtok.TokenizerTrainConfig()).items() if k != "opt"},
    "model": asdict(LibraConfig()),
    "lm": {},
    "pretrain": {},
    "sft": {},
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"stage"}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path) -> dict:
    """Read a JSON object (``{"section": {...}}``) or flat ``section.key = value`` lines.

    Returns the overrides grouped by section; unknown sections or keys are errors.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        flat = {}
        for sec, body in raw.items():
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {sec!r} must be an object")
            flat.update({f"{sec}.{k}": v for k, v in body.items()})
    else:
        flat = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            flat[k] = _parse_value(v)
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in flat.items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        allowed = _TRAIN_KEYS if sec in ("lm", "pretrain", "sft") else set(SECTIONS[sec])
        if name not in allowed:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        out[sec][name] = value
    return out


def resolve(overrides: dict | None) -> dict:
    """Defaults merged with overrides, one dict per section (training stages fully expanded)."""
    overrides = overrides or {}
    res = {s: {**d, **overrides.get(s, {})} for s, d in SECTIONS.items()}
    for stage in ("lm", "pretrain", "sft"):
        res[stage] = asdict(stage_config(stage, **overrides.get(stage, {})))
    return res


def _train_cfg(conf: dict, stage: str, seed: int) -> TrainConfig:
    d = dict(conf[stage])
    d.pop("stage", None)
    d["seed"] = seed
    d["betas"] = tuple(d["betas"])
    return TrainConfig(stage=stage, **d)


# ---------------------------------------------------------------- data


def gen_data_run(out, seed: int, conf: dict) -> dict:
    """Synthetic train/eval corpora under ``out/train`` and ``out/eval``."""
    out = Path(out)
    d = conf["data"]
    paths = {}
    for split, n in (("train", d["n_train"]), ("eval", d["n_eval"])):
        samples = seqio.synth_dataset(seed, int(n), int(d["image_size"]), split=split)
        paths[split] = str(seqio.write_corpus(samples, out / split, seed=seed))
    save_run_config(out, command="gen-data", seed=seed, **conf)
    return paths


def corpus_path(data) -> Path:
    """Accept a corpus JSONL or a directory that holds one."""
    p = Path(data)
    if p.is_dir():
        p = p / "corpus.jsonl"
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {p}")
    return p


def _images(records) -> np.ndarray:
    return np.stack([r["pixels"] for r in records])


# ---------------------------------------------------------------- tokenizer


def tokenizer_run(data, out, seed: int, conf: dict, eval_data=None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(out, command="train-tokenizer", seed=seed, data=str(data), tokenizer=conf["tokenizer"],
                    tokenizer_train=conf["tokenizer_train"])
    train = seqio.read_corpus(corpus_path(data))
    metrics = MetricsWriter(out / "metrics.jsonl")
    tok = imgtok.train_tokenizer(_images(train), imgtok.TokenizerConfig(**conf["tokenizer"]),
                                 imgtok.TokenizerTrainConfig(**conf["tokenizer_train"]), seed=seed,
                                 metrics=lambda r: metrics({k: _r(v) for k, v in r.items()}))
    metrics.close(out / "metrics.csv")
    path = out / "tokenizer.ckpt"
    tok.save(path)
    if eval_data is not None:
        held = _images(seqio.read_corpus(corpus_path(eval_data)))
        u1, u2 = imgtok.code_usage(tok, held)
        _write_json(out / "eval.json", {"recon_mse": imgtok.reconstruction_mse(tok, held),
                                        "usage_codebook1": u1, "usage_codebook2": u2})
    return path


def _r(v):
    return float(f"{v:.10g}") if isinstance(v, float) else v


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_round_tree(obj), indent=1, sort_keys=True) + "\n")


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _r(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- sequences


def pretrain_sequences(tok: imgtok.LfqTokenizer, records, route_specials=False, disable_contiguous=False):
    toks = tok.tokenize_batch(_images(records))
    return [build_pretrain_sequence(t, r["caption"], route_specials=route_specials,
                                    disable_contiguous=disable_contiguous) for t, r in zip(toks, records)]


def sft_sequences(tok: imgtok.LfqTokenizer, records, route_specials=False):
    toks = tok.tokenize_batch(_images(records))
    return [build_sft_sequence(t, r["instruction"], r["answer"], route_specials=route_specials)
            for t, r in zip(toks, records)]


def model_config(conf: dict, tok: imgtok.LfqTokenizer) -> LibraConfig:
    m = dict(conf["model"])
    if m["bits"] != tok.cfg.bits or m["d_c"] != tok.cfg.d_c:
        log.info("model bits/d_c follow the tokenizer (%d, %d)", tok.cfg.bits, tok.cfg.d_c)
    m.update(bits=tok.cfg.bits, d_c=tok.cfg.d_c)
    return LibraConfig(**m)


# ---------------------------------------------------------------- training stages


def backbone_run(captions, cfg: LibraConfig, conf: dict, seed: int, out) -> LibraModel:
    """Train the language backbone alone on ``<BOI><EOI> \\n caption <EOS>`` sequences."""
    out = Path(out)
    model = LibraModel.create(cfg, seed=seed)
    data = [build_text_sequence(c, d_c=cfg.d_c) for c in captions]
    metrics = MetricsWriter(out / "lm_metrics.jsonl")
    train_loop(model, data, _train_cfg(conf, "lm", seed), metrics=metrics)
    metrics.close(out / "lm_metrics.csv")
    model.save(out / "backbone.ckpt", {"stage": "lm"})
    return model


def pretrain_run(data, tokenizer, out, seed: int, conf: dict, backbone=None, eval_data=None,
                 route_specials=False, disable_contiguous=False) -> dict:
    """Backbone (trained here unless ``backbone`` names a checkpoint), then the vision pretraining stage."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    conf = {**conf, "model": {**conf["model"], "route_specials": bool(route_specials or
                                                                     conf["model"]["route_specials"])}}
    save_run_config(out, command="pretrain", seed=seed, data=str(data), tokenizer_ckpt=str(tokenizer),
                    backbone_ckpt=str(backbone) if backbone else None, disable_contiguous=disable_contiguous,
                    model=conf["model"], lm=conf["lm"], pretrain=conf["pretrain"])
    tok = imgtok.LfqTokenizer.load(tokenizer)
    shutil.copyfile(tokenizer, out / "tokenizer.ckpt")
    records = seqio.read_corpus(corpus_path(data))
    cfg = model_config(conf, tok)
    if backbone:
        bb = LibraModel.load(backbone, cfg).backbone_params()
    else:
        bb = backbone_run([r["caption"] for r in records], cfg, conf, seed, out).backbone_params()
    model = LibraModel.create(cfg, seed=seed, backbone=bb)
    seqs = pretrain_sequences(tok, records, cfg.route_specials, disable_contiguous)
    checksum = model.backbone_checksum()
    metrics = MetricsWriter(out / "metrics.jsonl")
    train_loop(model, seqs, _train_cfg(conf, "pretrain", seed), metrics=metrics, ckpt_dir=out)
    metrics.close(out / "metrics.csv")
    model.save(out / "model.ckpt", {"stage": "pretrain"})
    result = {"backbone_checksum_unchanged": checksum == model.backbone_checksum(),
              "first_loss": metrics.rows[0]["loss"], "final_loss": metrics.rows[-1]["loss"]}
    if eval_data is not None:
        result.update(evaluate(model, tok, [r["caption"] for r in records], eval_data))
    _write_json(out / "eval.json", result)
    return result


def evaluate(model: LibraModel, tok, train_captions, eval_data) -> dict:
    held = seqio.read_corpus(corpus_path(eval_data))
    seqs = pretrain_sequences(tok, held, model.cfg.route_specials)
    cond = caption_stats(model, seqs)
    text = caption_stats(model, seqs, text_only=True)
    v1, v2 = vision_ce(model, seqs)
    return {"caption_ce": cond["ce"], "caption_accuracy": cond["accuracy"], "text_only_caption_ce": text["ce"],
            "text_only_caption_accuracy": text["accuracy"],
            "unigram_accuracy": unigram_accuracy(train_captions, seqs), "vision_ce1": v1, "vision_ce2": v2,
            "vision_uniform_ce": float(np.log(model.cfg.codebook_size))}


def sft_run(data, ckpt, out, seed: int, conf: dict, tokenizer=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = Path(tokenizer) if tokenizer else Path(ckpt).with_name("tokenizer.ckpt")
    save_run_config(out, command="sft", seed=seed, data=str(data), ckpt=str(ckpt), tokenizer_ckpt=str(tokenizer),
                    sft=conf["sft"])
    tok = imgtok.LfqTokenizer.load(tokenizer)
    shutil.copyfile(tokenizer, out / "tokenizer.ckpt")
    model = LibraModel.load(ckpt)
    seqs = sft_sequences(tok, seqio.read_corpus(corpus_path(data)), model.cfg.route_specials)
    metrics = MetricsWriter(out / "metrics.jsonl")
    train_loop(model, seqs, _train_cfg(conf, "sft", seed), metrics=metrics, ckpt_dir=out)
    metrics.close(out / "metrics.csv")
    model.save(out / "model.ckpt", {"stage": "sft"})
    result = {"first_loss": metrics.rows[0]["loss"], "final_loss": metrics.rows[-1]["loss"]}
    _write_json(out / "eval.json", result)
    return result


# ---------------------------------------------------------------- decoding


def load_pair(ckpt, tokenizer=None) -> tuple[LibraModel, imgtok.LfqTokenizer]:
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    tokenizer = Path(tokenizer) if tokenizer else ckpt.with_name("tokenizer.ckpt")
    if not tokenizer.is_file():
        raise FileNotFoundError(f"tokenizer checkpoint not found: {tokenizer}")
    return LibraModel.load(ckpt), imgtok.LfqTokenizer.load(tokenizer)


def generate(model: LibraModel, tok, image: np.ndarray, question: str | None = None, max_new: int = 64) -> str:
    """Greedy caption, or a greedy answer when ``question`` is given."""
    it = tok.tokenize(image)
    if question is None:
        prefix = caption_prefix(it, model.cfg.route_specials)
    else:
        full = build_sft_sequence(it, question, "x", route_specials=model.cfg.route_specials)
        prefix = truncate(full, full.meta["answer_span"][0])
    return VOCAB.decode(model.generate_text(prefix, max_new))


def complete(model: LibraModel, tok, image: np.ndarray, keep: int | None = None,
             disable_contiguous: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Keep the first ``keep`` patches (default: top half), generate the rest; returns (ids, decoded image)."""
    it = tok.tokenize(image)
    n = tok.cfg.n_patches
    keep = n // 2 if keep is None else keep
    if not 0 <= keep < n:
        raise ValueError(f"complete: keep must be in [0, {n})")
    prefix = image_prefix(it, keep, model.cfg.route_specials, disable_contiguous)
    ids = model.complete_image(prefix, n)
    return ids, tok.decode(ids)


def complete_image_run(ckpt, image_path, out, keep=None, disable_contiguous=True, tokenizer=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(out, command="complete-image", ckpt=str(ckpt), image=str(image_path), keep=keep,
                    disable_contiguous=disable_contiguous)
    model, tok = load_pair(ckpt, tokenizer)
    img = imgtok.read_ppm(image_path)
    ids, rec = complete(model, tok, img, keep, disable_contiguous)
    imgtok.write_ppm(out / "completed.ppm", rec)
    imgtok.dump_tokens(out / "tokens.json", ids)
    half = img.shape[0] // 2
    stats = {"visible_mean_rgb": img[:half].mean(axis=(0, 1)).tolist(),
             "completed_mean_rgb": rec[half:].mean(axis=(0, 1)).tolist()}
    _write_json(out / "completion.json", stats)
    return stats


def mean_color_match(image: np.ndarray, completed: np.ndarray, tol: float = 0.2) -> bool:
    """Per-channel mean of the generated bottom half within ``tol`` of the visible top half."""
    half = image.shape[0] // 2
    return bool(np.all(np.abs(image[:half].mean(axis=(0, 1)) - completed[half:].mean(axis=(0, 1))) <= tol))


# ---------------------------------------------------------------- probes


def answer_position(seq: seqio.MultimodalSequence, record: dict) -> int:
    """Position of the first token of the answer word: the SFT answer, else the caption's color word."""
    if seq.kind == "sft":
        return seq.meta["answer_span"][0]
    nl = seq.meta["newline_pos"]
    caption = record["caption"]
    return nl + 1 + caption.index(record["color"])


def probe_run(ckpt, data, out, n: int = 10, tokenizer=None, sft: bool = False) -> dict:
    """Attention differences and answer-token heat grids over the first ``n`` corpus records."""
    from .plotting import diff_curves_png, heatmap_png

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(out, command="probe-attn", ckpt=str(ckpt), data=str(data), n=n, sft=sft)
    model, tok = load_pair(ckpt, tokenizer)
    records = seqio.read_corpus(corpus_path(data))[:n]
    seqs = (sft_sequences if sft else pretrain_sequences)(tok, records, model.cfg.route_specials)
    rows, grids, cross, inner, hits = [], {}, [], [], []
    for i, (seq, rec) in enumerate(zip(seqs, records)):
        q = answer_position(seq, rec)
        k0 = 1
        r = probe.record_attention(model, seq, (q, q + 1), (k0, k0 + tok.cfg.n_patches))
        rows.extend(probe.diff_rows(i, r))
        cross.append(probe.cross_layer_diff(r))
        inner.append(probe.inner_layer_diff(r))
        grid = probe.activation_map(r)
        grids[i] = grid
        hits.append(top_patch_in_shape(grid, rec["box"], tok.cfg.patch))
        heatmap_png(out / f"heatmap_{i:03d}.png", grid, title=rec["caption"], image=rec["pixels"])
    probe.write_diff_csv(out / "diffs.csv", rows)
    probe.write_grids(out / "grids.json", grids)
    cross, inner = np.stack(cross), np.stack(inner)
    diff_curves_png(out / "diff_curves.png", cross, inner)
    summary = {"cross_layer_mean": cross.mean(0).tolist(), "inner_layer_mean": inner.mean(0).tolist(),
               "top_patch_in_shape_fraction": float(np.mean(hits)), "samples": len(records)}
    _write_json(out / "summary.json", summary)
    return summary


def top_patch_in_shape(grid: np.ndarray, box, patch: int) -> bool:
    """Whether the most attended patch overlaps the shape's bounding box."""
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    top, left, size = box
    y0, x0 = r * patch, c * patch
    return bool(y0 < top + size and top < y0 + patch and x0 < left + size and left < x0 + patch)


# ---------------------------------------------------------------- verify


def verify_run(seed: int, out=None, suites=None) -> tuple[int, int, list]:
    results = []
    for name in suites or SUITES:
        results.extend(SUITES[name](seed))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_run_config(out, command="verify", seed=seed, suites=list(suites or SUITES))
        with open(out / "verify.csv", "w") as f:
            f.write("check,passed,value,tolerance\n")
            for r in results:
                f.write(f"{r.name},{int(r.passed)},{r.value:.10g},{r.tolerance:.10g}\n")
    return sum(r.passed for r in results), len(results), results
