"""Full multimodal model on top of a frozen toy language backbone."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .imgtok import ImageTokens, assemble_hybrid, embed_discrete, params_checksum
from .routed import RoutingConfig, init_language_layer, init_vision_side, language_layer, routed_layer, routed_norm
from .seeding import stream
from .seqio import VOCAB, Batch, MultimodalSequence, collate

log = logging.getLogger(__name__)

STAGES = ("lm", "pretrain", "sft")


@dataclass
class LibraConfig:
    vocab_size: int = len(VOCAB)
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffn_hidden: int = 128
    max_len: int = 256
    expert_rank: int = 0  # 0 -> d_model // 4
    bridge_rank: int = 8
    bits: int = 5
    d_c: int = 32
    d_b: int = 8
    route_output_proj: bool = True
    route_norms: bool = True
    route_specials: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.expert_rank == 0:
            self.expert_rank = self.d_model // 4
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ValueError("d_model must split into heads of even width")

    @property
    def codebook_size(self) -> int:
        return 2 ** self.bits

    @property
    def routing(self) -> RoutingConfig:
        return RoutingConfig(n_heads=self.n_heads, route_output_proj=self.route_output_proj,
                             route_norms=self.route_norms, rope_base=self.rope_base)

    @classmethod
    def from_dict(cls, d: dict) -> "LibraConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def is_backbone(name: str) -> bool:
    return name.startswith("lm.") or ".lm." in name


def layer_view(P: dict, i: int) -> dict:
    pre = f"L{i}."
    return {k[len(pre):]: v for k, v in P.items() if k.startswith(pre)}


def init_backbone(cfg: LibraConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = stream(seed, "model.backbone")
    d = cfg.d_model
    p = {
        "lm.embed": rng.normal(0, d ** -0.5, (cfg.vocab_size, d)),
        "lm.norm_f": np.ones(d),
        "lm.head": rng.normal(0, d ** -0.5, (d, cfg.vocab_size)),
    }
    for i in range(cfg.n_layers):
        for k, v in init_language_layer(rng, d, cfg.ffn_hidden, cfg.n_layers).items():
            p[f"L{i}.{k}"] = v
    return p


def init_vision(cfg: LibraConfig, backbone: dict[str, np.ndarray], seed: int = 0) -> dict[str, np.ndarray]:
    rng = stream(seed, "model.vision")
    d, k = cfg.d_model, cfg.codebook_size
    p = {
        "vis.bank1": rng.normal(0, 1.0, (k, cfg.d_b)),
        "vis.bank2": rng.normal(0, 1.0, (k, cfg.d_b)),
        "vis.in_proj": rng.normal(0, (cfg.d_c + 2 * cfg.d_b) ** -0.5, (cfg.d_c + 2 * cfg.d_b, d)),
        "vis.norm_f": backbone["lm.norm_f"].copy(),
        "vis.head1": np.zeros((d, k)),
        "vis.head2": np.zeros((d, k)),
    }
    for i in range(cfg.n_layers):
        lang = {k2[len(f"L{i}."):]: v for k2, v in backbone.items() if k2.startswith(f"L{i}.")}
        for k2, v in init_vision_side(rng, lang, d, cfg.expert_rank, cfg.bridge_rank).items():
            p[f"L{i}.{k2}"] = v
    return p


def _check_len(length: int, cfg: LibraConfig) -> None:
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")


def backbone_forward(P: dict, tokens: np.ndarray, cfg: LibraConfig, capture: list | None = None) -> nc.Tensor:
    """Standalone language model: (B, L) ids -> (B, L, V) logits."""
    tokens = np.atleast_2d(tokens)
    _check_len(tokens.shape[1], cfg)
    rc = cfg.routing
    h = nc.embedding(P["lm.embed"], tokens)
    for i in range(cfg.n_layers):
        h = language_layer(h, layer_view(P, i), rc, capture)
    return nc.rms_norm(h, P["lm.norm_f"], rc.norm_eps) @ P["lm.head"]


def embed_inputs(P: dict, batch: Batch, cfg: LibraConfig) -> nc.Tensor:
    text = nc.embedding(P["lm.embed"], batch.tokens)
    if not batch.is_patch.any():
        return text
    discrete = embed_discrete(P["vis.bank1"], P["vis.bank2"], batch.vis_ids)
    vis = assemble_hybrid(batch.contiguous, discrete, P["vis.in_proj"], batch.disable_contiguous[:, None])
    return nc.where(batch.is_patch[..., None], vis, text)


def forward(P: dict, batch: Batch, cfg: LibraConfig, capture: list | None = None, heads=("lang", "vis")):
    """Logits for every position: (lang (B,L,V), vis1 (B,L,K), vis2 (B,L,K)).

    Heads not listed in ``heads`` come back as None and are not part of the graph.
    """
    _check_len(batch.tokens.shape[1], cfg)
    rc = cfg.routing
    m = batch.modality
    h = embed_inputs(P, batch, cfg)
    for i in range(cfg.n_layers):
        h = routed_layer(h, m, layer_view(P, i), rc, capture)
    final = {"lm.norm_f": P["lm.norm_f"], "vx.norm_f": P["vis.norm_f"]}
    hn = routed_norm(h, m, final, "norm_f", rc)
    lang = hn @ P["lm.head"] if "lang" in heads else None
    v1 = hn @ P["vis.head1"] if "vis" in heads else None
    v2 = hn @ P["vis.head2"] if "vis" in heads else None
    return lang, v1, v2


def trainable_names(names, stage: str) -> set[str]:
    """Parameter names updated in ``stage``.

    ``lm``: the language backbone alone. ``pretrain``: everything on the
    vision side (expert, bridge, vision norms and heads, hybrid-input
    projection, discrete banks) and nothing of the backbone. ``sft``: all.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    names = list(names)
    if stage == "lm":
        return {n for n in names if is_backbone(n)}
    if stage == "pretrain":
        return {n for n in names if not is_backbone(n)}
    return set(names)


def grad_masks(params: dict[str, np.ndarray], stage: str) -> dict[str, np.ndarray]:
    """The newline embedding row never moves, in any stage."""
    if stage in ("lm", "sft"):
        m = np.ones_like(params["lm.embed"])
        m[VOCAB.newline] = 0.0
        return {"lm.embed": m}
    return {}


class LibraModel:
    """Parameter container plus convenience wrappers around :func:`forward`."""

    def __init__(self, cfg: LibraConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: LibraConfig | None = None, seed: int = 0, backbone: dict | None = None) -> "LibraModel":
        cfg = cfg or LibraConfig()
        bb = {k: v.copy() for k, v in (backbone or init_backbone(cfg, seed)).items()}
        return cls(cfg, {**bb, **init_vision(cfg, bb, seed)})

    def leaves(self, stage: str | None = None) -> dict[str, nc.Tensor]:
        names = trainable_names(self.params, stage) if stage else ()
        return nc.leaves(self.params, names)

    def backbone_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if is_backbone(k)}

    def backbone_checksum(self) -> str:
        return params_checksum(self.backbone_params())

    def logits(self, seqs, capture=None):
        batch = seqs if isinstance(seqs, Batch) else collate(list(seqs))
        lang, v1, v2 = forward(self.leaves(), batch, self.cfg, capture)
        return lang.data, v1.data, v2.data

    def backbone_logits(self, tokens, capture=None) -> np.ndarray:
        return backbone_forward(self.leaves(), np.asarray(tokens), self.cfg, capture).data

    # ------------------------------------------------------------ decoding

    def generate_text(self, prefix: MultimodalSequence, max_new: int = 64) -> list[int]:
        """Greedy decoding on the language head until <EOS> or ``max_new`` tokens."""
        nl = np.flatnonzero(prefix.tokens == VOCAB.newline)
        if not len(nl):
            raise ValueError("generate_text: prefix must reach the image/text newline")
        seq = prefix
        out: list[int] = []
        for _ in range(max_new):
            if len(seq) >= self.cfg.max_len:
                break
            lang, _, _ = forward(self.leaves(), collate([seq]), self.cfg, heads=("lang",))
            nxt = int(np.argmax(lang.data[0, -1]))
            if nxt == VOCAB.eos:
                break
            out.append(nxt)
            seq = append_text(seq, nxt)
        return out

    def complete_image(self, prefix: MultimodalSequence, n_patches: int) -> np.ndarray:
        """Greedily fill the image block to ``n_patches`` patches.

        Generated patches carry no contiguous features, only their discrete embeddings.

        Returns the (n_patches, 2) ids, prefix patches included.
        """
        if prefix.tokens[0] != VOCAB.boi:
            raise ValueError("complete_image: prefix must start with <BOI>")
        k = int(prefix.is_patch.sum())
        if k >= n_patches or VOCAB.eoi in prefix.tokens:
            raise ValueError("complete_image: prefix image block is already complete")
        seq = prefix
        for _ in range(n_patches - k):
            _, v1, v2 = forward(self.leaves(), collate([seq]), self.cfg, heads=("vis",))
            pair = (int(np.argmax(v1.data[0, -1])), int(np.argmax(v2.data[0, -1])))
            seq = append_patch(seq, pair, self.cfg.route_specials)
        lang, _, _ = forward(self.leaves(), collate([seq]), self.cfg, heads=("lang",))
        if int(np.argmax(lang.data[0, -1])) != VOCAB.eoi:
            log.info("complete_image: language head does not predict <EOI> after the last patch")
        return seq.vis_ids[seq.is_patch]

    # ------------------------------------------------------------ checkpoint

    def save(self, path, extra: dict | None = None) -> None:
        save_arrays(path, self.params, {"kind": "libra_model", "config": asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path, cfg: LibraConfig | None = None) -> "LibraModel":
        arrays, header = load_arrays(path)
        if header.get("kind") != "libra_model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        stored = LibraConfig.from_dict(header["config"])
        if cfg is not None and asdict(cfg) != asdict(stored):
            diff = {k: (v, asdict(stored)[k]) for k, v in asdict(cfg).items() if asdict(stored)[k] != v}
            raise CheckpointError(f"{path}: config mismatch (requested, stored): {diff}")
        ref = cls.create(stored)
        if set(ref.params) != set(arrays):
            raise CheckpointError(f"{path}: array names do not match the model layout")
        for k, v in ref.params.items():
            if arrays[k].shape != v.shape:
                raise CheckpointError(f"{path}: array {k} has shape {arrays[k].shape}, config implies {v.shape}")
        return cls(stored, arrays)


# ---------------------------------------------------------------- sequence editing


def image_prefix(img: ImageTokens, k: int, route_specials: bool = False,
                 disable_contiguous: bool = True) -> MultimodalSequence:
    """``<BOI>`` followed by the first ``k`` patches of ``img``.

    With ``disable_contiguous`` the visible patches enter through their discrete
    embeddings only, like the generated ones.
    """
    d_c = img.contiguous.shape[1]
    n = k + 1
    tokens = np.full(n, VOCAB.pad, np.int64)
    tokens[0] = VOCAB.boi
    is_patch = np.arange(n) > 0
    modality = np.ones(n, bool) if route_specials else is_patch.copy()
    vis = np.zeros((n, 2), np.int64)
    vis[1:] = img.ids[:k]
    cont = np.zeros((n, d_c))
    if not disable_contiguous:
        cont[1:] = img.contiguous[:k]
    return MultimodalSequence(tokens, is_patch, modality, vis, cont, np.zeros(n, bool), disable_contiguous,
                              "prefix")


def caption_prefix(img: ImageTokens, route_specials: bool = False) -> MultimodalSequence:
    """``<BOI> v_1..v_P <EOI> \\n``, ready for caption generation."""
    from .seqio import build_pretrain_sequence

    full = build_pretrain_sequence(img, "", route_specials=route_specials)
    n = full.meta["newline_pos"] + 1
    return truncate(full, n)


def truncate(s: MultimodalSequence, n: int) -> MultimodalSequence:
    return MultimodalSequence(s.tokens[:n].copy(), s.is_patch[:n].copy(), s.modality[:n].copy(),
                              s.vis_ids[:n].copy(), s.contiguous[:n].copy(), np.zeros(n, bool),
                              s.disable_contiguous, s.kind, dict(s.meta))


def _append(s: MultimodalSequence, tok, is_patch, modality, pair) -> MultimodalSequence:
    return MultimodalSequence(
        np.append(s.tokens, tok), np.append(s.is_patch, is_patch), np.append(s.modality, modality),
        np.concatenate([s.vis_ids, np.asarray([pair], np.int64)]),
        np.concatenate([s.contiguous, np.zeros((1, s.contiguous.shape[1]))]),
        np.append(s.supervised, False), s.disable_contiguous, s.kind, s.meta)


def append_text(s: MultimodalSequence, tok: int) -> MultimodalSequence:
    return _append(s, tok, False, False, (0, 0))


def append_patch(s: MultimodalSequence, pair, route_specials: bool = False) -> MultimodalSequence:
    return _append(s, VOCAB.pad, True, True, pair)
