"""Hybrid image tokenizer.

A small patch encoder produces contiguous per-patch features ``E_c``. A
linear map sends each feature to ``2 * bits`` latent coordinates; the first
``bits`` coordinates form the id for codebook 1 and the rest for codebook 2.
Ids are sign patterns (lookup-free quantization): bit ``i`` is set iff
coordinate ``i`` is strictly positive, least significant bit first.

The model input for a patch is ``concat(E_c, bank1[id1], bank2[id2])``
projected to model width. The banks and the projection are trained with the
multimodal model and therefore live in its parameter dict; the functions
here take them as arguments.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .optim import AdamW, OptimizerConfig
from .seeding import stream

log = logging.getLogger(__name__)


@dataclass
class TokenizerConfig:
    image_size: int = 16
    patch: int = 4
    channels: int = 3
    d_c: int = 32
    n_layers: int = 2
    n_heads: int = 4
    bits: int = 5
    dec_hidden: int = 128
    dec_context: bool = True
    entropy_weight: float = 0.05
    entropy_temp: float = 4.0
    commit_weight: float = 0.05

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def codebook_size(self) -> int:
        return 2 ** self.bits

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class ImageTokens:
    """Output of tokenizing one image: contiguous features and (id1, id2) per patch."""

    contiguous: np.ndarray  # (P, d_c)
    ids: np.ndarray  # (P, 2) int


def check_image(image: np.ndarray, patch: int) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch}")
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise ValueError("image values must lie in [0, 1]")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, C) -> (N, P, patch*patch*C), patches in row-major order."""
    n, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    n = patches.shape[0]
    gh, gw = height // patch, width // patch
    x = patches.reshape(n, gh, gw, patch, patch, -1).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, height, width, -1)


# ---------------------------------------------------------------- sign-bit codes


def bit_weights(bits: int) -> np.ndarray:
    return (1 << np.arange(bits)).astype(np.int64)


def lfq_ids(z: np.ndarray, bits: int) -> np.ndarray:
    """Latents (..., 2*bits) -> ids (..., 2). Zero maps to bit 0."""
    if z.shape[-1] != 2 * bits:
        raise nc.ShapeError(f"lfq: latent width {z.shape[-1]} != 2*bits ({2 * bits})")
    on = (z > 0).astype(np.int64)
    w = bit_weights(bits)
    return np.stack([on[..., :bits] @ w, on[..., bits:] @ w], axis=-1)


def ids_to_signs(ids: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of :func:`lfq_ids` on the sign pattern: (..., 2) -> (..., 2*bits) of +-1."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= 2 ** bits):
        raise IndexError(f"token id out of range [0, {2 ** bits})")
    shifts = np.arange(bits)
    b1 = (ids[..., :1] >> shifts) & 1
    b2 = (ids[..., 1:2] >> shifts) & 1
    on = np.concatenate([b1, b2], axis=-1)
    return np.where(on == 1, 1.0, -1.0)


def _sign(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, -1.0)


def code_matrix(bits: int) -> np.ndarray:
    """(2**bits, bits) matrix of +-1 sign patterns, row i = pattern of id i."""
    ids = np.arange(2 ** bits)
    return np.where((ids[:, None] >> np.arange(bits)) & 1, 1.0, -1.0)


# ---------------------------------------------------------------- hybrid input


def embed_discrete(bank1, bank2, ids) -> nc.Tensor:
    """E_d = concat(bank1[id1], bank2[id2]) along channels."""
    ids = np.asarray(ids)
    return nc.concat([nc.embedding(bank1, ids[..., 0]), nc.embedding(bank2, ids[..., 1])], axis=-1)


def assemble_hybrid(contiguous, discrete, proj, disable_contiguous=False) -> nc.Tensor:
    """Channel-concatenate contiguous and discrete patch inputs, then project to model width.

    ``disable_contiguous`` may be a bool or a per-row boolean array broadcastable
    over the leading axes; disabled rows see zeros in place of ``contiguous``.
    """
    contiguous, discrete = nc.tensor(contiguous), nc.tensor(discrete)
    if contiguous.shape[:-1] != discrete.shape[:-1]:
        raise nc.ShapeError(f"assemble_hybrid: patch counts differ, {contiguous.shape} vs {discrete.shape}")
    off = np.asarray(disable_contiguous, dtype=bool)
    if off.any():
        keep = ~np.broadcast_to(off[..., None] if off.ndim else off, contiguous.shape)
        contiguous = nc.where(keep, contiguous, np.zeros(contiguous.shape, dtype=contiguous.data.dtype))
    x = nc.concat([contiguous, discrete], axis=-1)
    if x.shape[-1] != proj.shape[0]:
        raise nc.ShapeError(f"assemble_hybrid: width {x.shape[-1]} != projection input {proj.shape[0]}")
    return nc.matmul(x, proj)


# ---------------------------------------------------------------- tokenizer


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_tokenizer_params(cfg: TokenizerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = stream(seed, "imgtok.init")
    d = cfg.d_c
    p: dict[str, np.ndarray] = {
        "enc.patch_w": _normal(rng, (cfg.patch_dim, d), cfg.patch_dim ** -0.5),
        "enc.patch_b": np.zeros(d),
        "enc.norm_f": np.ones(d),
    }
    for i in range(cfg.n_layers):
        pre = f"enc.L{i}."
        p[pre + "norm1"] = np.ones(d)
        p[pre + "norm2"] = np.ones(d)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = _normal(rng, (d, d), d ** -0.5)
        p[pre + "wo"] = _normal(rng, (d, d), d ** -0.5 / np.sqrt(2 * cfg.n_layers))
        p[pre + "w1"] = _normal(rng, (d, 4 * d), d ** -0.5)
        p[pre + "w2"] = _normal(rng, (4 * d, d), (4 * d) ** -0.5 / np.sqrt(2 * cfg.n_layers))
    p["quant.w"] = _normal(rng, (d, 2 * cfg.bits), d ** -0.5)
    p["quant.b"] = np.zeros(2 * cfg.bits)
    h = cfg.dec_hidden
    p["dec.in_w"] = _normal(rng, (2 * cfg.bits, h), (2 * cfg.bits) ** -0.5)
    p["dec.in_b"] = np.zeros(h)
    if cfg.dec_context:
        p["dec.pos"] = _normal(rng, (cfg.n_patches, h), 0.02)
        p["dec.ctx_norm"] = np.ones(h)
        for w in ("ctx_q", "ctx_k", "ctx_v"):
            p["dec." + w] = _normal(rng, (h, h), h ** -0.5)
        p["dec.ctx_o"] = _normal(rng, (h, h), h ** -0.5 * 0.5)
    p["dec.mid_w"] = _normal(rng, (h, h), h ** -0.5)
    p["dec.mid_b"] = np.zeros(h)
    p["dec.out_w"] = _normal(rng, (h, cfg.patch_dim), h ** -0.5)
    p["dec.out_b"] = np.zeros(cfg.patch_dim)
    return p


def _bidir_attention(x, wq, wk, wv, wo, n_heads):
    n, length, d = x.shape
    dh = d // n_heads

    def heads(t):
        return nc.transpose(nc.reshape(t, (n, length, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    att = nc.softmax(nc.scale(q @ nc.swap_last(k), dh ** -0.5))
    o = nc.reshape(nc.transpose(att @ v, (0, 2, 1, 3)), (n, length, d))
    return o @ wo


def encoder_forward(P, patches, cfg: TokenizerConfig) -> nc.Tensor:
    """Patch pixels (N, P, patch_dim) -> contiguous features (N, P, d_c).

    No position embedding: identical patches in an image map to identical
    features whenever the whole image is uniform.
    """
    x = nc.tensor(patches) @ P["enc.patch_w"] + P["enc.patch_b"]
    for i in range(cfg.n_layers):
        pre = f"enc.L{i}."
        h = nc.rms_norm(x, P[pre + "norm1"])
        x = x + _bidir_attention(h, P[pre + "wq"], P[pre + "wk"], P[pre + "wv"], P[pre + "wo"], cfg.n_heads)
        h = nc.rms_norm(x, P[pre + "norm2"])
        x = x + nc.gelu(h @ P[pre + "w1"]) @ P[pre + "w2"]
    return nc.rms_norm(x, P["enc.norm_f"])


def decoder_forward(P, signs, cfg: TokenizerConfig) -> nc.Tensor:
    """Sign codes (N, P, 2*bits) -> patch pixels (N, P, patch_dim) in (0, 1)."""
    h = nc.gelu(nc.tensor(signs) @ P["dec.in_w"] + P["dec.in_b"])
    if cfg.dec_context:
        h = h + P["dec.pos"]
        c = nc.rms_norm(h, P["dec.ctx_norm"])
        h = h + _bidir_attention(c, P["dec.ctx_q"], P["dec.ctx_k"], P["dec.ctx_v"], P["dec.ctx_o"], 4)
    h = h + nc.gelu(h @ P["dec.mid_w"] + P["dec.mid_b"])
    return nc.sigmoid(h @ P["dec.out_w"] + P["dec.out_b"])


def entropy_terms(z, cfg: TokenizerConfig):
    """(mean per-sample code entropy, batch code-usage entropy), summed over both codebooks."""
    b = cfg.bits
    codes = code_matrix(b)
    flat = nc.reshape(z, (-1, 2 * b))
    sample_h = codebook_h = 0.0
    for part in nc.split(flat, [b, b], axis=-1):
        logits = nc.scale(part @ codes.T, cfg.entropy_temp)
        logp = nc.log_softmax(logits)
        p = nc.softmax(logits)
        sample_h = sample_h + nc.scale(nc.sum_(p * logp), -1.0 / p.shape[0])
        avg = nc.mean(p, axis=0)
        codebook_h = codebook_h + nc.scale(nc.sum_(avg * nc.log(avg + 1e-12)), -1.0)
    return sample_h, codebook_h


class LfqTokenizer:
    """Frozen encoder + sign-bit quantizer + decoder, as produced by :func:`train_tokenizer`."""

    def __init__(self, cfg: TokenizerConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        for v in params.values():
            v.setflags(write=False)

    def _leaves(self):
        return nc.leaves(self.params)

    def encode(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            return self.encode(images[None])[0]
        check_image(images[0], self.cfg.patch)
        if images.shape[1] != self.cfg.image_size or images.shape[2] != self.cfg.image_size:
            raise ValueError(f"tokenizer expects {self.cfg.image_size}x{self.cfg.image_size} images")
        out = encoder_forward(self._leaves(), patchify(images, self.cfg.patch), self.cfg)
        return out.data

    def latents(self, contiguous: np.ndarray) -> np.ndarray:
        return contiguous @ self.params["quant.w"] + self.params["quant.b"]

    def quantize(self, contiguous: np.ndarray) -> np.ndarray:
        return lfq_ids(self.latents(contiguous), self.cfg.bits)

    def tokenize(self, image: np.ndarray) -> ImageTokens:
        ec = self.encode(image)
        return ImageTokens(contiguous=ec, ids=self.quantize(ec))

    def tokenize_batch(self, images: np.ndarray, chunk: int = 256) -> list[ImageTokens]:
        out = []
        for s in range(0, len(images), chunk):
            ec = self.encode(np.asarray(images[s:s + chunk]))
            ids = self.quantize(ec)
            out.extend(ImageTokens(contiguous=e, ids=i) for e, i in zip(ec, ids))
        return out

    def decode(self, ids: np.ndarray) -> np.ndarray:
        """(P, 2) or (N, P, 2) ids -> images in [0, 1]."""
        ids = np.asarray(ids)
        if ids.ndim == 2:
            return self.decode(ids[None])[0]
        if ids.shape[1] != self.cfg.n_patches or ids.shape[2] != 2:
            raise nc.ShapeError(f"decode: expected (N, {self.cfg.n_patches}, 2) ids, got {ids.shape}")
        pix = decoder_forward(self._leaves(), ids_to_signs(ids, self.cfg.bits), self.cfg).data
        s = self.cfg.image_size
        return np.clip(unpatchify(pix, self.cfg.patch, s, s), 0.0, 1.0)

    def checksum(self, prefix: str = "enc.") -> str:
        return params_checksum({k: v for k, v in self.params.items() if k.startswith(prefix)})

    def save(self, path) -> None:
        from .checkpoint import save_arrays

        save_arrays(path, self.params, {"kind": "tokenizer", "config": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "LfqTokenizer":
        from .checkpoint import load_arrays

        arrays, header = load_arrays(path)
        if header.get("kind") != "tokenizer":
            raise ValueError(f"{path} is not a tokenizer checkpoint")
        cfg = TokenizerConfig(**header["config"])
        expected = init_tokenizer_params(cfg)
        for k, v in expected.items():
            if k not in arrays or arrays[k].shape != v.shape:
                raise ValueError(f"tokenizer checkpoint array {k} missing or mis-shaped for config")
        return cls(cfg, arrays)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def tokenizer_loss(P, images: np.ndarray, cfg: TokenizerConfig):
    patches = patchify(images, cfg.patch)
    ec = encoder_forward(P, patches, cfg)
    z = ec @ P["quant.w"] + P["quant.b"]
    q = nc.straight_through(z, _sign)
    recon = decoder_forward(P, q, cfg)
    rec = nc.mse(recon, patches)
    loss = rec
    parts = {"mse": float(rec.data)}
    if cfg.commit_weight:
        d = z - q.data
        loss = loss + nc.scale(nc.mean(d * d), cfg.commit_weight)
    if cfg.entropy_weight:
        sh, ch = entropy_terms(z, cfg)
        loss = loss + nc.scale(sh - ch, cfg.entropy_weight)
        parts["code_entropy"] = float(ch.data)
    return loss, parts


@dataclass
class TokenizerTrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 3e-3
    warmup: int = 100
    log_every: int = 100
    opt: dict = field(default_factory=dict)


def train_tokenizer(images: np.ndarray, cfg: TokenizerConfig | None = None,
                    train_cfg: TokenizerTrainConfig | None = None, seed: int = 0,
                    metrics=None) -> LfqTokenizer:
    """Fit encoder, quantizer and decoder on pixel reconstruction; returns a frozen tokenizer."""
    cfg = cfg or TokenizerConfig()
    train_cfg = train_cfg or TokenizerTrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_tokenizer: empty dataset")
    check_image(images[0], cfg.patch)
    params = init_tokenizer_params(cfg, seed)
    opt = AdamW(params, params.keys(), OptimizerConfig(
        lr=train_cfg.lr, total_steps=train_cfg.steps, warmup_steps=train_cfg.warmup, **train_cfg.opt))
    rng = stream(seed, "imgtok.batches")
    for step in range(1, train_cfg.steps + 1):
        idx = rng.integers(0, len(images), size=min(train_cfg.batch, len(images)))
        P = nc.leaves(params, params.keys())
        loss, parts = tokenizer_loss(P, images[idx], cfg)
        nc.backward(loss)
        info = opt.step({k: P[k].grad if P[k].grad is not None else np.zeros_like(params[k]) for k in params})
        if metrics is not None and (step % train_cfg.log_every == 0 or step == 1):
            metrics({"step": step, "loss": float(loss.data), **parts, **info})
    return LfqTokenizer(cfg, {k: v.copy() for k, v in params.items()})


def reconstruction_mse(tok: LfqTokenizer, images: np.ndarray) -> float:
    images = np.asarray(images, dtype=np.float64)
    toks = tok.tokenize_batch(images)
    rec = tok.decode(np.stack([t.ids for t in toks]))
    return float(np.mean((rec - images) ** 2))


def code_usage(tok: LfqTokenizer, images: np.ndarray) -> tuple[float, float]:
    """Fraction of each codebook's ids that occur when tokenizing ``images``."""
    ids = np.stack([t.ids for t in tok.tokenize_batch(images)]).reshape(-1, 2)
    k = tok.cfg.codebook_size
    return (len(np.unique(ids[:, 0])) / k, len(np.unique(ids[:, 1])) / k)


# ---------------------------------------------------------------- file formats


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel; ``image`` in [0, 1]."""
    check_image(image, 1)
    h, w, _ = image.shape
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _ppm_tokens(buf: bytes, count: int):
    out, i = [], 2
    while len(out) < count:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while buf[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        out.append(int(buf[i:j]))
        i = j
    return out, i + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), start = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=start)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def dump_tokens(path, ids: np.ndarray) -> None:
    Path(path).write_text(json.dumps([[int(a), int(b)] for a, b in np.asarray(ids)]))


def load_tokens(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text()), dtype=np.int64).reshape(-1, 2)
