"""Text vocabulary, multimodal sequence layout, and the synthetic scene corpus.

Sequence layout (one image, image first)::

    <BOI> v_1 ... v_P <EOI> \\n text ... <EOS>

Position ``l`` is trained to predict the token at ``l + 1``. The newline
that separates image and text is never a prediction target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgtok import ImageTokens, read_ppm, write_ppm
from .seeding import stream

SYSTEM_MESSAGE = (
    "A chat between a curious user and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the user's questions."
)

ALPHABET = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ.,:;'?![]-"


class Vocab:
    """Character vocabulary with special tokens placed below the character range."""

    specials = ("<PAD>", "<BOI>", "<EOI>", "\n", "<EOS>")

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet) or "\n" in alphabet:
            raise ValueError("alphabet must be unique characters without newline")
        self.alphabet = alphabet
        self.pad, self.boi, self.eoi, self.newline, self.eos = range(len(self.specials))
        self._char_base = len(self.specials)
        self._index = {c: i + self._char_base for i, c in enumerate(alphabet)}

    def __len__(self) -> int:
        return self._char_base + len(self.alphabet)

    @property
    def char_ids(self) -> range:
        return range(self._char_base, len(self))

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            if ch == "\n":
                out.append(self.newline)
            elif ch in self._index:
                out.append(self._index[ch])
            else:
                raise ValueError(f"character {ch!r} is outside the vocabulary alphabet")
        return out

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.newline:
                out.append("\n")
            elif i >= self._char_base:
                out.append(self.alphabet[i - self._char_base])
            elif i == self.eos:
                break
        return "".join(out)

    def name(self, i: int) -> str:
        i = int(i)
        return self.specials[i] if i < self._char_base else self.alphabet[i - self._char_base]


VOCAB = Vocab()


def tokenize_text(text: str, vocab: Vocab = VOCAB) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocab = VOCAB) -> str:
    return vocab.decode(ids)


# ---------------------------------------------------------------- sequences


@dataclass
class MultimodalSequence:
    tokens: np.ndarray  # (L,) text ids; patch positions hold <PAD>
    is_patch: np.ndarray  # (L,) bool
    modality: np.ndarray  # (L,) bool, True = routed through the visual expert
    vis_ids: np.ndarray  # (L, 2) ids at patch positions, 0 elsewhere
    contiguous: np.ndarray  # (L, d_c) encoder features at patch positions, 0 elsewhere
    supervised: np.ndarray  # (L,) bool, position l predicts position l + 1
    disable_contiguous: bool = False
    kind: str = "pretrain"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def lang_target(self) -> np.ndarray:
        return np.append(self.tokens[1:], VOCAB.pad)

    @property
    def vis_target(self) -> np.ndarray:
        return np.concatenate([self.vis_ids[1:], np.zeros((1, 2), dtype=np.int64)])

    @property
    def target_is_patch(self) -> np.ndarray:
        return np.append(self.is_patch[1:], False)

    def text_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.is_patch)


def _image_block(img: ImageTokens, vocab: Vocab, route_specials: bool):
    p, d_c = img.contiguous.shape
    n = p + 2
    tokens = np.full(n, vocab.pad, dtype=np.int64)
    tokens[0], tokens[-1] = vocab.boi, vocab.eoi
    is_patch = np.zeros(n, dtype=bool)
    is_patch[1:-1] = True
    modality = np.ones(n, dtype=bool) if route_specials else is_patch.copy()
    vis = np.zeros((n, 2), dtype=np.int64)
    vis[1:-1] = img.ids
    cont = np.zeros((n, d_c))
    cont[1:-1] = img.contiguous
    return tokens, is_patch, modality, vis, cont


def _assemble(img, text_ids, vocab, route_specials):
    tokens, is_patch, modality, vis, cont = _image_block(img, vocab, route_specials)
    t = np.asarray([vocab.newline] + list(text_ids) + [vocab.eos], dtype=np.int64)
    m = len(t)
    return (np.concatenate([tokens, t]), np.concatenate([is_patch, np.zeros(m, bool)]),
            np.concatenate([modality, np.zeros(m, bool)]),
            np.concatenate([vis, np.zeros((m, 2), np.int64)]),
            np.concatenate([cont, np.zeros((m, cont.shape[1]))]))


def build_pretrain_sequence(img: ImageTokens, caption: str, *, vocab: Vocab = VOCAB,
                            route_specials: bool = False, disable_contiguous: bool = False) -> MultimodalSequence:
    """Image-caption pair -> sequence supervised everywhere except the newline target."""
    tokens, is_patch, modality, vis, cont = _assemble(img, vocab.encode(caption), vocab, route_specials)
    sup = np.ones(len(tokens), dtype=bool)
    sup[-1] = False
    nl = len(img.ids) + 2
    sup[nl - 1] = False
    return MultimodalSequence(tokens, is_patch, modality, vis, cont, sup, disable_contiguous, "pretrain",
                              {"caption": caption, "newline_pos": nl})


def sft_text(instruction: str, answer: str, system_msg: str = SYSTEM_MESSAGE) -> tuple[str, str]:
    """(prompt text, answer text) for the chat template; the prompt ends right before the answer."""
    return f"{system_msg}\n[USER]: {instruction}\n[ASSISTANT]: ", answer


def build_sft_sequence(img: ImageTokens, instruction: str, answer: str, system_msg: str = SYSTEM_MESSAGE, *,
                       vocab: Vocab = VOCAB, route_specials: bool = False,
                       disable_contiguous: bool = False) -> MultimodalSequence:
    """Only answer tokens and the closing <EOS> are prediction targets."""
    if not answer:
        raise ValueError("build_sft_sequence: empty answer")
    prompt, ans = sft_text(instruction, answer, system_msg)
    p_ids, a_ids = vocab.encode(prompt), vocab.encode(ans)
    tokens, is_patch, modality, vis, cont = _assemble(img, p_ids + a_ids, vocab, route_specials)
    first_answer = len(img.ids) + 3 + len(p_ids)
    sup = np.zeros(len(tokens), dtype=bool)
    sup[first_answer - 1:len(tokens) - 1] = True
    return MultimodalSequence(tokens, is_patch, modality, vis, cont, sup, disable_contiguous, "sft",
                              {"instruction": instruction, "answer": answer,
                               "answer_span": (first_answer, len(tokens))})


def build_text_sequence(text: str, *, vocab: Vocab = VOCAB, d_c: int = 0, with_image_markers: bool = True,
                        kind: str = "text") -> MultimodalSequence:
    """Language-only sequence ``[<BOI> <EOI>] \\n text <EOS>`` for the backbone and text-only baselines."""
    head = [vocab.boi, vocab.eoi] if with_image_markers else []
    tokens = np.asarray(head + [vocab.newline] + vocab.encode(text) + [vocab.eos], dtype=np.int64)
    n = len(tokens)
    sup = np.ones(n, dtype=bool)
    sup[-1] = False
    nl = len(head)
    if nl:
        sup[nl - 1] = False
    return MultimodalSequence(tokens, np.zeros(n, bool), np.zeros(n, bool), np.zeros((n, 2), np.int64),
                              np.zeros((n, d_c)), sup, False, kind, {"newline_pos": nl})


@dataclass
class Batch:
    tokens: np.ndarray
    is_patch: np.ndarray
    modality: np.ndarray
    vis_ids: np.ndarray
    contiguous: np.ndarray
    disable_contiguous: np.ndarray
    supervised: np.ndarray
    lang_target: np.ndarray
    vis_target: np.ndarray
    target_is_patch: np.ndarray
    lengths: np.ndarray

    @property
    def shape(self):
        return self.tokens.shape


def collate(seqs: list[MultimodalSequence], vocab: Vocab = VOCAB) -> Batch:
    """Right-pad sequences to a common length; padding is language-routed and unsupervised."""
    if not seqs:
        raise ValueError("collate: empty batch")
    n, length = len(seqs), max(len(s) for s in seqs)
    d_c = seqs[0].contiguous.shape[1]
    b = Batch(
        tokens=np.full((n, length), vocab.pad, dtype=np.int64),
        is_patch=np.zeros((n, length), bool), modality=np.zeros((n, length), bool),
        vis_ids=np.zeros((n, length, 2), np.int64), contiguous=np.zeros((n, length, d_c)),
        disable_contiguous=np.array([s.disable_contiguous for s in seqs], dtype=bool),
        supervised=np.zeros((n, length), bool), lang_target=np.full((n, length), vocab.pad, np.int64),
        vis_target=np.zeros((n, length, 2), np.int64), target_is_patch=np.zeros((n, length), bool),
        lengths=np.array([len(s) for s in seqs]),
    )
    for i, s in enumerate(seqs):
        m = len(s)
        b.tokens[i, :m] = s.tokens
        b.is_patch[i, :m] = s.is_patch
        b.modality[i, :m] = s.modality
        b.vis_ids[i, :m] = s.vis_ids
        b.contiguous[i, :m] = s.contiguous
        b.supervised[i, :m] = s.supervised
        b.lang_target[i, :m] = s.lang_target
        b.vis_target[i, :m] = s.vis_target
        b.target_is_patch[i, :m] = s.target_is_patch
    return b


# ---------------------------------------------------------------- synthetic scenes

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.70),
}
SHAPES = ("square", "circle", "triangle")

QUESTIONS = {
    "color": "What color is the shape?",
    "shape": "What shape is in the image?",
    "background": "What color is the background?",
    "describe": "Describe the image.",
}


@dataclass
class SyntheticSample:
    image: np.ndarray
    color: str
    shape: str
    background: str
    box: tuple  # (top, left, size) in pixels

    @property
    def caption(self) -> str:
        return caption_for(self.color, self.shape, self.background)

    def qa(self, kind: str) -> tuple[str, str]:
        answers = {"color": self.color, "shape": self.shape, "background": self.background,
                   "describe": self.caption}
        return QUESTIONS[kind], answers[kind]


def caption_for(color: str, shape: str, background: str) -> str:
    return f"a {color} {shape} on {background} background"


def render_scene(color: str, shape: str, background: str, top: int, left: int, size: int,
                 image_size: int = 16) -> np.ndarray:
    img = np.empty((image_size, image_size, 3))
    img[:] = COLORS[background]
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    y, x = yy - top + 0.5, xx - left + 0.5
    inside_box = (y >= 0) & (y <= size) & (x >= 0) & (x <= size)
    if shape == "square":
        mask = inside_box
    elif shape == "circle":
        r = size / 2.0
        mask = (y - r) ** 2 + (x - r) ** 2 <= r * r
    elif shape == "triangle":
        mask = inside_box & (np.abs(x - size / 2.0) <= y / 2.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img[mask] = COLORS[color]
    return img


def render_solid(color: str, image_size: int = 16) -> np.ndarray:
    img = np.empty((image_size, image_size, 3))
    img[:] = COLORS[color]
    return img


def sample_scene(rng: np.random.Generator, image_size: int = 16, min_size: int = 6,
                 max_size: int = 10) -> SyntheticSample:
    names = list(COLORS)
    color = names[rng.integers(len(names))]
    background = [c for c in names if c != color][rng.integers(len(names) - 1)]
    shape = SHAPES[rng.integers(len(SHAPES))]
    size = int(rng.integers(min_size, max_size + 1))
    top = int(rng.integers(0, image_size - size + 1))
    left = int(rng.integers(0, image_size - size + 1))
    img = render_scene(color, shape, background, top, left, size, image_size)
    return SyntheticSample(img, color, shape, background, (top, left, size))


def synth_dataset(seed: int, n: int, image_size: int = 16, split: str = "train") -> list[SyntheticSample]:
    """Reproducible corpus of ``n`` uniformly sampled scenes; each ``split`` draws from its own stream."""
    if n < 1:
        raise ValueError("synth_dataset: n must be >= 1")
    rng = stream(seed, f"seqio.synth.{split}")
    return [sample_scene(rng, image_size) for _ in range(n)]


def write_corpus(samples: list[SyntheticSample], out_dir, seed: int = 0) -> Path:
    """Write PPM images plus ``corpus.jsonl`` (caption and one question/answer pair per image)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "seqio.sft_questions")
    kinds = list(QUESTIONS)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.ppm"
        write_ppm(out_dir / rel, s.image)
        rec = {"image": rel, "color": s.color, "shape": s.shape, "background": s.background,
               "box": list(s.box)}
        q, a = s.qa(kinds[rng.integers(len(kinds))])
        rec.update(caption=s.caption, instruction=q, answer=a)
        lines.append(json.dumps(rec, sort_keys=True))
    path = out_dir / "corpus.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_corpus(path) -> list[dict]:
    """Records from a corpus JSONL, each with its image loaded under ``pixels``."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        rec["pixels"] = read_ppm(path.parent / rec["image"])
        out.append(rec)
    return out
