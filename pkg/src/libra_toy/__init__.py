"""Toy decoupled vision-language model on a numpy autodiff core."""

from .imgtok import LfqTokenizer, TokenizerConfig, train_tokenizer
from .model import LibraConfig, LibraModel
from .seqio import VOCAB, build_pretrain_sequence, build_sft_sequence, build_text_sequence

__version__ = "0.1.0"

__all__ = [
    "LfqTokenizer", "TokenizerConfig", "train_tokenizer", "LibraConfig", "LibraModel", "VOCAB",
    "build_pretrain_sequence", "build_sft_sequence", "build_text_sequence",
]
