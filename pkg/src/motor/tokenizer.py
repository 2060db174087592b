"""Word-level tokenizer shared by the report, graph, and triplet encoders."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PAD = "[PAD]"
CLS = "[CLS]"
ENCODE = "[Encode]"
BOS = "[BOS]"
EOS = "[EOS]"
UNK = "[UNK]"
SEP = ";"

SPECIALS = (PAD, CLS, ENCODE, BOS, EOS, UNK, SEP)

_PUNCT = re.compile(r"[^a-z0-9\s]")

MODES = ("encode_cls", "encode_match", "decode")


def normalize_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Tokenizer:
    """Maps words to ids with a fixed special-token prefix.

    Vocabulary order is deterministic: specials first, then the words given
    at construction in their given order.
    """

    def __init__(self, words: Sequence[str], max_text_len: int):
        if max_text_len < 3:
            raise ValueError("max_text_len must allow [BOS] w [EOS]")
        self.max_text_len = max_text_len
        self.vocab: list[str] = list(SPECIALS)
        seen = set(self.vocab)
        for w in words:
            if w not in seen:
                self.vocab.append(w)
                seen.add(w)
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.word_to_id[PAD]
        self.cls_id = self.word_to_id[CLS]
        self.encode_id = self.word_to_id[ENCODE]
        self.bos_id = self.word_to_id[BOS]
        self.eos_id = self.word_to_id[EOS]
        self.unk_id = self.word_to_id[UNK]
        self.sep_id = self.word_to_id[SEP]

    @classmethod
    def build(cls, texts: Iterable[str], extra_words: Iterable[str] = (),
              max_text_len: int = 64) -> "Tokenizer":
        """Collect the sorted vocabulary of `texts` plus `extra_words`."""
        words: set[str] = set()
        for t in texts:
            words.update(normalize_words(t))
        for w in extra_words:
            words.update(normalize_words(w))
        return cls(sorted(words), max_text_len)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def word_ids(self, words: Sequence[str]) -> list[int]:
        return [self.word_to_id.get(w, self.unk_id) for w in words]

    def encode(self, text: str, mode: str, length: int | None = None) -> list[int]:
        """Tokenize `text` into a fixed-length id sequence.

        encode_cls prepends [CLS]; encode_match prepends [Encode]; decode
        wraps the words in [BOS]/[EOS]. The result is truncated and padded
        to `length` (default: max_text_len).
        """
        if mode not in MODES:
            raise ValueError(f"unknown tokenize mode {mode!r}")
        L = self.max_text_len if length is None else length
        ids = self.word_ids(normalize_words(text))
        if mode == "encode_cls":
            ids = [self.cls_id] + ids
        elif mode == "encode_match":
            ids = [self.encode_id] + ids
        else:
            ids = [self.bos_id] + ids[: L - 2] + [self.eos_id]
        ids = ids[:L]
        return ids + [self.pad_id] * (L - len(ids))

    def decode(self, ids: Iterable[int]) -> str:
        """Ids back to text, dropping [PAD]/[CLS]/[Encode]/[BOS]/[EOS]."""
        drop = {self.pad_id, self.cls_id, self.encode_id, self.bos_id, self.eos_id}
        return " ".join(self.vocab[i] for i in ids if i not in drop)
