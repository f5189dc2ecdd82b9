"""Whitespace + punctuation tokenizer with a corpus-induced vocabulary."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, SEP, UNK, BOS = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]")

MAX_QUESTION_LEN = 32
MAX_ANSWER_LEN = 50

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def digest(self) -> str:
        """Short content hash used to pair checkpoints with vocabularies."""
        return hashlib.sha256("\n".join(self.id_to_token).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Sequence[str], min_count: int = 1) -> Vocabulary:
    """Induce a vocabulary ordered by frequency (desc), then lexicographically.

    Counting is over the set of distinct documents, so duplicated documents
    do not change the vocabulary.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for doc in dict.fromkeys(corpus):
        counts.update(tokenize(doc))
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept)


def encode(text: str, kind: str, vocab: Vocabulary, max_len: int | None = None) -> list[int]:
    """Frame ``text`` as ``[CLS] ... [SEP]``, truncating to ``max_len`` ids."""
    if kind not in ("question", "answer"):
        raise ValueError(f"unknown sequence kind {kind!r}")
    if max_len is None:
        max_len = MAX_QUESTION_LEN if kind == "question" else MAX_ANSWER_LEN
    ids = [vocab.token_to_id.get(t, UNK) for t in tokenize(text)]
    ids = ids[: max(max_len - 2, 0)]
    return [CLS] + ids + [SEP]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise IndexError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i < len(SPECIALS):
            continue
        out.append(vocab.id_to_token[i])
    return " ".join(out)
