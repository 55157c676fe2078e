"""Byte-level corpus loading, truncated-BPTT batching, and a synthetic text source."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ByteVocab:
    """Bytes present in a corpus, mapped to ids in increasing byte order."""

    symbols: bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> "ByteVocab":
        return cls(bytes(sorted(set(data))))

    def __len__(self) -> int:
        return len(self.symbols)

    def _lookup(self) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        table[np.frombuffer(self.symbols, dtype=np.uint8)] = np.arange(len(self.symbols))
        return table

    def encode(self, data: bytes) -> np.ndarray:
        ids = self._lookup()[np.frombuffer(data, dtype=np.uint8)]
        if ids.size and ids.min() < 0:
            raise CorpusError("input contains bytes outside the vocabulary")
        return ids

    def decode(self, ids: Sequence[int]) -> bytes:
        return np.frombuffer(self.symbols, dtype=np.uint8)[np.asarray(ids, dtype=np.int64)].tobytes()


def load_corpus(path) -> tuple[np.ndarray, ByteVocab]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if not data:
        raise CorpusError(f"corpus {path} is empty")
    vocab = ByteVocab.from_bytes(data)
    return vocab.encode(data), vocab


def split_stream(stream: np.ndarray, fractions: Sequence[float]) -> list[np.ndarray]:
    """Cut ``stream`` contiguously into pieces of the given fractions."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    bounds = np.round(np.cumsum([0.0, *fractions]) * len(stream)).astype(int)
    bounds[-1] = len(stream)
    return [stream[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def make_batches(stream: np.ndarray, B: int, T: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reshape into ``B`` contiguous lanes and cut consecutive ``T``-step windows.

    Targets are the inputs shifted by one token. The tail that does not fill
    a whole lane, and any partial final window, are dropped.
    """
    stream = np.asarray(stream)
    if B < 1 or T < 1:
        raise ValueError("batch size and unroll length must be positive")
    if len(stream) < B * (T + 1):
        raise CorpusError(f"stream of {len(stream)} tokens is too short for B={B}, T={T}")
    lane = len(stream) // B
    lanes = stream[: B * lane].reshape(B, lane)
    n_windows = (lane - 1) // T
    return [(lanes[:, w * T:(w + 1) * T], lanes[:, w * T + 1:(w + 1) * T + 1])
            for w in range(n_windows)]


_SYLLABLES = ("ka", "lo", "mi", "ne", "ru", "ta", "be", "so", "di", "pa", "ve", "gu", "the", "and",
              "ing", "er", "on", "st", "ch", "ou", "an", "re", "wi", "ly", "ma", "po", "sh", "el")


def synthetic_text(n_bytes: int = 1_000_000, seed: int = 0) -> bytes:
    """Deterministic English-like prose.

    Words are built from a fixed syllable set, drawn with Zipfian
    frequencies and a sparse first-order transition table, then arranged
    into capitalised, punctuated sentences and paragraphs. The result has
    enough short- and mid-range structure for a byte-level model to learn.
    """
    rng = np.random.default_rng(seed)
    n_words = 1500
    words = []
    seen = set()
    while len(words) < n_words:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(1, 4)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    zipf = 1.0 / np.arange(1, n_words + 1) ** 1.1
    zipf /= zipf.sum()
    # each word prefers a small set of successors
    succ = rng.choice(n_words, size=(n_words, 8), p=zipf)

    out: list[str] = []
    size = 0
    prev = int(rng.choice(n_words, p=zipf))
    while size < n_bytes:
        sentence = []
        for _ in range(int(rng.integers(4, 16))):
            if rng.random() < 0.7:
                prev = int(succ[prev, rng.integers(0, 8)])
            else:
                prev = int(rng.choice(n_words, p=zipf))
            sentence.append(words[prev])
            if rng.random() < 0.08:
                sentence[-1] += ","
        text = " ".join(sentence)
        text = text[0].upper() + text[1:] + (". " if rng.random() < 0.85 else "? ")
        if rng.random() < 0.1:
            text += "\n\n"
        out.append(text)
        size += len(text)
    return "".join(out).encode("ascii")[:n_bytes]

