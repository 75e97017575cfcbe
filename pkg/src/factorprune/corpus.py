"""Character corpus ingestion and contiguous-lane batching.

The vocabulary is built from the train split only, ids assigned by
descending train frequency (ties broken by symbol value) so cluster
boundaries for the adaptive embedding are contiguous id ranges. Symbols
seen only in valid/test alias to reserved id 0.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass, field

import numpy as np

UNKNOWN_ID = 0


class CorpusError(ValueError):
    pass


@dataclass
class CharCorpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: dict = field(repr=False)
    symbols: list = field(repr=False)
    mode: str = "byte"
    unroll_length: int = 64
    batch_size: int = 32
    frequencies: np.ndarray | None = field(default=None, repr=False)

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise CorpusError(f"unknown split {name!r}") from None

    def n_windows(self, split="train", batch_size=None, unroll=None) -> int:
        data = self.split(split)
        B = batch_size or self.batch_size
        U = unroll or self.unroll_length
        lane_len = data.shape[0] // B
        if lane_len < 2:
            raise CorpusError(f"split too small for {B} lanes")
        return -(-(lane_len - 1) // U)

    def window(self, split, index, batch_size=None, unroll=None):
        """(x, y) id arrays [batch, <=unroll] for window `index` of the split.

        Windows are pure functions of (split, index, batch, unroll), so a
        resumed run replays the identical batch sequence.
        """
        data = self.split(split)
        B = batch_size or self.batch_size
        U = unroll or self.unroll_length
        lane_len = data.shape[0] // B
        if not 0 <= index < self.n_windows(split, B, U):
            raise CorpusError(f"window {index} out of range")
        lanes = data[: lane_len * B].reshape(B, lane_len)
        t = index * U
        end = min(t + U, lane_len - 1)
        return lanes[:, t:end], lanes[:, t + 1:end + 1]

    def batches(self, split="train", batch_size=None, unroll=None):
        """Yield (x, y) windows in order; lanes are contiguous stream slices
        so hidden state carried across consecutive batches sees an unbroken
        context."""
        for w in range(self.n_windows(split, batch_size, unroll)):
            yield self.window(split, w, batch_size, unroll)

    def n_predictions(self, split="train", batch_size=None) -> int:
        data = self.split(split)
        B = batch_size or self.batch_size
        return (data.shape[0] // B - 1) * B


def _to_symbols(raw: bytes, mode: str):
    if mode == "byte":
        return list(raw)
    if mode == "char":
        return list(raw.decode("utf-8"))
    raise CorpusError(f"mode must be 'byte' or 'char', got {mode!r}")


def from_text(raw, split_fractions=(0.8, 0.1, 0.1), mode="byte",
              unroll_length=64, batch_size=32) -> CharCorpus:
    """Build a corpus from bytes or str; splits are contiguous in order."""
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    if len(raw) == 0:
        raise CorpusError("empty corpus")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must sum to 1, got {split_fractions}")
    syms = _to_symbols(raw, mode)
    n = len(syms)
    n_train = math.floor(split_fractions[0] * n)
    n_valid = math.floor(split_fractions[1] * n)
    if n_train < 1:
        raise CorpusError("train split is empty")
    train_syms = syms[:n_train]
    valid_syms = syms[n_train:n_train + n_valid]
    test_syms = syms[n_train + n_valid:]

    counts = {}
    for s in train_syms:
        counts[s] = counts.get(s, 0) + 1
    # id 0 = most frequent; unknown symbols alias to id 0
    ordered = sorted(counts, key=lambda s: (-counts[s], s))
    vocab = {s: i for i, s in enumerate(ordered)}
    freqs = np.array([counts[s] for s in ordered], dtype=np.int64)

    def encode(symbols):
        return np.array([vocab.get(s, UNKNOWN_ID) for s in symbols], dtype=np.int64)

    return CharCorpus(
        train=encode(train_syms), valid=encode(valid_syms), test=encode(test_syms),
        vocab=vocab, symbols=ordered, mode=mode,
        unroll_length=unroll_length, batch_size=batch_size, frequencies=freqs,
    )


def ingest(path, split_fractions=(0.8, 0.1, 0.1), mode="byte",
           unroll_length=64, batch_size=32) -> CharCorpus:
    with open(path, "rb") as f:
        raw = f.read()
    return from_text(raw, split_fractions, mode, unroll_length, batch_size)


def bundled_text() -> bytes:
    """The public-domain text shipped for tests and desk-scale runs."""
    ref = importlib.resources.files("factorprune").joinpath("data/tiny_corpus.txt")
    return ref.read_bytes()


def make_zipf_text(n_chars: int, n_symbols: int = 120, exponent: float = 1.3,
                   seed: int = 0) -> bytes:
    """Synthetic stream with a Zipfian symbol distribution over byte values."""
    if n_symbols > 255:
        raise CorpusError("at most 255 distinct byte symbols")
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, n_symbols + 1, dtype=np.float64)
    probs = ranks ** -exponent
    probs /= probs.sum()
    draws = rng.choice(n_symbols, size=n_chars, p=probs)
    # map symbol ranks onto printable-ish byte values
    alphabet = np.arange(32, 32 + n_symbols, dtype=np.uint8)
    return alphabet[draws].tobytes()


def cluster_boundaries(vocab_size: int, quantiles=(0.2, 0.5)) -> list:
    """Contiguous frequency-ranked id ranges for the adaptive embedding."""
    cuts = [0]
    for q in quantiles:
        cuts.append(max(cuts[-1] + 1, int(round(q * vocab_size))))
    cuts.append(vocab_size)
    if cuts[-2] >= vocab_size:
        raise CorpusError(f"vocabulary of {vocab_size} too small for {len(quantiles) + 1} clusters")
    return [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]
