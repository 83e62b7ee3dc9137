"""Byte-level corpus loading, train/held-out split, window sampling."""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .model import BOS
from .numerics import RngState, randint

HELDOUT_FRACTION = 0.05


class CorpusError(ValueError):
    pass


def load_corpus(path) -> np.ndarray:
    """Raw bytes as token ids 0..255."""
    p = Path(path)
    if not p.is_file():
        raise CorpusError(f"corpus not found: {p}")
    data = p.read_bytes()
    if not data:
        raise CorpusError(f"corpus is empty: {p}")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def split_corpus(tokens: np.ndarray, heldout_fraction: float = HELDOUT_FRACTION):
    """Final ``heldout_fraction`` of the bytes is never sampled for training."""
    cut = len(tokens) - int(round(len(tokens) * heldout_fraction))
    return tokens[:cut], tokens[cut:]


def make_window(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """BOS-prefixed input and next-token targets for one chunk."""
    chunk = np.asarray(chunk, dtype=np.int64)
    inp = np.empty_like(chunk)
    inp[0] = BOS
    inp[1:] = chunk[:-1]
    return inp, chunk


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int,
                 rng: RngState) -> tuple[np.ndarray, np.ndarray, RngState]:
    """Uniform random offsets, with replacement."""
    n = len(tokens)
    if n < seq_len + 1:
        raise CorpusError(f"corpus of {n} tokens is too short for seq_len={seq_len}")
    offsets, rng = randint(rng, batch_size, n - seq_len + 1)
    idx = offsets[:, None] + np.arange(seq_len)[None, :]
    chunks = np.asarray(tokens, dtype=np.int64)[idx]
    inputs = np.empty_like(chunks)
    inputs[:, 0] = BOS
    inputs[:, 1:] = chunks[:, :-1]
    return inputs, chunks, rng


def batch_iterator(tokens: np.ndarray, batch_size: int, seq_len: int,
                   rng: RngState) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    while True:
        inputs, targets, rng = sample_batch(tokens, batch_size, seq_len, rng)
        yield inputs, targets


def eval_windows(tokens: np.ndarray, seq_len: int, max_windows: Optional[int] = None,
                 batch_size: int = 8) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Consecutive non-overlapping windows; a trailing partial window is kept."""
    toks = np.asarray(tokens, dtype=np.int64)
    starts = list(range(0, len(toks), seq_len))
    if max_windows is not None:
        starts = starts[:max_windows]
    full = [s for s in starts if s + seq_len <= len(toks)]
    for i in range(0, len(full), batch_size):
        pairs = [make_window(toks[s:s + seq_len]) for s in full[i:i + batch_size]]
        yield np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
    tail = [s for s in starts if s + seq_len > len(toks)]
    for s in tail:
        inp, tgt = make_window(toks[s:])
        yield inp[None, :], tgt[None, :]


def fixed_batch(tokens: np.ndarray, n_seq: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """The first ``n_seq`` full windows: the evaluation batch shared by every run."""
    need = n_seq * seq_len
    if len(tokens) < need:
        raise CorpusError(f"need {need} tokens for a {n_seq}x{seq_len} evaluation batch, have {len(tokens)}")
    pairs = [make_window(tokens[i * seq_len:(i + 1) * seq_len]) for i in range(n_seq)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
