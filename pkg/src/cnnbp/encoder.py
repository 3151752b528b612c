"""Hashing of ⟨ip, direction⟩ tuples and 1-hot history construction.

Every branch event is mapped to an index in [0, 2^p) by concatenating the
direction bit onto the low p-1 bits of the instruction address:
``((ip << 1) | taken) & (2^p - 1)``.  A history window is the encoded
indices of the most recent ``history_len`` events; positions before
program start hold the reserved pad marker ``PAD`` (-1), which expands to
an all-zero 1-hot column so absent history contributes nothing.

1-hot matrices exist only on the training side; deployment replaces them
with direct table lookups (see deploy module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .trace import Trace

PAD = -1


@dataclass(frozen=True)
class EncoderConfig:
    p: int = 8
    history_len: int = 200

    def __post_init__(self):
        if not (2 <= self.p <= 16):
            raise ValueError("p must be in [2, 16]")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")

    @property
    def num_indices(self) -> int:
        return 1 << self.p


def encode_index(ip: int, taken: bool, p: int) -> int:
    """Index of an ⟨ip, direction⟩ tuple in [0, 2^p)."""
    return ((ip << 1) | (1 if taken else 0)) & ((1 << p) - 1)


def encode_trace(trace: Trace, p: int) -> np.ndarray:
    """Encoded index of every record, as an int32 array."""
    mask = np.uint64((1 << p) - 1)
    enc = ((trace.ips << np.uint64(1)) | trace.taken.astype(np.uint64)) & mask
    return enc.astype(np.int32)


class HistoryWindow:
    """Rolling window of the most recent encoded indices.

    Slot ``history_len - 1`` is the most recent event; unfilled slots hold
    PAD.  Backed by a doubled buffer so ``indices()`` is a contiguous view.
    """

    __slots__ = ("history_len", "p", "_buf", "_pos")

    def __init__(self, config: EncoderConfig):
        self.history_len = config.history_len
        self.p = config.p
        self._buf = np.full(2 * config.history_len, PAD, dtype=np.int32)
        self._pos = 0

    def push(self, ip: int, taken: bool) -> None:
        self.push_index(encode_index(ip, taken, self.p))

    def push_index(self, index: int) -> None:
        L = self.history_len
        self._buf[self._pos] = index
        self._buf[self._pos + L] = index
        self._pos = (self._pos + 1) % L

    def indices(self) -> np.ndarray:
        """Encoded indices ordered oldest (slot 0) to newest (slot L-1)."""
        return self._buf[self._pos : self._pos + self.history_len]

    @classmethod
    def from_indices(cls, indices: np.ndarray, config: EncoderConfig) -> "HistoryWindow":
        if len(indices) != config.history_len:
            raise ValueError("index array length must equal history_len")
        w = cls(config)
        for i in indices:
            w.push_index(int(i))
        return w


def build_history_matrix(window: HistoryWindow, p: int) -> np.ndarray:
    """2^p x history_len matrix of 1-hot columns; pad columns are all zero."""
    idx = window.indices()
    mat = np.zeros((1 << p, len(idx)), dtype=np.uint8)
    cols = np.flatnonzero(idx != PAD)
    mat[idx[cols], cols] = 1
    return mat


def extract_windows(encoded: np.ndarray, positions: np.ndarray, history_len: int) -> np.ndarray:
    """History window (preceding ``history_len`` encoded indices) for each
    trace position, left-padded with PAD.  Returns shape (n, history_len);
    column history_len-1 is the record immediately before the position.
    """
    n = len(positions)
    offsets = np.arange(-history_len, 0, dtype=np.int64)
    src = positions.astype(np.int64)[:, None] + offsets[None, :]
    valid = src >= 0
    out = np.full((n, history_len), PAD, dtype=np.int32)
    out[valid] = encoded[src[valid]]
    return out


class TrainingSet:
    """Sampled (history window, observed direction) pairs for one branch."""

    def __init__(self, windows: np.ndarray, labels: np.ndarray, config: EncoderConfig):
        self.windows = windows
        self.labels = labels
        self.config = config

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[HistoryWindow, bool]:
        return HistoryWindow.from_indices(self.windows[i], self.config), bool(self.labels[i])


def collect_training_set(
    trace: Trace,
    h2p_ip: int,
    encoder_config: EncoderConfig,
    sample_budget: int,
    seed: int,
) -> TrainingSet:
    """Uniform sample (without replacement) of history/direction pairs for
    the dynamic occurrences of ``h2p_ip``.  Returns all pairs when fewer
    than ``sample_budget`` exist; deterministic given the seed.
    """
    occ = np.flatnonzero(trace.ips == np.uint64(h2p_ip))
    if occ.size == 0:
        raise ValueError(f"ip {h2p_ip:#x} does not occur in trace")
    if occ.size > sample_budget:
        keep = SplitMix64(seed).sample_indices(occ.size, sample_budget)
        occ = occ[np.array(keep, dtype=np.int64)]
    encoded = encode_trace(trace, encoder_config.p)
    windows = extract_windows(encoded, occ, encoder_config.history_len)
    labels = trace.taken[occ].astype(np.uint8)
    return TrainingSet(windows, labels, encoder_config)
