"""Online baseline predictors simulated over traces, plus hard-branch screening.

Two baselines:

* ``TageLite`` -- a tagged-geometric-history predictor: a bimodal base
  table plus N tagged tables indexed by folded global history of
  geometrically increasing lengths.  It keeps the canonical prediction
  machinery (longest tag match provides, useful-bit guarded allocation on
  mispredictions) but deliberately omits the loop predictor and
  statistical corrector of full production designs, so published
  accuracies are matched only approximately.
* ``PerceptronPredictor`` -- per-branch weight vectors over global history
  direction bits, trained online with the classic threshold rule
  theta = floor(1.93*h + 14).

Frozen conventions: saturating counters predict taken at or above the
midpoint (3-bit counter: taken iff >= 4); perceptron output >= 0 predicts
taken.  Both predictors require each update() to follow the matching
predict() for the same address.

Hash layout for TageLite (frozen, mirrored by the test oracle):
``fold(h, W) = XOR of consecutive W-bit chunks`` of the history bit
vector (bit 0 = most recent direction).  Table i with history length L:
index = (fold(h[:L], log2(entries)) ^ ip) & (entries-1);
tag = ((ip >> 2) ^ fold(h[:L], tag_bits) ^ (fold(h[:L], tag_bits-1) << 1))
masked to tag_bits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .trace import Trace

DESK_SCALE_FLOOR = 100


class ContractError(RuntimeError):
    """update() called without a matching predict() for the same address."""


class TagePrediction(NamedTuple):
    taken: bool
    provider: int | None  # tagged table index, None = bimodal base
    alt_taken: bool


@dataclass(frozen=True)
class TageLiteConfig:
    num_tagged_tables: int = 7
    table_entries: int = 1024
    tag_bits: int = 10
    max_history: int = 200
    min_history: int = 4
    counter_bits: int = 3
    useful_bits: int = 2

    def __post_init__(self):
        if self.counter_bits < 2:
            raise ValueError("counter_bits must be >= 2")
        if self.table_entries & (self.table_entries - 1):
            raise ValueError("table_entries must be a power of two")
        if not (0 < self.min_history < self.max_history):
            raise ValueError("need 0 < min_history < max_history")

    def history_lengths(self) -> list[int]:
        """Geometric series of per-table history lengths, min to max."""
        n = self.num_tagged_tables
        if n == 1:
            return [self.max_history]
        ratio = (self.max_history / self.min_history) ** (1.0 / (n - 1))
        lens = [int(round(self.min_history * ratio**i)) for i in range(n)]
        lens[0] = self.min_history
        lens[-1] = self.max_history
        for i in range(1, n):  # force strictly increasing after rounding
            if lens[i] <= lens[i - 1]:
                lens[i] = lens[i - 1] + 1
        return lens


def fold_bits(history: int, length: int, width: int) -> int:
    """XOR-fold the low ``length`` bits of a history integer to ``width`` bits."""
    mask = (1 << width) - 1
    h = history & ((1 << length) - 1)
    acc = 0
    while h:
        acc ^= h & mask
        h >>= width
    return acc


class _FoldedRegister:
    """Incrementally maintained fold_bits(history, length, width)."""

    __slots__ = ("length", "width", "comp", "_mask", "_outpoint")

    def __init__(self, length: int, width: int):
        self.length = length
        self.width = width
        self.comp = 0
        self._mask = (1 << width) - 1
        self._outpoint = length % width

    def push(self, new_bit: int, departed_bit: int) -> None:
        c = ((self.comp << 1) | new_bit) ^ (departed_bit << self._outpoint)
        c ^= c >> self.width
        self.comp = c & self._mask


class TageLite:
    """Tagged geometric-history predictor state and update rules."""

    def __init__(self, config: TageLiteConfig | None = None):
        self.config = config or TageLiteConfig()
        cfg = self.config
        self.history_lengths = cfg.history_lengths()
        n = cfg.num_tagged_tables
        e = cfg.table_entries
        self._idx_bits = e.bit_length() - 1
        self._ctr_max = (1 << cfg.counter_bits) - 1
        self._ctr_mid = 1 << (cfg.counter_bits - 1)
        self._u_max = (1 << cfg.useful_bits) - 1
        self._tag_mask = (1 << cfg.tag_bits) - 1
        # bimodal base, weak not-taken
        self.bimodal = [self._ctr_mid - 1] * e
        # tagged tables: parallel arrays per table
        self.valid = [[False] * e for _ in range(n)]
        self.tags = [[0] * e for _ in range(n)]
        self.ctrs = [[self._ctr_mid - 1] * e for _ in range(n)]
        self.useful = [[0] * e for _ in range(n)]
        self.history = 0  # bit 0 = most recent direction
        self._hist_mask = (1 << cfg.max_history) - 1
        self._f_idx = [_FoldedRegister(L, self._idx_bits) for L in self.history_lengths]
        self._f_tag1 = [_FoldedRegister(L, cfg.tag_bits) for L in self.history_lengths]
        self._f_tag2 = [_FoldedRegister(L, cfg.tag_bits - 1) for L in self.history_lengths]
        self._pending: tuple | None = None

    def _index(self, table: int, ip: int) -> int:
        return (self._f_idx[table].comp ^ ip) & (self.config.table_entries - 1)

    def _tag(self, table: int, ip: int) -> int:
        return ((ip >> 2) ^ self._f_tag1[table].comp ^ (self._f_tag2[table].comp << 1)) & self._tag_mask

    def predict(self, ip: int) -> TagePrediction:
        """Prediction from the longest matching tagged table, else bimodal.

        Pure: does not mutate state (the pending-update memo is overwritten
        idempotently).
        """
        base_taken = self.bimodal[ip & (self.config.table_entries - 1)] >= self._ctr_mid
        provider = None
        provider_idx = -1
        pred = base_taken
        alt = base_taken
        indices = []
        tag_vals = []
        for t in range(self.config.num_tagged_tables):
            idx = self._index(t, ip)
            tag = self._tag(t, ip)
            indices.append(idx)
            tag_vals.append(tag)
            if self.valid[t][idx] and self.tags[t][idx] == tag:
                alt = pred
                pred = self.ctrs[t][idx] >= self._ctr_mid
                provider = t
                provider_idx = idx
        self._pending = (ip, indices, tag_vals, provider, provider_idx, pred, alt)
        return TagePrediction(pred, provider, alt)

    def update(self, ip: int, taken: bool) -> None:
        """Apply the resolved direction for the branch just predicted.

        Rules: the provider's counter moves one step toward the outcome;
        when provider and alternate disagree the provider's useful counter
        moves up on a correct prediction and down otherwise; a
        misprediction allocates an entry in the first longer-history table
        whose victim has useful == 0 (counter initialized weakly toward the
        outcome), decrementing all candidate useful counters when none is
        free.  Finally the outcome is shifted into global history.
        """
        if self._pending is None or self._pending[0] != ip:
            raise ContractError("update() without matching predict() for this ip")
        _, indices, tag_vals, provider, provider_idx, pred, alt = self._pending
        self._pending = None
        cfg = self.config

        if provider is not None:
            if pred != alt:
                u = self.useful[provider][provider_idx]
                if pred == taken:
                    if u < self._u_max:
                        self.useful[provider][provider_idx] = u + 1
                elif u > 0:
                    self.useful[provider][provider_idx] = u - 1
            ctr = self.ctrs[provider][provider_idx]
            if taken:
                if ctr < self._ctr_max:
                    self.ctrs[provider][provider_idx] = ctr + 1
            elif ctr > 0:
                self.ctrs[provider][provider_idx] = ctr - 1
        else:
            b = ip & (cfg.table_entries - 1)
            ctr = self.bimodal[b]
            if taken:
                if ctr < self._ctr_max:
                    self.bimodal[b] = ctr + 1
            elif ctr > 0:
                self.bimodal[b] = ctr - 1

        if pred != taken:
            first = 0 if provider is None else provider + 1
            allocated = False
            for t in range(first, cfg.num_tagged_tables):
                idx = indices[t]
                if self.useful[t][idx] == 0:
                    self.valid[t][idx] = True
                    self.tags[t][idx] = tag_vals[t]
                    self.ctrs[t][idx] = self._ctr_mid if taken else self._ctr_mid - 1
                    allocated = True
                    break
            if not allocated:
                for t in range(first, cfg.num_tagged_tables):
                    idx = indices[t]
                    if self.useful[t][idx] > 0:
                        self.useful[t][idx] -= 1

        bit = 1 if taken else 0
        hist = self.history
        for t in range(cfg.num_tagged_tables):
            departed = (hist >> (self.history_lengths[t] - 1)) & 1
            self._f_idx[t].push(bit, departed)
            self._f_tag1[t].push(bit, departed)
            self._f_tag2[t].push(bit, departed)
        self.history = ((hist << 1) | bit) & self._hist_mask


@dataclass(frozen=True)
class PerceptronConfig:
    history_length: int = 200
    weight_bits: int = 8

    @property
    def weight_limit(self) -> int:
        return (1 << (self.weight_bits - 1)) - 1

    @property
    def theta(self) -> int:
        return int(1.93 * self.history_length + 14)


class PerceptronPredictor:
    """Per-branch perceptron over global history direction bits.

    History positions hold +1 (taken), -1 (not taken) or 0 before program
    start.  Output >= 0 predicts taken; weights train on mispredictions or
    whenever |output| <= theta, saturating at +/-(2^(weight_bits-1) - 1).
    """

    def __init__(self, config: PerceptronConfig | None = None):
        self.config = config or PerceptronConfig()
        L = self.config.history_length
        self.weights: dict[int, np.ndarray] = {}
        self._buf = np.zeros(2 * L, dtype=np.int8)  # doubled ring, 0 = pre-start pad
        self._pos = 0
        self._pending: tuple | None = None

    def history(self) -> np.ndarray:
        """Direction history, oldest first (slot L-1 = most recent)."""
        return self._buf[self._pos : self._pos + self.config.history_length]

    def _weights_for(self, ip: int) -> np.ndarray:
        w = self.weights.get(ip)
        if w is None:
            w = np.zeros(self.config.history_length + 1, dtype=np.int32)
            self.weights[ip] = w
        return w

    def predict(self, ip: int) -> bool:
        w = self._weights_for(ip)
        y = int(w[0]) + int(w[1:] @ self.history())
        self._pending = (ip, y)
        return y >= 0

    def update(self, ip: int, taken: bool) -> None:
        if self._pending is None or self._pending[0] != ip:
            raise ContractError("update() without matching predict() for this ip")
        _, y = self._pending
        self._pending = None
        cfg = self.config
        pred = y >= 0
        if pred != taken or abs(y) <= cfg.theta:
            t = 1 if taken else -1
            w = self.weights[ip]
            h = self.history()
            w[0] += t
            np.add(w[1:], t * h.astype(np.int32), out=w[1:])
            np.clip(w, -cfg.weight_limit, cfg.weight_limit, out=w)
        bit = 1 if taken else -1
        L = cfg.history_length
        self._buf[self._pos] = bit
        self._buf[self._pos + L] = bit
        self._pos = (self._pos + 1) % L


class Predictor(Protocol):
    def predict(self, ip: int) -> object: ...
    def update(self, ip: int, taken: bool) -> None: ...


class BranchStats(NamedTuple):
    predictions: int
    mispredictions: int

    @property
    def accuracy(self) -> float:
        return 1.0 - self.mispredictions / self.predictions if self.predictions else 0.0


def simulate_baseline(trace: Trace, predictor: Predictor) -> dict[int, BranchStats]:
    """One predict+update per record in trace order; stats per static ip."""
    counts: dict[int, list[int]] = {}
    predict = predictor.predict
    update = predictor.update
    ips = trace.ips.tolist()
    dirs = trace.taken.tolist()
    for ip, tk in zip(ips, dirs):
        taken = tk == 1
        out = predict(ip)
        pred = out.taken if isinstance(out, TagePrediction) else out
        update(ip, taken)
        c = counts.get(ip)
        if c is None:
            c = [0, 0]
            counts[ip] = c
        c[0] += 1
        if pred != taken:
            c[1] += 1
    return {ip: BranchStats(c[0], c[1]) for ip, c in counts.items()}


@dataclass(frozen=True)
class H2pScreenConfig:
    accuracy_threshold: float = 0.99
    min_mispredictions: int = 1000
    window_instructions: int = 30_000_000

    def __post_init__(self):
        if not (0.0 < self.accuracy_threshold < 1.0):
            raise ValueError("accuracy_threshold must be in (0, 1)")


def screen_h2ps(
    stats: dict[int, BranchStats],
    screen_config: H2pScreenConfig,
    instruction_count: int | None,
) -> list[int]:
    """Addresses below the accuracy threshold with enough misprediction volume.

    The volume requirement scales the configured rate (min_mispredictions
    per window_instructions) to the trace's instruction count, with a floor
    of DESK_SCALE_FLOOR so tiny desk-scale traces still need a real signal.
    Returns ips sorted ascending.
    """
    if instruction_count is None:
        raise ValueError("instruction_count required to scale the misprediction volume rule")
    cfg = screen_config
    required = max(
        cfg.min_mispredictions * instruction_count / cfg.window_instructions,
        DESK_SCALE_FLOOR,
    )
    out = [
        ip
        for ip, s in stats.items()
        if s.predictions > 0 and s.accuracy < cfg.accuracy_threshold and s.mispredictions >= required
    ]
    return sorted(out)


def write_stats_csv(stats: dict[int, BranchStats], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ip", "predictions", "mispredictions", "accuracy"])
        for ip in sorted(stats):
            s = stats[ip]
            w.writerow([f"0x{ip:x}", s.predictions, s.mispredictions, repr(s.accuracy)])


def read_stats_csv(path: str | Path) -> dict[int, BranchStats]:
    out: dict[int, BranchStats] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["ip"], 16)] = BranchStats(
                int(row["predictions"]), int(row["mispredictions"])
            )
    return out
