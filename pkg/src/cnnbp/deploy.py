"""Bit-packed ternary inference engine: table fold, FIFO updates, popcount
prediction, rollback, serialization and storage accounting.

Ternary values are stored as 2-bit codes split across two bit planes: the
sign plane S (1 = positive) and the value plane V (1 = nonzero).  Legal
codes are 00 (zero), 01 (-1) and 11 (+1); 10 is forbidden and rejected on
deserialization.

Plane layout (frozen; serialization depends on it):

* lookup table planes: bit ``i*m + j`` holds filter j of encoded index i;
* FIFO and layer-2 planes: bit ``slot*m + j`` where slot 0 is the most
  recent history position and slot L-1 the oldest.  Pushing shifts every
  slot up by m bits and inserts the new table row at the bottom, so the
  oldest row falls off the top.

Planes live in arbitrary-precision ints; bit k of the plane is bit k of
the int, and serialization writes ``int.to_bytes(ceil(bits/8), "little")``
(little-endian within words, padded to whole bytes).

A prediction is one XOR over sign planes, one AND over value planes, two
popcounts and a comparison with the precomputed integer threshold:
``P = popcount(active & ~s_bits) - popcount(active & s_bits)`` with
``s_bits = L1_S xor L2_S`` and ``active = L1_V and L2_V``; predict taken
iff ``P > t``.  The XOR-of-signs form is exactly the ternary inner product
(the product of two nonzero codes is negative iff their signs differ),
and masking both popcount terms by ``active`` keeps zero-valued positions
out of P.
"""

from __future__ import annotations

import math
from collections import deque
from pathlib import Path

import numpy as np

from .cnn import CnnModel, layer1_response_table, normalize, quantize_ternary
from .encoder import encode_index

CODE_ZERO = 0b00
CODE_NEG = 0b01
CODE_POS = 0b11

_HEADER_LEN = 16
_MAGIC = b"CNNH"
_VERSION = 1


class HelperFormatError(ValueError):
    """Malformed helper blob."""


def plane_bytes(bits: int) -> int:
    return (bits + 7) // 8


def pack_codes(codes: np.ndarray) -> tuple[int, int]:
    """Pack a flat array of {-1, 0, +1} into (sign plane, value plane) ints."""
    flat = np.ascontiguousarray(codes, dtype=np.int8).ravel()
    s_bits = np.packbits((flat > 0).astype(np.uint8), bitorder="little").tobytes()
    v_bits = np.packbits((flat != 0).astype(np.uint8), bitorder="little").tobytes()
    return int.from_bytes(s_bits, "little"), int.from_bytes(v_bits, "little")


def unpack_codes(s_plane: int, v_plane: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; rejects the forbidden 10 code."""
    if s_plane & ~v_plane & ((1 << count) - 1):
        raise HelperFormatError("illegal ternary code 10 (sign set on zero value)")
    nb = plane_bytes(count)
    s = np.unpackbits(
        np.frombuffer(s_plane.to_bytes(nb, "little"), dtype=np.uint8),
        bitorder="little", count=count,
    )
    v = np.unpackbits(
        np.frombuffer(v_plane.to_bytes(nb, "little"), dtype=np.uint8),
        bitorder="little", count=count,
    )
    return (v.astype(np.int8) * np.where(s, 1, -1).astype(np.int8)).astype(np.int8)


class LookupTable:
    """2^p x m ternary codes holding the folded layer-1 responses."""

    __slots__ = ("p", "m", "s_plane", "v_plane", "rows_s", "rows_v")

    def __init__(self, p: int, m: int, s_plane: int, v_plane: int):
        self.p = p
        self.m = m
        self.s_plane = s_plane
        self.v_plane = v_plane
        rowmask = (1 << m) - 1
        self.rows_s = [(s_plane >> (i * m)) & rowmask for i in range(1 << p)]
        self.rows_v = [(v_plane >> (i * m)) & rowmask for i in range(1 << p)]

    @property
    def size_bits(self) -> int:
        return (1 << self.p) * self.m * 2

    def codes(self) -> np.ndarray:
        """(2^p, m) int8 view of the stored codes."""
        return unpack_codes(self.s_plane, self.v_plane, (1 << self.p) * self.m).reshape(
            1 << self.p, self.m
        )


def build_table(model: CnnModel) -> LookupTable:
    """Fold gather + bias + normalization + quantization into one table.

    Every entry is the exhaustive evaluation
    ``quantize_ternary(normalize(W1[i,j] + b1[j]), q)`` under the model's
    running statistics, which is exact for all 2^p * m entries regardless
    of how the quantization bin edges are expressed.
    """
    resp = layer1_response_table(model)
    if not np.all(np.isfinite(resp)):
        raise ValueError("non-finite layer-1 response; model parameters are invalid")
    codes = quantize_ternary(resp, model.q)
    s_plane, v_plane = pack_codes(codes)
    return LookupTable(model.p, model.m, s_plane, v_plane)


class FifoBuffer:
    """history_len x m ternary codes as rolling bit planes, with an undo log.

    The undo log retains the last ``depth`` evicted rows so mispredicted
    wrong-path updates can be rolled back.
    """

    __slots__ = ("history_len", "m", "s", "v", "_mask", "_rowmask", "_top_shift", "_undo")

    def __init__(self, history_len: int, m: int, depth: int | None = None):
        self.history_len = history_len
        self.m = m
        self.s = 0
        self.v = 0
        self._mask = (1 << (history_len * m)) - 1
        self._rowmask = (1 << m) - 1
        self._top_shift = (history_len - 1) * m
        self._undo: deque[tuple[int, int]] = deque(maxlen=depth or history_len)

    def push_row(self, row_s: int, row_v: int) -> None:
        self._undo.append(((self.s >> self._top_shift) & self._rowmask,
                           (self.v >> self._top_shift) & self._rowmask))
        self.s = ((self.s << self.m) | row_s) & self._mask
        self.v = ((self.v << self.m) | row_v) & self._mask

    @property
    def recoverable(self) -> int:
        return len(self._undo)

    def codes(self) -> np.ndarray:
        """(history_len, m) int8 codes, row 0 = most recent slot."""
        return unpack_codes(self.s, self.v, self.history_len * self.m).reshape(
            self.history_len, self.m
        )


def fifo_update(fifo: FifoBuffer, table: LookupTable, ip: int, taken: bool) -> None:
    """Shift the oldest position out and insert the table row for this event."""
    if fifo.m != table.m:
        raise ValueError("fifo and table filter counts differ")
    i = encode_index(ip, taken, table.p)
    fifo.push_row(table.rows_s[i], table.rows_v[i])


def rollback(fifo: FifoBuffer, n: int) -> None:
    """Undo the last n updates; errors if n exceeds the retained undo depth."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n > fifo.recoverable:
        raise ValueError(f"cannot roll back {n} updates; only {fifo.recoverable} retained")
    for _ in range(n):
        s_frag, v_frag = fifo._undo.pop()
        fifo.s = (fifo.s >> fifo.m) | (s_frag << fifo._top_shift)
        fifo.v = (fifo.v >> fifo.m) | (v_frag << fifo._top_shift)


def derive_threshold(
    mu2: float, sigma2: float, gamma2: float, beta2: float, limit: int
) -> tuple[int, bool]:
    """Integer threshold equivalent to "normalized output > 0".

    Inverts ``((P - mu2) * (gamma2/sigma2)) + beta2 = 0`` at ``P* = mu2 -
    beta2*sigma2/gamma2``; with gamma2 > 0 the decision is ``P > floor(P*)``.
    With gamma2 < 0 the comparison direction flips, so the returned flag
    tells the caller to negate the layer-2 code plane (the engine then sees
    P' = -P) and the threshold is derived for the negated axis.  The
    closed-form value is then verified against the float expression at the
    neighboring integers and nudged if float rounding put it off by one, so
    deployed decisions equal the reference forward's decisions for every
    reachable P in [-limit, limit].  t is clamped to [-limit-1, limit]
    (everything below -limit-1 or above limit is decision-equivalent).
    """
    if gamma2 == 0.0:
        raise ValueError("gamma2 must be nonzero")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    negate = gamma2 < 0.0

    def decide(p: int) -> bool:  # reference decision at inner product p
        return normalize(float(p), mu2, gamma2, sigma2, beta2) > 0.0

    def engine_decide(p_engine: int) -> bool:
        return decide(-p_engine) if negate else decide(p_engine)

    p_star = mu2 - beta2 * sigma2 / gamma2
    if math.isfinite(p_star):
        t = math.floor(-p_star) if negate else math.floor(p_star)
        t = max(-limit - 1, min(limit, t))
    else:
        t = 0
    # engine_decide is non-decreasing in its argument; fix float edges.
    while t < limit and not engine_decide(t + 1):
        t += 1
    while t > -limit - 1 and engine_decide(t):
        t -= 1
    return t, negate


class DeployedHelper:
    """The on-BPU artifact: lookup table, layer-2 code planes, threshold."""

    __slots__ = ("table", "l2_s", "l2_v", "t", "p", "m", "history_len")

    def __init__(self, table: LookupTable, l2_s: int, l2_v: int, t: int, history_len: int):
        self.table = table
        self.l2_s = l2_s
        self.l2_v = l2_v
        self.t = t
        self.p = table.p
        self.m = table.m
        self.history_len = history_len

    @classmethod
    def from_model(cls, model: CnnModel) -> "DeployedHelper":
        """Fold a finalized ternary model into the deployable form."""
        table = build_table(model)
        codes2 = quantize_ternary(model.w2, model.q)
        limit = model.history_len * model.m
        t, negate = derive_threshold(
            model.run_mean2, model.sigma2(), model.gamma2, model.beta2, limit
        )
        if negate:
            codes2 = (-codes2).astype(np.int8)
        # slot 0 = most recent = history position L-1, hence the reversal
        l2_s, l2_v = pack_codes(codes2[::-1])
        return cls(table, l2_s, l2_v, t, model.history_len)

    def make_fifo(self, depth: int | None = None) -> FifoBuffer:
        return FifoBuffer(self.history_len, self.m, depth)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeployedHelper):
            return NotImplemented
        return (
            self.p == other.p and self.m == other.m
            and self.history_len == other.history_len and self.t == other.t
            and self.table.s_plane == other.table.s_plane
            and self.table.v_plane == other.table.v_plane
            and self.l2_s == other.l2_s and self.l2_v == other.l2_v
        )


def predict(helper: DeployedHelper, fifo: FifoBuffer) -> tuple[bool, int]:
    """Popcount-form ternary inner product and thresholded prediction."""
    s_bits = fifo.s ^ helper.l2_s
    active = fifo.v & helper.l2_v
    p = (active & ~s_bits).bit_count() - (active & s_bits).bit_count()
    return p > helper.t, p


def storage_bytes(p: int, m: int, history_len: int) -> int:
    """On-BPU bytes: 2-bit table + 2-bit FIFO + 2-bit layer-2 weights +
    8-byte threshold buffer, each rounded up to whole bytes."""
    if p <= 0 or m <= 0 or history_len <= 0:
        raise ValueError("all dimensions must be positive")
    table = plane_bytes((1 << p) * m * 2)
    fifo = plane_bytes(history_len * m * 2)
    l2 = plane_bytes(history_len * m * 2)
    return table + fifo + l2 + 8


def serialize_helper(helper: DeployedHelper) -> bytes:
    """16-byte header, i64 threshold, then the four code planes."""
    head = _MAGIC + bytes([_VERSION, helper.p])
    head += helper.m.to_bytes(2, "little") + helper.history_len.to_bytes(2, "little")
    head += b"\x00" * (_HEADER_LEN - len(head))
    tbl_bytes = plane_bytes((1 << helper.p) * helper.m)
    l2_bytes = plane_bytes(helper.history_len * helper.m)
    return (
        head
        + helper.t.to_bytes(8, "little", signed=True)
        + helper.table.s_plane.to_bytes(tbl_bytes, "little")
        + helper.table.v_plane.to_bytes(tbl_bytes, "little")
        + helper.l2_s.to_bytes(l2_bytes, "little")
        + helper.l2_v.to_bytes(l2_bytes, "little")
    )


def deserialize_helper(blob: bytes) -> DeployedHelper:
    if blob[:4] != _MAGIC:
        raise HelperFormatError("bad magic (expected CNNH)")
    if len(blob) < _HEADER_LEN + 8:
        raise HelperFormatError("truncated header")
    if blob[4] != _VERSION:
        raise HelperFormatError(f"unsupported version {blob[4]}")
    p = blob[5]
    m = int.from_bytes(blob[6:8], "little")
    history_len = int.from_bytes(blob[8:10], "little")
    if not (2 <= p <= 16) or m < 1 or history_len < 1:
        raise HelperFormatError(f"dimensions out of range: p={p}, m={m}, len={history_len}")
    if any(blob[10:_HEADER_LEN]):
        raise HelperFormatError("reserved header bytes must be zero")
    t = int.from_bytes(blob[_HEADER_LEN : _HEADER_LEN + 8], "little", signed=True)
    limit = history_len * m
    if not (-limit - 1 <= t <= limit):
        raise HelperFormatError(f"threshold {t} outside [-{limit + 1}, {limit}]")
    tbl_bytes = plane_bytes((1 << p) * m)
    l2_bytes = plane_bytes(history_len * m)
    expected = _HEADER_LEN + 8 + 2 * tbl_bytes + 2 * l2_bytes
    if len(blob) != expected:
        raise HelperFormatError(f"blob length {len(blob)} != expected {expected}")
    off = _HEADER_LEN + 8
    tbl_s = int.from_bytes(blob[off : off + tbl_bytes], "little"); off += tbl_bytes
    tbl_v = int.from_bytes(blob[off : off + tbl_bytes], "little"); off += tbl_bytes
    l2_s = int.from_bytes(blob[off : off + l2_bytes], "little"); off += l2_bytes
    l2_v = int.from_bytes(blob[off : off + l2_bytes], "little")
    n_tbl = (1 << p) * m
    if tbl_s & ~tbl_v & ((1 << n_tbl) - 1):
        raise HelperFormatError("illegal ternary code 10 in table plane")
    if l2_s & ~l2_v & ((1 << limit) - 1):
        raise HelperFormatError("illegal ternary code 10 in layer-2 plane")
    if tbl_s >> n_tbl or tbl_v >> n_tbl or l2_s >> limit or l2_v >> limit:
        raise HelperFormatError("plane padding bits must be zero")
    return DeployedHelper(LookupTable(p, m, tbl_s, tbl_v), l2_s, l2_v, t, history_len)


def save_helper(helper: DeployedHelper, path: str | Path) -> None:
    Path(path).write_bytes(serialize_helper(helper))


def load_helper(path: str | Path) -> DeployedHelper:
    return deserialize_helper(Path(path).read_bytes())
