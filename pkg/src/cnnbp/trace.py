"""Branch traces and their on-disk formats.

A trace is the dynamic sequence of conditional-branch events of one
workload execution: for each event, the branch's instruction address and
whether it was taken.  Traces are stored column-wise in numpy arrays and
are immutable once constructed.

Two interchangeable file formats:

* binary: magic ``BRT1``, little-endian u32 record count, then records of
  ``{u64 LE ip, u8 direction}``, then a footer ``META`` + u32 LE length +
  UTF-8 JSON metadata text.
* text: one ``0x<hex ip>,<0|1>`` per line.  Lines starting with ``#`` are
  comments; metadata rides in ``#! <json>`` comment lines so the text form
  round-trips losslessly too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

_MAGIC = b"BRT1"
_META_MAGIC = b"META"
_RECORD = np.dtype([("ip", "<u8"), ("taken", "u1")])


class TraceFormatError(ValueError):
    """Raised for malformed trace files; message names the byte/line offset."""


class BranchRecord(NamedTuple):
    ip: int
    taken: bool


@dataclass(frozen=True)
class TraceMeta:
    workload_id: str = ""
    generator_seed: int | None = None
    instruction_count: int | None = None

    def to_json(self) -> str:
        d = {"workload_id": self.workload_id}
        if self.generator_seed is not None:
            d["generator_seed"] = self.generator_seed
        if self.instruction_count is not None:
            d["instruction_count"] = self.instruction_count
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TraceMeta":
        d = json.loads(text)
        return cls(
            workload_id=d.get("workload_id", ""),
            generator_seed=d.get("generator_seed"),
            instruction_count=d.get("instruction_count"),
        )


class Trace:
    """Ordered branch events; index i happened before index i+1."""

    __slots__ = ("ips", "taken", "meta")

    def __init__(self, ips: np.ndarray, taken: np.ndarray, meta: TraceMeta | None = None):
        ips = np.ascontiguousarray(ips, dtype=np.uint64)
        taken = np.ascontiguousarray(taken, dtype=np.uint8)
        if ips.shape != taken.shape or ips.ndim != 1:
            raise ValueError("ips and taken must be 1-d arrays of equal length")
        if taken.size and taken.max() > 1:
            raise ValueError("directions must be 0 or 1")
        meta = meta or TraceMeta()
        if meta.instruction_count is not None and meta.instruction_count < len(ips):
            raise ValueError("instruction_count smaller than record count")
        ips.flags.writeable = False
        taken.flags.writeable = False
        self.ips = ips
        self.taken = taken
        self.meta = meta

    @classmethod
    def from_records(cls, records: Sequence[tuple[int, bool]], meta: TraceMeta | None = None) -> "Trace":
        n = len(records)
        ips = np.empty(n, dtype=np.uint64)
        tk = np.empty(n, dtype=np.uint8)
        for i, (ip, taken) in enumerate(records):
            ips[i] = ip
            tk[i] = 1 if taken else 0
        return cls(ips, tk, meta)

    def __len__(self) -> int:
        return len(self.ips)

    def __getitem__(self, i: int) -> BranchRecord:
        return BranchRecord(int(self.ips[i]), bool(self.taken[i]))

    def records(self) -> Iterator[BranchRecord]:
        for ip, tk in zip(self.ips.tolist(), self.taken.tolist()):
            yield BranchRecord(ip, bool(tk))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            np.array_equal(self.ips, other.ips)
            and np.array_equal(self.taken, other.taken)
            and self.meta == other.meta
        )

    def __repr__(self) -> str:
        return f"Trace({len(self)} records, workload={self.meta.workload_id!r})"


def write_trace(trace: Trace, path: str | Path, format: str = "binary") -> None:
    """Write a trace in the given format ("binary" or "text")."""
    path = Path(path)
    if format == "binary":
        body = np.empty(len(trace), dtype=_RECORD)
        body["ip"] = trace.ips
        body["taken"] = trace.taken
        meta_text = trace.meta.to_json().encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(np.uint32(len(trace)).tobytes())
            f.write(body.tobytes())
            f.write(_META_MAGIC)
            f.write(np.uint32(len(meta_text)).tobytes())
            f.write(meta_text)
    elif format == "text":
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#! {trace.meta.to_json()}\n")
            for ip, tk in zip(trace.ips.tolist(), trace.taken.tolist()):
                f.write(f"0x{ip:x},{tk}\n")
    else:
        raise ValueError(f"unknown trace format {format!r}")


def read_trace(path: str | Path) -> Trace:
    """Read a trace file; the format is sniffed from the leading bytes."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _MAGIC:
        return _read_binary(path)
    return _read_text(path)


def _read_binary(path: Path) -> Trace:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise TraceFormatError(f"{path}: bad magic at byte 0 (expected BRT1)")
    if len(blob) < 8:
        raise TraceFormatError(f"{path}: truncated header at byte {len(blob)}")
    count = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    body_end = 8 + count * _RECORD.itemsize
    if len(blob) < body_end:
        raise TraceFormatError(
            f"{path}: truncated record section at byte {len(blob)} (need {body_end})"
        )
    body = np.frombuffer(blob, dtype=_RECORD, count=count, offset=8)
    if body.size and body["taken"].max() > 1:
        bad = int(np.argmax(body["taken"] > 1))
        raise TraceFormatError(
            f"{path}: invalid direction byte at byte {8 + bad * _RECORD.itemsize + 8}"
        )
    meta = TraceMeta()
    rest = blob[body_end:]
    if rest:
        if rest[:4] != _META_MAGIC or len(rest) < 8:
            raise TraceFormatError(f"{path}: bad footer at byte {body_end}")
        mlen = int(np.frombuffer(rest, dtype="<u4", count=1, offset=4)[0])
        if len(rest) != 8 + mlen:
            raise TraceFormatError(f"{path}: footer length mismatch at byte {body_end + 8}")
        meta = TraceMeta.from_json(rest[8:].decode("utf-8"))
    return Trace(body["ip"].copy(), body["taken"].copy(), meta)


def _read_text(path: Path) -> Trace:
    ips: list[int] = []
    taken: list[int] = []
    meta = TraceMeta()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#!"):
                try:
                    meta = TraceMeta.from_json(line[2:].strip())
                except (json.JSONDecodeError, TypeError) as e:
                    raise TraceFormatError(f"{path}:{lineno}: bad metadata comment: {e}")
                continue
            if line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TraceFormatError(f"{path}:{lineno}: expected '0x<hex>,<0|1>'")
            ip_text, dir_text = parts[0].strip(), parts[1].strip()
            if not ip_text.lower().startswith("0x"):
                raise TraceFormatError(f"{path}:{lineno}: ip must start with 0x")
            try:
                ip = int(ip_text, 16)
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: non-hex ip {ip_text!r}")
            if dir_text not in ("0", "1"):
                raise TraceFormatError(f"{path}:{lineno}: direction must be 0 or 1")
            ips.append(ip)
            taken.append(int(dir_text))
    return Trace(np.array(ips, dtype=np.uint64), np.array(taken, dtype=np.uint8), meta)


def position_histogram(
    trace: Trace, h2p_ip: int, correlated_ip: int, window: int
) -> np.ndarray:
    """Histogram of where ``correlated_ip`` sits in ``h2p_ip``'s history.

    For every dynamic occurrence of ``h2p_ip``, each occurrence of
    ``correlated_ip`` within the preceding ``window`` records is tallied at
    its position; position ``window-1`` is the most recent record, position
    0 the oldest in the window.  Returns an int64 array of length ``window``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    hist = np.zeros(window, dtype=np.int64)
    occ = np.flatnonzero(trace.ips == np.uint64(h2p_ip))
    if occ.size == 0:
        return hist
    ips = trace.ips
    for d in range(1, window + 1):
        src = occ - d
        valid = src >= 0
        if not valid.any():
            break
        hist[window - d] = int(np.count_nonzero(ips[src[valid]] == np.uint64(correlated_ip)))
    return hist
