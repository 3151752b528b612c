"""Deterministic synthetic workloads with the variable-loop misprediction motif.

Each simulated call draws a random input value and emits four static
branches:

* ``CORRELATED_IP`` -- a data-dependent branch, taken when the input falls
  below a threshold (33% of the time with the defaults);
* ``BODY_IP`` -- a data-dependent branch inside the loop body, one record
  per iteration with an independently random direction (the uncorrelated
  branches a real loop body injects into history);
* ``LOOP_IP`` -- the loop back-edge: taken after each continuing
  iteration, not-taken when the loop exits after iteration k;
* ``H2P_IP`` -- a branch whose direction always equals the same call's
  data-dependent branch.

The loop count k is a pure function of the input value and varies call to
call, so the correlated branch drifts through the hard branch's global
history: with loop count k it sits 2k+1 records before the hard branch.
The drift defeats position-matching predictors, and the random loop-body
directions blow up the pattern space that sequence-matching predictors
would otherwise memorize -- while the hard branch stays perfectly
predictable from ⟨address, direction⟩ tuples.

Instruction counts are synthesized as 4x the record count purely so that
MPKI is computable; the factor is arbitrary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import SplitMix64
from .trace import Trace, TraceMeta

# Fixed synthetic addresses. CORRELATED_IP's low byte is 0x87 so its
# ⟨ip, taken⟩ tuple encodes to index 15 and ⟨ip, not-taken⟩ to 14 under the
# default 8-bit hash (see encoder.encode_index).  All four encode to
# disjoint index pairs at p=8.
CORRELATED_IP = 0x400587
LOOP_IP = 0x4005A3
BODY_IP = 0x4005B5
H2P_IP = 0x4005C1

INSTRUCTIONS_PER_BRANCH = 4


def default_loop_count_rule(value: int) -> int:
    """Default inner-loop iteration count: (value mod 8) + 5.

    Eight distinct counts give the correlated branch eight distinct history
    offsets (11 to 25 records back), keeping it inside the most recent ~25
    positions while far enough back that the previous call's stale
    occurrence rarely lands in the same zone.
    """
    return (value % 8) + 5


@dataclass
class SynthConfig:
    """Parameters for the synthetic generators.

    ``value_range`` is the exclusive upper bound of the uniform input draw
    (inputs are in [0, value_range)); ``taken_threshold`` reproduces the
    33% taken bias with the defaults 333/1000.  ``loop_count_rule`` must be
    a pure function of the input value and return a count >= 1.
    """

    num_calls: int = 10_000
    value_range: int = 1000
    taken_threshold: int = 333
    loop_count_rule: Callable[[int], int] = field(default=default_loop_count_rule)
    seed: int = 0

    def validate(self) -> None:
        if self.num_calls < 0:
            raise ValueError("num_calls must be >= 0")
        if not (0 < self.taken_threshold < self.value_range):
            raise ValueError("taken_threshold must lie strictly inside the value range")


def _emit(config: SynthConfig, workload_id: str, rule: Callable[[int], int]) -> Trace:
    config.validate()
    rng = SplitMix64(config.seed)
    ips: list[int] = []
    taken: list[int] = []
    ip_a, ip_b, ip_d, ip_c = CORRELATED_IP, LOOP_IP, BODY_IP, H2P_IP
    append_ip = ips.append
    append_tk = taken.append
    for _ in range(config.num_calls):
        value = rng.randbelow(config.value_range)
        direction = 1 if value < config.taken_threshold else 0
        count = rule(value)
        if count < 1:
            raise ValueError("loop_count_rule must return a count >= 1")
        append_ip(ip_a)
        append_tk(direction)
        for j in range(count):
            append_ip(ip_d)
            append_tk(rng.randbelow(2))
            append_ip(ip_b)
            append_tk(1 if j < count - 1 else 0)
        append_ip(ip_c)
        append_tk(direction)
    meta = TraceMeta(
        workload_id=workload_id,
        generator_seed=config.seed,
        instruction_count=len(ips) * INSTRUCTIONS_PER_BRANCH,
    )
    return Trace(np.array(ips, dtype=np.uint64), np.array(taken, dtype=np.uint8), meta)


def generate_corrloop_trace(config: SynthConfig) -> Trace:
    """Correlated-branch workload with the config's loop count rule."""
    return _emit(config, f"corrloop-{config.seed}", config.loop_count_rule)


def generate_spread_trace(
    config: SynthConfig, position_spread: int, window: int = 200
) -> Trace:
    """Correlated-branch workload whose correlated-branch position spans
    at least ``position_spread`` distinct history offsets.

    The loop count rule is replaced by (value mod position_spread) + 1, so
    the correlated branch lands at one of ``position_spread`` distinct
    offsets (3, 5, ..., 2*position_spread+1 records before the hard
    branch).  ``window`` is the history length the consumer will use;
    spreads that would push the correlated branch out of it are rejected.
    """
    if position_spread < 1:
        raise ValueError("position_spread must be >= 1")
    if 2 * position_spread + 1 > window:
        raise ValueError(
            f"position_spread {position_spread} exceeds the {window}-record history window"
        )
    rule = lambda value: (value % position_spread) + 1
    return _emit(config, f"spread{position_spread}-{config.seed}", rule)


def spread_expected_histogram(
    config: SynthConfig, position_spread: int, window: int = 200
) -> np.ndarray:
    """Correlated-branch position tally implied by the generator's own draws.

    Replays the same input stream without materializing records: with loop
    count k, the correlated branch sits 2k+1 records before the hard
    branch, i.e. at position window-1-2k.  Companion oracle for
    position_histogram.
    """
    config.validate()
    rng = SplitMix64(config.seed)
    hist = np.zeros(window, dtype=np.int64)
    for _ in range(config.num_calls):
        value = rng.randbelow(config.value_range)
        count = (value % position_spread) + 1
        for _ in range(count):
            rng.randbelow(2)
        hist[window - 1 - 2 * count] += 1
    return hist
