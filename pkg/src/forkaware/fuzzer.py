"""Minimal coverage-guided mutational fuzzer.

Seed queue, stacked byte-level mutations, novelty-gated corpus growth.
Deliberately no energy scheduling or trimming: the loop exists to show
that child coverage feeds input generation, and it must be bit-for-bit
reproducible from its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

from .coverage import bucketize, has_new_bits, map_to_json_dict, merge, zero_map
from .detectors import MonitorProfile, detect_bugs, detect_hangs, filter_view
from .process_model import ExecutionReport

MIN_LEN = 1
MAX_LEN = 4096


class BackendUnavailable(RuntimeError):
    """The requested execution backend cannot run on this host."""


class Rng:
    """xorshift64* generator: self-contained so campaigns replay exactly
    across platforms and interpreter versions."""

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self._state = (seed & self._MASK) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & self._MASK
        x ^= x >> 27
        self._state = x
        return (x * 0x2545F4914F6CDD1D) & self._MASK

    def below(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound


# ---------------------------------------------------------------------------
# Mutation operators


def _op_bitflip(buf: bytearray, rng: Rng) -> None:
    i = rng.below(len(buf))
    buf[i] ^= 1 << rng.below(8)


def _op_set_byte(buf: bytearray, rng: Rng) -> None:
    buf[rng.below(len(buf))] = rng.below(256)


def _op_inc_byte(buf: bytearray, rng: Rng) -> None:
    i = rng.below(len(buf))
    buf[i] = (buf[i] + 1) & 0xFF


def _op_dec_byte(buf: bytearray, rng: Rng) -> None:
    i = rng.below(len(buf))
    buf[i] = (buf[i] - 1) & 0xFF


def _op_swap_bytes(buf: bytearray, rng: Rng) -> None:
    i, j = rng.below(len(buf)), rng.below(len(buf))
    buf[i], buf[j] = buf[j], buf[i]


def _op_dup_block(buf: bytearray, rng: Rng) -> None:
    length = 1 + rng.below(min(16, len(buf)))
    if len(buf) + length > MAX_LEN:
        return
    start = rng.below(len(buf) - length + 1)
    block = buf[start : start + length]
    at = rng.below(len(buf) + 1)
    buf[at:at] = block


def _op_del_block(buf: bytearray, rng: Rng) -> None:
    if len(buf) <= MIN_LEN:
        return
    length = 1 + rng.below(min(16, len(buf) - MIN_LEN))
    start = rng.below(len(buf) - length + 1)
    del buf[start : start + length]


OPERATORS: tuple[Callable[[bytearray, Rng], None], ...] = (
    _op_bitflip,
    _op_set_byte,
    _op_inc_byte,
    _op_dec_byte,
    _op_swap_bytes,
    _op_dup_block,
    _op_del_block,
)


def mutate(data: bytes, rng: Rng) -> bytes:
    """Apply 1-8 stacked operators; output length stays within [1, 4096]."""
    if not data:
        raise ValueError("cannot mutate empty input")
    buf = bytearray(data[:MAX_LEN])
    for _ in range(1 + rng.below(8)):
        OPERATORS[rng.below(len(OPERATORS))](buf, rng)
    return bytes(buf)


# ---------------------------------------------------------------------------
# Queue and campaign


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class, despite the name

    id: int
    data: bytes
    parent_id: Optional[int]
    found_at_exec: int


def select_next(queue: Sequence[TestCase], cursor: int) -> tuple[TestCase, int]:
    """Round-robin pick; the cursor wraps past the end of the queue."""
    if not queue:
        raise ValueError("queue is empty")
    idx = cursor % len(queue)
    return queue[idx], idx + 1


class Target(Protocol):
    budget_ms: int
    grace_ms: int

    def run(self, data: bytes) -> ExecutionReport: ...


@dataclass(frozen=True)
class CampaignStats:
    execs: int
    corpus_size: int
    unique_bug_findings: int
    hang_findings: int
    global_map: bytes
    rng_seed: int

    def to_json_dict(self) -> dict:
        return {
            "execs": self.execs,
            "corpus_size": self.corpus_size,
            "unique_bug_findings": self.unique_bug_findings,
            "hang_findings": self.hang_findings,
            "global_map": map_to_json_dict(self.global_map),
            "rng_seed": self.rng_seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


def run_campaign(
    target: Target,
    seeds: Sequence[bytes],
    budget_execs: int,
    rng_seed: int,
    profile: MonitorProfile,
    corpus_sink: Optional[Callable[[TestCase], None]] = None,
) -> CampaignStats:
    """Run the fuzzing loop: seeds first, then mutants of queue entries
    picked round-robin. A mutant joins the corpus iff it shows novelty
    against the global map under the profile's view and did not hang;
    seeds always join so the queue is never empty. Identical arguments
    produce identical stats.
    """
    if not seeds:
        raise ValueError("seeds must be nonempty")
    if budget_execs < len(seeds):
        raise ValueError("budget_execs must cover at least the seeds")
    for seed in seeds:
        if not MIN_LEN <= len(seed) <= MAX_LEN:
            raise ValueError(f"seed length {len(seed)} outside [{MIN_LEN}, {MAX_LEN}]")

    rng = Rng(rng_seed)
    global_map: Optional[bytes] = None  # sized from the first report
    corpus: list[TestCase] = []
    unique_bugs: set[tuple[int, str, int]] = set()
    hang_findings = 0
    execs = 0

    def observe(data: bytes) -> tuple[Optional[object], bool, bytes]:
        nonlocal execs, hang_findings, global_map
        report = target.run(data)
        execs += 1
        view = filter_view(profile, report)
        if global_map is None:
            global_map = zero_map(len(view.bitmap))
        classified = bucketize(view.bitmap)
        novelty = has_new_bits(global_map, classified)
        for finding in detect_bugs(view):
            unique_bugs.add((finding.depth, finding.signal.name, finding.signal.code))
        hangs = detect_hangs(view, report.budget_ms, target.grace_ms)
        hang_findings += len(hangs)
        return novelty, bool(hangs), classified

    def admit(data: bytes, parent_id: Optional[int], classified: bytes) -> None:
        nonlocal global_map
        case = TestCase(id=len(corpus), data=data, parent_id=parent_id, found_at_exec=execs)
        corpus.append(case)
        global_map = merge(global_map, classified)
        if corpus_sink is not None:
            corpus_sink(case)

    for seed in seeds:
        _, _, classified = observe(bytes(seed))
        admit(bytes(seed), None, classified)

    cursor = 0
    while execs < budget_execs:
        case, cursor = select_next(corpus, cursor)
        data = mutate(case.data, rng)
        novelty, hung, classified = observe(data)
        if novelty is not None and not hung:
            admit(data, case.id, classified)

    return CampaignStats(
        execs=execs,
        corpus_size=len(corpus),
        unique_bug_findings=len(unique_bugs),
        hang_findings=hang_findings,
        global_map=global_map if global_map is not None else zero_map(),
        rng_seed=rng_seed,
    )
