"""Contract shared by both backends for the three challenge programs.

Challenge A forks a chain and every descendant dies of SIGSEGV, B leaves
descendants spinning forever after the root exits without waiting, and C
runs one two-armed conditional per input byte in the deepest child. The
probe numbering here is what the simulator scripts emit and what the
generated C sources must emit, so sim and real runs score identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from itertools import product

from .process_model import CrashRecord, SignalKind

KIND_A = "A"
KIND_B = "B"
KIND_C = "C"
KINDS = (KIND_A, KIND_B, KIND_C)

CRASHFILE_ENV_VAR = "FORKAWARE_CRASHFILE"

# Crash record wire format: pid and signal number, both u64 little-endian.
CRASH_RECORD_STRUCT = struct.Struct("<QQ")
CRASH_RECORD_SIZE = CRASH_RECORD_STRUCT.size

# Every process in the fork chain hits one entry probe; challenge C's
# deepest child additionally hits one arm probe per conditional.
ARM_EDGE_BASE = 10
MAX_FORK_DEPTH = 8
MAX_CONDITIONALS = 16


class InvalidParams(ValueError):
    """Challenge parameters outside the supported envelope."""


def entry_edge(depth: int) -> int:
    return 1 + depth


def arm_edge(conditional: int, parity: int) -> int:
    return ARM_EDGE_BASE + 2 * conditional + (parity & 1)


@dataclass(frozen=True)
class ChallengeParams:
    """kind A/B/C plus the parameterized variants.

    fork_depth places the fault in the nth descendant; for kind B,
    loop_in="child" spins every chain descendant (fork, then loop) while
    loop_in="grandchild" makes intermediates exit unwaited so only the
    deepest, orphaned process spins.
    """

    kind: str
    fork_depth: int = 1
    conditionals: int = 4
    loop_in: str = "child"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"unknown challenge kind {self.kind!r}")
        if not 1 <= self.fork_depth <= MAX_FORK_DEPTH:
            raise InvalidParams(f"fork_depth {self.fork_depth} outside [1, {MAX_FORK_DEPTH}]")
        if not 1 <= self.conditionals <= MAX_CONDITIONALS:
            raise InvalidParams(f"conditionals {self.conditionals} outside [1, {MAX_CONDITIONALS}]")
        if self.loop_in not in ("child", "grandchild"):
            raise InvalidParams(f"loop_in must be child or grandchild, got {self.loop_in!r}")
        if self.kind == KIND_B and self.loop_in == "grandchild" and self.fork_depth < 2:
            raise InvalidParams("loop_in=grandchild needs fork_depth >= 2")


def required_edges(params: ChallengeParams) -> frozenset[int]:
    """The child-side edges a monitor must see covered to pass C3."""
    if params.kind == KIND_C:
        return frozenset(
            arm_edge(i, p) for i in range(params.conditionals) for p in (0, 1)
        )
    return frozenset(entry_edge(d) for d in range(1, params.fork_depth + 1))


def parent_edges(params: ChallengeParams) -> frozenset[int]:
    """Probes placed outside the required child set (entry markers)."""
    if params.kind == KIND_C:
        return frozenset(entry_edge(d) for d in range(params.fork_depth))
    return frozenset({entry_edge(0)})


def input_bytes_read(params: ChallengeParams) -> int:
    return params.conditionals if params.kind == KIND_C else 0


def canonical_inputs(params: ChallengeParams) -> tuple[bytes, ...]:
    """Inputs an evaluation run feeds the challenge.

    Kind C sweeps the parity classes (exhaustively up to 5 conditionals,
    else zeros/ones plus the single-odd-byte patterns, which still reach
    both arms of every conditional). A and B ignore their input.
    """
    if params.kind != KIND_C:
        return (b"\x00\x00\x00\x00",)
    k = params.conditionals
    if k <= 5:
        return tuple(bytes(bits) for bits in product((0, 1), repeat=k))
    singles = tuple(bytes(1 if j == i else 0 for j in range(k)) for i in range(k))
    return (bytes(k), bytes([1]) * k) + singles


def arm_edges_for_input(params: ChallengeParams, data: bytes) -> frozenset[int]:
    """Which arm probes a kind-C child fires for `data` (missing bytes read 0)."""
    if params.kind != KIND_C:
        return frozenset()
    return frozenset(
        arm_edge(i, data[i] & 1 if i < len(data) else 0)
        for i in range(params.conditionals)
    )


def parse_crash_records(blob: bytes) -> tuple[CrashRecord, ...]:
    """Decode the crash-record channel; a trailing partial record (a signal
    landed mid-write) is dropped rather than rejected."""
    records = []
    whole = len(blob) - len(blob) % CRASH_RECORD_SIZE
    for off in range(0, whole, CRASH_RECORD_SIZE):
        pid, signo = CRASH_RECORD_STRUCT.unpack_from(blob, off)
        records.append(CrashRecord(pid=int(pid), signal=SignalKind.from_code(int(signo))))
    return tuple(records)
