"""Deterministic, OS-independent target backend.

Scripted process trees run against a virtual clock and emit the same event
stream the OS tracer would, so every monitor property is testable at desk
scale. The machine is a single virtual CPU: one action per scheduler turn,
round-robin over runnable processes by ascending pid, and the clock
advances by the executed action's duration (1 ms unless stated).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from . import challenge_layout as layout
from .coverage import MAP_SIZE, saturating_record
from .process_model import (
    SEGV,
    CrashRecord,
    DeadlineReached,
    ExecEvent,
    ExecutionReport,
    Exited,
    FatalSignal,
    ForkObserved,
    ProbeHit,
    ProcessTree,
    SignalKind,
    apply_event,
    lineage_of,
)

MAX_FORK_NESTING = 16


class InvalidScript(ValueError):
    """The script breaks a structural rule (dead actions, bad edge, ...)."""


class DepthExceeded(InvalidScript):
    """Fork nesting deeper than MAX_FORK_NESTING."""


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Fork:
    child: "TargetScript"
    duration: int = 1


@dataclass(frozen=True)
class HitEdge:
    edge: int
    duration: int = 1


@dataclass(frozen=True)
class BranchParity:
    """Hit one of two edges depending on the parity of an input byte.

    Models `if (data[i] % 2) ... else ...`; bytes past the end of the
    input read as zero, like a short read into a zeroed buffer.
    """

    byte_index: int
    even_edge: int
    odd_edge: int
    duration: int = 1


@dataclass(frozen=True)
class RaiseFatal:
    sig: SignalKind
    duration: int = 1


@dataclass(frozen=True)
class BusyLoopForever:
    duration: int = 1


@dataclass(frozen=True)
class Sleep:
    ms: int


@dataclass(frozen=True)
class WaitChildren:
    duration: int = 1


@dataclass(frozen=True)
class Exit:
    code: int = 0
    duration: int = 1


Action = Union[Fork, HitEdge, BranchParity, RaiseFatal, BusyLoopForever, Sleep, WaitChildren, Exit]

_TERMINATORS = (BusyLoopForever, Exit)


@dataclass(frozen=True)
class TargetScript:
    actions: tuple[Action, ...]

    def validate(self, _nesting: int = 0) -> None:
        if _nesting > MAX_FORK_NESTING:
            raise DepthExceeded(f"fork nesting exceeds {MAX_FORK_NESTING}")
        for i, action in enumerate(self.actions):
            if isinstance(action, _TERMINATORS) and i != len(self.actions) - 1:
                raise InvalidScript(f"actions after {type(action).__name__} are unreachable")
            if isinstance(action, HitEdge) and not 0 <= action.edge < MAP_SIZE:
                raise InvalidScript(f"edge {action.edge} outside the map")
            if isinstance(action, BranchParity):
                for edge in (action.even_edge, action.odd_edge):
                    if not 0 <= edge < MAP_SIZE:
                        raise InvalidScript(f"edge {edge} outside the map")
                if action.byte_index < 0:
                    raise InvalidScript("negative input byte index")
            if isinstance(action, Sleep) and action.ms < 0:
                raise InvalidScript("negative sleep")
            if isinstance(action, Fork):
                action.child.validate(_nesting + 1)

    def to_json_dict(self) -> dict:
        return {"actions": [_action_to_json(a) for a in self.actions]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TargetScript":
        return cls(actions=tuple(_action_from_json(a) for a in d["actions"]))


def _action_to_json(a: Action) -> dict:
    if isinstance(a, Fork):
        return {"op": "fork", "child": a.child.to_json_dict(), "duration": a.duration}
    if isinstance(a, HitEdge):
        return {"op": "hit_edge", "edge": a.edge, "duration": a.duration}
    if isinstance(a, BranchParity):
        return {
            "op": "branch_parity",
            "byte_index": a.byte_index,
            "even_edge": a.even_edge,
            "odd_edge": a.odd_edge,
            "duration": a.duration,
        }
    if isinstance(a, RaiseFatal):
        return {"op": "raise_fatal", "sig": a.sig.to_json_dict(), "duration": a.duration}
    if isinstance(a, BusyLoopForever):
        return {"op": "busy_loop_forever", "duration": a.duration}
    if isinstance(a, Sleep):
        return {"op": "sleep", "ms": a.ms}
    if isinstance(a, WaitChildren):
        return {"op": "wait_children", "duration": a.duration}
    if isinstance(a, Exit):
        return {"op": "exit", "code": a.code, "duration": a.duration}
    raise TypeError(f"not an Action: {a!r}")


def _action_from_json(d: dict) -> Action:
    op = d["op"]
    if op == "fork":
        return Fork(TargetScript.from_json_dict(d["child"]), d.get("duration", 1))
    if op == "hit_edge":
        return HitEdge(d["edge"], d.get("duration", 1))
    if op == "branch_parity":
        return BranchParity(d["byte_index"], d["even_edge"], d["odd_edge"], d.get("duration", 1))
    if op == "raise_fatal":
        return RaiseFatal(SignalKind.from_json_dict(d["sig"]), d.get("duration", 1))
    if op == "busy_loop_forever":
        return BusyLoopForever(d.get("duration", 1))
    if op == "sleep":
        return Sleep(d["ms"])
    if op == "wait_children":
        return WaitChildren(d.get("duration", 1))
    if op == "exit":
        return Exit(d.get("code", 0), d.get("duration", 1))
    raise ValueError(f"unknown action op {op!r}")


@dataclass(frozen=True)
class SimPolicy:
    """deadline_ms is the execution budget. The scheduler is fixed:
    round-robin by ascending pid, one action per turn."""

    deadline_ms: int = 1000

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be positive")


# ---------------------------------------------------------------------------
# Challenge scripts


def script_challenge(kind: str, params: Optional[layout.ChallengeParams] = None) -> TargetScript:
    """Build the scripted equivalent of a generated challenge program."""
    if params is None:
        params = layout.ChallengeParams(kind=kind)
    if params.kind != kind:
        raise layout.InvalidParams(f"params are for kind {params.kind}, not {kind}")
    return _chain(params, depth=0)


def _chain(params: layout.ChallengeParams, depth: int) -> TargetScript:
    deepest = depth == params.fork_depth
    kind = params.kind
    actions: list[Action] = []
    if not (kind == layout.KIND_C and deepest):
        actions.append(HitEdge(layout.entry_edge(depth)))

    if kind == layout.KIND_A:
        if deepest:
            actions.append(RaiseFatal(SEGV))
        else:
            actions.append(Fork(_chain(params, depth + 1)))
            actions.append(WaitChildren())
            # The fault bubbles up: every descendant dies after reaping its own.
            actions.append(Exit(0) if depth == 0 else RaiseFatal(SEGV))
    elif kind == layout.KIND_B:
        if not deepest:
            actions.append(Fork(_chain(params, depth + 1)))
        if depth == 0:
            actions.append(Exit(0))
        elif deepest or params.loop_in == "child":
            actions.append(BusyLoopForever())
        else:
            actions.append(Exit(0))
    else:  # KIND_C
        if deepest:
            for i in range(params.conditionals):
                actions.append(BranchParity(i, layout.arm_edge(i, 0), layout.arm_edge(i, 1)))
            actions.append(Exit(0))
        else:
            actions.append(Fork(_chain(params, depth + 1)))
            actions.append(WaitChildren())
            actions.append(Exit(0))
    return TargetScript(tuple(actions))


# ---------------------------------------------------------------------------
# The stepper


@dataclass
class _Proc:
    pid: int
    actions: tuple[Action, ...]
    ip: int = 0
    ready_at: int = 0
    running: bool = True
    looping: bool = False
    children: list[int] = field(default_factory=list)


class _Sim:
    def __init__(self, script: TargetScript, data: bytes, policy: SimPolicy):
        self.data = data
        self.deadline = policy.deadline_ms
        self.t = 0
        self.events: list[ExecEvent] = []
        self.bitmap = bytearray(MAP_SIZE)
        self.records: list[CrashRecord] = []
        self.procs: dict[int, _Proc] = {1: _Proc(pid=1, actions=script.actions)}
        self.next_pid = 2
        self.tree = ProcessTree.spawn_root(1, at=0)

    # -- predicates

    def _children_settled(self, p: _Proc) -> bool:
        return all(not self.procs[c].running for c in p.children)

    def _current(self, p: _Proc) -> Optional[Action]:
        if p.looping:
            return p.actions[-1]
        if p.ip < len(p.actions):
            return p.actions[p.ip]
        return None  # falling off the end behaves like Exit(0)

    def _runnable(self, p: _Proc) -> bool:
        if not p.running or p.ready_at > self.t:
            return False
        action = self._current(p)
        if isinstance(action, WaitChildren) and not self._children_settled(p):
            return False
        return True

    def _stuck_forever(self, p: _Proc) -> bool:
        """No event can ever come from p before the deadline."""
        action = self._current(p)
        if p.looping or isinstance(action, BusyLoopForever):
            return True
        if isinstance(action, WaitChildren) and not self._children_settled(p):
            return True
        return p.ready_at >= self.deadline

    # -- event plumbing

    def _emit(self, ev: ExecEvent) -> None:
        self.events.append(ev)
        self.tree = apply_event(self.tree, ev)

    # -- one scheduler turn

    def _execute(self, p: _Proc) -> None:
        action = self._current(p)
        if action is None:
            self.t += 1
            self._finish(p, Exited(p.pid, 0, self.t))
            return
        if isinstance(action, Fork):
            self.t += action.duration
            child = _Proc(pid=self.next_pid, actions=action.child.actions, ready_at=self.t)
            self.next_pid += 1
            self.procs[child.pid] = child
            p.children.append(child.pid)
            p.ip += 1
            self._emit(ForkObserved(p.pid, child.pid, self.t))
        elif isinstance(action, HitEdge):
            self.t += action.duration
            saturating_record(self.bitmap, action.edge)
            p.ip += 1
            self._emit(ProbeHit(p.pid, action.edge, self.t))
        elif isinstance(action, BranchParity):
            self.t += action.duration
            byte = self.data[action.byte_index] if action.byte_index < len(self.data) else 0
            edge = action.odd_edge if byte & 1 else action.even_edge
            saturating_record(self.bitmap, edge)
            p.ip += 1
            self._emit(ProbeHit(p.pid, edge, self.t))
        elif isinstance(action, RaiseFatal):
            self.t += action.duration
            if action.sig.is_bug:
                self.records.append(CrashRecord(p.pid, action.sig))
            self._finish(p, FatalSignal(p.pid, action.sig, self.t))
        elif isinstance(action, BusyLoopForever):
            p.looping = True
            self.t += action.duration
        elif isinstance(action, Sleep):
            # Wall wait, not CPU: the process parks, the clock stays.
            p.ready_at = self.t + action.ms
            p.ip += 1
        elif isinstance(action, WaitChildren):
            self.t += action.duration
            p.ip += 1
        elif isinstance(action, Exit):
            self.t += action.duration
            self._finish(p, Exited(p.pid, action.code, self.t))
        else:
            raise TypeError(f"not an Action: {action!r}")

    def _finish(self, p: _Proc, ev: ExecEvent) -> None:
        p.running = False
        self._emit(ev)

    # -- main loop

    def run(self) -> tuple[bool, int]:
        while True:
            live = [p for p in self.procs.values() if p.running]
            if not live:
                return False, self.t
            if self.t >= self.deadline:
                break
            if all(self._stuck_forever(p) for p in live):
                # Only loopers, blocked waiters, and beyond-deadline sleepers
                # remain: no further events are possible, jump to the deadline.
                self.t = self.deadline
                break
            runnable = sorted(p.pid for p in live if self._runnable(p))
            if not runnable:
                wake = min(p.ready_at for p in live if p.ready_at > self.t)
                self.t = min(wake, self.deadline)
                continue
            for pid in runnable:
                if self.t >= self.deadline:
                    break
                self._execute(self.procs[pid])
        self._emit(DeadlineReached(self.t))
        return True, self.t


def run_sim(script: TargetScript, data: bytes, policy: SimPolicy) -> ExecutionReport:
    """Execute a script deterministically: identical (script, input, policy)
    triples produce identical reports. Processes still running at the
    deadline are reported Running; killing is the monitor's job."""
    script.validate()
    sim = _Sim(script, data, policy)
    deadline_hit, end = sim.run()
    return ExecutionReport(
        backend="sim",
        tree=sim.tree,
        events=tuple(sim.events),
        bitmap=bytes(sim.bitmap),
        crash_records=tuple(sim.records),
        lineage=lineage_of(sim.tree),
        budget_ms=policy.deadline_ms,
        deadline_hit=deadline_hit,
        end_ms=end,
        teardown=None,
    )
