"""Pure data model of a forked process tree and its lifecycle events.

Both execution backends (the deterministic simulator and the OS tracer)
produce the same event stream and the same tree shape, so everything that
scores or reports an execution works on these types alone.
"""

from __future__ import annotations

import json
import signal as _signal
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Union

Pid = int
Millis = int


class UnknownPid(KeyError):
    """An event referenced a pid that is not tracked (tracer desync)."""


class IllegalTransition(RuntimeError):
    """A terminal node received a lifecycle event, or a pid was reused."""


# ---------------------------------------------------------------------------
# Signals


_BUG_SIGNALS = ("SEGV", "ABRT", "BUS", "FPE", "ILL")

_KNOWN_CODES = {
    int(_signal.SIGSEGV): "SEGV",
    int(_signal.SIGABRT): "ABRT",
    int(_signal.SIGBUS): "BUS",
    int(_signal.SIGFPE): "FPE",
    int(_signal.SIGILL): "ILL",
    int(_signal.SIGKILL): "KILL",
}


@dataclass(frozen=True)
class SignalKind:
    """A classified signal: the fatal-bug set, KILL, or OTHER(code)."""

    name: str
    code: int

    @classmethod
    def from_code(cls, code: int) -> "SignalKind":
        return cls(_KNOWN_CODES.get(code, "OTHER"), code)

    @property
    def is_bug(self) -> bool:
        return self.name in _BUG_SIGNALS

    def to_json_dict(self) -> dict:
        return {"name": self.name, "code": self.code}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SignalKind":
        return cls(d["name"], d["code"])


SEGV = SignalKind.from_code(int(_signal.SIGSEGV))
ABRT = SignalKind.from_code(int(_signal.SIGABRT))
BUS = SignalKind.from_code(int(_signal.SIGBUS))
FPE = SignalKind.from_code(int(_signal.SIGFPE))
ILL = SignalKind.from_code(int(_signal.SIGILL))
KILL = SignalKind.from_code(int(_signal.SIGKILL))


def other_signal(code: int) -> SignalKind:
    return SignalKind("OTHER", code)


# ---------------------------------------------------------------------------
# Process state


@dataclass(frozen=True)
class ProcessState:
    """Running | Exited(code) | FatalSignal(sig) | KilledByMonitor."""

    kind: str
    code: Optional[int] = None
    sig: Optional[SignalKind] = None

    @property
    def terminal(self) -> bool:
        return self.kind != "running"

    def to_json_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.code is not None:
            d["code"] = self.code
        if self.sig is not None:
            d["sig"] = self.sig.to_json_dict()
        return d


RUNNING = ProcessState("running")
KILLED_BY_MONITOR = ProcessState("killed_by_monitor")


def exited(code: int) -> ProcessState:
    return ProcessState("exited", code=code)


def fatal(sig: SignalKind) -> ProcessState:
    return ProcessState("fatal_signal", sig=sig)


# ---------------------------------------------------------------------------
# Tree


@dataclass(frozen=True)
class ProcessNode:
    pid: Pid
    parent: Optional[Pid]
    depth: int
    spawned_at: Millis
    state: ProcessState = RUNNING
    terminated_at: Optional[Millis] = None

    def to_json_dict(self) -> dict:
        return {
            "pid": self.pid,
            "parent": self.parent,
            "depth": self.depth,
            "spawned_at": self.spawned_at,
            "state": self.state.to_json_dict(),
            "terminated_at": self.terminated_at,
        }


@dataclass(frozen=True)
class ProcessTree:
    """Immutable fork tree; mutate only by replacement via apply_event."""

    root: Pid
    nodes: Mapping[Pid, ProcessNode]

    @classmethod
    def spawn_root(cls, pid: Pid, at: Millis = 0) -> "ProcessTree":
        return cls(root=pid, nodes={pid: ProcessNode(pid, None, 0, at)})

    def __contains__(self, pid: Pid) -> bool:
        return pid in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, pid: Pid) -> ProcessNode:
        try:
            return self.nodes[pid]
        except KeyError:
            raise UnknownPid(pid) from None

    def children(self, pid: Pid) -> list[Pid]:
        self.node(pid)
        return sorted(n.pid for n in self.nodes.values() if n.parent == pid)

    def to_json_dict(self) -> dict:
        return {
            "root": self.root,
            "nodes": {str(pid): n.to_json_dict() for pid, n in sorted(self.nodes.items())},
        }


# ---------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class ForkObserved:
    parent: Pid
    child: Pid
    at: Millis


@dataclass(frozen=True)
class Exited:
    pid: Pid
    code: int
    at: Millis


@dataclass(frozen=True)
class FatalSignal:
    pid: Pid
    sig: SignalKind
    at: Millis


@dataclass(frozen=True)
class ProbeHit:
    pid: Pid
    edge: int
    at: Millis


@dataclass(frozen=True)
class DeadlineReached:
    at: Millis


ExecEvent = Union[ForkObserved, Exited, FatalSignal, ProbeHit, DeadlineReached]


def event_to_json_dict(ev: ExecEvent) -> dict:
    if isinstance(ev, ForkObserved):
        return {"type": "fork_observed", "parent": ev.parent, "child": ev.child, "at": ev.at}
    if isinstance(ev, Exited):
        return {"type": "exited", "pid": ev.pid, "code": ev.code, "at": ev.at}
    if isinstance(ev, FatalSignal):
        return {"type": "fatal_signal", "pid": ev.pid, "sig": ev.sig.to_json_dict(), "at": ev.at}
    if isinstance(ev, ProbeHit):
        return {"type": "probe_hit", "pid": ev.pid, "edge": ev.edge, "at": ev.at}
    if isinstance(ev, DeadlineReached):
        return {"type": "deadline_reached", "at": ev.at}
    raise TypeError(f"not an ExecEvent: {ev!r}")


# ---------------------------------------------------------------------------
# Operations


def _terminate(tree: ProcessTree, pid: Pid, state: ProcessState, at: Millis) -> ProcessTree:
    node = tree.node(pid)
    if node.state.terminal:
        raise IllegalTransition(f"pid {pid} is already terminal ({node.state.kind})")
    if at < node.spawned_at:
        raise IllegalTransition(f"pid {pid} terminates at {at} before spawn at {node.spawned_at}")
    nodes = dict(tree.nodes)
    nodes[pid] = replace(node, state=state, terminated_at=at)
    return ProcessTree(tree.root, nodes)


def apply_event(tree: ProcessTree, ev: ExecEvent) -> ProcessTree:
    """Fold one event into the tree, returning a new tree.

    Raises UnknownPid for events about untracked pids and IllegalTransition
    when a terminal node receives a lifecycle event (duplicate terminal
    events are rejected, never merged) or a pid is reused for a new child.
    """
    if isinstance(ev, ForkObserved):
        parent = tree.node(ev.parent)
        if parent.state.terminal:
            raise IllegalTransition(f"terminal pid {ev.parent} cannot fork")
        if ev.child in tree.nodes:
            raise IllegalTransition(f"pid {ev.child} already tracked (pid reuse)")
        if ev.at < parent.spawned_at:
            raise IllegalTransition(f"child spawned at {ev.at} before parent at {parent.spawned_at}")
        nodes = dict(tree.nodes)
        nodes[ev.child] = ProcessNode(ev.child, ev.parent, parent.depth + 1, ev.at)
        return ProcessTree(tree.root, nodes)
    if isinstance(ev, Exited):
        return _terminate(tree, ev.pid, exited(ev.code), ev.at)
    if isinstance(ev, FatalSignal):
        return _terminate(tree, ev.pid, fatal(ev.sig), ev.at)
    if isinstance(ev, ProbeHit):
        tree.node(ev.pid)
        return tree
    if isinstance(ev, DeadlineReached):
        return tree
    raise TypeError(f"not an ExecEvent: {ev!r}")


def mark_killed(tree: ProcessTree, pid: Pid, at: Millis) -> ProcessTree:
    """Record a monitor-initiated kill. Not an ExecEvent: teardown bookkeeping."""
    return _terminate(tree, pid, KILLED_BY_MONITOR, at)


def live_descendants(tree: ProcessTree, of: Pid) -> set[Pid]:
    """Pids strictly below `of` whose state is Running."""
    tree.node(of)
    out: set[Pid] = set()
    stack = [of]
    while stack:
        for child in tree.children(stack.pop()):
            if not tree.nodes[child].state.terminal:
                out.add(child)
            stack.append(child)
    return out


def tree_path(tree: ProcessTree, pid: Pid) -> list[Pid]:
    """Path from the root to `pid` inclusive; length is depth + 1."""
    path = []
    cur: Optional[Pid] = pid
    while cur is not None:
        node = tree.node(cur)
        path.append(cur)
        cur = node.parent
    path.reverse()
    return path


# ---------------------------------------------------------------------------
# Execution reports


@dataclass(frozen=True)
class CrashRecord:
    """One record from the crash-record channel (pid, signal)."""

    pid: Pid
    signal: SignalKind

    def to_json_dict(self) -> dict:
        return {"pid": self.pid, "signal": self.signal.to_json_dict()}


@dataclass(frozen=True)
class TeardownReport:
    killed: tuple[Pid, ...]
    leaked: tuple[Pid, ...]

    def to_json_dict(self) -> dict:
        return {"killed": list(self.killed), "leaked": list(self.leaked)}


@dataclass(frozen=True)
class ExecutionReport:
    """Everything one execution produced: tree, event stream, bitmap, records.

    `lineage` maps every pid ever seen to its root path; it survives profile
    filtering so crash records can still be attributed to a tree position.
    """

    backend: str
    tree: ProcessTree
    events: tuple[ExecEvent, ...]
    bitmap: bytes
    crash_records: tuple[CrashRecord, ...]
    lineage: Mapping[Pid, tuple[Pid, ...]]
    budget_ms: int
    deadline_hit: bool
    end_ms: Millis
    teardown: Optional[TeardownReport] = None
    challenge: Optional[str] = None

    def to_json_dict(self) -> dict:
        return {
            "backend": self.backend,
            "challenge": self.challenge,
            "budget_ms": self.budget_ms,
            "deadline_hit": self.deadline_hit,
            "end_ms": self.end_ms,
            "tree": self.tree.to_json_dict(),
            "events": [event_to_json_dict(ev) for ev in self.events],
            "bitmap": {str(i): c for i, c in enumerate(self.bitmap) if c},
            "crash_records": [r.to_json_dict() for r in self.crash_records],
            "lineage": {str(pid): list(path) for pid, path in sorted(self.lineage.items())},
            "teardown": self.teardown.to_json_dict() if self.teardown else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


def lineage_of(tree: ProcessTree) -> dict[Pid, tuple[Pid, ...]]:
    return {pid: tuple(tree_path(tree, pid)) for pid in tree.nodes}
