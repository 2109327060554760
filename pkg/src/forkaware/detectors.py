"""Bug, hang, and coverage detectors lifted to process trees.

MonitorProfile models what a given monitoring technique can observe:
parent_only watches the root's wait status and nothing else, crashfile
additionally sees records written by an in-target crash handler, and
fork_aware sees the whole tree. Filtering a report through a profile and
running the detectors on the filtered view reproduces how each technique
wins or loses on the challenge programs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from .coverage import zero_map
from .process_model import (
    DeadlineReached,
    ExecutionReport,
    Exited,
    FatalSignal,
    Pid,
    ProbeHit,
    ProcessNode,
    ProcessTree,
    SignalKind,
)


class WrongChallenge(ValueError):
    """A report fixture was scored against the wrong challenge kind."""


@dataclass(frozen=True)
class BugFinding:
    pid: Pid
    signal: SignalKind
    depth: int
    path: tuple[Pid, ...]

    def to_json_dict(self) -> dict:
        return {
            "pid": self.pid,
            "signal": self.signal.to_json_dict(),
            "depth": self.depth,
            "path": list(self.path),
        }


OUTLIVED_ROOT = "outlived_root"
BUDGET_EXCEEDED = "budget_exceeded"


@dataclass(frozen=True)
class HangFinding:
    pid: Pid
    depth: int
    reason: str
    observed_at: int

    def to_json_dict(self) -> dict:
        return {"pid": self.pid, "depth": self.depth, "reason": self.reason, "observed_at": self.observed_at}


@dataclass(frozen=True)
class MonitorProfile:
    name: str
    sees_child_lifecycle: bool
    sees_crash_records: bool
    sees_shared_bitmap: bool


PARENT_ONLY = MonitorProfile("parent_only", False, False, True)
CRASHFILE = MonitorProfile("crashfile", False, True, True)
FORK_AWARE = MonitorProfile("fork_aware", True, True, True)

PROFILES = {p.name: p for p in (PARENT_ONLY, CRASHFILE, FORK_AWARE)}


@dataclass(frozen=True)
class Verdicts:
    c1: bool
    c2: bool
    c3: bool

    def to_json_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Verdicts":
        return cls(bool(d["c1"]), bool(d["c2"]), bool(d["c3"]))


# ---------------------------------------------------------------------------
# Profile filtering


def _concerns_root_only(ev, root: Pid) -> bool:
    if isinstance(ev, DeadlineReached):
        return True
    if isinstance(ev, (Exited, FatalSignal, ProbeHit)):
        return ev.pid == root
    return False  # ForkObserved names a child


def filter_view(profile: MonitorProfile, report: ExecutionReport) -> ExecutionReport:
    """Reduce a report to what the profile's monitor could have observed.

    The shared bitmap is kept for every built-in profile (instrumentation
    writes survive regardless of who watches), and the pid lineage index is
    kept so crash records can still be attributed to a depth in the tree.
    """
    if profile.sees_child_lifecycle and profile.sees_crash_records and profile.sees_shared_bitmap:
        return report
    tree = report.tree
    events = report.events
    if not profile.sees_child_lifecycle:
        root = tree.root
        tree = ProcessTree(root, {root: tree.nodes[root]})
        events = tuple(ev for ev in events if _concerns_root_only(ev, root))
    return replace(
        report,
        tree=tree,
        events=events,
        crash_records=report.crash_records if profile.sees_crash_records else (),
        bitmap=report.bitmap if profile.sees_shared_bitmap else zero_map(len(report.bitmap)),
    )


# ---------------------------------------------------------------------------
# Detectors


def detect_bugs(view: ExecutionReport) -> list[BugFinding]:
    """One finding per visible fatal-bug signal or crash record, deduplicated
    by pid. Monitor kills and non-bug signals are never reported."""
    found: dict[Pid, BugFinding] = {}
    for node in view.tree.nodes.values():
        state = node.state
        if state.kind == "fatal_signal" and state.sig is not None and state.sig.is_bug:
            path = view.lineage.get(node.pid, (node.pid,))
            found[node.pid] = BugFinding(node.pid, state.sig, node.depth, tuple(path))
    for record in view.crash_records:
        if not record.signal.is_bug or record.pid in found:
            continue
        path = view.lineage.get(record.pid, (record.pid,))
        found[record.pid] = BugFinding(record.pid, record.signal, len(path) - 1, tuple(path))
    return sorted(found.values(), key=lambda f: (f.depth, f.pid))


def _running_at(node: ProcessNode, t: int) -> bool:
    if node.spawned_at > t:
        return False
    return node.terminated_at is None or node.terminated_at > t


def detect_hangs(view: ExecutionReport, budget_ms: int, grace_ms: int = 100) -> list[HangFinding]:
    """Report every visible process still running past its welcome.

    OutlivedRoot: running grace_ms after the root terminated. BudgetExceeded:
    running when the budget expired (only when the run actually hit its
    deadline). One finding per pid, keeping the earlier observation.
    """
    if budget_ms <= 0 or grace_ms <= 0:
        raise ValueError("budget_ms and grace_ms must be positive")
    candidates: list[HangFinding] = []
    root = view.tree.nodes[view.tree.root]
    if root.terminated_at is not None:
        observed = root.terminated_at + grace_ms
        for node in view.tree.nodes.values():
            if node.pid != root.pid and _running_at(node, observed):
                candidates.append(HangFinding(node.pid, node.depth, OUTLIVED_ROOT, observed))
    if view.deadline_hit:
        for node in view.tree.nodes.values():
            if _running_at(node, budget_ms):
                candidates.append(HangFinding(node.pid, node.depth, BUDGET_EXCEEDED, budget_ms))
    best: dict[Pid, HangFinding] = {}
    for finding in candidates:
        cur = best.get(finding.pid)
        if cur is None or finding.observed_at < cur.observed_at:
            best[finding.pid] = finding
    return sorted(best.values(), key=lambda f: (f.depth, f.pid))


def coverage_achieved(view: ExecutionReport, required_edges: Iterable[int]) -> bool:
    """True iff every required edge is nonzero in the view's bitmap."""
    bitmap = view.bitmap
    for edge in required_edges:
        if not 0 <= edge < len(bitmap):
            raise ValueError(f"edge {edge} outside the map")
        if not bitmap[edge]:
            return False
    return True


# ---------------------------------------------------------------------------
# Scoring


def score(
    profile: MonitorProfile,
    challenge_kind: str,
    reports: Sequence[ExecutionReport],
    grace_ms: int = 100,
    required_edges: Optional[frozenset[int]] = None,
) -> Verdicts:
    """Score one profile on one challenge from one or more reports.

    c1/c2 are majority votes of per-report bug/hang detection (flake
    resistance on the real backend); c3 checks the required edges against
    the union of all report bitmaps.
    """
    if not reports:
        raise ValueError("reports must be nonempty")
    for report in reports:
        if report.challenge != challenge_kind:
            raise WrongChallenge(
                f"report tagged {report.challenge!r}, scoring challenge {challenge_kind!r}"
            )
    if required_edges is None:
        from .challenge_layout import ChallengeParams, required_edges as default_required

        required_edges = default_required(ChallengeParams(kind=challenge_kind))

    bug_votes = 0
    hang_votes = 0
    union = 0
    for report in reports:
        view = filter_view(profile, report)
        if detect_bugs(view):
            bug_votes += 1
        if detect_hangs(view, report.budget_ms, grace_ms):
            hang_votes += 1
        union |= int.from_bytes(view.bitmap, "little")
    quorum = len(reports) / 2
    union_bitmap = union.to_bytes(len(reports[0].bitmap), "little")
    union_view = replace(filter_view(profile, reports[0]), bitmap=union_bitmap)
    return Verdicts(
        c1=bug_votes > quorum,
        c2=hang_votes > quorum,
        c3=coverage_achieved(union_view, required_edges),
    )
