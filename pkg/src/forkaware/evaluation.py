"""Evaluation matrix: run (profile x challenge x backend), score, render.

Each row executes its challenge fresh (the canonical input sweep, repeated
for flake resistance), filters the reports through the row's monitor
profile, and records the verdict triple. Real-backend rows need the
compiled challenge generator; when the host or toolchain cannot provide
it, rows are recorded as skipped with the reason, never dropped.
"""

from __future__ import annotations

import json
import os
import platform
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import challenge_layout as layout
from .coverage import SHM_ENV_VAR, create_shared
from .detectors import (
    PROFILES,
    MonitorProfile,
    Verdicts,
    detect_bugs,
    detect_hangs,
    filter_view,
    score,
)
from .fuzzer import BackendUnavailable
from .process_model import ExecutionReport, ProcessTree
from .sim_backend import SimPolicy, run_sim, script_challenge
from .tracer_os import SpawnSpec, drain, spawn_traced, tracing_supported

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"

CHALLENGES_DIR_ENV_VAR = "FORKAWARE_CHALLENGES_DIR"

# Which criterion a challenge exercises: its column in the summary table.
CRITERION_OF = {layout.KIND_A: "c1", layout.KIND_B: "c2", layout.KIND_C: "c3"}


class BuildFailed(RuntimeError):
    """Challenge generation or compilation failed."""


# ---------------------------------------------------------------------------
# Targets


class SimChallengeTarget:
    """Deterministic challenge execution on the simulator."""

    def __init__(self, params: layout.ChallengeParams, budget_ms: int = 1000, grace_ms: int = 100):
        self.params = params
        self.budget_ms = budget_ms
        self.grace_ms = grace_ms
        self._script = script_challenge(params.kind, params)
        self._policy = SimPolicy(deadline_ms=budget_ms)

    def run(self, data: bytes) -> ExecutionReport:
        report = run_sim(self._script, data, self._policy)
        return replace(report, challenge=self.params.kind)


class RealChallengeTarget:
    """Challenge execution as a traced OS process tree.

    Every run gets a fresh shared map and crash-record file; all pids ever
    tracked are remembered so campaigns and matrices can verify that
    nothing survived them.
    """

    def __init__(
        self,
        binary: Path,
        params: layout.ChallengeParams,
        budget_ms: int = 1000,
        grace_ms: int = 100,
    ):
        ok, reason = tracing_supported()
        if not ok:
            raise BackendUnavailable(reason)
        self.binary = Path(binary)
        self.params = params
        self.budget_ms = budget_ms
        self.grace_ms = grace_ms
        self.seen_pids: set[int] = set()
        self.leaked_pids: set[int] = set()

    def run(self, data: bytes) -> ExecutionReport:
        shm = create_shared()
        crash_fd, crash_path = tempfile.mkstemp(prefix="forkaware_crash_")
        os.close(crash_fd)
        try:
            spec = SpawnSpec(
                program=str(self.binary),
                env={
                    SHM_ENV_VAR: str(shm.id),
                    layout.CRASHFILE_ENV_VAR: crash_path,
                },
                data=data,
                budget_ms=self.budget_ms,
                grace_ms=self.grace_ms,
            )
            handle = spawn_traced(spec)
            try:
                report = drain(handle, ProcessTree.spawn_root(handle.root))
            finally:
                self.seen_pids |= handle.tracked_pids()
            if report.teardown is not None:
                self.leaked_pids |= set(report.teardown.leaked)
            return replace(report, challenge=self.params.kind)
        finally:
            shm.destroy()
            try:
                os.unlink(crash_path)
            except OSError:
                pass


# ---------------------------------------------------------------------------
# Challenge binary building (delegates to the C generator package)


def find_challenges_dir(explicit: Optional[Path] = None) -> Optional[Path]:
    candidates = []
    if explicit is not None:
        candidates.append(Path(explicit))
    env = os.environ.get(CHALLENGES_DIR_ENV_VAR)
    if env:
        candidates.append(Path(env))
    candidates.append(Path.cwd() / "challenges")
    candidates.append(Path(__file__).resolve().parents[2] / "challenges")
    for cand in candidates:
        if (cand / "genchallenge.c").is_file():
            return cand
    return None


def _run_checked(cmd: Sequence[str], what: str, **kwargs) -> subprocess.CompletedProcess:
    proc = subprocess.run(cmd, capture_output=True, text=True, **kwargs)
    if proc.returncode != 0:
        raise BuildFailed(f"{what} failed:\n{proc.stderr.strip() or proc.stdout.strip()}")
    return proc


def ensure_generator(challenges_dir: Path) -> Path:
    gen = challenges_dir / "genchallenge"
    src = challenges_dir / "genchallenge.c"
    if not gen.is_file() or gen.stat().st_mtime < src.stat().st_mtime:
        _run_checked(["make", "-s", "-C", str(challenges_dir), "genchallenge"], "building genchallenge")
    return gen


def generator_args(params: layout.ChallengeParams) -> list[str]:
    args = [params.kind, "-d", str(params.fork_depth)]
    if params.kind == layout.KIND_C:
        args += ["-c", str(params.conditionals)]
    if params.kind == layout.KIND_B:
        args += ["-l", params.loop_in]
    return args


def generate_source(params: layout.ChallengeParams, challenges_dir: Path) -> str:
    gen = ensure_generator(challenges_dir)
    proc = _run_checked([str(gen), *generator_args(params)], f"generating challenge {params.kind}")
    return proc.stdout


def build_challenge(
    params: layout.ChallengeParams,
    build_dir: Path,
    challenges_dir: Path,
    cc: str = "cc",
) -> Path:
    """Emit the challenge source and compile it; cached per parameter set."""
    build_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{params.kind.lower()}_d{params.fork_depth}_c{params.conditionals}_{params.loop_in}"
    binary = build_dir / f"challenge_{tag}"
    if binary.is_file():
        return binary
    source = build_dir / f"challenge_{tag}.c"
    source.write_text(generate_source(params, challenges_dir))
    _run_checked(
        [cc, "-O1", "-Wall", "-Wextra", "-Werror", "-o", str(binary), str(source)],
        f"compiling challenge {params.kind}",
    )
    return binary


# ---------------------------------------------------------------------------
# Scorecard


@dataclass(frozen=True)
class ScoreRow:
    profile: str
    challenge: str
    backend: str
    verdicts: Optional[Verdicts] = None
    skipped: bool = False
    reason: Optional[str] = None
    bugs: tuple[tuple[int, str], ...] = ()  # (depth, signal name)
    hangs: tuple[tuple[int, str], ...] = ()  # (depth, reason)

    def to_json_dict(self) -> dict:
        return {
            "profile": self.profile,
            "challenge": self.challenge,
            "backend": self.backend,
            "verdicts": self.verdicts.to_json_dict() if self.verdicts else None,
            "skipped": self.skipped,
            "reason": self.reason,
            "bugs": [list(b) for b in self.bugs],
            "hangs": [list(h) for h in self.hangs],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ScoreRow":
        return cls(
            profile=d["profile"],
            challenge=d["challenge"],
            backend=d["backend"],
            verdicts=Verdicts.from_json_dict(d["verdicts"]) if d.get("verdicts") else None,
            skipped=bool(d.get("skipped", False)),
            reason=d.get("reason"),
            bugs=tuple((int(b[0]), str(b[1])) for b in d.get("bugs", ())),
            hangs=tuple((int(h[0]), str(h[1])) for h in d.get("hangs", ())),
        )


@dataclass(frozen=True)
class Scorecard:
    rows: tuple[ScoreRow, ...]
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "rows": [r.to_json_dict() for r in self.rows],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Scorecard":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
        return cls(
            rows=tuple(ScoreRow.from_json_dict(r) for r in d["rows"]),
            metadata=dict(d.get("metadata", {})),
        )


# ---------------------------------------------------------------------------
# The matrix


def _findings_summary(
    profile: MonitorProfile, reports: Sequence[ExecutionReport], grace_ms: int
) -> tuple[tuple[tuple[int, str], ...], tuple[tuple[int, str], ...]]:
    bugs: set[tuple[int, str]] = set()
    hangs: set[tuple[int, str]] = set()
    for report in reports:
        view = filter_view(profile, report)
        for finding in detect_bugs(view):
            bugs.add((finding.depth, finding.signal.name))
        for finding in detect_hangs(view, report.budget_ms, grace_ms):
            hangs.add((finding.depth, finding.reason))
    return tuple(sorted(bugs)), tuple(sorted(hangs))


def evaluate(
    profiles: Sequence[str],
    challenges: Sequence[str],
    backends: Sequence[str],
    budget_ms: int = 1000,
    grace_ms: int = 100,
    reps: int = 3,
    challenges_dir: Optional[Path] = None,
) -> Scorecard:
    """Run the full matrix and assemble the scorecard.

    Sim rows are deterministic. Real rows are skipped (with the reason
    recorded) when tracing, the generator package, or the toolchain is
    missing; a compile error on a capable host raises BuildFailed.
    """
    if not profiles or not challenges or not backends:
        raise ValueError("profiles, challenges and backends must be nonempty")
    for name in profiles:
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}")
    for kind in challenges:
        if kind not in layout.KINDS:
            raise ValueError(f"unknown challenge {kind!r}")
    for backend in backends:
        if backend not in ("sim", "real"):
            raise ValueError(f"unknown backend {backend!r}")
    if reps < 1:
        raise ValueError("reps must be >= 1")

    rows: list[ScoreRow] = []
    real_targets: list[RealChallengeTarget] = []

    with tempfile.TemporaryDirectory(prefix="forkaware_build_") as build_dir_name:
        build_dir = Path(build_dir_name)
        for backend in backends:
            real_reason: Optional[str] = None
            if backend == "real":
                ok, reason = tracing_supported()
                if not ok:
                    real_reason = reason
                elif find_challenges_dir(challenges_dir) is None:
                    real_reason = "challenge generator package not found"
            for kind in challenges:
                params = layout.ChallengeParams(kind=kind)
                target = None
                skip_reason = real_reason
                if skip_reason is None:
                    if backend == "sim":
                        target = SimChallengeTarget(params, budget_ms, grace_ms)
                    else:
                        binary = build_challenge(
                            params, build_dir, find_challenges_dir(challenges_dir)
                        )
                        target = RealChallengeTarget(binary, params, budget_ms, grace_ms)
                        real_targets.append(target)
                inputs = layout.canonical_inputs(params)
                for profile_name in profiles:
                    if skip_reason is not None:
                        rows.append(
                            ScoreRow(profile_name, kind, backend, skipped=True, reason=skip_reason)
                        )
                        continue
                    reports = [target.run(data) for _ in range(reps) for data in inputs]
                    profile = PROFILES[profile_name]
                    verdicts = score(profile, kind, reports, grace_ms)
                    bugs, hangs = _findings_summary(profile, reports, grace_ms)
                    rows.append(
                        ScoreRow(profile_name, kind, backend, verdicts, bugs=bugs, hangs=hangs)
                    )

    tracked = sorted(set().union(*(t.seen_pids for t in real_targets)) if real_targets else set())
    alive = [pid for pid in tracked if _pid_alive(pid)]
    metadata = {
        "tool": "forkaware",
        "version": TOOL_VERSION,
        "host": f"{platform.system()} {platform.release()} ({platform.machine()})",
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "budget_ms": budget_ms,
        "grace_ms": grace_ms,
        "reps": reps,
        "orphans": {"tracked": len(tracked), "alive_after": sorted(set(alive))},
    }
    return Scorecard(rows=tuple(rows), metadata=metadata)


def _pid_alive(pid: int) -> bool:
    from .tracer_os import _pid_alive as alive

    return alive(pid)


def fork_aware_all_green(scorecard: Scorecard) -> bool:
    """True iff every non-skipped fork_aware row passes the criterion its
    challenge exercises (the self-check `score` exits nonzero on)."""
    for row in scorecard.rows:
        if row.profile != "fork_aware" or row.skipped or row.verdicts is None:
            continue
        if not getattr(row.verdicts, CRITERION_OF[row.challenge]):
            return False
    return True


# ---------------------------------------------------------------------------
# Rendering


def summarize(scorecard: Scorecard) -> dict[tuple[str, str], dict[str, Optional[bool]]]:
    """Assemble per-(backend, profile) C1/C2/C3 columns from the rows:
    the bug column comes from challenge A, hangs from B, coverage from C."""
    out: dict[tuple[str, str], dict[str, Optional[bool]]] = {}
    for row in scorecard.rows:
        cell = out.setdefault((row.backend, row.profile), {"c1": None, "c2": None, "c3": None})
        if row.verdicts is not None:
            crit = CRITERION_OF[row.challenge]
            cell[crit] = getattr(row.verdicts, crit)
    return out


def _mark(value: Optional[bool]) -> str:
    if value is None:
        return "-"
    return "✓" if value else "✗"


def render(scorecard: Scorecard, fmt: str = "markdown") -> str:
    """Render the scorecard; json round-trips, markdown mirrors the
    profile-rows / criteria-columns layout plus a per-row detail table."""
    if fmt == "json":
        return json.dumps(scorecard.to_json_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}")

    lines = ["# Fork-awareness scorecard", ""]
    summary = summarize(scorecard)
    if summary:
        lines += [
            "| Profile | Backend | Bugs (C1) | Hangs (C2) | Coverage (C3) |",
            "|---|---|---|---|---|",
        ]
        for (backend, profile), cell in sorted(summary.items()):
            lines.append(
                f"| {profile} | {backend} | {_mark(cell['c1'])} | {_mark(cell['c2'])} | {_mark(cell['c3'])} |"
            )
        lines.append("")

    lines += [
        "## Rows",
        "",
        "| Profile | Challenge | Backend | C1 | C2 | C3 | Notes |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in scorecard.rows:
        if row.skipped or row.verdicts is None:
            note = f"skipped: {row.reason}" if row.reason else "skipped"
            cells = ["-", "-", "-"]
        else:
            note = ""
            cells = [_mark(row.verdicts.c1), _mark(row.verdicts.c2), _mark(row.verdicts.c3)]
        lines.append(
            f"| {row.profile} | {row.challenge} | {row.backend} | {cells[0]} | {cells[1]} | {cells[2]} | {note} |"
        )
    lines.append("")
    meta = scorecard.metadata
    if meta:
        lines.append(
            f"_{meta.get('tool', 'forkaware')} {meta.get('version', '')} on {meta.get('host', '?')}; "
            f"budget {meta.get('budget_ms', '?')} ms, grace {meta.get('grace_ms', '?')} ms, "
            f"{meta.get('reps', '?')} repetition(s) per row._"
        )
        lines.append("")
    return "\n".join(lines)
