"""Real POSIX backend: spawn a target under ptrace, follow every fork, and
translate OS notifications into the shared event vocabulary.

The monitor waits on every tracked pid individually, so notifications for
processes anywhere in the tree are surfaced, not just the root's. Fatal
signals are forwarded (never swallowed); whatever is still alive at the
end is killed deepest-first and the kill is verified by re-polling.
"""

from __future__ import annotations

import ctypes
import errno
import os
import signal
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from . import coverage
from .challenge_layout import CRASHFILE_ENV_VAR, parse_crash_records
from .process_model import (
    DeadlineReached,
    ExecEvent,
    ExecutionReport,
    Exited,
    FatalSignal,
    ForkObserved,
    IllegalTransition,
    ProcessTree,
    SignalKind,
    TeardownReport,
    UnknownPid,
    apply_event,
    lineage_of,
    mark_killed,
)


class SpawnFailed(RuntimeError):
    """The target could not be launched (bad path, exec error)."""


class TraceUnsupported(RuntimeError):
    """No usable fork-following trace facility; fall back to the simulator."""


class TraceDesync(RuntimeError):
    """A notification arrived for a pid we do not track."""


_PTRACE_TRACEME = 0
_PTRACE_CONT = 7
_PTRACE_SETOPTIONS = 0x4200
_PTRACE_GETEVENTMSG = 0x4201

_O_TRACEFORK = 0x2
_O_TRACEVFORK = 0x4
_O_TRACECLONE = 0x8
_O_EXITKILL = 0x100000  # tracees die with the monitor: no escape on crash
_TRACE_OPTIONS = _O_TRACEFORK | _O_TRACEVFORK | _O_TRACECLONE | _O_EXITKILL

_EVENT_NAMES = {1: "fork", 2: "vfork", 3: "clone"}

_WALL = 0x40000000

_libc = ctypes.CDLL(None, use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]


def _ptrace(request: int, pid: int, addr=None, data=None) -> int:
    ctypes.set_errno(0)
    res = _libc.ptrace(request, pid, addr, data)
    if res == -1 and ctypes.get_errno() != 0:
        raise OSError(ctypes.get_errno(), os.strerror(ctypes.get_errno()))
    return res


def _cont(pid: int, sig: int = 0) -> None:
    try:
        _ptrace(_PTRACE_CONT, pid, None, ctypes.c_void_p(sig))
    except OSError as exc:
        if exc.errno != errno.ESRCH:  # died under us; its status is queued
            raise


@dataclass(frozen=True)
class SpawnSpec:
    """How to launch one traced execution of the target."""

    program: str
    args: tuple[str, ...] = ()
    env: Mapping[str, str] = field(default_factory=dict)
    input_mode: str = "stdin"
    data: bytes = b""
    budget_ms: int = 1000
    grace_ms: int = 100

    def validate(self) -> None:
        if self.budget_ms < 10:
            raise ValueError("budget_ms must be >= 10")
        if self.grace_ms < 1:
            raise ValueError("grace_ms must be >= 1")
        if self.input_mode not in ("stdin", "file-arg"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if coverage.SHM_ENV_VAR not in self.env:
            raise ValueError(f"env must include {coverage.SHM_ENV_VAR}")
        int(self.env[coverage.SHM_ENV_VAR])
        path = Path(self.program)
        if not (path.is_file() and os.access(path, os.X_OK)):
            raise SpawnFailed(f"{self.program}: not an executable file")


@dataclass
class _Tracee:
    pid: int
    depth: int
    parent: Optional[int] = None
    alive: bool = True
    attach_stop_pending: bool = False


class TraceHandle:
    """Owns one live traced execution: tracked pids, shared-map id, clock.

    Drive a handle from the thread that created it (ptrace requests must
    come from the attaching thread); distinct handles are independent.
    """

    def __init__(self, spec: SpawnSpec, root: int, stdin_fd: Optional[int], input_path: Optional[Path]):
        self.spec = spec
        self.root = root
        self.shm_id = int(spec.env[coverage.SHM_ENV_VAR])
        self.started = time.monotonic()
        self.tracees: dict[int, _Tracee] = {root: _Tracee(root, 0)}
        self.closed = False
        self.final_outcomes: list[tuple[int, str, object, int]] = []  # (pid, kind, detail, at)
        self._stdin_fd = stdin_fd
        self._stdin_pending = spec.data if stdin_fd is not None else b""
        self._input_path = input_path

    def now_ms(self) -> int:
        return int((time.monotonic() - self.started) * 1000)

    def tracked_pids(self) -> set[int]:
        return set(self.tracees)

    def live_pids(self) -> list[int]:
        return [t.pid for t in self.tracees.values() if t.alive]

    def flush_stdin(self) -> None:
        if self._stdin_fd is None:
            return
        try:
            while self._stdin_pending:
                written = os.write(self._stdin_fd, self._stdin_pending)
                self._stdin_pending = self._stdin_pending[written:]
        except BlockingIOError:
            return
        except (BrokenPipeError, OSError):
            self._stdin_pending = b""
        self._close_stdin()

    def _close_stdin(self) -> None:
        if self._stdin_fd is not None:
            try:
                os.close(self._stdin_fd)
            except OSError:
                pass
            self._stdin_fd = None

    def cleanup_files(self) -> None:
        self._close_stdin()
        if self._input_path is not None:
            try:
                self._input_path.unlink()
            except OSError:
                pass
            self._input_path = None


def spawn_traced(spec: SpawnSpec) -> TraceHandle:
    """Launch the target stopped under ptrace with fork-following options,
    deliver its input, resume it, and return the live handle."""
    spec.validate()

    input_path: Optional[Path] = None
    args = [spec.program, *spec.args]
    if spec.input_mode == "file-arg":
        import tempfile

        fd, name = tempfile.mkstemp(prefix="forkaware_in_")
        os.write(fd, spec.data)
        os.close(fd)
        input_path = Path(name)
        args.append(name)

    stdin_r, stdin_w = (os.pipe() if spec.input_mode == "stdin" else (None, None))
    err_r, err_w = os.pipe()
    env = dict(os.environ)
    env.update(spec.env)

    pid = os.fork()
    if pid == 0:  # child: become a tracee, wire stdio, exec
        try:
            os.setsid()
        except OSError:
            pass
        if _libc.ptrace(_PTRACE_TRACEME, 0, None, None) == -1:
            os.write(err_w, b"P%d" % ctypes.get_errno())
            os._exit(126)
        try:
            devnull = os.open(os.devnull, os.O_RDWR)
            if stdin_r is not None:
                os.dup2(stdin_r, 0)
            else:
                os.dup2(devnull, 0)
            os.dup2(devnull, 1)
            os.dup2(devnull, 2)
            os.execve(spec.program, args, env)
        except OSError as exc:
            os.write(err_w, b"E%d" % (exc.errno or 0))
        os._exit(127)

    # parent
    os.close(err_w)
    if stdin_r is not None:
        os.close(stdin_r)
    try:
        _, status = os.waitpid(pid, 0)
        if not os.WIFSTOPPED(status):
            msg = os.read(err_r, 64)
            _reap_quietly(pid)
            if msg.startswith(b"P"):
                raise TraceUnsupported(f"ptrace(TRACEME) failed, errno {msg[1:].decode() or '?'}")
            code = msg[1:].decode() or "?"
            raise SpawnFailed(f"exec of {spec.program} failed, errno {code}")
        try:
            _ptrace(_PTRACE_SETOPTIONS, pid, None, ctypes.c_void_p(_TRACE_OPTIONS))
        except OSError as exc:
            os.kill(pid, signal.SIGKILL)
            _reap_quietly(pid)
            raise TraceUnsupported(f"PTRACE_SETOPTIONS failed: {exc}") from exc
        _cont(pid)
    except Exception:
        os.close(err_r)
        if stdin_w is not None:
            os.close(stdin_w)
        if input_path is not None:
            input_path.unlink(missing_ok=True)
        raise
    os.close(err_r)

    if stdin_w is not None:
        os.set_blocking(stdin_w, False)
    handle = TraceHandle(spec, pid, stdin_w, input_path)
    handle.flush_stdin()
    return handle


def _reap_quietly(pid: int) -> None:
    try:
        os.waitpid(pid, os.WNOHANG)
    except ChildProcessError:
        pass


def _waitpid(pid: int, options: int) -> tuple[int, int]:
    try:
        return os.waitpid(pid, options | _WALL)
    except OSError as exc:
        if exc.errno == errno.EINVAL:
            return os.waitpid(pid, options)
        raise


def next_event(handle: TraceHandle) -> Optional[ExecEvent]:
    """Next fork/exit/fatal-signal from ANY tracked process; None at stream
    end. Non-fatal stops are resumed with their signal forwarded.
    Returns DeadlineReached once the budget elapses with processes live."""
    if handle.closed:
        return None
    while True:
        live = handle.live_pids()
        if not live:
            return None
        now = handle.now_ms()
        if now >= handle.spec.budget_ms:
            return DeadlineReached(at=now)
        handle.flush_stdin()
        progressed = False
        for pid in live:
            tracee = handle.tracees[pid]
            try:
                wpid, status = _waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                raise TraceDesync(f"pid {pid} vanished from the wait set")
            if wpid == 0:
                continue
            progressed = True
            at = handle.now_ms()
            if os.WIFEXITED(status):
                tracee.alive = False
                return Exited(pid, os.WEXITSTATUS(status), at)
            if os.WIFSIGNALED(status):
                tracee.alive = False
                return FatalSignal(pid, SignalKind.from_code(os.WTERMSIG(status)), at)
            if os.WIFSTOPPED(status):
                stopsig = os.WSTOPSIG(status)
                event = status >> 16
                if stopsig == signal.SIGTRAP and event in _EVENT_NAMES:
                    msg = ctypes.c_ulong()
                    _ptrace(_PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
                    child = int(msg.value)
                    if child in handle.tracees:
                        raise TraceDesync(f"pid {child} reported twice (pid reuse?)")
                    handle.tracees[child] = _Tracee(
                        child, tracee.depth + 1, parent=pid, attach_stop_pending=True
                    )
                    _cont(pid)
                    return ForkObserved(pid, child, at)
                if stopsig == signal.SIGTRAP:
                    _cont(pid)  # exec trap or other trace artifact: swallow
                elif stopsig == signal.SIGSTOP and tracee.attach_stop_pending:
                    tracee.attach_stop_pending = False
                    _cont(pid)
                else:
                    _cont(pid, stopsig)  # forward, preserving target semantics
        if not progressed:
            time.sleep(0.0005)


def _absorb_pending(handle: TraceHandle) -> None:
    """Consume notifications queued between the deadline and teardown so a
    child forked at the boundary is tracked before the kill; stopped
    processes are left stopped (SIGKILL reaches them anyway)."""
    changed = True
    while changed:
        changed = False
        for pid in handle.live_pids():
            tracee = handle.tracees[pid]
            try:
                wpid, status = _waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                tracee.alive = False
                continue
            if wpid == 0:
                continue
            at = handle.now_ms()
            if os.WIFEXITED(status):
                tracee.alive = False
                handle.final_outcomes.append((pid, "exited", os.WEXITSTATUS(status), at))
                changed = True
            elif os.WIFSIGNALED(status):
                tracee.alive = False
                handle.final_outcomes.append(
                    (pid, "fatal", SignalKind.from_code(os.WTERMSIG(status)), at)
                )
                changed = True
            elif os.WIFSTOPPED(status):
                event = status >> 16
                if os.WSTOPSIG(status) == signal.SIGTRAP and event in _EVENT_NAMES:
                    msg = ctypes.c_ulong()
                    _ptrace(_PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
                    child = int(msg.value)
                    if child not in handle.tracees:
                        handle.tracees[child] = _Tracee(
                            child, tracee.depth + 1, parent=pid, attach_stop_pending=True
                        )
                        changed = True


def _kill_quietly(pid: int) -> None:
    try:
        os.kill(pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def kill_tree(handle: TraceHandle) -> TeardownReport:
    """Forcibly terminate every live tracked pid, deepest-first so parents
    cannot re-fork replacements, then verify by re-polling liveness.
    Children discovered mid-teardown (a fork racing the deadline) join the
    kill set; unkillable pids are reported as leaked, never dropped."""
    killed: list[int] = []
    _absorb_pending(handle)
    to_kill = [
        t.pid
        for t in sorted(
            (t for t in handle.tracees.values() if t.alive),
            key=lambda t: (-t.depth, t.pid),
        )
    ]
    deadline = time.monotonic() + max(handle.spec.grace_ms, 200) / 1000.0
    for pid in to_kill:
        _kill_quietly(pid)
    pending = list(to_kill)
    while pending and time.monotonic() < deadline:
        still = []
        for pid in pending:
            try:
                wpid, status = _waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                handle.tracees[pid].alive = False
                continue
            if wpid == 0:
                still.append(pid)
                continue
            at = handle.now_ms()
            if os.WIFSIGNALED(status) and os.WTERMSIG(status) == signal.SIGKILL:
                handle.tracees[pid].alive = False
                killed.append(pid)
                handle.final_outcomes.append((pid, "killed", None, at))
            elif os.WIFEXITED(status):  # lost the race: it finished naturally
                handle.tracees[pid].alive = False
                handle.final_outcomes.append((pid, "exited", os.WEXITSTATUS(status), at))
            elif os.WIFSIGNALED(status):
                handle.tracees[pid].alive = False
                handle.final_outcomes.append(
                    (pid, "fatal", SignalKind.from_code(os.WTERMSIG(status)), at)
                )
            else:  # a stop, possibly a queued fork event naming a new child
                event = status >> 16
                if os.WSTOPSIG(status) == signal.SIGTRAP and event in _EVENT_NAMES:
                    msg = ctypes.c_ulong()
                    _ptrace(_PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
                    child = int(msg.value)
                    if child not in handle.tracees:
                        handle.tracees[child] = _Tracee(
                            child,
                            handle.tracees[pid].depth + 1,
                            parent=pid,
                            attach_stop_pending=True,
                        )
                        to_kill.append(child)
                        _kill_quietly(child)
                        still.append(child)
                _kill_quietly(pid)
                still.append(pid)
        pending = still
        if pending:
            time.sleep(0.001)

    leaked = tuple(pid for pid in to_kill if _pid_alive(pid))
    for pid in leaked:
        handle.tracees[pid].alive = True
    handle.closed = True
    handle.cleanup_files()
    # report in kill order (deepest first), not reap-confirmation order
    killed.sort(key=lambda pid: (-handle.tracees[pid].depth, pid))
    return TeardownReport(killed=tuple(killed), leaked=leaked)


def _pid_alive(pid: int) -> bool:
    """Liveness poll; a zombie awaiting its reaper counts as dead."""
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:
        stat = Path(f"/proc/{pid}/stat").read_text()
        state = stat.rpartition(")")[2].split()[0]
        return state not in ("Z", "X")
    except (OSError, IndexError):
        return True


def drain(handle: TraceHandle, tree: ProcessTree) -> ExecutionReport:
    """Pump events into the tree until stream end or the deadline, read the
    shared bitmap, then tear the tree down. The report carries the final
    tree, bitmap, crash records, teardown info and wall time."""
    events: list[ExecEvent] = []
    deadline_hit = False
    try:
        while True:
            ev = next_event(handle)
            if ev is None:
                break
            events.append(ev)
            if isinstance(ev, DeadlineReached):
                deadline_hit = True
                break
            try:
                tree = apply_event(tree, ev)
            except (UnknownPid, IllegalTransition) as exc:
                raise TraceDesync(f"event {ev!r} does not fit the tree: {exc}") from exc
        bitmap = coverage.read_shared(handle.shm_id)
    finally:
        teardown = kill_tree(handle)

    # children discovered at the deadline boundary had their fork
    # notification absorbed during teardown; add every missing link before
    # applying any terminal outcome (their parents are frozen at the fork
    # event-stop until killed, so they are still running in the tree here)
    missing = sorted(
        {pid for pid, *_ in handle.final_outcomes if pid not in tree},
        key=lambda p: (handle.tracees[p].depth, p),
    )
    if missing:
        discovered_at = min(at for *_ignored, at in handle.final_outcomes)
        for pid in missing:
            fork_ev = ForkObserved(handle.tracees[pid].parent, pid, discovered_at)
            events.append(fork_ev)
            tree = apply_event(tree, fork_ev)

    for pid, kind, detail, at in handle.final_outcomes:
        if kind == "killed":
            tree = mark_killed(tree, pid, at)
        elif kind == "exited":
            ev = Exited(pid, int(detail), at)  # type: ignore[arg-type]
            events.append(ev)
            tree = apply_event(tree, ev)
        else:
            ev = FatalSignal(pid, detail, at)  # type: ignore[arg-type]
            events.append(ev)
            tree = apply_event(tree, ev)

    records = ()
    crashfile = handle.spec.env.get(CRASHFILE_ENV_VAR)
    if crashfile:
        try:
            records = parse_crash_records(Path(crashfile).read_bytes())
        except OSError:
            records = ()

    return ExecutionReport(
        backend="real",
        tree=tree,
        events=tuple(events),
        bitmap=bitmap,
        crash_records=records,
        lineage=lineage_of(tree),
        budget_ms=handle.spec.budget_ms,
        deadline_hit=deadline_hit,
        end_ms=handle.now_ms(),
        teardown=teardown,
    )


_support_cache: Optional[tuple[bool, str]] = None


def tracing_supported() -> tuple[bool, str]:
    """Probe whether this host can trace a forked tree (cached)."""
    global _support_cache
    if _support_cache is not None:
        return _support_cache
    if os.name != "posix" or not hasattr(os, "fork"):
        _support_cache = (False, "not a POSIX host")
        return _support_cache
    shell = "/bin/sh"
    if not os.path.exists(shell):
        _support_cache = (False, "no /bin/sh to probe with")
        return _support_cache
    try:
        shm = coverage.create_shared()
    except coverage.ShmUnavailable as exc:
        _support_cache = (False, f"shared memory unavailable: {exc}")
        return _support_cache
    try:
        spec = SpawnSpec(
            program=shell,
            args=("-c", "exit 0"),
            env={coverage.SHM_ENV_VAR: str(shm.id)},
            budget_ms=2000,
        )
        handle = spawn_traced(spec)
        drain(handle, ProcessTree.spawn_root(handle.root))
        _support_cache = (True, "ok")
    except Exception as exc:  # noqa: BLE001 - any failure means "unsupported"
        _support_cache = (False, f"trace probe failed: {exc}")
    finally:
        shm.destroy()
    return _support_cache
