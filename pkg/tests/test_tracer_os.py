"""Real-backend tests; these trace compiled C targets and are skipped on
hosts without ptrace, SysV shm, or a C compiler."""

import os
import signal

import pytest

from forkaware.coverage import SHM_ENV_VAR, create_shared
from forkaware.process_model import (
    DeadlineReached,
    Exited,
    FatalSignal,
    ForkObserved,
    ProcessTree,
)
from forkaware.tracer_os import (
    SpawnFailed,
    SpawnSpec,
    _pid_alive,
    drain,
    kill_tree,
    next_event,
    spawn_traced,
    tracing_supported,
)


pytestmark = pytest.mark.skipif(
    not tracing_supported()[0], reason=f"tracing unavailable: {tracing_supported()[1]}"
)


EXIT0 = "int main(void){ return 0; }\n"

FORK_CRASH = """
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>
int main(void) {
    if (fork() == 0) { raise(SIGSEGV); }
    else { wait(NULL); }
    return 0;
}
"""

FORK_LOOP = """
#include <unistd.h>
int main(void) {
    if (fork() == 0) { for (;;) { ; } }
    return 0;
}
"""

CHAIN3_LOOP = """
#include <unistd.h>
int main(void) {
    if (fork() == 0) {
        if (fork() == 0) {
            if (fork() == 0) { for (;;) { ; } }
            for (;;) { ; }
        }
        for (;;) { ; }
    }
    return 0;
}
"""

READ_BYTE_EXIT = """
#include <unistd.h>
int main(void) {
    unsigned char b = 0;
    ssize_t n = read(0, &b, 1);
    return n == 1 ? b : 99;
}
"""


@pytest.fixture()
def shm():
    seg = create_shared()
    yield seg
    seg.destroy()


def make_spec(binary, shm, data=b"", budget_ms=2000, grace_ms=100, **kw):
    return SpawnSpec(
        program=str(binary),
        env={SHM_ENV_VAR: str(shm.id)},
        data=data,
        budget_ms=budget_ms,
        grace_ms=grace_ms,
        **kw,
    )


def pump(handle):
    events = []
    while True:
        ev = next_event(handle)
        if ev is None or isinstance(ev, DeadlineReached):
            if ev is not None:
                events.append(ev)
            return events
        events.append(ev)


def test_spawn_nonexistent_program(shm):
    spec = SpawnSpec(program="/nonexistent/prog", env={SHM_ENV_VAR: str(shm.id)})
    with pytest.raises(SpawnFailed):
        spawn_traced(spec)


def test_spec_validation(cc_build, shm):
    binary = cc_build("exit0", EXIT0)
    with pytest.raises(ValueError):
        SpawnSpec(program=str(binary), env={}).validate()
    with pytest.raises(ValueError):
        SpawnSpec(program=str(binary), env={SHM_ENV_VAR: "1"}, budget_ms=5).validate()


def test_immediate_exit_single_event(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("exit0", EXIT0), shm))
    assert handle.tracked_pids() == {handle.root}
    events = pump(handle)
    kill_tree(handle)
    assert [type(ev) for ev in events] == [Exited]
    assert events[0].pid == handle.root and events[0].code == 0


def test_challenge_a_shape_surfaces_child_segv(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("fork_crash", FORK_CRASH), shm))
    events = pump(handle)
    kill_tree(handle)
    assert len(handle.tracked_pids()) == 2
    fatal = [ev for ev in events if isinstance(ev, FatalSignal)]
    exits = [ev for ev in events if isinstance(ev, Exited)]
    assert len(fatal) == 1
    assert fatal[0].sig.name == "SEGV" and fatal[0].pid != handle.root
    assert any(ev.pid == handle.root and ev.code == 0 for ev in exits)


def test_deadline_then_kill_tree(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("fork_loop", FORK_LOOP), shm, budget_ms=300))
    events = pump(handle)
    assert isinstance(events[-1], DeadlineReached)
    forks = [ev for ev in events if isinstance(ev, ForkObserved)]
    assert len(forks) == 1
    child = forks[0].child
    teardown = kill_tree(handle)
    assert teardown.killed == (child,)
    assert teardown.leaked == ()
    assert not _pid_alive(child)


def test_kill_tree_noop_when_everything_exited(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("exit0", EXIT0), shm))
    pump(handle)
    teardown = kill_tree(handle)
    assert teardown.killed == () and teardown.leaked == ()


def test_three_deep_loop_chain_killed_deepest_first(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("chain3", CHAIN3_LOOP), shm, budget_ms=400))
    pump(handle)
    depths = {t.pid: t.depth for t in handle.tracees.values()}
    teardown = kill_tree(handle)
    assert len(teardown.killed) == 3
    kill_depths = [depths[pid] for pid in teardown.killed]
    assert kill_depths == sorted(kill_depths, reverse=True)
    for pid in teardown.killed:
        assert not _pid_alive(pid)


def test_drain_trivial_target(cc_build, shm):
    from forkaware.detectors import detect_bugs, detect_hangs

    handle = spawn_traced(make_spec(cc_build("exit0", EXIT0), shm))
    report = drain(handle, ProcessTree.spawn_root(handle.root))
    assert len(report.tree) == 1
    assert report.tree.node(handle.root).state.kind == "exited"
    assert not report.deadline_hit
    assert report.teardown.killed == ()
    assert report.backend == "real"
    assert detect_bugs(report) == []
    assert detect_hangs(report, report.budget_ms, 100) == []


def test_drain_loop_marks_killed_by_monitor(cc_build, shm):
    from forkaware.detectors import detect_bugs

    handle = spawn_traced(make_spec(cc_build("fork_loop", FORK_LOOP), shm, budget_ms=300))
    report = drain(handle, ProcessTree.spawn_root(handle.root))
    assert report.deadline_hit
    kinds = sorted(n.state.kind for n in report.tree.nodes.values())
    assert kinds == ["exited", "killed_by_monitor"]
    killed = [n for n in report.tree.nodes.values() if n.state.kind == "killed_by_monitor"]
    assert killed[0].terminated_at >= 300
    assert detect_bugs(report) == []  # a monitor kill is never a bug


def test_every_fork_gets_exactly_one_terminal(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("chain3", CHAIN3_LOOP), shm, budget_ms=400))
    report = drain(handle, ProcessTree.spawn_root(handle.root))
    assert len(report.tree) == 4
    for node in report.tree.nodes.values():
        assert node.state.terminal
        assert node.terminated_at is not None


def test_orphan_freedom_after_drain(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("chain3", CHAIN3_LOOP), shm, budget_ms=300))
    drain(handle, ProcessTree.spawn_root(handle.root))
    for pid in handle.tracked_pids():
        assert not _pid_alive(pid)


def test_stdin_delivery(cc_build, shm):
    binary = cc_build("read_byte", READ_BYTE_EXIT)
    handle = spawn_traced(make_spec(binary, shm, data=bytes([55])))
    events = pump(handle)
    kill_tree(handle)
    assert isinstance(events[-1], Exited) and events[-1].code == 55


def test_file_arg_delivery(cc_build, shm):
    source = """
#include <fcntl.h>
#include <unistd.h>
int main(int argc, char **argv) {
    if (argc < 2) return 99;
    int fd = open(argv[1], O_RDONLY);
    if (fd < 0) return 98;
    unsigned char b = 0;
    if (read(fd, &b, 1) != 1) return 97;
    return b;
}
"""
    binary = cc_build("read_file_arg", source)
    handle = spawn_traced(make_spec(binary, shm, data=bytes([44]), input_mode="file-arg"))
    events = pump(handle)
    kill_tree(handle)
    assert isinstance(events[-1], Exited) and events[-1].code == 44


def test_bitmap_read_identical_for_crash_and_exit(cc_build, shm):
    """Coverage written before death survives it: the shared mapping
    outlives the process whether it crashed or exited."""
    crasher = cc_build(
        "probe_crash",
        """
#include <signal.h>
#include <stdlib.h>
#include <string.h>
#include <sys/shm.h>
#include <sys/wait.h>
#include <unistd.h>
int main(void) {
    unsigned char *map = shmat(atoi(getenv("FORKAWARE_SHM_ID")), 0, 0);
    if (fork() == 0) { map[42]++; raise(SIGSEGV); }
    wait(NULL);
    return 0;
}
""",
    )
    exiter = cc_build(
        "probe_exit",
        """
#include <stdlib.h>
#include <sys/shm.h>
#include <sys/wait.h>
#include <unistd.h>
int main(void) {
    unsigned char *map = shmat(atoi(getenv("FORKAWARE_SHM_ID")), 0, 0);
    if (fork() == 0) { map[42]++; _exit(0); }
    wait(NULL);
    return 0;
}
""",
    )
    handle = spawn_traced(make_spec(crasher, shm))
    crash_report = drain(handle, ProcessTree.spawn_root(handle.root))
    shm.clear()
    handle = spawn_traced(make_spec(exiter, shm))
    exit_report = drain(handle, ProcessTree.spawn_root(handle.root))
    assert crash_report.bitmap[42] == 1
    assert crash_report.bitmap == exit_report.bitmap


def test_kill_tree_catches_children_whose_fork_was_never_pumped(cc_build, shm):
    """A child forked right at the deadline boundary has its fork event
    still queued, not consumed: teardown must discover and kill it anyway."""
    import time as _time

    handle = spawn_traced(make_spec(cc_build("fork_loop", FORK_LOOP), shm, budget_ms=5000))
    _time.sleep(0.15)  # let the target fork; consume no events at all
    teardown = kill_tree(handle)
    assert len(handle.tracked_pids()) == 2  # child discovered during teardown
    assert len(teardown.killed) >= 1
    assert teardown.leaked == ()
    for pid in handle.tracked_pids():
        assert not _pid_alive(pid)


def test_drain_reconciles_boundary_children_into_the_tree(cc_build, shm):
    """Even without pumping, drain's report contains the discovered child
    with a terminal state (budget elapses immediately at 10 ms)."""
    import time as _time

    handle = spawn_traced(make_spec(cc_build("fork_loop", FORK_LOOP), shm, budget_ms=10))
    _time.sleep(0.15)
    report = drain(handle, ProcessTree.spawn_root(handle.root))
    assert len(report.tree) == 2
    assert all(n.state.terminal for n in report.tree.nodes.values())
    assert report.teardown.leaked == ()


def test_timestamps_non_decreasing(cc_build, shm):
    handle = spawn_traced(make_spec(cc_build("fork_crash", FORK_CRASH), shm))
    events = pump(handle)
    kill_tree(handle)
    stamps = [ev.at for ev in events]
    assert stamps == sorted(stamps)
