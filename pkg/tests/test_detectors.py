import random
from dataclasses import replace

import pytest

from forkaware.challenge_layout import ChallengeParams, required_edges
from forkaware.detectors import (
    BUDGET_EXCEEDED,
    CRASHFILE,
    FORK_AWARE,
    OUTLIVED_ROOT,
    PARENT_ONLY,
    PROFILES,
    Verdicts,
    WrongChallenge,
    coverage_achieved,
    detect_bugs,
    detect_hangs,
    filter_view,
    score,
)
from forkaware.process_model import KILL, SEGV, other_signal
from forkaware.sim_backend import (
    BusyLoopForever,
    Exit,
    Fork,
    HitEdge,
    RaiseFatal,
    SimPolicy,
    TargetScript,
    run_sim,
    script_challenge,
)

ZERO4 = b"\x00\x00\x00\x00"


def challenge_report(kind, data=ZERO4, budget=1000, params=None):
    report = run_sim(script_challenge(kind, params), data, SimPolicy(budget))
    return replace(report, challenge=kind)


@pytest.fixture(scope="module")
def report_a():
    return challenge_report("A")


@pytest.fixture(scope="module")
def report_b():
    return challenge_report("B")


@pytest.fixture(scope="module")
def report_c():
    return challenge_report("C")


# ---------------------------------------------------------------------------
# filter_view


def test_fork_aware_view_is_identity(report_a):
    assert filter_view(FORK_AWARE, report_a) is report_a


def test_parent_only_hides_child_fatal_signal(report_a):
    view = filter_view(PARENT_ONLY, report_a)
    assert len(view.tree) == 1
    assert all(n.state.kind != "fatal_signal" for n in view.tree.nodes.values())
    assert view.crash_records == ()
    assert view.bitmap == report_a.bitmap  # the shared map is always kept


def test_crashfile_keeps_records_but_hides_child_states(report_a):
    view = filter_view(CRASHFILE, report_a)
    assert len(view.tree) == 1
    assert len(view.crash_records) == 1
    assert view.crash_records[0].signal == SEGV


# ---------------------------------------------------------------------------
# detect_bugs


def test_bugs_fork_aware_challenge_a(report_a):
    findings = detect_bugs(filter_view(FORK_AWARE, report_a))
    assert len(findings) == 1
    f = findings[0]
    assert f.depth == 1 and f.signal == SEGV
    assert f.path == (report_a.tree.root, f.pid)


def test_bugs_parent_only_challenge_a(report_a):
    assert detect_bugs(filter_view(PARENT_ONLY, report_a)) == []


def test_bugs_crashfile_sees_record_with_depth(report_a):
    findings = detect_bugs(filter_view(CRASHFILE, report_a))
    assert len(findings) == 1
    assert findings[0].depth == 1


def test_bugs_none_on_clean_exit():
    report = challenge_report("C")
    for profile in PROFILES.values():
        assert detect_bugs(filter_view(profile, report)) == []


def test_bugs_ignore_monitor_kill_and_unclassified_signals():
    script = TargetScript((Fork(TargetScript((RaiseFatal(KILL),))), Exit(0)))
    report = run_sim(script, b"", SimPolicy(100))
    assert detect_bugs(report) == []
    script = TargetScript((RaiseFatal(other_signal(15)),))
    report = run_sim(script, b"", SimPolicy(100))
    assert detect_bugs(report) == []


def test_root_crash_visible_even_to_parent_only():
    report = run_sim(TargetScript((RaiseFatal(SEGV),)), b"", SimPolicy(100))
    findings = detect_bugs(filter_view(PARENT_ONLY, report))
    assert len(findings) == 1 and findings[0].depth == 0


def test_bug_deduplicated_between_tree_and_record(report_a):
    # fork_aware sees both the FatalSignal state and the crash record
    findings = detect_bugs(filter_view(FORK_AWARE, report_a))
    assert len(findings) == 1


# ---------------------------------------------------------------------------
# detect_hangs


def test_hangs_fork_aware_challenge_b(report_b):
    findings = detect_hangs(filter_view(FORK_AWARE, report_b), report_b.budget_ms, 100)
    assert len(findings) == 1
    f = findings[0]
    assert f.depth == 1 and f.reason == OUTLIVED_ROOT
    root = report_b.tree.node(report_b.tree.root)
    assert f.observed_at == root.terminated_at + 100


def test_hangs_parent_only_challenge_b(report_b):
    assert detect_hangs(filter_view(PARENT_ONLY, report_b), report_b.budget_ms, 100) == []
    assert detect_hangs(filter_view(CRASHFILE, report_b), report_b.budget_ms, 100) == []


def test_hangs_none_when_everything_exits(report_a, report_c):
    for report in (report_a, report_c):
        for profile in PROFILES.values():
            assert detect_hangs(filter_view(profile, report), report.budget_ms, 100) == []


def test_root_hang_is_budget_exceeded():
    report = run_sim(TargetScript((BusyLoopForever(),)), b"", SimPolicy(200))
    findings = detect_hangs(report, report.budget_ms, 100)
    assert len(findings) == 1
    assert findings[0].reason == BUDGET_EXCEEDED and findings[0].depth == 0
    # visible to every profile: the root is always observable
    assert detect_hangs(filter_view(PARENT_ONLY, report), report.budget_ms, 100) == findings


def test_hang_dedup_prefers_earlier_observation(report_b):
    # OutlivedRoot (root exit + grace) precedes BudgetExceeded (deadline)
    findings = detect_hangs(report_b, report_b.budget_ms, 100)
    assert [f.reason for f in findings] == [OUTLIVED_ROOT]
    # with a grace pushing OutlivedRoot past the deadline, BudgetExceeded is earlier
    report = challenge_report("B", budget=50)
    findings = detect_hangs(report, 50, 100)
    assert [f.reason for f in findings] == [BUDGET_EXCEEDED]


def test_hang_validation():
    report = challenge_report("B")
    with pytest.raises(ValueError):
        detect_hangs(report, 0, 100)
    with pytest.raises(ValueError):
        detect_hangs(report, 100, 0)


# ---------------------------------------------------------------------------
# coverage_achieved


def test_coverage_empty_requirement_is_true(report_a):
    assert coverage_achieved(report_a, frozenset())


def test_coverage_union_of_16_inputs_for_every_profile():
    params = ChallengeParams(kind="C")
    union = bytearray(1 << 16)
    for bits in [(a, b, c, d) for a in (0, 1) for b in (0, 1) for c in (0, 1) for d in (0, 1)]:
        report = challenge_report("C", bytes(bits))
        for i, v in enumerate(report.bitmap):
            if v:
                union[i] = 1
    merged = replace(challenge_report("C"), bitmap=bytes(union))
    for profile in PROFILES.values():
        assert coverage_achieved(filter_view(profile, merged), required_edges(params))


def test_coverage_single_input_misses_half_the_arms(report_c):
    assert not coverage_achieved(report_c, required_edges(ChallengeParams(kind="C")))


def test_coverage_bounds_checked(report_c):
    with pytest.raises(ValueError):
        coverage_achieved(report_c, {1 << 20})


# ---------------------------------------------------------------------------
# score


def expected_triple(profile_name):
    return {
        "fork_aware": (True, True, True),
        "crashfile": (True, False, True),
        "parent_only": (False, False, True),
    }[profile_name]


@pytest.mark.parametrize("profile_name", sorted(PROFILES))
def test_score_reproduces_verdict_rows(profile_name):
    profile = PROFILES[profile_name]
    per_kind = {}
    for kind in "ABC":
        if kind == "C":
            inputs = [bytes((a, b, c, d)) for a in (0, 1) for b in (0, 1) for c in (0, 1) for d in (0, 1)]
        else:
            inputs = [ZERO4]
        reports = [challenge_report(kind, data) for data in inputs]
        per_kind[kind] = score(profile, kind, reports)
    c1, c2, c3 = expected_triple(profile_name)
    assert per_kind["A"].c1 is c1
    assert per_kind["B"].c2 is c2
    assert per_kind["C"].c3 is c3


def test_score_rejects_wrong_fixture(report_a):
    with pytest.raises(WrongChallenge):
        score(FORK_AWARE, "B", [report_a])
    with pytest.raises(ValueError):
        score(FORK_AWARE, "A", [])


def test_score_untagged_report_rejected():
    raw = run_sim(script_challenge("A"), ZERO4, SimPolicy(1000))
    with pytest.raises(WrongChallenge):
        score(FORK_AWARE, "A", [raw])


# ---------------------------------------------------------------------------
# monotonicity: seeing more events never loses findings


def _finding_keys(profile, report):
    view = filter_view(profile, report)
    bugs = {(f.pid, f.signal.name) for f in detect_bugs(view)}
    hangs = {f.pid for f in detect_hangs(view, report.budget_ms, 100)}
    return bugs, hangs


@pytest.mark.parametrize("seed", range(20))
def test_profile_monotonicity_on_random_trees(seed):
    rng = random.Random(seed)

    def rand_script(depth=0):
        actions = []
        for _ in range(rng.randrange(1, 4)):
            if rng.random() < 0.4 and depth < 3:
                actions.append(Fork(rand_script(depth + 1)))
            else:
                actions.append(HitEdge(rng.randrange(32)))
        roll = rng.random()
        if roll < 0.25:
            actions.append(RaiseFatal(SEGV))
        elif roll < 0.45:
            actions.append(BusyLoopForever())
        else:
            actions.append(Exit(0))
        return TargetScript(tuple(actions))

    report = run_sim(rand_script(), b"", SimPolicy(300))
    po_bugs, po_hangs = _finding_keys(PARENT_ONLY, report)
    cf_bugs, cf_hangs = _finding_keys(CRASHFILE, report)
    fa_bugs, fa_hangs = _finding_keys(FORK_AWARE, report)
    assert po_bugs <= cf_bugs <= fa_bugs
    assert po_hangs <= cf_hangs <= fa_hangs


def test_verdicts_json_round_trip():
    v = Verdicts(True, False, True)
    assert Verdicts.from_json_dict(v.to_json_dict()) == v
