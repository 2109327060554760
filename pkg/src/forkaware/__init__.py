"""forkaware: a fork-aware execution monitor and fuzzing harness.

Detects bugs and hangs in any process of a forked tree, aggregates edge
coverage across the tree, and scores monitor profiles (parent-only,
crash-file, fork-aware) against three forking challenge programs.
"""

from .challenge_layout import ChallengeParams, InvalidParams
from .coverage import (
    MAP_SIZE,
    Novelty,
    SharedCoverageMap,
    bucketize,
    count_edges,
    create_shared,
    has_new_bits,
    merge,
)
from .detectors import (
    CRASHFILE,
    FORK_AWARE,
    PARENT_ONLY,
    PROFILES,
    BugFinding,
    HangFinding,
    MonitorProfile,
    Verdicts,
    coverage_achieved,
    detect_bugs,
    detect_hangs,
    filter_view,
    score,
)
from .evaluation import Scorecard, ScoreRow, evaluate, render
from .fuzzer import CampaignStats, Rng, TestCase, mutate, run_campaign, select_next
from .process_model import (
    ExecutionReport,
    IllegalTransition,
    ProcessNode,
    ProcessTree,
    SignalKind,
    UnknownPid,
    apply_event,
    live_descendants,
    tree_path,
)
from .sim_backend import SimPolicy, TargetScript, run_sim, script_challenge
from .tracer_os import SpawnSpec, TraceHandle, drain, kill_tree, next_event, spawn_traced

__version__ = "0.1.0"
