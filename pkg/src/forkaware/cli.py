"""Command-line entry point: score, fuzz, gen, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import challenge_layout as layout
from . import evaluation
from .detectors import PROFILES
from .fuzzer import TestCase, run_campaign
from .tracer_os import tracing_supported

DEFAULT_SEED_INPUT = b"\x00\x00\x00\x00"


def _comma_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forkaware",
        description="Fork-aware execution monitor: evaluate monitor profiles "
        "against forking challenge programs and fuzz them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="run the evaluation matrix and render the scorecard")
    p_score.add_argument("--profiles", type=_comma_list, default=sorted(PROFILES))
    p_score.add_argument("--challenges", type=_comma_list, default=list(layout.KINDS))
    p_score.add_argument("--backend", choices=["sim", "real", "both"], default="sim")
    p_score.add_argument("--budget-ms", type=int, default=1000)
    p_score.add_argument("--grace-ms", type=int, default=100)
    p_score.add_argument("--reps", type=int, default=3)
    p_score.add_argument("--format", choices=["json", "markdown"], default="markdown")
    p_score.add_argument("--out", type=Path, default=None)
    p_score.add_argument("--challenges-dir", type=Path, default=None)

    p_fuzz = sub.add_parser("fuzz", help="run a coverage-guided campaign against a challenge")
    p_fuzz.add_argument("--challenge", choices=list(layout.KINDS), default=layout.KIND_C)
    p_fuzz.add_argument("--backend", choices=["sim", "real"], default="sim")
    p_fuzz.add_argument("--profile", choices=sorted(PROFILES), default="fork_aware")
    p_fuzz.add_argument("--budget-execs", type=int, default=500)
    p_fuzz.add_argument("--seed", type=int, default=42, help="rng seed")
    p_fuzz.add_argument("--budget-ms", type=int, default=1000)
    p_fuzz.add_argument("--grace-ms", type=int, default=100)
    p_fuzz.add_argument("--seeds", type=Path, nargs="*", default=None, help="seed input files")
    p_fuzz.add_argument("--out", type=Path, default=None, help="directory for corpus and stats")
    p_fuzz.add_argument("--challenges-dir", type=Path, default=None)

    p_gen = sub.add_parser("gen", help="emit a challenge program source")
    p_gen.add_argument("--kind", choices=list(layout.KINDS), required=True)
    p_gen.add_argument("--fork-depth", type=int, default=1)
    p_gen.add_argument("--conditionals", type=int, default=4)
    p_gen.add_argument("--loop-in", choices=["child", "grandchild"], default="child")
    p_gen.add_argument("--out", type=Path, default=None)
    p_gen.add_argument("--challenges-dir", type=Path, default=None)

    p_report = sub.add_parser("report", help="render a stored scorecard JSON")
    p_report.add_argument("--in", dest="infile", type=Path, required=True)
    p_report.add_argument("--format", choices=["json", "markdown"], default="markdown")
    p_report.add_argument("--out", type=Path, default=None)

    return parser


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _cmd_score(args) -> int:
    backends = ["sim", "real"] if args.backend == "both" else [args.backend]
    scorecard = evaluation.evaluate(
        profiles=args.profiles,
        challenges=args.challenges,
        backends=backends,
        budget_ms=args.budget_ms,
        grace_ms=args.grace_ms,
        reps=args.reps,
        challenges_dir=args.challenges_dir,
    )
    _emit(evaluation.render(scorecard, args.format), args.out)
    return 0 if evaluation.fork_aware_all_green(scorecard) else 1


def _make_target(args):
    params = layout.ChallengeParams(kind=args.challenge)
    backend = args.backend
    if backend == "real":
        ok, reason = tracing_supported()
        challenges_dir = evaluation.find_challenges_dir(args.challenges_dir)
        if not ok or challenges_dir is None:
            why = reason if not ok else "challenge generator package not found"
            print(f"warning: real backend unavailable ({why}); falling back to sim", file=sys.stderr)
            backend = "sim"
        else:
            import tempfile

            build_dir = Path(tempfile.mkdtemp(prefix="forkaware_build_"))
            binary = evaluation.build_challenge(params, build_dir, challenges_dir)
            return evaluation.RealChallengeTarget(binary, params, args.budget_ms, args.grace_ms)
    return evaluation.SimChallengeTarget(params, args.budget_ms, args.grace_ms)


def _cmd_fuzz(args) -> int:
    target = _make_target(args)
    if args.seeds:
        seeds = [path.read_bytes() for path in args.seeds]
    else:
        seeds = [DEFAULT_SEED_INPUT]

    sink = None
    if args.out is not None:
        corpus_dir = args.out / "corpus"
        corpus_dir.mkdir(parents=True, exist_ok=True)

        def sink(case: TestCase) -> None:
            (corpus_dir / f"id_{case.id:06d}").write_bytes(case.data)

    stats = run_campaign(
        target=target,
        seeds=seeds,
        budget_execs=args.budget_execs,
        rng_seed=args.seed,
        profile=PROFILES[args.profile],
        corpus_sink=sink,
    )
    text = stats.to_json() + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        (args.out / "stats.json").write_text(text)
    return 0


def _cmd_gen(args) -> int:
    params = layout.ChallengeParams(
        kind=args.kind,
        fork_depth=args.fork_depth,
        conditionals=args.conditionals,
        loop_in=args.loop_in,
    )
    challenges_dir = evaluation.find_challenges_dir(args.challenges_dir)
    if challenges_dir is None:
        print(
            "error: challenge generator package not found "
            f"(looked for genchallenge.c; set {evaluation.CHALLENGES_DIR_ENV_VAR} or --challenges-dir)",
            file=sys.stderr,
        )
        return 2
    _emit(evaluation.generate_source(params, challenges_dir), args.out)
    return 0


def _cmd_report(args) -> int:
    scorecard = evaluation.Scorecard.from_json_dict(json.loads(args.infile.read_text()))
    _emit(evaluation.render(scorecard, args.format), args.out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"score": _cmd_score, "fuzz": _cmd_fuzz, "gen": _cmd_gen, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except (ValueError, layout.InvalidParams, evaluation.BuildFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
