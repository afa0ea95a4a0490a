"""Command-line front end.

Exit codes: 0 success, 1 assertion or expectation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .engine import items_from_program, report_jsonl, run_many
from .interleave import brute_force_cost, count_interleavings, enumerate_interleavings
from .library import Library
from .scenarios import SCENARIOS
from .scripting import ScriptSession, repl, run_script
from .server import load_config, serve_forever

EXHAUSTIVE_LIMIT = 100_000


def _library(args) -> Library:
    lib = Library.with_builtins()
    for attr in ("profiles_dir", "programs_dir"):
        path = getattr(args, attr, None)
        if path:
            lib.load_directory(path)
    return lib


def _add_dirs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profiles-dir", help="extra *.profile documents")
    parser.add_argument("--programs-dir", help="extra *.program documents")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cps", description="smartcard command-sequence probing toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repl", help="interactive card session")
    p.add_argument("--profile", required=True)
    p.add_argument("--program")
    p.add_argument("--seed", type=int, default=0)
    _add_dirs(p)

    p = sub.add_parser("run", help="execute a directive script or .seq file")
    p.add_argument("script")
    p.add_argument("--profile", required=True)
    p.add_argument("--program")
    p.add_argument("--seed", type=int, default=0)
    _add_dirs(p)

    p = sub.add_parser("serve", help="TCP daemon")
    p.add_argument("--config", required=True)

    p = sub.add_parser("enumerate", help="interleaving count and brute-force cost")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--bits", type=int)

    p = sub.add_parser("sweep", help="run all (or sampled) interleavings of two programs")
    p.add_argument("--program-a", required=True)
    p.add_argument("--program-b", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sample", type=int)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", help="write per-run reports (jsonl) to this file")
    _add_dirs(p)

    p = sub.add_parser("reproduce", help="re-run a scripted experiment")
    p.add_argument("scenario", choices=sorted(SCENARIOS))
    p.add_argument("--out", default="reports")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_repl(args) -> int:
    session = ScriptSession(_library(args), args.profile, args.program, args.seed)
    return repl(session)


def _cmd_run(args) -> int:
    session = ScriptSession(_library(args), args.profile, args.program, args.seed)
    path = Path(args.script)
    if path.suffix == ".seq":
        lines = [f"run {path}"]
    else:
        lines = path.read_text().splitlines()
    return run_script(session, lines, out=sys.stdout)


def _cmd_serve(args) -> int:
    config = load_config(Path(args.config).read_text())
    serve_forever(config)
    return 0


def _cmd_enumerate(args) -> int:
    print(count_interleavings(args.l, args.k))
    if args.bits is not None:
        print(brute_force_cost(args.l, args.k, args.bits))
    return 0


def _cmd_sweep(args) -> int:
    library = _library(args)
    program_a = library.program(args.program_a)
    program_b = library.program(args.program_b)
    profile = library.profile(program_a.card_profile_id)
    items_a = items_from_program(program_a)
    items_b = items_from_program(program_b)
    total = count_interleavings(len(items_a), len(items_b))

    if args.sample is not None:
        from .interleave import sample_interleavings

        sequences = sample_interleavings(items_a, items_b, args.sample, args.seed)
        label = f"sampled {args.sample} of {total}"
    elif total <= EXHAUSTIVE_LIMIT:
        sequences = enumerate_interleavings(items_a, items_b)
        label = f"exhaustive {total}"
    else:
        print(
            f"{total} interleavings exceed the exhaustive limit "
            f"({EXHAUSTIVE_LIMIT}); pass --sample N",
            file=sys.stderr,
        )
        return 2

    reports = run_many(profile, program_a, sequences, args.seed, workers=args.workers)
    by_verdict: dict[str, int] = {}
    for report in reports:
        by_verdict[report.verdict.kind] = by_verdict.get(report.verdict.kind, 0) + 1
    print(f"sweep {args.program_a} x {args.program_b}: {label}, seed {args.seed}")
    for kind in sorted(by_verdict):
        print(f"  {kind}: {by_verdict[kind]}")
    if args.out:
        with open(args.out, "w") as fh:
            for report in reports:
                fh.write(report_jsonl(report))
        print(f"reports written to {args.out}")
    return 0


def _cmd_reproduce(args) -> int:
    library = Library.with_builtins()
    outcome = SCENARIOS[args.scenario](library, seed=args.seed, out_dir=args.out)
    for line in outcome.lines():
        print(line)
    return 0 if outcome.passed else 1


_COMMANDS = {
    "repl": _cmd_repl,
    "run": _cmd_run,
    "serve": _cmd_serve,
    "enumerate": _cmd_enumerate,
    "sweep": _cmd_sweep,
    "reproduce": _cmd_reproduce,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
