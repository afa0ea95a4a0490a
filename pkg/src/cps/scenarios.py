"""Scripted experiment reproductions, self-asserting.

Each scenario runs a fixed setup and checks its expected outcome, so a
behavioral drift in the simulator fails loudly instead of silently
producing different reports.

    fig1  the challenge pair dropped into the five-step program at every
          point: the host program never notices, each run lands clean with
          exactly two anomaly records
    fig2  the tolerated merge: ten interloper/modified commands inside the
          ten-step sequence, every line answers success, ten anomalies
    fig3  the destructive merge: a silently accepted erase command kills
          the card's signing function; the next certified step errors and
          a full rerun keeps failing at the same step, replacement needed
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .card import Card
from .engine import (
    RunReport,
    StepClass,
    items_from_program,
    load_sequence,
    render_columns,
    report_jsonl,
    run_sequence,
)
from .interleave import enumerate_interleavings
from .library import Library

FIG3_RETRIES = 10


@dataclass
class ScenarioOutcome:
    name: str
    checks: list[tuple[bool, str]] = field(default_factory=list)
    reports: list[RunReport] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks)

    def check(self, ok: bool, label: str) -> None:
        self.checks.append((bool(ok), label))

    def lines(self) -> list[str]:
        out = [f"{'PASS' if ok else 'FAIL'}: {label}" for ok, label in self.checks]
        out.extend(f"INFO: {note}" for note in self.notes)
        out.append(f"{self.name}: {'ok' if self.passed else 'FAILED'}")
        return out


def _write_reports(outcome: ScenarioOutcome, out_dir: str | Path | None) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, report in enumerate(outcome.reports):
        stem = outcome.name if len(outcome.reports) == 1 else f"{outcome.name}-{index:02d}"
        (out_dir / f"{stem}.report.jsonl").write_text(report_jsonl(report))
        (out_dir / f"{stem}.txt").write_text(render_columns(report))
    (out_dir / f"{outcome.name}.checks.txt").write_text(
        "\n".join(outcome.lines()) + "\n"
    )


def reproduce_fig1(
    library: Library, seed: int = 0, out_dir: str | Path | None = None
) -> ScenarioOutcome:
    """Challenge pair into the five-step program, all placements.

    The six placements keeping the pair adjacent are asserted one by one;
    the remaining split-pair merges are executed and reported unasserted.
    """
    outcome = ScenarioOutcome("fig1")
    profile = library.profile("infineon")
    reference = library.program("infineon_P2")
    pair = items_from_program(library.program("challenge_pair"))
    host = items_from_program(reference)

    for k in range(len(host) + 1):
        items = host[:k] + pair + host[k:]
        report = run_sequence(profile, reference, items, seed)
        outcome.reports.append(report)
        errors = sum(1 for r in report.records if r.classification is StepClass.ERROR)
        anomalies = report.anomaly_count
        outcome.check(
            errors == 0 and anomalies == 2 and report.verdict.is_completed,
            f"pair adjacent after host step {k}: clean run, 2 anomalies",
        )

    split = 0
    split_clean = 0
    for merged in enumerate_interleavings(host, pair):
        pair_slots = [i for i, item in enumerate(merged) if item in pair]
        if pair_slots[1] == pair_slots[0] + 1:
            continue  # adjacent placements already asserted above
        split += 1
        report = run_sequence(profile, reference, merged, seed)
        errors = sum(1 for r in report.records if r.classification is StepClass.ERROR)
        if errors == 0 and report.anomaly_count == 2:
            split_clean += 1
    outcome.notes.append(
        f"split-pair placements (unasserted): {split_clean}/{split} clean with 2 anomalies"
    )
    _write_reports(outcome, out_dir)
    return outcome


def reproduce_fig2(
    library: Library, seed: int = 0, out_dir: str | Path | None = None
) -> ScenarioOutcome:
    outcome = ScenarioOutcome("fig2")
    profile = library.profile("incrypto")
    reference = library.program("incrypto_P1")
    items = load_sequence(library.sequence_text("fig2"))
    report = run_sequence(profile, reference, items, seed)
    outcome.reports.append(report)

    outcome.check(len(report.records) == 16, "16 commands executed")
    outcome.check(
        all(r.response.is_success for r in report.records),
        "every step answered success",
    )
    outcome.check(
        report.verdict.kind == "completed-with-anomalies"
        and report.verdict.anomalies == 10,
        "verdict CompletedWithAnomalies(10)",
    )
    outcome.check(not report.final_card_destroyed, "card intact")
    _write_reports(outcome, out_dir)
    return outcome


def reproduce_fig3(
    library: Library, seed: int = 0, out_dir: str | Path | None = None
) -> ScenarioOutcome:
    outcome = ScenarioOutcome("fig3")
    profile = library.profile("incrypto")
    reference = library.program("incrypto_P1")
    items = load_sequence(library.sequence_text("fig3"))
    erase_index = next(
        i for i, item in enumerate(items) if item.source.program_id == "mutation"
    )
    restore_index = erase_index + 1  # node 1,3 follows the erase

    card = Card(profile, seed)
    report = run_sequence(profile, reference, items, seed, card=card)
    outcome.reports.append(report)

    outcome.check(
        report.records[erase_index].response.is_success
        and report.records[erase_index].classification is StepClass.ANOMALY,
        "erase command accepted silently",
    )
    outcome.check(
        report.records[restore_index].classification is StepClass.ERROR,
        "next certified step (1,3) errors",
    )
    outcome.check(
        report.verdict.kind == "errored-at"
        and report.verdict.error_index == restore_index,
        f"verdict ErroredAt({restore_index})",
    )
    outcome.check(report.final_card_destroyed, "signing function destroyed")

    certified = items_from_program(reference)
    retries_failed = 0
    for _ in range(FIG3_RETRIES):
        retry = run_sequence(profile, reference, certified, seed, card=card)
        if retry.verdict.kind == "errored-at" and retry.verdict.error_index == 2:
            retries_failed += 1
    outcome.check(
        retries_failed == FIG3_RETRIES,
        f"{FIG3_RETRIES}/{FIG3_RETRIES} certified reruns fail at step 1,3",
    )
    _write_reports(outcome, out_dir)
    return outcome


SCENARIOS = {
    "fig1": reproduce_fig1,
    "fig2": reproduce_fig2,
    "fig3": reproduce_fig3,
}
