"""
Scenario runners behind the command line.

Every simulated scenario runs ``trials_per_point`` independent trials per
sweep value. Trial ``t`` of point ``i`` is seeded with
``SeedSequence([seed, i, t])``, so the same (config, seed, scenario) always
produces the same rows, and paired arms (PS/SP, with/without distillation)
see identical seed streams.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import __version__
from .bell import purification_curve
from .netmodel import NetworkConfig, Ordering, Policy
from .protocols import TrialRecord, run_trial


class ScenarioKind(str, Enum):
    NODE_SWEEP = "node-sweep"
    MEMORY_SWEEP = "memory-sweep"
    ORDERING_SWEEP = "ordering-sweep"
    DISTIL_ONE_ROUND = "distil-one-round"
    PURIFICATION_CURVE = "purification-curve"


DEFAULT_SWEEPS: dict[ScenarioKind, tuple[float, ...]] = {
    ScenarioKind.NODE_SWEEP: tuple(range(2, 13)),
    ScenarioKind.MEMORY_SWEEP: (2, 6, 10, 14, 18),
    ScenarioKind.ORDERING_SWEEP: (10, 25, 50, 75, 100),
    ScenarioKind.PURIFICATION_CURVE: tuple(round(0.05 * k, 10) for k in range(16)),
}

DEFAULT_TRIALS = 100


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    sweep_values: tuple[float, ...] = ()
    trials_per_point: int = DEFAULT_TRIALS
    base_config: NetworkConfig | None = None
    seed: int = 0
    rounds: int = 3  # purification curve only
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        values = tuple(self.sweep_values) or self._default_values()
        object.__setattr__(self, "sweep_values", values)
        if not values:
            raise ValueError("sweep values must be non-empty")
        if list(values) != sorted(values):
            raise ValueError(f"sweep values must be sorted, got {values}")
        if self.trials_per_point < 1:
            raise ValueError("trials_per_point must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.kind is not ScenarioKind.PURIFICATION_CURVE and self.base_config is None:
            raise ValueError(f"scenario {self.kind.value} needs a network config")

    def _default_values(self) -> tuple[float, ...]:
        if self.kind is ScenarioKind.DISTIL_ONE_ROUND:
            return (self.base_config.distances_km[0],) if self.base_config is not None else ()
        return DEFAULT_SWEEPS[self.kind]


@dataclass
class ResultRow:
    sweep_value: float
    mean_fidelity: float
    std_fidelity: float
    num_successes: int
    num_trials: int
    mean_completion_ns: float
    series: str = ""


@dataclass
class TrialOutcome:
    series: str
    sweep_value: float
    trial: int
    seed: int
    record: TrialRecord


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    header: list[str]
    rows: list[list]
    trials: list[TrialOutcome] = field(default_factory=list)
    result_rows: list[ResultRow] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def trial_seed(seed: int, point: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, point, trial]).generate_state(1, np.uint64)[0])


# -- config builders -----------------------------------------------------------


def node_sweep_config(base: NetworkConfig, num_nodes: int) -> NetworkConfig:
    """Equally spaced chain of ``num_nodes`` over the base config's total length."""
    n = int(num_nodes)
    if n < 2:
        raise ValueError(f"a chain needs at least 2 nodes, got {n}")
    total = sum(base.distances_km)
    return base.replace(num_switches=n - 2, distances_km=[total / (n - 1)] * (n - 1))


def memory_sweep_config(base: NetworkConfig, m: int) -> NetworkConfig:
    d = base.distances_km[0]
    return base.replace(num_switches=1, distances_km=[d, d], num_memory_positions=int(m), policy=Policy.BEST)


def ordering_config(base: NetworkConfig, distance_km: float, ordering: Ordering, rounds: int) -> NetworkConfig:
    return base.replace(
        num_switches=1, distances_km=[distance_km, distance_km], ordering=ordering, distillation_rounds=rounds
    )


# -- trial execution -----------------------------------------------------------


def _run_one(args) -> TrialRecord:
    config, seed = args
    return run_trial(config, seed=seed).records[0]


def run_point(
    config: NetworkConfig,
    seed: int,
    point: int,
    trials: int,
    workers: int = 1,
    trace: TextIO | None = None,
) -> list[tuple[int, TrialRecord]]:
    """All trials of one sweep point, in trial order."""
    seeds = [trial_seed(seed, point, t) for t in range(trials)]
    if trace is not None:
        records = []
        for t, s in enumerate(seeds):
            trace.write(f"# point={point} trial={t} seed={s}\n")
            records.append(run_trial(config, seed=s, trace=trace).records[0])
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, [(config, s) for s in seeds], chunksize=max(1, trials // (4 * workers))))
    else:
        records = [_run_one((config, s)) for s in seeds]
    return list(zip(seeds, records))


def summarize(value: float, records: Sequence[TrialRecord], series: str = "") -> ResultRow:
    """Incomplete or failed trials count in ``num_trials`` only."""
    ok = [r for r in records if r.succeeded]
    f = np.array([r.end_to_end_fidelity for r in ok], dtype=float)
    mean = float(f.mean()) if len(f) else float("nan")
    std = float(f.std(ddof=1)) if len(f) > 1 else 0.0
    t = float(np.mean([r.completion_time_ns for r in ok])) if ok else float("nan")
    return ResultRow(value, mean, std, len(ok), len(records), t, series)


ROW_HEADER = ["sweep_value", "mean_fidelity", "std_fidelity", "num_successes", "num_trials", "mean_completion_ns"]


def _row_values(r: ResultRow) -> list:
    return [r.sweep_value, r.mean_fidelity, r.std_fidelity, r.num_successes, r.num_trials, r.mean_completion_ns]


def _sweep(spec: ScenarioSpec, build, trace=None) -> ScenarioResult:
    result = ScenarioResult(spec, list(ROW_HEADER), [])
    for i, v in enumerate(spec.sweep_values):
        cfg = build(v)
        pairs = run_point(cfg, spec.seed, i, spec.trials_per_point, spec.workers, trace)
        for t, (s, rec) in enumerate(pairs):
            result.trials.append(TrialOutcome("", v, t, s, rec))
        row = summarize(v, [rec for _, rec in pairs])
        result.result_rows.append(row)
        result.rows.append(_row_values(row))
    return result


def run_node_sweep(spec: ScenarioSpec, trace=None) -> ScenarioResult:
    return _sweep(spec, lambda n: node_sweep_config(spec.base_config, int(n)), trace)


def run_memory_sweep(spec: ScenarioSpec, trace=None) -> ScenarioResult:
    return _sweep(spec, lambda m: memory_sweep_config(spec.base_config, int(m)), trace)


def run_ordering_sweep(spec: ScenarioSpec, trace=None) -> ScenarioResult:
    """PS and SP per distance on identical seeds; rows carry a ``series`` column."""
    base = spec.base_config
    rounds = base.distillation_rounds or 1
    result = ScenarioResult(spec, ["series", *ROW_HEADER, "distillation_successes"], [])
    for series in (Ordering.PS, Ordering.SP):
        for i, d in enumerate(spec.sweep_values):
            cfg = ordering_config(base, d, series, rounds)
            pairs = run_point(cfg, spec.seed, i, spec.trials_per_point, spec.workers, trace)
            recs = [rec for _, rec in pairs]
            for t, (s, rec) in enumerate(pairs):
                result.trials.append(TrialOutcome(series.value, d, t, s, rec))
            row = summarize(d, recs, series.value)
            result.result_rows.append(row)
            result.rows.append([series.value, *_row_values(row), sum(r.distillation_successes for r in recs)])
    return result


def run_distillation_comparison(spec: ScenarioSpec, trace=None) -> ScenarioResult:
    """No distillation vs one round on a 3-node chain, per distance, paired seeds."""
    base = spec.base_config
    header = [
        "sweep_value", "rounds", "mean_fidelity", "std_fidelity", "p50", "p90", "p99",
        "num_successes", "num_trials", "mean_completion_ns", "mean_pairs_consumed", "extra_pairs_per_success",
    ]  # fmt: skip
    result = ScenarioResult(spec, header, [])
    for i, d in enumerate(spec.sweep_values):
        per_arm = {}
        for rounds in (0, 1):
            cfg = ordering_config(base, d, base.ordering, rounds)
            pairs = run_point(cfg, spec.seed, i, spec.trials_per_point, spec.workers, trace)
            per_arm[rounds] = pairs
            for t, (s, rec) in enumerate(pairs):
                result.trials.append(TrialOutcome(f"r{rounds}", d, t, s, rec))
        base_pairs = _mean_pairs(per_arm[0])
        for rounds in (0, 1):
            recs = [rec for _, rec in per_arm[rounds]]
            row = summarize(d, recs, f"r{rounds}")
            result.result_rows.append(row)
            ok = np.array([r.end_to_end_fidelity for r in recs if r.succeeded], dtype=float)
            pct = np.percentile(ok, [50, 90, 99]) if len(ok) else [float("nan")] * 3
            used = _mean_pairs(per_arm[rounds])
            result.rows.append(
                [d, rounds, row.mean_fidelity, row.std_fidelity, *map(float, pct), row.num_successes,
                 row.num_trials, row.mean_completion_ns, used, used - base_pairs]
            )  # fmt: skip
    return result


def _mean_pairs(pairs) -> float:
    ok = [rec.pairs_consumed for _, rec in pairs if rec.succeeded]
    return float(np.mean(ok)) if ok else float("nan")


def run_purification_curve(spec: ScenarioSpec, trace=None) -> ScenarioResult:
    rows = purification_curve(spec.sweep_values, spec.rounds)
    return ScenarioResult(spec, ["p", "round", "fidelity"], [list(r) for r in rows])


RUNNERS = {
    ScenarioKind.NODE_SWEEP: run_node_sweep,
    ScenarioKind.MEMORY_SWEEP: run_memory_sweep,
    ScenarioKind.ORDERING_SWEEP: run_ordering_sweep,
    ScenarioKind.DISTIL_ONE_ROUND: run_distillation_comparison,
    ScenarioKind.PURIFICATION_CURVE: run_purification_curve,
}


def run_scenario(spec: ScenarioSpec, trace: TextIO | None = None) -> ScenarioResult:
    return RUNNERS[spec.kind](spec, trace)


# -- output --------------------------------------------------------------------

DUMP_HEADER = [
    "series", "sweep_value", "trial", "seed", "succeeded", "fidelity", "completion_ns", "swaps",
    "distillation_attempts", "distillation_successes", "pairs_consumed", "corrections", "failure_reason",
]  # fmt: skip


def write_trial_dump(result: ScenarioResult, fh: TextIO) -> None:
    """Per-trial records; fidelities at full precision so statistics can be recomputed."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(DUMP_HEADER)
    for t in result.trials:
        r = t.record
        writer.writerow(
            [t.series, _fmt(float(t.sweep_value)), t.trial, t.seed, int(r.succeeded), repr(float(r.end_to_end_fidelity)),
             r.completion_time_ns, r.swaps_performed, r.distillation_attempts, r.distillation_successes,
             r.pairs_consumed, r.corrections_consumed, r.failure_reason]
        )  # fmt: skip


def metadata(result: ScenarioResult) -> dict:
    spec = result.spec
    return {
        "scenario": spec.kind.value,
        "seed": spec.seed,
        "trials_per_point": spec.trials_per_point,
        "sweep_values": list(spec.sweep_values),
        "rounds": spec.rounds if spec.kind is ScenarioKind.PURIFICATION_CURVE else None,
        "config_sha256": spec.base_config.digest() if spec.base_config is not None else None,
        "config": spec.base_config.to_dict() if spec.base_config is not None else None,
        "code_version": __version__,
    }


def write_outputs(result: ScenarioResult, out: Path, dump: Path | None = None) -> Path:
    """Write the CSV and its ``.meta.json`` sidecar; returns the sidecar path."""
    out = Path(out)
    out.write_text(result.csv_text())
    meta = out.with_name(out.name + ".meta.json")
    meta.write_text(json.dumps(metadata(result), indent=2, sort_keys=True) + "\n")
    if dump is not None:
        with open(dump, "w", newline="") as fh:
            write_trial_dump(result, fh)
    return meta


def values_from_arg(text: str | None) -> tuple[float, ...]:
    if not text:
        return ()
    out = []
    for part in text.split(","):
        v = float(part)
        out.append(int(v) if v.is_integer() and "." not in part else v)
    return tuple(out)


def series_rows(result: ScenarioResult, series: str) -> list[ResultRow]:
    return [r for r in result.result_rows if r.series == series]

