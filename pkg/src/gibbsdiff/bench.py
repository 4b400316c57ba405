"""Budgeted evaluation of a denoiser over an instance set, with reproducible reports."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .chain import ChainConfig, ChainRunner
from .energy import objective_discrete
from .problems import ProblemInstance


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Parameters shared by the sampling subcommands.

    Exactly one of ``steps`` and ``seconds`` is set. With a wall-clock budget
    the reverse schedule of length ``schedule_T`` is repeated from the current
    state until time runs out. The budget applies to each run.
    """

    problem: str = "coloring"
    k: int = 3
    n: int = 10
    edge_prob: float = 0.3
    n_instances: int = 20
    instance_seed: int = 0
    instances: str | None = None  # JSONL written by ``gen``
    input: str | None = None  # Sudoku text file or DIMACS graph
    steps: int | None = None
    seconds: float | None = None
    schedule_T: int = 100
    runs: int = 1
    mask_strategy: str = "uniform"
    rho_min: float = 0.3
    rho_max: float = 0.9
    schedule: str = "geometric"
    tau: float = 0.1
    lam: float | None = None
    base_s: float = 1.0
    sigma_fwd: float = 1.0
    seed: int = 0
    checkpoint: str | None = None
    reference: str | None = None
    report_dir: str = "report"
    trace: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if (self.steps is None) == (self.seconds is None):
            raise ConfigError("set exactly one budget: steps or seconds")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.seconds is not None and not self.seconds > 0:
            raise ConfigError("seconds must be positive")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.schedule_T < 1:
            raise ConfigError("schedule_T must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def chain_config(self, T: int, seed: int) -> ChainConfig:
        return ChainConfig(
            T=T,
            base_s=self.base_s,
            sigma_fwd=self.sigma_fwd,
            schedule=self.schedule,
            rho_min=self.rho_min,
            rho_max=self.rho_max,
            strategy=self.mask_strategy,
            num_parallel=1,
            seed=seed,
            keep_logits=False,
            lam=self.lam,
        )


# wall-clock seconds stay out of records.csv so the file is reproducible byte for byte
RECORD_FIELDS = ["instance_id", "run", "seed", "solved", "energy", "objective", "gap", "steps"]


@dataclass
class MetricsReport:
    config: dict
    records: list[dict]
    aggregates: dict
    traces: dict = field(default_factory=dict)
    seconds_total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "aggregates": self.aggregates,
            "records": self.records,
            "traces": self.traces,
            "seconds_total": self.seconds_total,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rj = out / "report.json"
        rj.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n")
        rc = out / "records.csv"
        with open(rc, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: _fmt(r[k]) for k in RECORD_FIELDS})
        return rj, rc


def _jsonable(v):
    """NaN becomes null so the report stays strict JSON."""
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def aggregate(records: list[dict], runs: int, family: str | None = None) -> dict:
    """Summary statistics recomputable from the per-run records alone."""
    by_inst: dict[str, list[dict]] = {}
    for r in records:
        by_inst.setdefault(r["instance_id"], []).append(r)
    for iid, rs in by_inst.items():
        if len(rs) != runs:
            raise ConfigError(f"instance {iid} has {len(rs)} records, expected {runs}")
    solved, best_obj, best_energy, gaps = [], [], [], []
    for rs in by_inst.values():
        ok = [r for r in rs if r["solved"]]
        solved.append(bool(ok))
        best_energy.append(min(r["energy"] for r in rs))
        best_obj.append(min(r["objective"] for r in ok) if ok else math.nan)
        g = [r["gap"] for r in ok if not math.isnan(r["gap"])]
        gaps.append(min(g) if g else math.nan)
    n = len(by_inst)

    def nanmean(xs):
        xs = [x for x in xs if not math.isnan(x)]
        return float(sum(xs) / len(xs)) if xs else math.nan

    agg = {
        "instances": n,
        "best_of_n": runs,
        "solved_frac": float(sum(solved) / n) if n else math.nan,
        "run_solved_frac": float(sum(r["solved"] for r in records) / len(records)) if records else math.nan,
        "mean_best_energy": nanmean(best_energy),
        "mean_best_objective": nanmean(best_obj),
        "mean_gap": nanmean(gaps),
    }
    if family == "mis":
        # an instance with no feasible state keeps the empty set, which is always independent
        sizes = [-o if not math.isnan(o) else 0.0 for o in best_obj]
        agg["mean_set_size"] = float(sum(sizes) / n) if n else math.nan
    return agg


def load_reference(path) -> dict[str, float]:
    """Reference objective values keyed by instance id (JSON object or ``id,value`` CSV)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"reference file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        return {str(k): float(v) for k, v in json.loads(text).items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = [x.strip() for x in line.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{p}:{lineno}: expected 'instance_id,value'")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ConfigError(f"{p}:{lineno}: bad value {parts[1]!r}") from None
    return out


def _chain_seed(seed: int, index: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, index, run]).generate_state(1)[0])


def _best_of_chain(runner: ChainRunner, b: int):
    """Lowest-energy feasible state visited by chain ``b`` (or lowest-energy state if none)."""
    tr = runner.traj
    E = np.array([e[b] for e in tr.energies])
    feas = np.array([f[b] for f in tr.feasible])
    if feas.any():
        idx = int(np.flatnonzero(feas)[np.argmin(E[feas])])
    else:
        idx = int(np.argmin(E))
    return idx, bool(feas.any())


def run_chain(denoiser, instance: ProblemInstance, config: RunConfig, seed: int):
    """One reverse chain within the budget; returns ``(runner, steps used)``.

    Each run owns its seed, so run ``b`` is the same chain whatever the total
    number of runs, and best-of-N can only improve as N grows.
    """
    if config.steps is not None:
        T = config.steps
        runner = ChainRunner(denoiser, instance, config.chain_config(T, seed))
        for t in range(T, 0, -1):
            runner.step(t)
        return runner, T
    T = config.schedule_T
    runner = ChainRunner(denoiser, instance, config.chain_config(T, seed))
    deadline = time.monotonic() + config.seconds
    used, t = 0, T
    while time.monotonic() < deadline:
        runner.step(t)
        used += 1
        t = T if t == 1 else t - 1
    return runner, used


def evaluate(denoiser, instances: list[ProblemInstance], config: RunConfig) -> MetricsReport:
    """Run ``config.runs`` chains per instance and collect per-run records."""
    config.validate()
    refs = load_reference(config.reference) if config.reference else None
    records, traces = [], {}
    t_start = time.monotonic()
    seen = set()
    for i, inst in enumerate(instances):
        iid = inst.instance_id or f"instance-{i}"
        if iid in seen:
            iid = f"{iid}#{i}"
        seen.add(iid)
        if refs is not None and iid not in refs:
            raise ConfigError(f"no reference value for instance {iid!r}")
        for b in range(config.runs):
            seed = _chain_seed(config.seed, i, b)
            t_run = time.monotonic()
            runner, used = run_chain(denoiser, inst, config, seed)
            elapsed = time.monotonic() - t_run
            tr = runner.traj
            idx, solved = _best_of_chain(runner, 0)
            assign = tr.assignments[idx][0]
            obj = float(objective_discrete(assign[None], inst)[0])
            gap = abs(obj - refs[iid]) if (refs is not None and solved) else math.nan
            records.append(
                {
                    "instance_id": iid,
                    "run": b,
                    "seed": seed,
                    "solved": solved,
                    "energy": float(tr.energies[idx][0]),
                    "objective": obj,
                    "gap": gap,
                    "steps": used,
                    "seconds": elapsed,
                    "assignment": [int(v) for v in assign],
                }
            )
            if config.trace:
                traces[f"{iid}/{b}"] = [float(e[0]) for e in tr.energies]
    family = instances[0].family if instances else None
    return MetricsReport(
        config=asdict(config),
        records=records,
        aggregates=aggregate(records, config.runs, family),
        traces=traces,
        seconds_total=time.monotonic() - t_start,
    )


def best_objective_of_n(records: list[dict], n: int) -> dict[str, float]:
    """Per-instance best feasible objective among the first ``n`` runs."""
    out: dict[str, float] = {}
    for r in records:
        if r["run"] >= n:
            continue
        cur = out.get(r["instance_id"], math.inf)
        if r["solved"]:
            cur = min(cur, r["objective"])
        out[r["instance_id"]] = cur
    return out
