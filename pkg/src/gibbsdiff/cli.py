"""Command-line entry point: ``gibbsdiff <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .baselines import qubo_from_coloring, qubo_from_sudoku
from .bench import ConfigError, RunConfig, _jsonable, evaluate
from .chain import dump_trajectory, sample_chain
from .denoisers import (
    AttentionDenoiser,
    AttentionDenoiserConfig,
    DenoiserError,
    OracleGibbsDenoiser,
    load_checkpoint,
)
from .energy import energy_discrete_batch
from .masking import STRATEGIES, PolicyError
from .problems import (
    FAMILIES,
    InstanceError,
    gen_graph_instance,
    graph_instance,
    instance_from_dict,
    load_dimacs,
    read_sudoku_file,
    write_dimacs,
)
from .projection import ProjectionError, export_trajectory
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("gibbsdiff")

# (rho_max, rho_min) pairs of the mask-schedule sweep
MASK_GRID = [
    (0.3, 0.1),
    (0.5, 0.1),
    (0.5, 0.3),
    (0.7, 0.1),
    (0.7, 0.3),
    (0.7, 0.5),
    (0.9, 0.1),
    (0.9, 0.3),
    (0.9, 0.5),
    (0.9, 0.7),
]

TRAIN_KEYS = {
    "epochs": int,
    "steps_per_epoch": int,
    "batch_size": int,
    "lr": float,
    "t_unroll": int,
    "estimator": str,
    "entropy_weight": float,
    "layers": int,
    "heads": int,
    "dim": int,
    "dropout": float,
    "holdout": int,
    "time_limit": float,
}
TRAIN_DEFAULTS = {
    "epochs": 20,
    "steps_per_epoch": 50,
    "batch_size": 64,
    "lr": 1e-3,
    "t_unroll": 5,
    "estimator": "unrolled",
    "entropy_weight": 1.0,
    "layers": 2,
    "heads": 2,
    "dim": 32,
    "dropout": 0.0,
    "holdout": 50,
    "time_limit": None,
}
EXTRA_KEYS = {"out", "n_background", "corruption_lo", "corruption_hi", "target", "grid", "qubo", "dimacs", "verbose", "config"}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("problem")
    g.add_argument("--problem", choices=FAMILIES)
    g.add_argument("--k", type=int, help="number of colors (coloring)")
    g.add_argument("--n", type=int, help="number of graph vertices")
    g.add_argument("--edge-prob", type=float, help="Erdos-Renyi edge probability")
    g.add_argument("--n-instances", type=int)
    g.add_argument("--instance-seed", type=int)
    g.add_argument("--instances", help="JSONL instance file written by 'gen'")
    g.add_argument("--input", help="Sudoku text file or DIMACS graph")
    g.add_argument("--lam", type=float, help="penalty weight override")
    s = p.add_argument_group("sampling")
    b = s.add_mutually_exclusive_group()
    b.add_argument("--steps", type=int, help="reverse-step budget")
    b.add_argument("--seconds", type=float, help="wall-clock budget per run")
    s.add_argument("--schedule-T", type=int, help="schedule length used with --seconds")
    s.add_argument("--runs", type=int, help="independent runs per instance")
    s.add_argument("--mask-strategy", choices=STRATEGIES)
    s.add_argument("--rho-min", type=float)
    s.add_argument("--rho-max", type=float)
    s.add_argument("--schedule", choices=("linear", "geometric"))
    s.add_argument("--tau", type=float, help="temperature of the exact Gibbs oracle")
    s.add_argument("--base-s", type=float)
    s.add_argument("--sigma-fwd", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint", help="trained model; the exact Gibbs oracle is used when absent")
    s.add_argument("--reference", help="reference objective values (JSON or id,value CSV)")
    s.add_argument("--report-dir")
    s.add_argument("--trace", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file whose keys mirror the flags")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--steps-per-epoch", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--t-unroll", type=int)
    g.add_argument("--estimator", choices=("unrolled", "single_step"))
    g.add_argument("--entropy-weight", type=float)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--holdout", type=int, help="held-out instances scored after each epoch")
    g.add_argument("--time-limit", type=float, help="stop training after this many seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gibbsdiff", description="Blocked Gibbs diffusion solver for discrete problems.")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("train", help="train an attention denoiser on random instances", **kw)
    _run_flags(p)
    _train_flags(p)

    p = sub.add_parser("sample", help="sample chains and write the best state of each run", **kw)
    _run_flags(p)

    p = sub.add_parser("eval", help="evaluate under a step or wall-clock budget", **kw)
    _run_flags(p)

    p = sub.add_parser("ablate", help="sweep mask schedules, mask strategies or the entropy term", **kw)
    _run_flags(p)
    _train_flags(p)
    p.add_argument("--grid", choices=("mask", "strategy", "entropy"), required=True)

    p = sub.add_parser("export-traj", help="project trajectories onto a 2D PCA map", **kw)
    _run_flags(p)
    p.add_argument("--target", help="target assignment as a digit string or comma list")
    p.add_argument("--n-background", type=int)
    p.add_argument("--corruption-lo", type=float)
    p.add_argument("--corruption-hi", type=float)

    p = sub.add_parser("gen", help="generate random instances as JSONL", **kw)
    _run_flags(p)
    p.add_argument("--out", help="output JSONL path (default: <report-dir>/instances.jsonl)")
    p.add_argument("--qubo", action="store_true", help="also write QUBO triplet files")
    p.add_argument("--dimacs", action="store_true", help="also write DIMACS graph files")
    return parser


def _merged(args: argparse.Namespace) -> tuple[RunConfig, dict, dict]:
    """Defaults, then --config JSON, then explicit flags."""
    doc: dict = {}
    if "config" in args:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    merged = {**doc, **flags}
    if "seconds" in flags and "steps" not in flags:
        merged.pop("steps", None)
    if "steps" in flags and "seconds" not in flags:
        merged.pop("seconds", None)
    run_keys = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(merged) - run_keys - set(TRAIN_KEYS) - EXTRA_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    run = {k: v for k, v in merged.items() if k in run_keys}
    if "steps" not in run and "seconds" not in run:
        run["steps"] = 100
    trn = {**TRAIN_DEFAULTS, **{k: v for k, v in merged.items() if k in TRAIN_KEYS}}
    extra = {k: v for k, v in merged.items() if k in EXTRA_KEYS}
    return RunConfig(**run), trn, extra


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


def load_instances(cfg: RunConfig) -> list:
    if cfg.instances:
        path = Path(cfg.instances)
        if not path.exists():
            raise ConfigError(f"instance file not found: {path}")
        out = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if line.strip():
                try:
                    out.append(instance_from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, InstanceError) as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return out
    if cfg.input:
        path = Path(cfg.input)
        if not path.exists():
            raise ConfigError(f"input file not found: {path}")
        if cfg.problem == "sudoku":
            return read_sudoku_file(path)
        n, edges = load_dimacs(path)
        return [graph_instance(cfg.problem, n, edges, k=cfg.k, lam=cfg.lam, instance_id=path.stem)]
    if cfg.problem == "sudoku":
        raise ConfigError("sudoku needs --input or --instances")
    return [
        gen_graph_instance(cfg.problem, cfg.n, cfg.edge_prob, cfg.instance_seed + i, k=cfg.k, lam=cfg.lam)
        for i in range(cfg.n_instances)
    ]


def load_denoiser(cfg: RunConfig, instances):
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}")
        model, _ = load_checkpoint(path)
        if instances and model.config.K != instances[0].K:
            raise ConfigError(f"checkpoint was trained with K={model.config.K}, instances have K={instances[0].K}")
        return model
    if len(instances) != 1:
        return _OracleSet(cfg)
    return OracleGibbsDenoiser(instances[0], cfg.tau, cfg.lam)


class _OracleSet:
    """Exact Gibbs oracle that follows whichever instance the context carries."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._cache: dict[int, OracleGibbsDenoiser] = {}

    def predict(self, Z, mask, t, ctx, rng=None):
        key = id(ctx.instance)
        if key not in self._cache:
            self._cache = {key: OracleGibbsDenoiser(ctx.instance, self.cfg.tau, self.cfg.lam)}
        return self._cache[key].predict(Z, mask, t, ctx, rng)


def _model_config(trn: dict, K: int, positions_dims: int) -> AttentionDenoiserConfig:
    return AttentionDenoiserConfig(
        K=K,
        layers=trn["layers"],
        heads=trn["heads"],
        dim=trn["dim"],
        dropout=trn["dropout"],
        pos_dims=positions_dims,
        use_ape=False,
    )


def _train_model(cfg: RunConfig, trn: dict, out_dir: Path, entropy_weight: float | None = None):
    if cfg.problem == "sudoku":
        raise ConfigError("training draws random graph instances; sudoku training is not supported from the CLI")
    K = cfg.k if cfg.problem == "coloring" else 2

    def sampler(rng):
        return gen_graph_instance(cfg.problem, cfg.n, cfg.edge_prob, int(rng.integers(2**31)), k=cfg.k, lam=cfg.lam)

    holdout = [
        gen_graph_instance(cfg.problem, cfg.n, cfg.edge_prob, 10**9 + cfg.seed * 10**4 + i, k=cfg.k, lam=cfg.lam)
        for i in range(trn["holdout"])
    ]
    tc = TrainConfig(
        epochs=trn["epochs"],
        steps_per_epoch=trn["steps_per_epoch"],
        batch_size=trn["batch_size"],
        lr=trn["lr"],
        dropout=trn["dropout"],
        T_unroll=trn["t_unroll"],
        estimator=trn["estimator"],
        entropy_weight=trn["entropy_weight"] if entropy_weight is None else entropy_weight,
        lam=cfg.lam,
        schedule=cfg.schedule,
        rho_min=cfg.rho_min,
        rho_max=cfg.rho_max,
        sigma_fwd=cfg.sigma_fwd,
        base_s=cfg.base_s,
        seed=cfg.seed,
    )
    model = AttentionDenoiser(_model_config(trn, K, 1), seed=cfg.seed)
    result = train(model, sampler, tc, holdout=holdout, out_dir=out_dir, time_limit=trn["time_limit"])
    return model, result


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, trn, extra) -> int:
    instances = load_instances(cfg)
    out = Path(extra.get("out") or Path(cfg.report_dir) / "instances.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")
    for inst in instances:
        if extra.get("qubo") and inst.family in ("coloring", "sudoku"):
            q = qubo_from_coloring(inst) if inst.family == "coloring" else qubo_from_sudoku(inst)
            (out.parent / f"{_safe(inst.instance_id)}.qubo").write_text(q.to_triplets())
        if extra.get("dimacs") and inst.family != "sudoku":
            write_dimacs(out.parent / f"{_safe(inst.instance_id)}.col", inst.n_vars, inst.edges)
    print(f"wrote {len(instances)} instances to {out}")
    return 0


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def cmd_train(cfg: RunConfig, trn, extra) -> int:
    out = Path(cfg.report_dir)
    model, result = _train_model(cfg, trn, out)
    _write_json(out / "train_summary.json", {"status": result.status, "checkpoint": str(result.checkpoint), "epochs": len(result.metrics), "config": asdict(cfg), "train": trn})
    print(f"training {result.status}; checkpoint {result.checkpoint}")
    return 0 if result.status != "diverged" else 1


def cmd_eval(cfg: RunConfig, trn, extra) -> int:
    instances = load_instances(cfg)
    report = evaluate(load_denoiser(cfg, instances), instances, cfg)
    rj, rc = report.write(cfg.report_dir)
    print(json.dumps(_jsonable(report.aggregates), sort_keys=True))
    print(f"wrote {rj} and {rc}")
    return 0


def cmd_sample(cfg: RunConfig, trn, extra) -> int:
    instances = load_instances(cfg)
    report = evaluate(load_denoiser(cfg, instances), instances, cfg)
    report.write(cfg.report_dir)
    path = Path(cfg.report_dir) / "samples.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "run", "energy", "feasible", "assignment"])
        for r in report.records:
            w.writerow([r["instance_id"], r["run"], repr(r["energy"]), r["solved"], " ".join(map(str, r["assignment"]))])
    print(f"wrote {path}")
    return 0


def cmd_ablate(cfg: RunConfig, trn, extra) -> int:
    grid = extra["grid"]
    out = Path(cfg.report_dir)
    instances = load_instances(cfg)
    rows = []
    if grid == "entropy":
        for label, w in (("full", None), ("no_entropy", 0.0)):
            model, _ = _train_model(cfg, trn, out / label, entropy_weight=w)
            rep = evaluate(model, instances, cfg)
            rep.write(out / label)
            rows.append({"setting": label, **rep.aggregates})
    else:
        denoiser = load_denoiser(cfg, instances)
        if grid == "mask":
            settings = [(f"rho_max={a}_rho_min={b}", {"rho_max": a, "rho_min": b}) for a, b in MASK_GRID]
        else:
            settings = [(s, {"mask_strategy": s}) for s in STRATEGIES]
        for label, change in settings:
            sub = replace(cfg, **change)
            rep = evaluate(denoiser, instances, sub)
            rep.write(out / label)
            rows.append({"setting": label, **rep.aggregates})
    keys = list(rows[0])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(r["setting"], json.dumps(_jsonable({k: v for k, v in r.items() if k != "setting"}), sort_keys=True))
    return 0


def _parse_target(text: str, n: int) -> np.ndarray:
    parts = text.split(",") if "," in text else list(text.strip())
    vals = np.array([int(p) for p in parts], dtype=np.int64)
    if len(vals) != n:
        raise ConfigError(f"target has {len(vals)} entries, expected {n}")
    return vals


def cmd_export(cfg: RunConfig, trn, extra) -> int:
    instances = load_instances(cfg)
    inst = instances[0]
    denoiser = load_denoiser(cfg, [inst])
    if cfg.steps is None:
        raise ConfigError("export-traj needs a step budget (--steps)")
    trajs = []
    for b in range(cfg.runs):
        cc = replace(cfg.chain_config(cfg.steps, cfg.seed + b), keep_logits=True)
        trajs.append(sample_chain(denoiser, inst, cc))
    if "target" in extra:
        target = _parse_target(extra["target"], inst.n_vars)
        if inst.family == "sudoku":
            target = target - 1  # digits on the command line, values internally
    else:
        best, best_e = None, np.inf
        for tr in trajs:
            for A in tr.assignments:
                e = energy_discrete_batch(A, inst, cfg.lam)[0]
                j = int(np.argmin(e))
                if e[j] < best_e:
                    best, best_e = A[j], e[j]
        target = best
    info = export_trajectory(
        trajs,
        inst,
        target,
        cfg.report_dir,
        n_background=extra.get("n_background", 2000),
        seed=cfg.seed,
        corruption=(extra.get("corruption_lo", 0.1), extra.get("corruption_hi", 0.9)),
    )
    dump_trajectory(trajs[0], cfg.report_dir)
    print(f"explained variance ratio {info['map'].explained_ratio.round(4).tolist()}; wrote {', '.join(info['files'])}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-traj": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg, trn, extra = _merged(args)
        return COMMANDS[args.command](cfg, trn, extra)
    except (ConfigError, InstanceError, PolicyError, ProjectionError, DenoiserError, TrainingError, TypeError) as exc:
        print(f"gibbsdiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"gibbsdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
