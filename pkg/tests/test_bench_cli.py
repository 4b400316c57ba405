import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gibbsdiff.baselines import brute_force
from gibbsdiff.bench import (
    RECORD_FIELDS,
    ConfigError,
    RunConfig,
    aggregate,
    best_objective_of_n,
    evaluate,
    load_reference,
)
from gibbsdiff.chain import ChainConfig, sample_chain
from gibbsdiff.cli import MASK_GRID, _OracleSet, main
from gibbsdiff.denoisers import ConstantDenoiser, OracleGibbsDenoiser
from gibbsdiff.problems import gen_graph_instance, load_sudoku
from gibbsdiff.projection import ProjectionError, export_trajectory, pca_fit
from gibbsdiff.state import clamp_pattern

from .conftest import SOLVED_4X4


def tiny_maxcut(count=20):
    return [gen_graph_instance("maxcut", 5, 0.6, seed=s) for s in range(count)]


class TestRunConfig:
    def test_one_budget(self):
        with pytest.raises(ConfigError):
            RunConfig()
        with pytest.raises(ConfigError):
            RunConfig(steps=5, seconds=1.0)
        assert RunConfig(steps=5).seconds is None

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"steps": 3, "bogus": 1})

    @pytest.mark.parametrize("kw", [dict(steps=-1), dict(seconds=0.0), dict(steps=1, runs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)


class TestEvaluate:
    def test_oracle_closes_gap_on_tiny_maxcut(self, tmp_path):
        insts = tiny_maxcut()
        ref = tmp_path / "ref.csv"
        ref.write_text("instance_id,value\n" + "".join(f"{i.instance_id},{brute_force(i)[0]}\n" for i in insts))
        cfg = RunConfig(problem="maxcut", steps=30, runs=2, tau=0.1, reference=str(ref))
        rep = evaluate(_OracleSet(cfg), insts, cfg)
        assert all(r["gap"] == 0.0 for r in rep.records)
        assert rep.aggregates["mean_gap"] == 0.0
        assert rep.aggregates["solved_frac"] == 1.0

    def test_missing_reference_entry(self, tmp_path):
        ref = tmp_path / "ref.json"
        ref.write_text("{}")
        cfg = RunConfig(problem="maxcut", steps=1, reference=str(ref))
        with pytest.raises(ConfigError, match="no reference"):
            evaluate(_OracleSet(cfg), tiny_maxcut(1), cfg)
        with pytest.raises(ConfigError, match="not found"):
            load_reference(tmp_path / "nope.csv")

    def test_zero_steps_scores_base_decode(self):
        inst = gen_graph_instance("coloring", 6, 0.5, seed=0)
        cfg = RunConfig(steps=0, runs=3)
        rep = evaluate(OracleGibbsDenoiser(inst, 0.1), [inst], cfg)
        assert all(r["steps"] == 0 for r in rep.records)
        for r in rep.records:
            tr = sample_chain(OracleGibbsDenoiser(inst, 0.1), inst, cfg.chain_config(0, r["seed"]))
            assert r["solved"] == bool(tr.feasible[0][0])

    def test_steps_budget_is_exact(self):
        inst = gen_graph_instance("coloring", 5, 0.5, seed=0)
        rep = evaluate(OracleGibbsDenoiser(inst, 0.1), [inst], RunConfig(steps=7, runs=2, trace=True))
        assert [r["steps"] for r in rep.records] == [7, 7]
        assert all(len(v) == 8 for v in rep.traces.values())

    def test_wall_clock_budget(self):
        inst = gen_graph_instance("coloring", 8, 0.4, seed=0)
        den = OracleGibbsDenoiser(inst, 0.1)
        # time one step to bound the overshoot
        cfg = RunConfig(seconds=0.3, schedule_T=10)
        rep = evaluate(den, [inst], cfg)
        r = rep.records[0]
        per_step = r["seconds"] / max(r["steps"], 1)
        assert r["steps"] > 0
        assert r["seconds"] <= 0.3 + 5 * per_step + 0.05

    def test_best_of_n_monotone(self):
        insts = [gen_graph_instance("mis", 8, 0.4, seed=s) for s in range(5)]
        cfg = RunConfig(problem="mis", steps=5, runs=4, tau=1.0)
        rep = evaluate(_OracleSet(cfg), insts, cfg)
        prev = None
        for n in range(1, 5):
            cur = best_objective_of_n(rep.records, n)
            if prev:
                assert all(cur[k] <= prev[k] for k in cur)
            prev = cur
        # the first two runs do not depend on how many runs were requested
        small = evaluate(_OracleSet(cfg), insts, RunConfig(problem="mis", steps=5, runs=2, tau=1.0))
        assert [r["energy"] for r in small.records] == [r["energy"] for r in rep.records if r["run"] < 2]

    def test_aggregates_recomputable(self):
        insts = [gen_graph_instance("mis", 6, 0.5, seed=s) for s in range(4)]
        cfg = RunConfig(problem="mis", steps=4, runs=3)
        rep = evaluate(_OracleSet(cfg), insts, cfg)
        assert aggregate(rep.records, 3, "mis") == rep.aggregates
        solved = {r["instance_id"] for r in rep.records if r["solved"]}
        assert rep.aggregates["solved_frac"] == len(solved) / 4
        sizes = {}
        for r in rep.records:
            size = -r["objective"] if r["solved"] else 0.0
            sizes[r["instance_id"]] = max(sizes.get(r["instance_id"], 0.0), size)
        assert rep.aggregates["mean_set_size"] == pytest.approx(sum(sizes.values()) / 4, abs=1e-12)

    def test_aggregate_requires_exact_runs(self):
        recs = [{"instance_id": "a", "run": 0, "solved": True, "energy": 0.0, "objective": 0.0, "gap": math.nan}]
        with pytest.raises(ConfigError):
            aggregate(recs, 2)

    def test_duplicate_ids_are_disambiguated(self):
        inst = gen_graph_instance("maxcut", 4, 0.5, seed=0)
        rep = evaluate(OracleGibbsDenoiser(inst, 0.1), [inst, inst], RunConfig(steps=1))
        assert len({r["instance_id"] for r in rep.records}) == 2

    def test_report_files(self, tmp_path):
        inst = gen_graph_instance("maxcut", 4, 0.5, seed=0)
        rep = evaluate(OracleGibbsDenoiser(inst, 0.1), [inst], RunConfig(steps=2))
        rj, rc = rep.write(tmp_path)
        doc = json.loads(rj.read_text())
        assert doc["config"]["seed"] == 0 and doc["records"][0]["seed"] == rep.records[0]["seed"]
        assert doc["aggregates"]["mean_gap"] is None
        rows = list(csv.DictReader(open(rc)))
        assert list(rows[0]) == RECORD_FIELDS and rows[0]["gap"] == ""


class TestPCA:
    def test_line_captures_all_variance(self):
        t = np.linspace(-1, 1, 30)
        m = pca_fit(np.stack([t, 2 * t], axis=1))
        assert m.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)
        assert m.explained_variance[1] == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=30)
    @given(st.integers(3, 40), st.integers(2, 8), st.integers(0, 10**6))
    def test_orthonormal_and_centred(self, count, dim, seed):
        P = np.random.default_rng(seed).normal(size=(count, dim))
        m = pca_fit(P)
        assert np.allclose(m.components @ m.components.T, np.eye(2), atol=1e-10)
        assert np.allclose(m.transform(P.mean(axis=0)), 0.0, atol=1e-10)

    def test_order_invariance(self):
        P = np.random.default_rng(1).normal(size=(50, 5))
        a = pca_fit(P)
        b = pca_fit(P[np.random.default_rng(2).permutation(50)])
        assert np.allclose(a.components, b.components, atol=1e-10)

    def test_sign_convention(self):
        m = pca_fit(np.random.default_rng(3).normal(size=(20, 4)))
        for row in m.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_refusals(self):
        with pytest.raises(ProjectionError):
            pca_fit(np.zeros((1, 3)))
        with pytest.raises(ProjectionError):
            pca_fit(np.zeros((5, 1)))


class TestExport:
    def test_target_anchor(self, tmp_path):
        inst = load_sudoku(SOLVED_4X4[:8] + "0" * 8)
        target = np.array([int(c) - 1 for c in SOLVED_4X4])
        den = ConstantDenoiser(clamp_pattern(torch.as_tensor(target), 4))
        tr = sample_chain(den, inst, ChainConfig(T=2, rho_min=1.0, rho_max=1.0, keep_logits=True))
        info = export_trajectory([tr], inst, target, tmp_path, n_background=200)
        rows = list(csv.DictReader(open(tmp_path / "points.csv")))
        final = [r for r in rows if r["t"] == "0"][0]
        assert float(final["x"]) == pytest.approx(info["target_xy"][0], abs=1e-9)
        assert float(final["y"]) == pytest.approx(info["target_xy"][1], abs=1e-9)
        assert int(final["accuracy"]) == 8
        assert len(list(csv.reader(open(tmp_path / "background.csv")))) == 201

    def test_deterministic(self, tmp_path):
        inst = load_sudoku(SOLVED_4X4[:6] + "0" * 10)
        target = np.array([int(c) - 1 for c in SOLVED_4X4])
        tr = sample_chain(ConstantDenoiser(clamp_pattern(torch.as_tensor(target), 4)), inst, ChainConfig(T=3))
        export_trajectory([tr], inst, target, tmp_path / "a", n_background=100, seed=4)
        export_trajectory([tr], inst, target, tmp_path / "b", n_background=100, seed=4)
        for f in ("points.csv", "background.csv", "anchors.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_no_unfixed_cells(self, tmp_path, solved4):
        target = np.array([int(c) - 1 for c in SOLVED_4X4])
        with pytest.raises(ProjectionError):
            export_trajectory([], solved4, target, tmp_path)


class TestCli:
    def test_eval_writes_reports(self, tmp_path, capsys):
        out = tmp_path / "r"
        code = main(["eval", "--problem", "coloring", "--k", "3", "--n", "6", "--n-instances", "3", "--steps", "20", "--runs", "2", "--report-dir", str(out)])
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["aggregates"]["instances"] == 3 and doc["aggregates"]["best_of_n"] == 2
        assert len(list(csv.DictReader(open(out / "records.csv")))) == 6

    def test_sample_is_deterministic(self, tmp_path):
        args = ["sample", "--problem", "mis", "--n", "7", "--n-instances", "2", "--steps", "10", "--seed", "7"]
        assert main(args + ["--report-dir", str(tmp_path / "a")]) == 0
        assert main(args + ["--report-dir", str(tmp_path / "b")]) == 0
        for f in ("records.csv", "samples.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_config_file_then_flags(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"problem": "maxcut", "n": 5, "n_instances": 2, "steps": 3, "runs": 3, "seed": 1}))
        out = tmp_path / "r"
        assert main(["eval", "--config", str(cfg), "--runs", "2", "--report-dir", str(out)]) == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["config"]["runs"] == 2 and doc["config"]["problem"] == "maxcut" and doc["config"]["seed"] == 1

    def test_seconds_flag_overrides_config_steps(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"problem": "maxcut", "n": 4, "n_instances": 1, "steps": 3}))
        out = tmp_path / "r"
        assert main(["eval", "--config", str(cfg), "--seconds", "0.05", "--schedule-T", "5", "--report-dir", str(out)]) == 0
        assert json.loads((out / "report.json").read_text())["config"]["seconds"] == 0.05

    def test_ablate_mask_grid(self, tmp_path):
        out = tmp_path / "abl"
        args = ["ablate", "--grid", "mask", "--problem", "mis", "--n", "6", "--n-instances", "2", "--steps", "3", "--report-dir", str(out)]
        assert main(args) == 0
        rows = list(csv.DictReader(open(out / "ablation.csv")))
        assert len(rows) == len(MASK_GRID) == 10
        assert rows[-1]["setting"] == "rho_max=0.9_rho_min=0.7"

    def test_gen_then_eval(self, tmp_path):
        inst_file = tmp_path / "i.jsonl"
        assert main(["gen", "--problem", "coloring", "--n", "6", "--n-instances", "3", "--out", str(inst_file), "--qubo", "--dimacs"]) == 0
        assert len(inst_file.read_text().splitlines()) == 3
        assert len(list(tmp_path.glob("*.qubo"))) == 3 and len(list(tmp_path.glob("*.col"))) == 3
        assert main(["eval", "--instances", str(inst_file), "--steps", "2", "--report-dir", str(tmp_path / "r")]) == 0

    def test_export_traj(self, tmp_path, data_dir):
        out = tmp_path / "x"
        code = main(["export-traj", "--problem", "sudoku", "--input", str(data_dir / "sudoku4.txt"), "--steps", "5", "--runs", "2",
                     "--target", SOLVED_4X4, "--n-background", "50", "--report-dir", str(out)])
        assert code == 0
        for f in ("points.csv", "background.csv", "anchors.csv", "decoded.csv", "logits.csv"):
            assert (out / f).exists()

    def test_train_small(self, tmp_path):
        out = tmp_path / "t"
        code = main(["train", "--problem", "coloring", "--n", "5", "--epochs", "1", "--steps-per-epoch", "1", "--batch-size", "2",
                     "--t-unroll", "1", "--dim", "8", "--holdout", "2", "--steps", "3", "--report-dir", str(out)])
        assert code == 0
        assert (out / "checkpoint.pt").exists() and (out / "metrics.csv").exists()
        code = main(["eval", "--problem", "coloring", "--n", "5", "--n-instances", "2", "--steps", "3",
                     "--checkpoint", str(out / "checkpoint.pt"), "--report-dir", str(tmp_path / "e")])
        assert code == 0

    @pytest.mark.parametrize(
        "argv, fragment",
        [
            (["eval", "--problem", "coloring", "--steps", "-1"], "steps"),
            (["eval", "--config", "/nonexistent.json"], "not found"),
            (["eval", "--problem", "sudoku"], "sudoku needs"),
            (["eval", "--checkpoint", "/nonexistent.pt"], "checkpoint not found"),
            (["eval", "--problem", "coloring", "--input", "/nonexistent.col"], "not found"),
        ],
    )
    def test_errors_exit_nonzero(self, argv, fragment, capsys, tmp_path):
        assert main(argv + ["--report-dir", str(tmp_path)]) != 0
        assert fragment in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"stepz": 3}))
        assert main(["eval", "--config", str(cfg)]) == 2
        assert "stepz" in capsys.readouterr().err

    def test_usage_errors(self):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--no-such-flag"])
        assert info.value.code == 2
        with pytest.raises(SystemExit):
            main(["eval", "--steps", "3", "--seconds", "1"])

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "gibbsdiff", "eval", "--problem", "mis", "--n", "4", "--n-instances", "1", "--steps", "1", "--report-dir", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        proc = subprocess.run([sys.executable, "-m", "gibbsdiff", "bogus"], capture_output=True, text=True)
        assert proc.returncode != 0 and "invalid choice" in proc.stderr
