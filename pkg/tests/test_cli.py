"""Command-line behavior: artifacts, determinism, exit codes, local runs."""
import csv
import json

import numpy as np
import pytest

from funnelsim.cli import main


def write_config(path, **overrides):
    doc = {
        "resource": {"nodes": 8, "cpus_per_node": 42, "gpus_per_node": 6,
                     "walltime_s": 1e9, "backend": "simulated"},
        "funnel": {"library_size": 5000, "cg_count": 30},
        "seed": 42,
        "time_scale": 1e-4,
        "mode": "concurrent",
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestSimulate:
    def test_artifacts_and_summary(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
        assert (out / "trace.jsonl").exists()
        assert (out / "metrics.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["funnel"]["S3FG_tasks"] == 600
        assert summary["funnel"]["selected_conformations"] == 25
        assert summary["pipelines"]["p0"] == "done"
        for frac in [row[1] for row in csv.reader((out / "metrics.csv").open())][1:]:
            assert 0.0 <= float(frac) <= 1.0

    def test_same_seed_byte_identical_traces(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["simulate", "--config", str(cfg), "--out", str(out1), "--quiet"])
        main(["simulate", "--config", str(cfg), "--out", str(out2), "--quiet"])
        assert (out1 / "trace.jsonl").read_bytes() == (out2 / "trace.jsonl").read_bytes()

    def test_seed_override_changes_trace(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["simulate", "--config", str(cfg), "--out", str(out1), "--quiet"])
        main(["simulate", "--config", str(cfg), "--out", str(out2),
              "--seed", "7", "--quiet"])
        assert (out1 / "trace.jsonl").read_bytes() != (out2 / "trace.jsonl").read_bytes()

    def test_missing_config_named_in_diagnostic(self, tmp_path, capsys):
        rc = main(["simulate", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "nope.json" in capsys.readouterr().err

    def test_unknown_config_key_fails_loud(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", extra_section={"x": 1})
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "extra_section" in capsys.readouterr().err

    def test_refuses_overwrite_without_force(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 2
        assert main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--quiet", "--force"]) == 0

    def test_invalid_funnel_lists_violation(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           funnel={"library_size": 100, "cg_count": 50})
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "cg_count" in capsys.readouterr().err


class TestAnalyze:
    def write_scores(self, path, n=400, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        rows = []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ligand_id", "true_score", "predicted_score"])
            for i in range(n):
                t = float(rng.standard_normal())
                p = t + noise * float(rng.standard_normal())
                w.writerow([f"L{i:05d}", f"{t:.8f}", f"{p:.8f}"])
                rows.append((f"L{i:05d}", t, p))
        return rows

    def test_perfect_predictor_res_grid(self, tmp_path):
        scores = tmp_path / "s.csv"
        self.write_scores(scores, noise=0.0)
        out = tmp_path / "an"
        assert main(["analyze", "--metric", "res", "--scores", str(scores),
                     "--out", str(out), "--quiet"]) == 0
        with open(out / "res.csv") as fh:
            reader = csv.reader(fh)
            top_fracs = [float(x) for x in next(reader)[1:]]
            for row in reader:
                b = float(row[0])
                for f, cell in zip(top_fracs, (float(c) for c in row[1:])):
                    if b >= f:
                        assert cell == pytest.approx(1.0)

    def test_recall_fixture_matches_committed_oracle(self, tmp_path):
        # 10-row fixture: expected value derived by explicit sort and
        # set intersection, frozen here.
        rows = [("a", 1.0, 2.0), ("b", 2.0, 1.0), ("c", 3.0, 9.0),
                ("d", 4.0, 3.0), ("e", 5.0, 8.0), ("f", 6.0, 4.0),
                ("g", 7.0, 10.0), ("h", 8.0, 5.0), ("i", 9.0, 6.0),
                ("j", 10.0, 7.0)]
        scores = tmp_path / "s.csv"
        with open(scores, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ligand_id", "true_score", "predicted_score"])
            w.writerows(rows)
        true_top3 = {"a", "b", "c"}
        pred_top2 = {"b", "a"}
        expect = len(true_top3 & pred_top2) / 3
        out = tmp_path / "an"
        assert main(["analyze", "--metric", "recall", "--scores", str(scores),
                     "--k", "3", "--delta", "2", "--out", str(out), "--quiet"]) == 0
        with open(out / "recall.csv") as fh:
            row = list(csv.reader(fh))[1]
        assert float(row[2]) == pytest.approx(expect)

    def test_identical_point_sets_chamfer_zero(self, tmp_path):
        pts = tmp_path / "p.csv"
        rng = np.random.default_rng(1)
        with open(pts, "w", newline="") as fh:
            w = csv.writer(fh)
            for _ in range(32):
                w.writerow([f"{x:.6f}" for x in rng.standard_normal(3)])
        out = tmp_path / "an"
        assert main(["analyze", "--metric", "chamfer", "--points", str(pts),
                     "--points-b", str(pts), "--out", str(out), "--quiet"]) == 0
        with open(out / "chamfer.csv") as fh:
            val = float(list(csv.reader(fh))[1][0])
        assert val == 0.0

    def test_malformed_row_reports_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("ligand_id,true_score,predicted_score\nL1,0.5,ok?\n")
        rc = main(["analyze", "--metric", "recall", "--scores", str(bad),
                   "--out", str(tmp_path / "an")])
        assert rc == 2
        assert "line 2" in capsys.readouterr().err

    def test_lof_output(self, tmp_path):
        pts = tmp_path / "p.csv"
        rng = np.random.default_rng(4)
        with open(pts, "w", newline="") as fh:
            w = csv.writer(fh)
            for _ in range(50):
                w.writerow([f"{x:.6f}" for x in rng.standard_normal(3)])
            w.writerow([1000.0, 0.0, 0.0])
        out = tmp_path / "an"
        assert main(["analyze", "--metric", "lof", "--points", str(pts),
                     "--k", "5", "--out", str(out), "--quiet"]) == 0
        with open(out / "lof.csv") as fh:
            scores = [float(r[1]) for r in list(csv.reader(fh))[1:]]
        assert len(scores) == 51
        assert max(range(51), key=lambda i: scores[i]) == 50


class TestReport:
    def make_trace(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           funnel={"library_size": 2000, "cg_count": 10,
                                   "top_binders": 2, "outliers_per_binder": 2})
        out = tmp_path / "run"
        main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"])
        return out / "trace.jsonl"

    def test_report_artifacts(self, tmp_path):
        trace = self.make_trace(tmp_path)
        rep = tmp_path / "rep"
        assert main(["report", "--trace", str(trace), "--out", str(rep), "--quiet"]) == 0
        with open(rep / "utilization.csv") as fh:
            for row in list(csv.reader(fh))[1:]:
                assert 0.0 <= float(row[1]) <= 1.0
        ovh = json.loads((rep / "overhead.json").read_text())
        assert ovh["n_tasks"] > 0

    def test_report_idempotent(self, tmp_path):
        trace = self.make_trace(tmp_path)
        rep = tmp_path / "rep"
        main(["report", "--trace", str(trace), "--out", str(rep), "--quiet"])
        first = (rep / "utilization.csv").read_bytes()
        main(["report", "--trace", str(trace), "--out", str(rep), "--quiet"])
        assert (rep / "utilization.csv").read_bytes() == first

    def test_corrupt_line_reports_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"t":0.0,"entity":"pilot","id":"p","transition":"acquired"}\nnot json\n')
        rc = main(["report", "--trace", str(bad), "--out", str(tmp_path / "rep")])
        assert rc == 2
        assert "2" in capsys.readouterr().err

    def test_empty_trace_ok_with_warning(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        rc = main(["report", "--trace", str(empty), "--out", str(tmp_path / "rep")])
        assert rc == 0
        assert "empty" in capsys.readouterr().err

    def test_merged_disjoint_pilot_traces(self, tmp_path):
        # resource-weighted combination checked through the CLI formats
        from funnelsim.trace import load_trace, merge_traces, utilization
        t1 = self.make_trace(tmp_path)
        events = load_trace(t1)
        merged = merge_traces([events, events])
        um = utilization(merged, 1.0).mean()
        u1 = utilization(events, 1.0).mean()
        assert um == pytest.approx(u1)


class TestRunLocal:
    def local_config(self, path, **funnel_overrides):
        funnel = {"library_size": 200, "s1_fraction": 0.02, "cg_count": 2,
                  "top_binders": 1, "outliers_per_binder": 1,
                  "frames_per_replica": 4}
        funnel.update(funnel_overrides)
        return write_config(
            path,
            resource={"nodes": 1, "cpus_per_node": 2, "gpus_per_node": 0,
                      "walltime_s": 60.0, "backend": "local"},
            funnel=funnel,
            cost_model={stage: {"median_node_hours": 1e-4,
                                "tail": {"kind": "lognormal", "sigma": 0.0},
                                "nodes_per_task": 1.0}
                        for stage in ("ML1", "S1", "S3CG", "S2", "S3FG")},
            time_scale=1e-3,
        )

    def test_local_funnel_completes(self, tmp_path):
        cfg = self.local_config(tmp_path / "c.json")
        out = tmp_path / "out"
        assert main(["run-local", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["pipelines"]["p0"] == "done"
        assert summary["funnel"]["S3FG_tasks"] == 24


class TestLocalOverlayFunctions:
    def test_function_tasks_and_worker_death(self):
        import funnelsim as fs
        from funnelsim.campaign import (CampaignSpec, FixedDuration,
                                        PipelineSpec, StageSpec, TaskDescriptor)
        from funnelsim.engine import run_campaign
        from funnelsim.overlay import MasterConfig
        from funnelsim.workload import register_function

        killed = {"count": 0}

        def kill_once():
            if killed["count"] == 0:
                killed["count"] += 1
                from funnelsim.errors import WorkerKilled
                raise WorkerKilled("first strike")
            return "survived"

        register_function("kill_once_test", kill_once)

        def payload(fn, **kwargs):
            return json.dumps({"fn": fn, "kwargs": kwargs}).encode()

        tasks = [TaskDescriptor(f"f{i}", kind="function", cpus=1,
                                duration_model=FixedDuration(0.0),
                                payload=payload("sleep_ms", ms=1.0))
                 for i in range(6)]
        tasks.append(TaskDescriptor("killer", kind="function", cpus=1,
                                    duration_model=FixedDuration(0.0),
                                    payload=payload("kill_once_test")))
        import os
        resource = fs.PilotSpec(nodes=1, cpus_per_node=min(2, os.cpu_count() or 1),
                                gpus_per_node=0, walltime_s=30.0, backend="local")
        spec = CampaignSpec([PipelineSpec("p", [StageSpec("s", tasks)])],
                            resource, mode="local")
        r = run_campaign(spec, overlay=MasterConfig(n_masters=1, workers_per_master=3,
                                                    bulk_size=4))
        assert r.final_states["p"]["status"] == "done"
        done = {c.task_id for c in r.completions if c.outcome == "done"}
        assert "killer" in done
        assert killed["count"] == 1
