import json
from pathlib import Path

import numpy as np
import pytest

from rsfw.cli import main


def write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return str(path)


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def strip_timing(path):
    header, rows = read_csv(path)
    keep = [i for i, name in enumerate(header) if not name.endswith("_ns")]
    return [tuple(row[i] for i in keep) for row in rows]


SMALL_RATIOS = {
    "seed": 11,
    "samples": 2000,
    "grid": [
        {"n": 8, "d": 8, "rho": 0.3},
        {"n": 30, "d": 6, "rho": 0.0},
        {"n": 30, "d": 6, "rho": -0.5},
    ],
}

SMALL_SOLVE = {
    "problem": {"kind": "quadratic_ellipsoid", "n": 12, "cond": 4.0, "seed": 5},
    "solver": {
        "rule": {"kind": "short_step", "lipschitz": "problem"},
        "horizon": 30,
        "d": [3],
        "seeds": [0, 1],
        "full_fw": True,
    },
}


class TestExitCodes:
    def test_malformed_json_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["ratios", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_key_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {"seed": 1})
        assert main(["ratios", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_unknown_problem_kind_is_config_error(self, tmp_path):
        doc = {"problem": {"kind": "mystery"}, "solver": SMALL_SOLVE["solver"]}
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_runtime_failure_is_exit_one(self, tmp_path):
        doc = json.loads(json.dumps(SMALL_SOLVE))
        doc["solver"]["d"] = [50]  # exceeds the ambient dimension at run time
        cfg = write_config(tmp_path, "c.json", doc)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 1

    def test_success_is_exit_zero(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_RATIOS)
        assert main(["ratios", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


class TestRatiosCommand:
    def test_outputs_and_full_dimension_row(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_RATIOS)
        out = tmp_path / "out"
        assert main(["ratios", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "ratios.csv")
        assert header == ["n", "d", "rho", "samples", "mean", "stderr", "lower",
                          "upper", "in_interval"]
        assert len(rows) == 3
        full_row = rows[0]
        assert float(full_row[4]) == pytest.approx(1.0, abs=1e-12)
        assert full_row[8] == "true"
        summary = json.loads((out / "summary.json").read_text())
        assert summary["all_in_interval"] is True

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_RATIOS)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["ratios", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["ratios", "--config", cfg, "--out", str(out2)]) == 0
        assert (out1 / "ratios.csv").read_bytes() == (out2 / "ratios.csv").read_bytes()
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_seed_override_changes_results(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_RATIOS)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["ratios", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["ratios", "--config", cfg, "--out", str(out2), "--seed", "99"]) == 0
        resolved = json.loads((out2 / "resolved_config.json").read_text())
        assert resolved["seed"] == 99
        assert (out1 / "ratios.csv").read_bytes() != (out2 / "ratios.csv").read_bytes()


class TestSolveCommand:
    def test_outputs_and_reproducibility(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_SOLVE)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["solve", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["solve", "--config", cfg, "--out", str(out2)]) == 0
        for name in ("trace_rsfw_d3_seed0.csv", "trace_rsfw_d3_seed1.csv",
                     "trace_full_fw_seed0.csv", "aggregate_rsfw_d3.csv",
                     "aggregate_full_fw.csv", "summary.json"):
            assert (out1 / name).exists()
        # trace value columns identical; timing columns are excluded
        assert strip_timing(out1 / "trace_rsfw_d3_seed0.csv") == strip_timing(
            out2 / "trace_rsfw_d3_seed0.csv"
        )
        assert (out1 / "aggregate_rsfw_d3.csv").read_bytes() == (
            out2 / "aggregate_rsfw_d3.csv"
        ).read_bytes()
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_offline_full_gap_column(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_SOLVE)
        out = tmp_path / "out"
        assert main(["solve", "--config", cfg, "--out", str(out), "--offline-full-gap"]) == 0
        header, rows = read_csv(out / "trace_rsfw_d3_seed0.csv")
        assert header[-1] == "gap_full"
        gaps = np.array([float(r[-1]) for r in rows])
        assert np.all(gaps >= -1e-12)

    def test_svg_rendering(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_SOLVE)
        out = tmp_path / "out"
        assert main(["solve", "--config", cfg, "--out", str(out), "--svg"]) == 0
        for name in ("objective_vs_iteration.svg", "objective_vs_time.svg"):
            text = (out / name).read_text()
            assert text.lstrip().startswith("<?xml")

    def test_threads_do_not_change_results(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", SMALL_SOLVE)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["solve", "--config", cfg, "--out", str(out1), "--threads", "1"]) == 0
        assert main(["solve", "--config", cfg, "--out", str(out2), "--threads", "4"]) == 0
        assert (out1 / "aggregate_rsfw_d3.csv").read_bytes() == (
            out2 / "aggregate_rsfw_d3.csv"
        ).read_bytes()

    def test_auto_open_loop_and_grid_rules(self, tmp_path):
        doc = {
            "problem": {"kind": "quadratic_ellipsoid", "n": 10, "cond": 4.0, "seed": 5},
            "solver": {
                "rule": {"kind": "open_loop", "beta0": "auto"},
                "horizon": 20, "d": [3], "seeds": [0],
            },
        }
        cfg = write_config(tmp_path, "open.json", doc)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o1")]) == 0
        doc["solver"]["rule"] = {"kind": "short_step",
                                 "lipschitz": {"grid": [0.01, 0.1, 1.0, 10.0, 100.0]}}
        cfg = write_config(tmp_path, "grid.json", doc)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o2")]) == 0


class TestOtherCommands:
    def test_failure_command(self, tmp_path):
        doc = {"n": 20, "d": 3, "horizon": 40, "seeds": [0, 1]}
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["failure", "--config", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"rsfw_mean_final_gap", "full_fw_final_gap", "stagnated"} <= set(summary)

    def test_stoch_command_audits_batches(self, tmp_path):
        doc = {"components": 20, "n": 8, "d": 3, "a_mb": 4.0, "beta0": 1.0,
               "horizon": 30, "instance_seed": 7, "seeds": [0, 1]}
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["stoch", "--config", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["batch_schedule_ok"] is True
        header, rows = read_csv(out / "trace_stoch_d3_seed0.csv")
        batches = [int(r[header.index("batch")]) for r in rows]
        assert batches[0] == 1
        assert batches[2] == 4
        assert max(batches) == 20

    def test_graph_command(self, tmp_path):
        doc = {"nodes": 30, "k_nn": 4, "labeled": 8, "horizon": 10, "d": [3],
               "instance_seed": 3, "seeds": [0, 1], "tau": 50.0}
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["graph", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "aggregate_rsfw_d3.csv")
        mean_f = [float(r[1]) for r in rows]
        assert mean_f[-1] <= mean_f[0]

    def test_curvature_command(self, tmp_path):
        doc = {"seed": 5, "n": 40, "d": 4, "eta": 0.1, "trials": 120,
               "spectrum": {"kind": "linspace", "lo": 0.0, "hi": 2.0},
               "k_cal": [0.5, 1.0, 2.0, 3.0]}
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["curvature", "--config", cfg, "--out", str(out), "--svg"]) == 0
        header, rows = read_csv(out / "coverage.csv")
        covers = [float(r[1]) for r in rows]
        assert all(b >= a for a, b in zip(covers, covers[1:]))
        assert (out / "coverage.svg").exists()


class TestSeedEnvironmentAndExternalData:
    def test_environment_variable_overrides_seed(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, "c.json", SMALL_RATIOS)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["ratios", "--config", cfg, "--out", str(out1)]) == 0
        monkeypatch.setenv("RSFW_MASTER_SEED", "4242")
        assert main(["ratios", "--config", cfg, "--out", str(out2)]) == 0
        assert (out1 / "ratios.csv").read_bytes() != (out2 / "ratios.csv").read_bytes()

    def test_logistic_from_external_csv(self, tmp_path):
        rng = np.random.default_rng(5)
        phi = rng.standard_normal((16, 4))
        labels = np.sign(rng.standard_normal(16))
        labels[labels == 0] = 1.0
        np.savetxt(tmp_path / "phi.csv", phi, delimiter=",")
        np.savetxt(tmp_path / "y.csv", labels, delimiter=",")
        doc = {
            "problem": {
                "kind": "logistic_rf",
                "feature_csv": str(tmp_path / "phi.csv"),
                "label_csv": str(tmp_path / "y.csv"),
                "rho_k": 1e-3, "lambda": 2e-2, "rho_h": 1e-3,
            },
            "solver": {
                "rule": {"kind": "short_step", "lipschitz": "section_curvature"},
                "horizon": 15, "d": [3], "seeds": [0],
            },
        }
        cfg = write_config(tmp_path, "c.json", doc)
        out = tmp_path / "out"
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "aggregate_rsfw_d3.csv")
        mean_f = [float(r[1]) for r in rows]
        assert mean_f[-1] <= mean_f[0] + 1e-12


class TestShippedConfigs:
    def test_shipped_configs_parse_and_round_trip(self):
        root = Path(__file__).resolve().parent.parent / "configs"
        for path in sorted(root.glob("*.json")):
            doc = json.loads(path.read_text())
            assert json.loads(json.dumps(doc)) == doc
            if "seeds" in doc or ("solver" in doc and "seeds" in doc["solver"]):
                seeds = doc.get("seeds") or doc["solver"]["seeds"]
                assert all(isinstance(s, int) for s in seeds)
