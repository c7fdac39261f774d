"""Command-line surface: subcommands, files, exit codes, reproducibility."""

import csv
import json
import math

import numpy as np
import pytest
import yaml

from coxpf import datagen, oracles
from coxpf.cli import main


def write_config(path, payload):
    path.write_text(yaml.safe_dump(payload))
    return str(path)


@pytest.fixture()
def out_dir(tmp_path):
    d = tmp_path / "out"
    d.mkdir()
    return d


class TestExitCodes:
    def test_missing_config_file(self, capsys):
        assert main(["bounds", "--config", "/nonexistent.yaml"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_malformed_yaml(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("model: [unclosed")
        assert main(["simulate", "--config", str(cfg)]) == 2

    def test_unknown_model_kind(self, tmp_path, out_dir):
        cfg = write_config(tmp_path / "c.yaml", {"model": {"kind": "levy"}, "intensity": {"kind": "constant", "rate": 1.0}, "horizon": 1.0})
        assert main(["simulate", "--config", cfg, "--out-dir", str(out_dir)]) == 2

    def test_runtime_error_exit_one(self, tmp_path, out_dir):
        # filter on a dataset file that does not parse -> runtime failure
        data = tmp_path / "data.txt"
        data.write_text("not a dataset\n")
        cfg = write_config(
            tmp_path / "f.yaml",
            {"model": {"kind": "brownian-benchmark"}, "backend": {"kind": "exact-oracle", "delta": 0.5, "particles": 10}},
        )
        assert main(["filter", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)]) == 1


class TestSimulate:
    def base_config(self):
        return {
            "seed": 11,
            "model": {"kind": "ou", "rate": [1.0, 1.0, 4.0], "mean": [0.0, 0.0, 2.0]},
            "initial": {"kind": "stationary"},
            "intensity": {"kind": "exponential-depth", "peak_rate": 25.0, "depth_scale": 20.0},
            "marks": {"kind": "gaussian", "sigma": 1.0},
            "horizon": 2.0,
            "dataset": "sim.txt",
        }

    def test_zero_rate_empty_dataset_with_header(self, tmp_path, out_dir):
        payload = self.base_config()
        payload["intensity"] = {"kind": "constant", "rate": 0.0}
        cfg = write_config(tmp_path / "sim.yaml", payload)
        assert main(["simulate", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        obs, meta = datagen.read_dataset(out_dir / "sim.txt")
        assert obs.count == 0 and meta["seed"] == 11

    def test_fixed_seed_reproduces_bytes(self, tmp_path, out_dir):
        cfg = write_config(tmp_path / "sim.yaml", self.base_config())
        assert main(["simulate", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        first = (out_dir / "sim.txt").read_bytes()
        assert main(["simulate", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "sim.txt").read_bytes() == first

    def test_simulated_count_matches_rate_oracle(self, tmp_path, out_dir):
        """Accepted-arrival count sits near the integrated expected rate."""
        cfg = write_config(tmp_path / "sim.yaml", self.base_config())
        assert main(["simulate", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        obs, _ = datagen.read_dataset(out_dir / "sim.txt")
        # stationary depth is N(2, 0.125): E[rate] = 25 exp(-2/20 + 0.125/800)
        expected = 25.0 * obs.horizon * math.exp(-0.1 + 0.125 / 800.0)
        assert abs(obs.count - expected) < 5 * math.sqrt(expected) + 10

    def test_seed_flag_overrides(self, tmp_path, out_dir):
        cfg = write_config(tmp_path / "sim.yaml", self.base_config())
        main(["simulate", "--config", cfg, "--out-dir", str(out_dir)])
        first = (out_dir / "sim.txt").read_bytes()
        main(["simulate", "--config", cfg, "--seed", "99", "--out-dir", str(out_dir)])
        assert (out_dir / "sim.txt").read_bytes() != first


class TestFilter:
    def test_constant_rate_exact_loglik(self, tmp_path, out_dir):
        from coxpf.filters import ObservationSet

        data = tmp_path / "empty.txt"
        datagen.write_dataset(data, ObservationSet.empty(2.0))
        cfg = write_config(
            tmp_path / "filt.yaml",
            {
                "model": {"kind": "brownian", "dim": 1},
                "initial": {"kind": "point", "state": [0.0]},
                "intensity": {"kind": "constant", "rate": 3.0},
                "marks": {"kind": "gaussian", "sigma": 1.0},
                "backend": {"kind": "continuous", "delta": 0.5, "particles": 50, "lipschitz_seed": 1.0},
                "result": "result.json",
            },
        )
        assert main(["filter", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)]) == 0
        result = json.loads((out_dir / "result.json").read_text())
        np.testing.assert_allclose(result["log_likelihood"], -6.0, rtol=1e-9)

    def test_result_reproducible_under_fixed_seed(self, tmp_path, out_dir):
        from coxpf.filters import ObservationSet

        data = tmp_path / "empty.txt"
        datagen.write_dataset(data, ObservationSet.empty(1.0))
        cfg = write_config(
            tmp_path / "filt.yaml",
            {
                "model": {"kind": "brownian-benchmark"},
                "backend": {"kind": "continuous", "delta": 0.25, "particles": 200, "lipschitz_seed": 1.0},
                "result": "rep.json",
            },
        )
        main(["filter", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)])
        first = (out_dir / "rep.json").read_bytes()
        main(["filter", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)])
        assert (out_dir / "rep.json").read_bytes() == first

    def test_auto_step_has_zero_negatives(self, tmp_path, out_dir):
        from coxpf.filters import ObservationSet

        data = tmp_path / "empty.txt"
        datagen.write_dataset(data, ObservationSet.empty(1.0))
        cfg = write_config(
            tmp_path / "filt.yaml",
            {
                "model": {"kind": "brownian-benchmark"},
                "backend": {"kind": "continuous", "delta": "auto", "particles": 400, "epsilon": 1.0e-6, "lipschitz_seed": 1.0},
                "result": "auto.json",
            },
        )
        assert main(["filter", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)]) == 0
        result = json.loads((out_dir / "auto.json").read_text())
        assert result["diagnostics"]["negative_count"] == 0
        assert np.isfinite(result["log_likelihood"])


class TestLikelihoodBench:
    def bench_config(self, reps=20):
        return {
            "seed": 3,
            "benchmark": {"times": [0.5, 1.2], "marks": [[0.3], [-0.2]], "horizon": 2.0},
            "sigma_y": 1.0,
            "replicates": reps,
            "methods": [
                {"method": "discretised", "deltas": [0.1, 0.25], "particles": [200]},
                {"method": "continuous", "deltas": [0.1], "particles": [200]},
            ],
            "output": "bench.csv",
        }

    def test_cells_and_columns(self, tmp_path, out_dir):
        cfg = write_config(tmp_path / "bench.yaml", self.bench_config())
        assert main(["likelihood-bench", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        with open(out_dir / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert set(rows[0]) == {"method", "delta", "particles", "work_units", "cpu_seconds", "rmse"}
        assert all(float(r["rmse"]) >= 0 for r in rows)

    def test_duplicate_cells_average_to_single_row(self, tmp_path, out_dir):
        payload = self.bench_config()
        payload["methods"] = [
            {"method": "discretised", "deltas": [0.1], "particles": [100]},
            {"method": "discretised", "deltas": [0.1], "particles": [100]},
        ]
        cfg = write_config(tmp_path / "bench.yaml", payload)
        assert main(["likelihood-bench", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        with open(out_dir / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1

    def test_thread_count_never_changes_output(self, tmp_path, out_dir):
        """Replicates own replicate-keyed streams: every numeric column except
        the wall-clock measurement is identical for any worker count."""
        cfg = write_config(tmp_path / "bench.yaml", self.bench_config(reps=10))

        def strip_timing(path):
            with open(path) as fh:
                return [{k: v for k, v in row.items() if k != "cpu_seconds"} for row in csv.DictReader(fh)]

        main(["likelihood-bench", "--config", cfg, "--out-dir", str(out_dir), "--threads", "1"])
        single = strip_timing(out_dir / "bench.csv")
        main(["likelihood-bench", "--config", cfg, "--out-dir", str(out_dir), "--threads", "4"])
        assert strip_timing(out_dir / "bench.csv") == single

    def test_missing_oracle_is_config_error(self, tmp_path, out_dir):
        payload = self.bench_config()
        payload["benchmark"] = {"times": [0.4, 0.9, 1.5], "marks": [[0.1], [0.2], [0.3]], "horizon": 2.0}
        cfg = write_config(tmp_path / "bench.yaml", payload)
        assert main(["likelihood-bench", "--config", cfg, "--out-dir", str(out_dir)]) == 2


class TestPmmhCommand:
    def pmmh_config(self):
        return {
            "seed": 5,
            "model": {"kind": "brownian-benchmark"},
            "intensity": {"kind": "affine", "slope": 1.0, "intercept": 10.0},
            "parameters": [{"name": "intercept", "lower": 0.0, "upper": 5.0, "init": 2.0}],
            "backend": {"kind": "exact-oracle"},
            "iterations": 3000,
            "burn_in": 500,
            "chain": "chain.csv",
            "summary": "summary.json",
        }

    def test_exact_backend_smoke_and_reproducibility(self, tmp_path, out_dir):
        from coxpf.filters import ObservationSet

        data = tmp_path / "empty.txt"
        datagen.write_dataset(data, ObservationSet.empty(1.5))
        cfg = write_config(tmp_path / "pmmh.yaml", self.pmmh_config())
        assert main(["pmmh", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)]) == 0
        chain_bytes = (out_dir / "chain.csv").read_bytes()
        summary = json.loads((out_dir / "summary.json").read_text())
        # posterior on [0, 5] proportional to exp(-1.5 theta): mean of the
        # truncated exponential law
        scale = 1.0 / 1.5
        target = scale - 5.0 * math.exp(-5.0 / scale) / (1.0 - math.exp(-5.0 / scale))
        mean = summary["parameters"]["intercept"]["mean"]
        sd = summary["parameters"]["intercept"]["sd"]
        ess = summary["parameters"]["intercept"]["ess"] or 100.0
        assert abs(mean - target) < 4 * sd / math.sqrt(ess)
        assert main(["pmmh", "--config", cfg, "--dataset", str(data), "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "chain.csv").read_bytes() == chain_bytes


class TestBoundsCommand:
    def test_table_contents(self, tmp_path, out_dir):
        cfg = write_config(
            tmp_path / "bounds.yaml",
            {
                "lipschitz": 1.0,
                "excursion": 3.0,
                "particle_time": 1.0e4,
                "horizon": 1.0,
                "eta_rule": {"scale": 1.0, "power": 1.0},
                "deltas": {"start": 0.01, "stop": 0.64, "count": 13},
                "output": "bounds.csv",
            },
        )
        assert main(["bounds", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        with open(out_dir / "bounds.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 13
        # the averaged bound scaled by T/delta falls monotonically as the
        # step shrinks (the emitted grid is ascending in delta)
        curve = [float(r["marginal_times_t_over_delta"]) for r in rows]
        assert all(a < b for a, b in zip(curve, curve[1:]))
        # the printed design point reproduces the ~1e-55 budget order
        target = min(rows, key=lambda r: abs(float(r["delta"]) - 0.01))
        assert abs(float(target["union_budget_log10"]) - (-55.0)) < 1.5

    def test_large_eta_rows_vanish(self, tmp_path, out_dir):
        cfg = write_config(
            tmp_path / "bounds.yaml",
            {
                "eta_rule": {"scale": 50.0, "power": 1.0},
                "deltas": {"start": 0.01, "stop": 0.1, "count": 5},
                "output": "big.csv",
            },
        )
        assert main(["bounds", "--config", cfg, "--out-dir", str(out_dir)]) == 0
        with open(out_dir / "big.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["endpoint_bound"]) < 1e-12 for r in rows)
        assert all(float(r["marginal_bound"]) < 1e-12 for r in rows)
