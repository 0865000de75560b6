import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from mlfci.cli import main

from test_backtest import write_panel_csv


def run_cli(*argv):
    return main([str(a) for a in argv])


def write_config(path, doc):
    Path(path).write_text(json.dumps(doc))
    return str(path)


SMALL_SIM = {
    "sim": {"n_assets": 20, "n_periods": 24, "n_features": 3},
    "replications": 4,
    "nn": {"hidden_widths": [3], "learning_rate": 0.01, "epochs": 10,
           "batch_size": 100000},
    "bootstrap": {"n_replicates": 6, "k_epochs": 2},
    "fourier_order": 1,
}


class TestSimulateCommand:
    def test_writes_four_scheme_files(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", SMALL_SIM)
        out = tmp_path / "out"
        assert run_cli("simulate", "--config", cfg, "--seed", 3,
                       "--out-dir", out, "--threads", 1) == 0
        files = sorted(p.name for p in out.glob("tstats_*.csv"))
        assert files == [
            "tstats_analytic.csv",
            "tstats_bootstrap_cross_sectional.csv",
            "tstats_bootstrap_iid.csv",
            "tstats_bootstrap_time_clustered.csv",
        ]
        assert (out / "coverage.json").exists()
        assert (out / "summary.txt").exists()
        doc = json.loads((out / "coverage.json").read_text())
        assert doc["replications"] == 4

    def test_zero_replications_is_config_error(self, tmp_path, capsys):
        bad = dict(SMALL_SIM, replications=0)
        cfg = write_config(tmp_path / "cfg.json", bad)
        assert run_cli("simulate", "--config", cfg, "--out-dir", tmp_path) == 2
        assert "config.replications" in capsys.readouterr().err

    def test_unknown_key_rejected_with_path(self, tmp_path, capsys):
        bad = dict(SMALL_SIM, typo_key=1)
        cfg = write_config(tmp_path / "cfg.json", bad)
        assert run_cli("simulate", "--config", cfg, "--out-dir", tmp_path) == 2
        assert "config.typo_key" in capsys.readouterr().err

    def test_default_small_config_completes(self, tmp_path):
        # the documented small run: 100 assets, 60 months, 50 replications
        cfg = write_config(tmp_path / "cfg.json", {
            "sim": {"n_assets": 100, "n_periods": 60, "n_features": 5},
            "replications": 50,
            "nn": {"hidden_widths": [4, 4, 4], "learning_rate": 0.01,
                   "epochs": 150, "batch_size": 100000},
            "bootstrap": {"n_replicates": 20, "k_epochs": 5, "batch_size": 500},
            "fourier_order": 2,
        })
        out = tmp_path / "out"
        assert run_cli("simulate", "--config", cfg, "--seed", 7, "--threads", 2,
                       "--out-dir", out) == 0
        assert len(list(out.glob("tstats_*.csv"))) == 4
        doc = json.loads((out / "coverage.json").read_text())
        assert doc["replications"] == 50 and not doc["failures"]


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "panel.csv"
    write_panel_csv(path, n_assets=5, months=("1995-01", "2000-12"), seed=5)
    return str(path)


@pytest.fixture(scope="module")
def weights_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "weights.csv"
    lines = ["asset_id,weight"] + [f"A{i:02d},0.2" for i in range(5)]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


FCI_CONFIG = {
    "nn": {"hidden_widths": [4], "learning_rate": 0.01, "epochs": 20,
           "batch_size": 100000},
    "bootstrap": {"n_replicates": 8, "k_epochs": 2},
    "fourier_order": 1,
    "level": 0.95,
}


class TestFciCommand:
    def test_forecast_json(self, tmp_path, panel_csv, weights_csv):
        cfg = write_config(tmp_path / "cfg.json", FCI_CONFIG)
        out = tmp_path / "out"
        assert run_cli("fci", "--panel", panel_csv, "--weights", weights_csv,
                       "--config", cfg, "--seed", 1, "--out-dir", out) == 0
        doc = json.loads((out / "forecast.json").read_text())
        lo, hi = doc["analytic"]["interval"]
        assert lo <= doc["point_forecast"] <= hi
        assert doc["conservative"]["se"] >= doc["analytic"]["se"] - 1e-15
        assert doc["conservative"]["se"] >= doc["bootstrap"]["sigma_star"] - 1e-15

    def test_zero_weights_give_zero_forecast(self, tmp_path, panel_csv):
        wpath = tmp_path / "w0.csv"
        wpath.write_text("asset_id,weight\n" +
                         "\n".join(f"A{i:02d},0.0" for i in range(5)) + "\n")
        cfg = write_config(tmp_path / "cfg.json", FCI_CONFIG)
        out = tmp_path / "out"
        assert run_cli("fci", "--panel", panel_csv, "--weights", wpath,
                       "--config", cfg, "--out-dir", out) == 0
        doc = json.loads((out / "forecast.json").read_text())
        assert doc["point_forecast"] == 0.0
        assert doc["analytic"]["se"] == 0.0
        assert doc["bootstrap"]["sigma_star"] == 0.0

    def test_missing_weights_file_is_usage_error(self, tmp_path, panel_csv, capsys):
        cfg = write_config(tmp_path / "cfg.json", FCI_CONFIG)
        assert run_cli("fci", "--panel", panel_csv, "--weights",
                       tmp_path / "nope.csv", "--config", cfg,
                       "--out-dir", tmp_path) == 2
        assert "not found" in capsys.readouterr().err


class TestPortfolioCommand:
    def test_single_asset_soft_threshold_in_json(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "kind": "ua", "z_hat": [0.06], "q_alpha": [0.03],
            "sigma": [[0.04]], "gamma": 3.0,
        })
        out = tmp_path / "out"
        assert run_cli("portfolio", "--config", cfg, "--out-dir", out) == 0
        doc = json.loads((out / "weights.json").read_text())
        assert doc["omega"][0] == pytest.approx(0.25, abs=1e-8)
        csv = (out / "weights.csv").read_text().splitlines()
        assert csv[0] == "asset_id,omega"

    def test_rs_kind(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "kind": "rs", "z_hat": [0.05, 0.02], "sigma": [[0.04, 0.0], [0.0, 0.09]],
            "fse2": [[0.0001, 0.0], [0.0, 0.0004]], "prior_mean": [0.0, 0.0],
            "prior_scale": 1.0, "gamma": 2.0, "tau": 1.0,
        })
        out = tmp_path / "out"
        assert run_cli("portfolio", "--config", cfg, "--out-dir", out) == 0
        doc = json.loads((out / "weights.json").read_text())
        assert len(doc["omega"]) == 2

    def test_bad_kind_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", {
            "kind": "magic", "z_hat": [0.1], "sigma": [[0.1]],
        })
        assert run_cli("portfolio", "--config", cfg, "--out-dir", tmp_path) == 2


class TestSelectCommand:
    def test_bh_decisions_match_hand_computation(self, tmp_path):
        # z/se chosen so one-sided p-values are [0.001-ish, large]
        cfg = write_config(tmp_path / "cfg.json", {
            "strategy": "fci_fdr",
            "z_hat": [0.05, 0.001, 0.04],
            "se": [0.01, 0.01, 0.01],
            "alpha": 0.05, "k_portfolio": 2,
        })
        out = tmp_path / "out"
        assert run_cli("select", "--config", cfg, "--out-dir", out) == 0
        doc = json.loads((out / "selection.json").read_text())
        # t = [5, 0.1, 4]: assets 0 and 2 clearly significant, asset 1 not
        assert doc["chosen"] == [0, 2]
        lines = (out / "selection.csv").read_text().splitlines()
        assert lines[0] == "asset_id,t_stat,p_value,rejected,chosen,weight"
        assert len(lines) == 4

    def test_highest_k(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "strategy": "highest_k", "z_hat": [3.0, 1.0, 2.0], "k_portfolio": 2,
        })
        out = tmp_path / "out"
        assert run_cli("select", "--config", cfg, "--out-dir", out) == 0
        doc = json.loads((out / "selection.json").read_text())
        assert doc["chosen"] == [0, 2]


BT_CONFIG = {
    "plan": {"train_start": "1995-02", "train_end": "1996-12",
             "test_start": "1999-01", "test_end": "1999-12", "val_years": 2},
    "backtest": {"k_portfolio": 2, "se_window_months": 36, "cov_window_months": 36,
                 "naive_window_months": 36, "min_history_months": 6,
                 "fourier_order": 1, "shrinkage": 0.3},
    "nn": {"hidden_widths": [4], "learning_rate": 0.01, "epochs": 10,
           "batch_size": 100000},
    "bootstrap": {"n_replicates": 4, "k_epochs": 2},
}


def make_factor_csv(path, months):
    rng = np.random.default_rng(8)
    header = "month,mkt_rf,smb,hml,rmw,cma,mom,st_rev"
    rows = [f"{m}," + ",".join(repr(round(float(v), 8)) for v in
                               rng.standard_normal(7) * 0.02)
            for m in months]
    Path(path).write_text(header + "\n" + "\n".join(rows) + "\n")
    return str(path)


class TestBacktestCommand:
    def test_smoke_outputs(self, tmp_path, panel_csv):
        months = [f"1999-{m:02d}" for m in range(1, 13)]
        factors = make_factor_csv(tmp_path / "factors.csv", months)
        cfg = write_config(tmp_path / "cfg.json", BT_CONFIG)
        out = tmp_path / "out"
        assert run_cli("backtest", "--panel", panel_csv, "--factors", factors,
                       "--config", cfg, "--seed", 2, "--out-dir", out) == 0
        perf = json.loads((out / "perf.json").read_text())
        for strat, stats in perf.items():
            for key in ("ann_mean", "ann_sd", "max_drawdown"):
                assert np.isfinite(stats[key]), (strat, key)
        alphas = json.loads((out / "alphas.json").read_text())
        assert set(alphas["ew"]) == {"CAPM", "FF3", "FF4", "FF5", "FF6", "FF6+"}
        returns = (out / "returns.csv").read_text().splitlines()
        assert len(returns) == 13
        assert (out / "weights" / "ew.csv").exists()


class TestDeterminism:
    """Fixed seed gives byte-identical outputs across runs and thread counts."""

    @staticmethod
    def _assert_identical_dirs(a, b):
        a, b = Path(a), Path(b)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    def test_simulate_by_threads(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", SMALL_SIM)
        outs = []
        for name, threads in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp_path / name
            assert run_cli("simulate", "--config", cfg, "--seed", 11,
                           "--threads", threads, "--out-dir", out) == 0
            outs.append(out)
        self._assert_identical_dirs(outs[0], outs[1])
        self._assert_identical_dirs(outs[0], outs[2])

    def test_fci_by_threads(self, tmp_path, panel_csv, weights_csv):
        cfg = write_config(tmp_path / "cfg.json", FCI_CONFIG)
        outs = []
        for name, threads in (("a", 1), ("b", 4)):
            out = tmp_path / name
            assert run_cli("fci", "--panel", panel_csv, "--weights", weights_csv,
                           "--config", cfg, "--seed", 5, "--threads", threads,
                           "--out-dir", out) == 0
            outs.append(out)
        self._assert_identical_dirs(outs[0], outs[1])

    def test_train_portfolio_select_backtest_repeatable(self, tmp_path, panel_csv):
        jobs = [
            ("train", ["--panel", panel_csv, "--config",
                       write_config(tmp_path / "t.json",
                                    {"nn": {"hidden_widths": [3], "epochs": 5,
                                            "batch_size": 64}})]),
            ("portfolio", ["--config",
                           write_config(tmp_path / "p.json",
                                        {"kind": "ua", "z_hat": [0.05, -0.02],
                                         "q_alpha": [0.01, 0.01],
                                         "sigma": [[0.04, 0.01], [0.01, 0.09]],
                                         "gamma": 2.0})]),
            ("select", ["--config",
                        write_config(tmp_path / "s.json",
                                     {"strategy": "fci_fdr",
                                      "z_hat": [0.03, 0.01], "se": [0.005, 0.02],
                                      "alpha": 0.1, "k_portfolio": 1})]),
            ("backtest", ["--panel", panel_csv, "--config",
                          write_config(tmp_path / "b.json", BT_CONFIG)]),
        ]
        for cmd, extra in jobs:
            out1, out2 = tmp_path / f"{cmd}1", tmp_path / f"{cmd}2"
            assert run_cli(cmd, *extra, "--seed", 9, "--out-dir", out1,
                           "--threads", 1) == 0
            assert run_cli(cmd, *extra, "--seed", 9, "--out-dir", out2,
                           "--threads", 4) == 0
            self._assert_identical_dirs(out1, out2)


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["fci"])  # missing required --panel/--weights
    assert exc.value.code == 2
