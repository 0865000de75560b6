"""Command-line interface.

Subcommands: simulate, train, fci, portfolio, select, backtest. Every run is
driven by a JSON config (validated against a whitelist of keys, unknown keys
rejected with their path) plus the flags --seed, --threads, and --out-dir.
All randomness is derived from the single --seed value. Outputs are plain
CSV/JSON written with deterministic formatting, so a fixed seed reproduces
files byte for byte regardless of the thread count.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import bootstrap as bs
from . import fourier, nn, portfolio, selection, simulate
from .errors import ConfigError, DataError, NumericalError


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _check_keys(doc: dict, allowed, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key: {path}.{unknown[0]}")


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"missing config key: {path}.{key}")
    return doc[key]


def _positive_int(value, path: str, minimum=1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{path} must be an integer >= {minimum}")
    return value


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


# -- config builders -------------------------------------------------------

_NN_KEYS = ("hidden_widths", "learning_rate", "epochs", "batch_size", "l2_penalty")


def _nn_from(doc: dict, seed: int, path: str, default_epochs=100):
    _check_keys(doc, _NN_KEYS, path)
    widths = tuple(doc.get("hidden_widths", (32, 16, 8)))
    try:
        cfg = nn.TrainConfig(
            learning_rate=doc.get("learning_rate", 0.001),
            epochs=doc.get("epochs", default_epochs),
            batch_size=doc.get("batch_size", 10_000),
            l2_penalty=doc.get("l2_penalty", 0.0),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return widths, cfg


_BS_KEYS = ("n_replicates", "k_epochs", "scheme", "alpha", "batch_size")


def _bs_from(doc: dict, seed: int, path: str):
    _check_keys(doc, _BS_KEYS, path)
    try:
        return bs.BootstrapConfig(
            n_replicates=doc.get("n_replicates", 100),
            k_epochs=doc.get("k_epochs", 10),
            scheme=doc.get("scheme", bs.SCHEME_TIME_CLUSTERED),
            alpha=doc.get("alpha", 0.05),
            batch_size=doc.get("batch_size"),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SIM_KEYS = ("n_assets", "n_periods", "n_features", "ar_coef", "innovation_scale",
             "factor_mean", "factor_cov", "target_idio_share", "s_range")


def _sim_from(doc: dict, seed: int, path: str):
    _check_keys(doc, _SIM_KEYS, path)
    kwargs = dict(doc)
    for key in ("n_assets", "n_periods", "n_features"):
        _positive_int(_require(kwargs, key, path), f"{path}.{key}", 2)
    if "factor_mean" in kwargs:
        kwargs["factor_mean"] = tuple(kwargs["factor_mean"])
    if "factor_cov" in kwargs:
        kwargs["factor_cov"] = tuple(map(tuple, kwargs["factor_cov"]))
    if "s_range" in kwargs:
        kwargs["s_range"] = tuple(kwargs["s_range"])
    try:
        return simulate.SimConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _read_panel(path) -> "bt.Panel":
    return bt.load_panel(path)


# -- subcommands -----------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, ("sim", "replications", "methods", "nn", "bootstrap",
                         "fourier_order", "levels"), "config")
    sim_cfg = _sim_from(_require(config, "sim", "config"), args.seed, "config.sim")
    reps = _positive_int(_require(config, "replications", "config"),
                         "config.replications", 2)
    methods = tuple(config.get("methods", simulate.ALL_METHODS))
    widths, nn_cfg = _nn_from(config.get("nn", {}), _derive_seed(args.seed, 1),
                              "config.nn", default_epochs=500)
    bs_cfg = _bs_from(config.get("bootstrap", {}), _derive_seed(args.seed, 2),
                      "config.bootstrap")
    arch = nn.MlpArchitecture(input_dim=sim_cfg.n_features, hidden_widths=widths)
    report = simulate.coverage_experiment(
        sim_cfg, reps, methods, arch, nn_cfg, bs_cfg,
        fourier_order=config.get("fourier_order", 3),
        levels=tuple(config.get("levels", (0.90, 0.95, 0.99))),
        n_jobs=args.threads,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, method in report.methods.items():
        _write_csv(out / f"tstats_{name}.csv", ("replication", "t_stat", "scale"),
                   [(i, float(t), float(s)) for i, (t, s)
                    in enumerate(zip(method.t_stats, method.scales))])
    _write_json(out / "coverage.json", report.to_dict())
    lines = [f"{'method':32s} {'mean':>9s} {'sd':>9s} {'cov90':>7s} {'cov95':>7s} "
             f"{'cov99':>7s} {'ks':>7s}"]
    for name, m in report.methods.items():
        lines.append(
            f"{name:32s} {m.mean:+9.4f} {m.sd:9.4f} {m.coverage[0.90]:7.3f} "
            f"{m.coverage[0.95]:7.3f} {m.coverage[0.99]:7.3f} {m.ks_distance:7.3f}"
        )
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, ("nn",), "config")
    panel = _read_panel(args.panel)
    widths, nn_cfg = _nn_from(config.get("nn", {}), _derive_seed(args.seed, 1),
                              "config.nn")
    arch = nn.MlpArchitecture(input_dim=panel.n_features, hidden_widths=widths)
    model = nn.train(panel, arch, nn_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model.to_json() + "\n")
    _write_json(out / "training_meta.json", model.training_meta)
    return 0


def _read_weights(path, panel) -> np.ndarray:
    import pandas as pd
    try:
        table = pd.read_csv(path, dtype={"asset_id": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"could not read weights CSV {path}: {exc}") from None
    if not {"asset_id", "weight"} <= set(table.columns):
        raise DataError("weights CSV needs columns asset_id, weight")
    lookup = dict(zip(table["asset_id"], table["weight"].astype(float)))
    unknown = set(lookup) - set(panel.asset_ids)
    if unknown:
        raise DataError(f"weights refer to unknown asset ids, e.g. {sorted(unknown)[0]}")
    return np.array([lookup.get(a, 0.0) for a in panel.asset_ids])


def cmd_fci(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, ("nn", "bootstrap", "level", "fourier_order"), "config")
    panel = _read_panel(args.panel)
    weights = _read_weights(args.weights, panel)
    level = config.get("level", 0.95)
    widths, nn_cfg = _nn_from(config.get("nn", {}), _derive_seed(args.seed, 1),
                              "config.nn")
    bs_cfg = _bs_from(config.get("bootstrap", {}), _derive_seed(args.seed, 2),
                      "config.bootstrap")
    arch = nn.MlpArchitecture(input_dim=panel.n_features, hidden_widths=widths)
    model = nn.train(panel, arch, nn_cfg)
    point = float(weights @ nn.predict(model, panel.latest_features))

    basis = fourier.FourierBasis(order=config.get("fourier_order", 3),
                                 input_dim=panel.n_features)
    fit = fourier.fit_ols(panel, basis)
    se_res = fourier.analytic_se(fit, basis, panel, weights, panel.latest_features)
    boot = bs.run(panel, model, weights, panel.latest_features, nn_cfg,
                  replace(bs_cfg, alpha=1.0 - level), n_jobs=args.threads)
    se_max = max(se_res.se, boot.sigma_star)
    doc = {
        "point_forecast": point,
        "level": level,
        "analytic": se_res.to_dict(point_forecast=point, level=level),
        "bootstrap": boot.to_dict(),
        "conservative": {
            "se": se_max,
            "interval": list(fourier.fci(point, se_max, level)),
        },
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "forecast.json", doc)
    return 0


_PORTFOLIO_KEYS = ("kind", "z_hat", "q_alpha", "sigma", "gamma", "budget_constraint",
                   "se", "level", "bonferroni", "fse2", "prior_mean", "prior_scale",
                   "tau", "shrinkage")


def cmd_portfolio(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, _PORTFOLIO_KEYS, "config")
    kind = config.get("kind", "ua")
    z = np.asarray(_require(config, "z_hat", "config"), dtype=float)
    sigma = np.asarray(_require(config, "sigma", "config"), dtype=float)
    gamma = float(config.get("gamma", 1.0))
    try:
        if kind == "mv":
            result = portfolio.mv_weights(z, sigma, gamma)
        elif kind in ("ua", "two_asset"):
            if "q_alpha" in config:
                q = np.asarray(config["q_alpha"], dtype=float)
            elif "se" in config:
                q = portfolio.confidence_to_q(
                    np.asarray(config["se"], dtype=float), config.get("level", 0.95),
                    n_assets=len(z) if config.get("bonferroni") else None)
            else:
                raise ConfigError("config needs q_alpha or se for uncertainty-averse "
                                  "portfolios")
            if kind == "two_asset":
                result = portfolio.two_asset_no_riskfree(z, q, sigma, gamma)
            else:
                prob = portfolio.UaProblem(
                    z_hat=z, q_alpha=q, sigma=sigma, gamma=gamma,
                    budget_constraint=bool(config.get("budget_constraint", False)))
                result = portfolio.ua_weights(prob)
        elif kind == "rs":
            prob = portfolio.RsProblem(
                z_hat=z,
                fse2=np.asarray(_require(config, "fse2", "config"), dtype=float),
                prior_mean=np.asarray(_require(config, "prior_mean", "config"),
                                      dtype=float),
                prior_scale=float(_require(config, "prior_scale", "config")),
                sigma=sigma, gamma=gamma,
                tau=float(_require(config, "tau", "config")))
            result = portfolio.rs_weights(prob)
        else:
            raise ConfigError(f"config.kind must be mv, ua, two_asset, or rs, "
                              f"got {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "weights.json", {"kind": kind, **result.to_dict()})
    _write_csv(out / "weights.csv", ("asset_id", "omega"),
               list(enumerate(result.omega.tolist())))
    return 0


_SELECT_KEYS = ("strategy", "z_hat", "se", "alpha", "k_portfolio", "asset_ids",
                "history", "two_sided")


def cmd_select(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, _SELECT_KEYS, "config")
    strategy = config.get("strategy", "fci_fdr")
    z = np.asarray(_require(config, "z_hat", "config"), dtype=float)
    alpha = float(config.get("alpha", 0.05))
    k = _positive_int(config.get("k_portfolio", len(z)), "config.k_portfolio")
    ids = tuple(config.get("asset_ids", range(len(z))))
    try:
        if strategy == "fci_fdr":
            se = np.asarray(_require(config, "se", "config"), dtype=float)
            if config.get("two_sided"):
                # diagnostics only: two-sided p-values fed through the same rule
                t = z / se
                from scipy.stats import norm as _norm
                p = 2.0 * _norm.sf(np.abs(t))
                base = selection.bh_select(p, alpha, asset_ids=ids)
                result = selection._equal_weight_result(base, z, t, p, k)
            else:
                result = selection.strategy_fci_fdr(z, se, alpha, k, asset_ids=ids)
        elif strategy == "highest_k":
            result = selection.strategy_highest_k(z, k, asset_ids=ids)
        elif strategy == "naive_fdr":
            history = np.asarray(_require(config, "history", "config"), dtype=float)
            result = selection.strategy_naive_fdr(history, alpha, k, z, asset_ids=ids)
        else:
            raise ConfigError(f"config.strategy must be fci_fdr, highest_k, or "
                              f"naive_fdr, got {strategy!r}")
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "selection.csv",
               ("asset_id", "t_stat", "p_value", "rejected", "chosen", "weight"),
               result.to_rows())
    _write_json(out / "selection.json", {
        "strategy": strategy,
        "cutoff": result.cutoff,
        "k_bh": result.k_bh,
        "chosen": list(result.chosen),
        "empty": result.empty,
    })
    return 0


_BACKTEST_KEYS = ("plan", "backtest", "nn", "bootstrap")
_PLAN_KEYS = ("train_start", "train_end", "test_start", "test_end", "val_years",
              "retrain_every_months")
_BT_KEYS = ("strategies", "gamma", "vol_target", "gmvp_vol_target", "ua_levels",
            "fdr_alpha", "k_portfolio", "se_method", "l2_grid", "se_window_months",
            "cov_window_months", "naive_window_months", "shrinkage", "fourier_order",
            "min_history_months", "top_n", "size_column", "min_size_quantile")


def cmd_backtest(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, _BACKTEST_KEYS, "config")
    plan_doc = _require(config, "plan", "config")
    _check_keys(plan_doc, _PLAN_KEYS, "config.plan")
    try:
        plan = bt.SplitPlan(**plan_doc)
    except TypeError as exc:
        raise ConfigError(f"config.plan: {exc}") from None
    bt_doc = dict(config.get("backtest", {}))
    _check_keys(bt_doc, _BT_KEYS, "config.backtest")
    for key in ("strategies", "ua_levels", "l2_grid"):
        if key in bt_doc:
            bt_doc[key] = tuple(bt_doc[key])
    try:
        bt_cfg = bt.BacktestConfig(**bt_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.backtest: {exc}") from None
    panel = _read_panel(args.panel)
    widths, nn_cfg = _nn_from(config.get("nn", {}), _derive_seed(args.seed, 1),
                              "config.nn")
    bs_cfg = _bs_from(config.get("bootstrap", {}), _derive_seed(args.seed, 2),
                      "config.bootstrap")
    arch = nn.MlpArchitecture(input_dim=panel.n_features, hidden_widths=widths)
    result = bt.rolling_run(panel, plan, bt_cfg, arch, nn_cfg, bs_cfg,
                            n_jobs=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["month"] + list(bt_cfg.strategies)
    rows = [[m] + [float(result.returns[s][i]) for s in bt_cfg.strategies]
            for i, m in enumerate(result.months)]
    _write_csv(out / "returns.csv", header, rows)
    cum = {s: np.cumprod(1.0 + result.returns[s]) for s in bt_cfg.strategies}
    _write_csv(out / "cumulative.csv", header,
               [[m] + [float(cum[s][i]) for s in bt_cfg.strategies]
                for i, m in enumerate(result.months)])
    perf = {}
    for s in bt_cfg.strategies:
        zf = result.zero_fraction.get(s)
        perf[s] = bt.perf_stats(result.returns[s], zero_fractions=zf).to_dict()
    _write_json(out / "perf.json", perf)
    weights_dir = out / "weights"
    weights_dir.mkdir(exist_ok=True)
    for s in bt_cfg.strategies:
        rows = []
        for month in result.months:
            ids, omega = result.weights[s][month]
            rows.extend((month, a, float(w)) for a, w in zip(ids, omega))
        _write_csv(weights_dir / f"{s}.csv", ("month", "asset_id", "omega"), rows)
    _write_json(out / "run_meta.json", {
        "chosen_l2": [[m, lam] for m, lam in result.chosen_l2],
        "skipped": result.skipped,
    })
    if args.factors:
        factors = bt.load_factor_table(args.factors)
        alphas = {}
        for s in bt_cfg.strategies:
            report = bt.alpha_regressions(result.returns[s], result.months, factors)
            alphas[s] = report.to_dict()
        _write_json(out / "alphas.json", alphas)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlfci",
        description="Forecast confidence intervals for ML return predictions, "
                    "uncertainty-averse portfolios, and FDR asset selection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, panel=False, weights=False, factors=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0,
                       help="master seed for all randomness")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="parallel worker cap")
        p.add_argument("--out-dir", default=".", help="output directory")
        if panel:
            p.add_argument("--panel", required=True, help="panel CSV path")
        if weights:
            p.add_argument("--weights", required=True, help="portfolio weights CSV")
        if factors:
            p.add_argument("--factors", help="factor returns CSV (optional)")

    add_common(sub.add_parser("simulate", help="Monte Carlo coverage experiment"))
    add_common(sub.add_parser("train", help="train the forecaster on a panel"),
               panel=True)
    add_common(sub.add_parser("fci", help="forecast with confidence intervals"),
               panel=True, weights=True)
    add_common(sub.add_parser("portfolio", help="portfolio weights from forecasts"))
    add_common(sub.add_parser("select", help="FDR-controlled asset selection"))
    add_common(sub.add_parser("backtest", help="rolling-window backtest"),
               panel=True, factors=True)
    return parser


_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "fci": cmd_fci,
    "portfolio": cmd_portfolio,
    "select": cmd_select,
    "backtest": cmd_backtest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be positive")
    # input files are part of the usage contract: a missing path is exit 2
    for attr in ("config", "panel", "weights", "factors"):
        path = getattr(args, attr, None)
        if path is not None and not os.path.exists(path):
            print(f"error: {attr} file not found: {path}", file=sys.stderr)
            return 2
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
