"""Command-line front end: `regime-xai features|run|verify|synth`.

`features` builds per-period model matrices from CSV inputs, `run` executes
the full fit/explain/compare pipeline, `verify` runs reduced self-checks of
the explanation engines, and `synth` emits a synthetic two-regime dataset
plus a ready-to-run config for demos and end-to-end tests.

Logs go to stderr, data to files. Exit codes: 0 ok, 1 invalid config or
inputs, 2 runtime failure. Failures also emit a one-line JSON error record
on stderr. The environment variable REGIME_XAI_THREADS caps row-level
explanation parallelism; results do not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

import regime_xai
from regime_xai.config import ConfigError, RunConfig, load_config
from regime_xai.experiment import (
    compare_periods,
    run_period,
    window_metrics,
    write_comparison_csv,
    write_dependence_csv,
    write_importance_csv,
    write_manifest,
)
from regime_xai.gbt import (
    GbtParams,
    ensemble_from_json,
    ensemble_to_json,
    fit_gbt,
)
from regime_xai.mlp import MlpParams, grad_check, initial_net
from regime_xai.seeds import derive_seed
from regime_xai.shap import (
    Background,
    as_predict_fn,
    exact_shap,
    explain_dataset,
    kernel_shap,
    tree_shap,
)
from regime_xai.timeseries import (
    FeatureMatrix,
    PriceInputs,
    TimeSeriesError,
    TimeTable,
    align_join,
    format_timestamp,
    load_table,
    mixed_price,
    resample_mean,
    residual_load,
    synth_regime,
    with_column,
)
from regime_xai import experiment as experiment_mod

log = logging.getLogger("regime_xai")

PERIOD_ORDER = ("before", "after")


# ------------------------------------------------------------ feature builds


def _samples_per_day(resolution_hours: float) -> int:
    per_day = 24.0 / resolution_hours
    if abs(per_day - round(per_day)) > 1e-9:
        raise TimeSeriesError(f"resolution {resolution_hours:g}h does not divide a day")
    return int(round(per_day))


def _owning_table(tables: list[TimeTable], needed: list[str], context: str) -> int:
    for i, table in enumerate(tables):
        if all(col in table.columns for col in needed):
            return i
    raise ConfigError(f"{context}: columns {needed} not found together in any input table")


def build_features(config: RunConfig) -> tuple[dict[str, FeatureMatrix], dict]:
    """Load, resample and feature-engineer the inputs into per-period matrices.

    Returns the matrices keyed by period name plus a report with row and
    drop counts. Derived columns are computed at the model resolution.
    """
    tables = [load_table(spec.path, spec.resolution_hours) for spec in config.inputs]
    if config.features.resample_hours is not None:
        target_res = config.features.resample_hours
        tables = [
            t if t.resolution_hours == target_res else resample_mean(t, target_res)
            for t in tables
        ]

    for spec in config.features.residual_loads:
        needed = [spec.load, spec.wind, spec.solar, spec.ror]
        i = _owning_table(tables, needed, f"residual load {spec.name!r}")
        t = tables[i]
        series = residual_load(
            t.columns[spec.load],
            t.columns[spec.wind],
            t.columns[spec.solar],
            t.columns[spec.ror],
            ror_lag_days=spec.ror_lag_days,
            samples_per_day=_samples_per_day(t.resolution_hours),
        )
        tables[i] = with_column(t, spec.name, series)

    for spec in config.features.mixed_prices:
        i = _owning_table(tables, [spec.capacity, spec.energy], f"mixed price {spec.name!r}")
        t = tables[i]
        series = mixed_price(PriceInputs(t.columns[spec.capacity], t.columns[spec.energy], spec.alpha))
        tables[i] = with_column(t, spec.name, series)

    frames: dict[str, FeatureMatrix] = {}
    report = {"periods": {}, "columns": list(config.features.columns)}
    for name in PERIOD_ORDER:
        period = config.periods[name]
        target_col = config.features.target[name]
        joined = align_join(tables, list(config.features.columns), target_col)
        in_period = (joined.timestamps >= period.start_epoch) & (joined.timestamps < period.end_epoch)
        frames[name] = joined.take(np.flatnonzero(in_period))
        report["periods"][name] = {
            "target": target_col,
            "rows": int(len(frames[name])),
            "rows_dropped_in_join": int(joined.n_dropped),
        }
        if len(frames[name]) == 0:
            raise TimeSeriesError(f"period {name!r} contains no usable rows")
    return frames, report


def write_feature_csv(path, fm: FeatureMatrix, target_name: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + list(fm.feature_names) + [target_name])
        for i in range(len(fm)):
            writer.writerow(
                [format_timestamp(fm.timestamps[i])]
                + [repr(float(v)) for v in fm.X[i]]
                + [repr(float(fm.y[i]))]
            )


# ------------------------------------------------------------------ commands


def cmd_features(config: RunConfig) -> dict:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, report = build_features(config)
    for name, fm in frames.items():
        path = out_dir / f"features_{name}.csv"
        write_feature_csv(path, fm, config.features.target[name])
        log.info("wrote %s (%d rows)", path, len(fm))
    report_path = out_dir / "features_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s", report_path)
    return report


def cmd_run(config: RunConfig) -> dict:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, feature_report = build_features(config)

    exp_config = config.experiment
    threads = os.environ.get("REGIME_XAI_THREADS")
    if threads:
        exp_config = replace(exp_config, n_workers=max(1, int(threads)))

    results = {}
    period_seeds = {}
    for index, name in enumerate(PERIOD_ORDER):
        period_seeds[name] = derive_seed(config.seed, index)
        log.info("fitting %s models for period %s", config.model_kind, name)
        results[name] = run_period(
            frames[name], config.periods[name], config.model_kind, exp_config, period_seeds[name]
        )
    comparison = compare_periods(results["before"], results["after"])

    outputs = {
        "importance": "importance.csv",
        "comparison": "comparison.csv",
        "dependence": "dependence.csv",
        "manifest": "manifest.json",
    }
    write_importance_csv(out_dir / outputs["importance"], results)
    write_comparison_csv(out_dir / outputs["comparison"], comparison)
    write_dependence_csv(out_dir / outputs["dependence"], results)

    manifest = {
        "toolkit_version": regime_xai.__version__,
        "config": config.echo,
        "overrides": list(config.overrides),
        "seed": config.seed,
        "period_seeds": period_seeds,
        "features": feature_report,
        "metrics": {name: window_metrics(results[name]) for name in PERIOD_ORDER},
        "flagged_features": [
            feat for feat, hit in zip(comparison.feature_names, comparison.flagged) if hit
        ],
        "outputs": outputs,
    }
    write_manifest(out_dir / outputs["manifest"], manifest)
    for key in ("importance", "comparison", "dependence", "manifest"):
        log.info("wrote %s", out_dir / outputs[key])
    return manifest


def cmd_synth(out_dir, n_rows: int = 960, seed: int = 0) -> Path:
    """Write a stacked two-regime synthetic dataset and a matching config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    period_a, period_b = synth_regime(n_rows, seed=seed)

    data_path = out_dir / "synth_data.csv"
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "x1", "x2", "x3", "y"])
        for fm in (period_a, period_b):
            for i in range(len(fm)):
                writer.writerow(
                    [format_timestamp(fm.timestamps[i])]
                    + [repr(float(v)) for v in fm.X[i]]
                    + [repr(float(fm.y[i]))]
                )

    boundary = format_timestamp(period_b.timestamps[0])
    config = {
        "inputs": [{"path": "synth_data.csv", "resolution_hours": 1}],
        "features": {"columns": ["x1", "x2", "x3"], "target": "y"},
        "periods": {
            "before": {"start": format_timestamp(period_a.timestamps[0]), "end": boundary},
            "after": {"start": boundary, "end": format_timestamp(period_b.timestamps[-1] + 3600)},
        },
        "model": {
            "kind": "gbt",
            "gbt": {"n_trees": 60, "max_depth": 3, "min_samples_leaf": 20, "learning_rate": 0.1},
            "mlp": {"hidden_sizes": [32, 32], "max_epochs": 150},
        },
        "shap": {"background_size": 50},
        "seed": seed,
        "output_dir": "run_output",
    }
    config_path = out_dir / "synth_config.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    log.info("wrote %s and %s", data_path, config_path)
    return config_path


# ---------------------------------------------------------------- self-tests


def _check_tree_oracle(tamper=None):
    """Serialize, reload, and compare tree explanations against the
    brute-force enumeration of the original model."""
    rng = np.random.default_rng(101)
    worst = 0.0
    for seed in range(5):
        X = rng.uniform(-1, 1, size=(60, 6))
        y = rng.standard_normal(60)
        fm = FeatureMatrix(tuple(f"f{i}" for i in range(6)), X, y, np.arange(60))
        model = fit_gbt(fm, GbtParams(n_trees=5, max_depth=3, min_samples_leaf=5, learning_rate=0.3))
        text = ensemble_to_json(model)
        if tamper is not None:
            text = tamper(text)
        loaded = ensemble_from_json(text)
        fn = as_predict_fn(model)
        bg = Background(rng.uniform(-1, 1, size=(5, 6)))
        for _ in range(10):
            x = rng.uniform(-1, 1, size=6)
            phi_t, phi0_t = tree_shap(loaded, x, bg)
            phi_e, phi0_e = exact_shap(fn, x, bg)
            worst = max(worst, float(np.max(np.abs(phi_t - phi_e))), abs(phi0_t - phi0_e))
    return worst < 1e-9, f"max deviation {worst:.2e} (tolerance 1e-9)"


def _check_kernel_oracle():
    rng = np.random.default_rng(102)
    worst = 0.0
    for seed in range(2):
        X = rng.standard_normal((60, 8))
        y = rng.standard_normal(60)
        fm = FeatureMatrix(tuple(f"f{i}" for i in range(8)), X, y, np.arange(60))
        net = initial_net(fm, MlpParams(hidden_sizes=(8, 6), seed=seed))
        fn = as_predict_fn(net)
        bg = Background(rng.standard_normal((5, 8)))
        for _ in range(5):
            x = rng.standard_normal(8)
            phi_k, phi0_k = kernel_shap(fn, x, bg)
            phi_e, phi0_e = exact_shap(fn, x, bg)
            worst = max(worst, float(np.max(np.abs(phi_k - phi_e))), abs(phi0_k - phi0_e))
    return worst < 1e-6, f"max deviation {worst:.2e} (tolerance 1e-6)"


def _check_gradients():
    rng = np.random.default_rng(103)
    worst = 0.0
    for seed in range(5):
        X = rng.standard_normal((64, 3))
        y = rng.standard_normal(64)
        fm = FeatureMatrix(("a", "b", "c"), X, y, np.arange(64))
        net = initial_net(fm, MlpParams(hidden_sizes=(6, 5), seed=seed))
        for _ in range(20):
            X_check = rng.standard_normal((8, 3))
            pre = (X_check - net.x_mean) / net.x_std
            gap = np.inf
            h = pre
            for W, b in zip(net.weights[:-1], net.biases[:-1]):
                z = h @ W.T + b
                gap = min(gap, float(np.abs(z).min()))
                h = np.maximum(z, 0.0)
            if gap > 1e-3:
                break
        worst = max(worst, grad_check(net, X_check, y[:8], epsilon=1e-5))
    return worst < 1e-4, f"max relative error {worst:.2e} (tolerance 1e-4)"


def _check_local_accuracy():
    rng = np.random.default_rng(104)
    X = rng.uniform(-1, 1, size=(150, 5))
    y = X @ rng.normal(size=5) + 0.1 * rng.standard_normal(150)
    fm = FeatureMatrix(tuple(f"f{i}" for i in range(5)), X, y, np.arange(150))
    bg = Background(rng.uniform(-1, 1, size=(10, 5)))

    model = fit_gbt(fm, GbtParams(n_trees=20, max_depth=3, min_samples_leaf=10))
    e_tree = explain_dataset(model, X[:100], bg, method="tree")
    gap_tree = float(np.max(np.abs(e_tree.phi0 + e_tree.phi.sum(axis=1) - e_tree.predictions)))

    net = initial_net(fm, MlpParams(hidden_sizes=(8,), seed=0))
    e_kernel = explain_dataset(net, X[:50], bg, method="kernel", seed=0)
    gap_kernel = float(np.max(np.abs(e_kernel.phi0 + e_kernel.phi.sum(axis=1) - e_kernel.predictions)))

    worst = max(gap_tree, gap_kernel)
    return worst < 1e-6, f"max |phi0 + sum(phi) - f(x)| = {worst:.2e} (tolerance 1e-6)"


def _check_mixed_price():
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(100):
        cap, energy = rng.uniform(-50, 50, size=2)
        alpha = float(rng.uniform(0, 0.1))
        got = mixed_price(PriceInputs(np.array([cap]), np.array([energy]), alpha))[0]
        worst = max(worst, abs(got - (cap + alpha * energy)))
    identity = mixed_price(PriceInputs(np.array([12.5]), np.array([999.0]), 0.0))[0]
    ok = worst == 0.0 and identity == 12.5
    return ok, f"max deviation {worst:.2e}, alpha=0 identity {'exact' if identity == 12.5 else 'broken'}"


def _check_split_integrity():
    rng = np.random.default_rng(106)
    for _ in range(50):
        n_blocks = int(rng.integers(5, 30))
        rows_per_day = int(rng.choice([1, 6, 24]))
        rows_per_block = 4 * rows_per_day
        extra = int(rng.integers(0, rows_per_block))
        window = range(0, n_blocks * rows_per_block + extra)
        plan = experiment_mod.split_blocks(
            window, block_days=4, test_fraction=0.2, seed=int(rng.integers(2**31)), rows_per_day=rows_per_day
        )
        if np.intersect1d(plan.train_indices, plan.test_indices).size:
            return False, "train/test overlap"
        blocks = set(plan.test_indices // rows_per_block)
        if len(plan.test_indices) != len(blocks) * rows_per_block:
            return False, "test rows are not whole blocks"
        if abs(len(blocks) - 0.2 * n_blocks) > 1.0:
            return False, "test fraction off by more than one block"
    return True, "50 random windows: whole blocks, disjoint, fraction within one block of 20%"


VERIFY_CHECKS = (
    ("tree-oracle equivalence", _check_tree_oracle),
    ("kernel-oracle equivalence (exact mode)", _check_kernel_oracle),
    ("mlp gradient check", _check_gradients),
    ("local accuracy", _check_local_accuracy),
    ("mixed price formula", _check_mixed_price),
    ("block split integrity", _check_split_integrity),
)


def cmd_verify(tamper_tree_json=None, stream=None) -> int:
    """Run the reduced oracle and invariant suites; print one line per check.

    tamper_tree_json is a fault-injection hook used by tests: it corrupts the
    serialized ensemble between save and reload inside the tree-oracle check.
    """
    stream = stream or sys.stdout
    failures = 0
    for name, check in VERIFY_CHECKS:
        if check is _check_tree_oracle and tamper_tree_json is not None:
            ok, detail = check(tamper_tree_json)
        else:
            ok, detail = check()
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=stream)
        failures += 0 if ok else 1
    print(f"{len(VERIFY_CHECKS) - failures}/{len(VERIFY_CHECKS)} checks passed", file=stream)
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------- entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regime-xai",
        description="Explain how price-driver importances shift across a regulatory change date.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("features", "build per-period feature matrices from the configured inputs"),
        ("run", "run the full fit/explain/compare pipeline"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted path, JSON value)")
        p.add_argument("--out", help="override the configured output directory")

    sub.add_parser("verify", help="run the self-check suites")

    p = sub.add_parser("synth", help="emit a synthetic two-regime dataset and config")
    p.add_argument("--out", default=".", help="directory for the dataset and config")
    p.add_argument("--rows", type=int, default=960, help="rows per period")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify()
        if args.command == "synth":
            cmd_synth(args.out, n_rows=args.rows, seed=args.seed)
            return 0

        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"output_dir={Path(args.out).resolve()}")
        config = load_config(args.config, overrides)
        if args.command == "features":
            cmd_features(config)
        else:
            cmd_run(config)
        return 0
    except (ConfigError, TimeSeriesError) as exc:
        log.error("%s", exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not crashes
        log.error("%s", exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
