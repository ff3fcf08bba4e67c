"""Protocol orchestration: sliding windows per regime period, block-wise
train/test splits, model fitting, explanation, and before/after comparison.

Each period gets six overlapping windows covering half the period each.
Within a window the test set is a random 20% of consecutive four-day blocks;
a model is fitted on the remaining rows and explained on the test rows. The
per-window normalized importances are aggregated to a mean and standard
deviation per feature, and the two periods are compared feature by feature.

Every random choice is driven by seeds derived from (master seed, window
index, purpose), so a run is reproducible to the last exported digit.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from regime_xai.gbt import GbtParams, TreeEnsemble, fit_gbt, predict_gbt
from regime_xai.mlp import MlpNet, MlpParams, fit_mlp, predict_mlp
from regime_xai.seeds import derive_seed
from regime_xai.shap import Background, Explanation, ImportanceVector, explain_dataset, feature_importance
from regime_xai.timeseries import FeatureMatrix, format_timestamp

log = logging.getLogger(__name__)

MODEL_KINDS = ("gbt", "mlp")


@dataclass(frozen=True)
class PeriodSpec:
    """Half-open UTC interval [start, end) tagged with its regime role."""

    name: str
    start: datetime
    end: datetime
    regime: str = ""

    def __post_init__(self):
        for attr in ("start", "end"):
            dt = getattr(self, attr)
            if dt.tzinfo is None:
                object.__setattr__(self, attr, dt.replace(tzinfo=timezone.utc))
        if self.start >= self.end:
            raise ValueError(f"period {self.name!r}: start must precede end")

    @property
    def start_epoch(self) -> int:
        return int(self.start.timestamp())

    @property
    def end_epoch(self) -> int:
        return int(self.end.timestamp())


@dataclass(frozen=True)
class SplitPlan:
    """Train/test row indices for one window; test rows are whole blocks."""

    window_index: int
    window_start: int
    window_stop: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int

    def __post_init__(self):
        train = np.asarray(self.train_indices, dtype=np.intp)
        test = np.asarray(self.test_indices, dtype=np.intp)
        if np.intersect1d(train, test).size:
            raise ValueError("train and test indices overlap")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)


@dataclass(frozen=True)
class ExperimentConfig:
    n_windows: int = 6
    window_fraction: float = 0.5
    block_days: int = 4
    test_fraction: float = 0.2
    background_size: int = 100
    n_coalitions: int | None = None
    explain_on: str = "test"
    n_workers: int = 1
    gbt: GbtParams = field(default_factory=GbtParams)
    mlp: MlpParams = field(default_factory=MlpParams)

    def __post_init__(self):
        if self.n_windows < 1:
            raise ValueError("n_windows must be >= 1")
        if not 0 < self.window_fraction <= 1:
            raise ValueError("window_fraction must be in (0, 1]")
        if self.explain_on not in ("test", "train"):
            raise ValueError(f"explain_on must be 'test' or 'train', got {self.explain_on!r}")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")


@dataclass(frozen=True, eq=False)
class WindowResult:
    window_index: int
    split: SplitPlan
    model: TreeEnsemble | MlpNet
    explanation: Explanation
    explained_X: np.ndarray
    explained_timestamps: np.ndarray
    importance: ImportanceVector
    test_mse: float
    test_r2: float


@dataclass(frozen=True, eq=False)
class PeriodResult:
    """Window models, explanations and importances for one regime period."""

    period: PeriodSpec
    feature_names: tuple[str, ...]
    windows: tuple[WindowResult, ...]
    fi_mean: np.ndarray
    fi_std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        for w in self.windows:
            if not w.importance.degenerate and abs(w.importance.fi.sum() - 1.0) > 1e-9:
                raise ValueError(f"window {w.window_index}: importances do not sum to 1")

    @property
    def degenerate_windows(self) -> tuple[int, ...]:
        return tuple(w.window_index for w in self.windows if w.importance.degenerate)


@dataclass(frozen=True, eq=False)
class RegimeComparison:
    """Per-feature importance statistics for two periods plus deltas.

    A feature is flagged as shifted when |delta| exceeds the sum of the two
    window standard deviations, i.e. when the error bars of the two periods
    would not overlap. Ranks are 1-based, 1 = most important.
    """

    feature_names: tuple[str, ...]
    before_mean: np.ndarray
    before_std: np.ndarray
    after_mean: np.ndarray
    after_std: np.ndarray
    delta: np.ndarray
    before_rank: np.ndarray
    after_rank: np.ndarray
    flagged: np.ndarray


def make_windows(n_rows: int, n_windows: int = 6, window_fraction: float = 0.5) -> list[range]:
    """Evenly spaced overlapping windows of floor(window_fraction * n_rows)
    rows each; the first starts at row 0 and the last ends at row n_rows."""
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    width = int(window_fraction * n_rows)
    if width < 1 or n_rows < n_windows:
        raise ValueError(f"period too short: {n_rows} rows for {n_windows} windows")
    span = n_rows - width
    if n_windows == 1:
        offsets = [0]
    else:
        offsets = [round(i * span / (n_windows - 1)) for i in range(n_windows)]
    return [range(off, off + width) for off in offsets]


def split_blocks(
    window: range,
    block_days: int = 4,
    test_fraction: float = 0.2,
    seed: int = 0,
    rows_per_day: int = 1,
    window_index: int = 0,
) -> SplitPlan:
    """Partition a window into consecutive blocks of block_days and pick
    round(test_fraction * n_blocks) of them, uniformly without replacement,
    as the test set. A trailing partial block goes to the training set."""
    rows = np.arange(window.start, window.stop, dtype=np.intp)
    rows_per_block = int(block_days) * int(rows_per_day)
    if rows_per_block < 1:
        raise ValueError("block must cover at least one row")
    n_blocks = len(rows) // rows_per_block
    if n_blocks < 5:
        raise ValueError(
            f"window of {len(rows)} rows spans only {n_blocks} blocks of "
            f"{rows_per_block} rows; need at least 5"
        )
    n_test = int(np.clip(round(test_fraction * n_blocks), 1, n_blocks - 1))
    rng = np.random.default_rng(seed)
    test_blocks = np.sort(rng.choice(n_blocks, size=n_test, replace=False))

    test_mask = np.zeros(len(rows), dtype=bool)
    for b in test_blocks:
        test_mask[b * rows_per_block : (b + 1) * rows_per_block] = True
    return SplitPlan(
        window_index=window_index,
        window_start=window.start,
        window_stop=window.stop,
        train_indices=rows[~test_mask],
        test_indices=rows[test_mask],
        seed=seed,
    )


def _rows_per_day(timestamps: np.ndarray) -> int:
    if len(timestamps) < 2:
        raise ValueError("need at least two rows to infer the resolution")
    step = int(timestamps[1] - timestamps[0])
    if step <= 0 or 86400 % step:
        raise ValueError(f"row step of {step}s does not divide a day")
    return 86400 // step


def _fit(kind: str, train: FeatureMatrix, config: ExperimentConfig, seed: int):
    if kind == "gbt":
        return fit_gbt(train, replace(config.gbt, seed=seed))
    return fit_mlp(train, replace(config.mlp, seed=seed))


def run_period(
    data: FeatureMatrix,
    period: PeriodSpec,
    model_kind: str,
    config: ExperimentConfig | None = None,
    seed: int = 0,
) -> PeriodResult:
    """Fit, explain and score one model per sliding window of the period.

    Tree models are explained with the tree engine, nets with the kernel
    engine, both against a background subsampled from the window's training
    rows. Fit/explain failures are re-raised annotated with the window index.
    """
    config = config or ExperimentConfig()
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {model_kind!r}")

    in_period = (data.timestamps >= period.start_epoch) & (data.timestamps < period.end_epoch)
    rows = data.take(np.flatnonzero(in_period))
    if len(rows) == 0:
        raise ValueError(f"no rows fall inside period {period.name!r}")
    rows_per_day = _rows_per_day(rows.timestamps)

    windows = make_windows(len(rows), config.n_windows, config.window_fraction)
    results = []
    for w, window in enumerate(windows):
        try:
            plan = split_blocks(
                window,
                block_days=config.block_days,
                test_fraction=config.test_fraction,
                seed=derive_seed(seed, w, 0),
                rows_per_day=rows_per_day,
                window_index=w,
            )
            train = rows.take(plan.train_indices)
            test = rows.take(plan.test_indices)
            model = _fit(model_kind, train, config, derive_seed(seed, w, 1))

            bg = Background.subsample(train.X, config.background_size, derive_seed(seed, w, 2))
            explain = test if config.explain_on == "test" else train
            explanation = explain_dataset(
                model,
                explain.X,
                bg,
                method="tree" if model_kind == "gbt" else "kernel",
                seed=derive_seed(seed, w, 3),
                n_coalitions=config.n_coalitions,
                feature_names=rows.feature_names,
                n_workers=config.n_workers,
            )
            importance = feature_importance(explanation)
            if importance.degenerate:
                log.warning("period %s window %d: degenerate importances", period.name, w)

            pred = predict_gbt(model, test.X) if model_kind == "gbt" else predict_mlp(model, test.X)
            mse = float(np.mean((pred - test.y) ** 2))
            sst = float(np.sum((test.y - test.y.mean()) ** 2))
            r2 = 1.0 - float(np.sum((pred - test.y) ** 2)) / sst if sst > 0 else float("nan")
        except (ValueError, RuntimeError) as exc:
            raise type(exc)(f"window {w}: {exc}") from exc

        results.append(
            WindowResult(
                window_index=w,
                split=plan,
                model=model,
                explanation=explanation,
                explained_X=explain.X,
                explained_timestamps=explain.timestamps,
                importance=importance,
                test_mse=mse,
                test_r2=r2,
            )
        )

    fi = np.vstack([r.importance.fi for r in results])
    return PeriodResult(
        period=period,
        feature_names=rows.feature_names,
        windows=tuple(results),
        fi_mean=fi.mean(axis=0),
        fi_std=fi.std(axis=0),
    )


def _ranks(mean_fi: np.ndarray) -> np.ndarray:
    """1-based ranks by descending importance; stable for ties."""
    order = np.argsort(-mean_fi, kind="stable")
    ranks = np.empty(len(mean_fi), dtype=np.intp)
    ranks[order] = np.arange(1, len(mean_fi) + 1)
    return ranks


def compare_periods(before: PeriodResult, after: PeriodResult) -> RegimeComparison:
    """Per-feature deltas, ranks and shift flags between two periods."""
    if before.feature_names != after.feature_names:
        raise ValueError(
            f"feature lists differ: {before.feature_names} vs {after.feature_names}"
        )
    delta = after.fi_mean - before.fi_mean
    flagged = np.abs(delta) > (before.fi_std + after.fi_std)
    return RegimeComparison(
        feature_names=before.feature_names,
        before_mean=before.fi_mean,
        before_std=before.fi_std,
        after_mean=after.fi_mean,
        after_std=after.fi_std,
        delta=delta,
        before_rank=_ranks(before.fi_mean),
        after_rank=_ranks(after.fi_mean),
        flagged=flagged,
    )


def dependence_data(result: PeriodResult, feature: str) -> dict[str, np.ndarray]:
    """Plot-ready (feature value, SHAP value) pairs over every window's
    explained rows, tagged by window; no binning or smoothing."""
    if feature not in result.feature_names:
        raise ValueError(f"unknown feature {feature!r}; have {result.feature_names}")
    j = result.feature_names.index(feature)
    window_tags, timestamps, x_values, phi_values = [], [], [], []
    for w in result.windows:
        k = len(w.explanation)
        window_tags.append(np.full(k, w.window_index, dtype=np.intp))
        timestamps.append(w.explained_timestamps)
        x_values.append(w.explained_X[:, j])
        phi_values.append(w.explanation.phi[:, j])
    return {
        "window": np.concatenate(window_tags),
        "timestamp": np.concatenate(timestamps),
        "x_value": np.concatenate(x_values),
        "phi_value": np.concatenate(phi_values),
    }


# ----------------------------------------------------------------- exporters


def _fmt(value: float) -> str:
    return repr(float(value))


def write_importance_csv(path, results: dict[str, PeriodResult]) -> None:
    """One row per (period, window, feature): relative SHAP importance."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period", "window", "feature", "fi"])
        for name, result in results.items():
            for w in result.windows:
                for j, feat in enumerate(result.feature_names):
                    writer.writerow([name, w.window_index, feat, _fmt(w.importance.fi[j])])


def write_comparison_csv(path, comparison: RegimeComparison) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["feature", "before_mean", "before_std", "after_mean", "after_std", "delta", "flagged"]
        )
        for j, feat in enumerate(comparison.feature_names):
            writer.writerow(
                [
                    feat,
                    _fmt(comparison.before_mean[j]),
                    _fmt(comparison.before_std[j]),
                    _fmt(comparison.after_mean[j]),
                    _fmt(comparison.after_std[j]),
                    _fmt(comparison.delta[j]),
                    str(bool(comparison.flagged[j])).lower(),
                ]
            )


def write_dependence_csv(path, results: dict[str, PeriodResult], features=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period", "window", "timestamp", "feature", "x_value", "phi_value"])
        for name, result in results.items():
            for feat in features or result.feature_names:
                table = dependence_data(result, feat)
                for i in range(len(table["window"])):
                    writer.writerow(
                        [
                            name,
                            int(table["window"][i]),
                            format_timestamp(table["timestamp"][i]),
                            feat,
                            _fmt(table["x_value"][i]),
                            _fmt(table["phi_value"][i]),
                        ]
                    )


def window_metrics(result: PeriodResult) -> list[dict]:
    """Per-window fit quality for the run manifest."""
    out = []
    for w in result.windows:
        out.append(
            {
                "window": w.window_index,
                "n_train": int(len(w.split.train_indices)),
                "n_test": int(len(w.split.test_indices)),
                "test_mse": w.test_mse,
                "test_r2": None if np.isnan(w.test_r2) else w.test_r2,
                "degenerate_importance": w.importance.degenerate,
            }
        )
    return out


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
