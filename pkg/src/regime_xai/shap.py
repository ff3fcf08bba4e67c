"""SHAP attributions for the toolkit's models, three ways.

All engines share one interventional value function: the value of a feature
coalition S at a point x is the mean model output over a background set with
the features in S taken from x and the rest from the background row. On top
of that,

* exact_shap enumerates all 2^n coalitions (the brute-force oracle),
* tree_shap computes the same numbers for tree ensembles in polynomial time
  by decomposing each (leaf, background row) pair into a coalition game whose
  Shapley value has a closed form,
* kernel_shap solves the weighted least-squares formulation over sampled
  coalitions, with the two known constraints (intercept and total) eliminated
  exactly so the attributions always sum to the prediction.

Per-feature importances are the mean absolute attributions normalized to
sum to one.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from regime_xai.gbt import TreeEnsemble, TreeNode, predict_gbt
from regime_xai.mlp import MlpNet, predict_mlp
from regime_xai.seeds import derive_seed
from regime_xai.timeseries import format_timestamp

LOCAL_ACCURACY_TOL = 1e-6


class LocalAccuracyError(RuntimeError):
    """An engine produced attributions that do not sum to the prediction."""


class SingularSystemError(RuntimeError):
    """The kernel regression system is rank-deficient; raise n_coalitions."""


@dataclass(frozen=True, eq=False)
class Background:
    """Reference rows the value function averages over."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError(f"background must be a non-empty 2D matrix, got shape {rows.shape}")
        object.__setattr__(self, "rows", rows)

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def subsample(cls, X, size: int = 100, seed: int = 0) -> Background:
        """Uniform subsample without replacement (all rows if X is small)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] <= size:
            return cls(X.copy())
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=size, replace=False))
        return cls(X[idx])


@dataclass(frozen=True, eq=False)
class Explanation:
    """Per-row SHAP vectors plus the shared base value.

    phi0 + phi[i].sum() reproduces predictions[i] for every row (local
    accuracy); explain_dataset enforces this at 1e-6.
    """

    feature_names: tuple[str, ...]
    phi: np.ndarray
    phi0: float
    predictions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        phi = np.asarray(self.phi, dtype=np.float64)
        preds = np.asarray(self.predictions, dtype=np.float64)
        if phi.ndim != 2 or phi.shape[1] != len(self.feature_names):
            raise ValueError(f"phi shape {phi.shape} inconsistent with {len(self.feature_names)} features")
        if preds.shape != (phi.shape[0],):
            raise ValueError("predictions must have one entry per explained row")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "predictions", preds)

    def __len__(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    """Normalized per-feature weights; all-zero and flagged when the
    explanation carried no signal at all."""

    fi: np.ndarray
    degenerate: bool = False
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        fi = np.asarray(self.fi, dtype=np.float64)
        if np.any(fi < 0):
            raise ValueError("importances must be nonnegative")
        if self.degenerate:
            if np.any(fi != 0):
                raise ValueError("degenerate importance vector must be all zero")
        elif abs(fi.sum() - 1.0) > 1e-9:
            raise ValueError(f"importances must sum to 1, got {fi.sum()!r}")
        object.__setattr__(self, "fi", fi)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


def as_predict_fn(model):
    """Wrap a TreeEnsemble, MlpNet or raw callable as X -> predictions."""
    if isinstance(model, TreeEnsemble):
        return lambda X: predict_gbt(model, np.asarray(X, dtype=np.float64))
    if isinstance(model, MlpNet):
        return lambda X: predict_mlp(model, np.asarray(X, dtype=np.float64))
    if callable(model):
        return lambda X: np.asarray(model(np.asarray(X, dtype=np.float64)), dtype=np.float64)
    raise TypeError(f"cannot build a prediction function from {type(model).__name__}")


# ------------------------------------------------------------ value function


def value_function(model_fn, x, subset, bg: Background) -> float:
    """Mean model output with the subset's features pinned to x and the rest
    ranging over the background rows. Empty subset gives the base value; the
    full set gives f(x)."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.asarray(sorted(subset), dtype=np.intp)
    if idx.size and (idx[0] < 0 or idx[-1] >= len(x)):
        raise ValueError(f"subset {idx.tolist()} out of range for {len(x)} features")
    hybrid = bg.rows.copy()
    hybrid[:, idx] = x[idx]
    return float(np.mean(model_fn(hybrid)))


@lru_cache(maxsize=64)
def _subset_weights(n: int) -> np.ndarray:
    """Classic Shapley weights |S|! (n-|S|-1)! / n! indexed by |S| = 0..n-1."""
    fact = [math.factorial(k) for k in range(n + 1)]
    return np.array([fact[s] * fact[n - s - 1] / fact[n] for s in range(n)])


def _mask_values(model_fn, x, bg: Background, masks: np.ndarray, n: int) -> np.ndarray:
    """v(S) for each bitmask: mean model output over per-row hybrids."""
    B = bg.size
    values = np.empty(len(masks))
    chunk = max(1, 65536 // max(B, 1))
    for start in range(0, len(masks), chunk):
        part = masks[start : start + chunk]
        sel = ((part[:, None] >> np.arange(n)) & 1).astype(bool)
        hybrid = np.where(sel[:, None, :], x[None, None, :], bg.rows[None, :, :])
        preds = model_fn(hybrid.reshape(-1, n)).reshape(len(part), B)
        values[start : start + chunk] = preds.mean(axis=1)
    return values


def exact_shap(model_fn, x, bg: Background) -> tuple[np.ndarray, float]:
    """Brute-force Shapley values by full coalition enumeration (n <= 20)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n > 20:
        raise ValueError(f"exact enumeration is limited to 20 features, got {n}")
    if bg.n_features != n:
        raise ValueError("background width does not match the explained row")

    masks = np.arange(1 << n, dtype=np.int64)
    v = _mask_values(model_fn, x, bg, masks, n)
    popcount = ((masks[:, None] >> np.arange(n)) & 1).sum(axis=1)
    w = _subset_weights(n)

    phi = np.empty(n)
    for j in range(n):
        without = masks[(masks >> j) & 1 == 0]
        phi[j] = np.sum(w[popcount[without]] * (v[without | (1 << j)] - v[without]))
    return phi, float(v[0])


# ------------------------------------------------------------------ TreeSHAP


@lru_cache(maxsize=64)
def _leaf_coef_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form Shapley coefficients for a leaf's coalition game.

    A leaf reached only when p named features are in the coalition and q
    named features are out behaves as a unanimity-with-veto game. With
    m = n - p - q free features, the Shapley value of a required-in feature
    is sum_k C(m,k) w(p-1+k) times the leaf value, and of a required-out
    feature -sum_k C(m,k) w(p+k) times the leaf value.
    """
    w = _subset_weights(n) if n > 0 else np.empty(0)
    pos = np.zeros((n + 1, n + 1))
    neg = np.zeros((n + 1, n + 1))
    for p in range(n + 1):
        for q in range(n + 1 - p):
            m = n - p - q
            if p >= 1:
                pos[p, q] = sum(math.comb(m, k) * w[p - 1 + k] for k in range(m + 1))
            if q >= 1:
                neg[p, q] = sum(math.comb(m, k) * w[p + k] for k in range(m + 1))
    return pos, neg


def _tree_shap_batch_tree(
    node: TreeNode,
    X: np.ndarray,
    bg_rows: np.ndarray,
    constraints: dict,
    dead: np.ndarray,
    phi: np.ndarray,
    tables,
) -> None:
    """DFS accumulating Shapley contributions of one tree for a whole batch.

    For each (explained row, background row) pair the leaf defines a game in
    which some path features must be in the coalition (x heads toward the
    leaf, the background row does not) and some must be out (the reverse).
    constraints maps feature -> (required_in, required_out) boolean matrices
    of shape (rows, backgrounds); dead marks pairs whose path is unreachable
    under every coalition. phi has shape (rows, features) and receives the
    background-summed contributions.
    """
    if dead.all():
        return
    if node.is_leaf:
        pos, neg = tables
        alive = ~dead
        p = np.zeros(dead.shape, dtype=np.intp)
        q = np.zeros(dead.shape, dtype=np.intp)
        for req_in, req_out in constraints.values():
            p += req_in
            q += req_out
        for f, (req_in, req_out) in constraints.items():
            mask_in = alive & req_in
            if mask_in.any():
                phi[:, f] += node.value * np.where(mask_in, pos[p, q], 0.0).sum(axis=1)
            mask_out = alive & req_out
            if mask_out.any():
                phi[:, f] -= node.value * np.where(mask_out, neg[p, q], 0.0).sum(axis=1)
        return

    f = node.feature
    x_left = (X[:, f] <= node.threshold)[:, None]
    z_left = (bg_rows[:, f] <= node.threshold)[None, :]
    old_in, old_out = constraints.get(f, (None, None))

    for child, x_toward, z_toward in ((node.left, x_left, z_left), (node.right, ~x_left, ~z_left)):
        grow_in = x_toward & ~z_toward
        grow_out = ~x_toward & z_toward
        new_in = grow_in if old_in is None else old_in | grow_in
        new_out = grow_out if old_out is None else old_out | grow_out
        # pairs where neither x nor z heads this way, or a feature is
        # required both in and out, can never reach the leaf
        new_dead = dead | (~x_toward & ~z_toward) | (new_in & new_out)
        child_constraints = dict(constraints)
        child_constraints[f] = (new_in, new_out)
        _tree_shap_batch_tree(child, X, bg_rows, child_constraints, new_dead, phi, tables)


def _tree_shap_matrix(model: TreeEnsemble, X: np.ndarray, bg: Background, chunk: int = 512) -> np.ndarray:
    """SHAP values for every row of X under the tree engine."""
    n = model.n_features
    tables = _leaf_coef_tables(n)
    out = np.empty((X.shape[0], n))
    for start in range(0, X.shape[0], chunk):
        part = X[start : start + chunk]
        phi = np.zeros((part.shape[0], n))
        dead = np.zeros((part.shape[0], bg.size), dtype=bool)
        for tree in model.trees:
            _tree_shap_batch_tree(tree, part, bg.rows, {}, dead, phi, tables)
        out[start : start + chunk] = model.learning_rate * phi / bg.size
    return out


def tree_shap(model: TreeEnsemble, x, bg: Background) -> tuple[np.ndarray, float]:
    """Interventional SHAP values for a tree ensemble, exactly equal to
    exact_shap under the same background but without the 2^n enumeration.

    Cost per (tree, background row) is bounded by leaf count times depth.
    Contributions are additive across trees and averaged over background rows.
    """
    x = np.asarray(x, dtype=np.float64)
    n = model.n_features
    if len(x) != n:
        raise ValueError(f"row has {len(x)} features, model expects {n}")
    if bg.n_features != n:
        raise ValueError("background width does not match the model")
    phi = _tree_shap_matrix(model, x[None, :], bg)[0]
    phi0 = float(np.mean(predict_gbt(model, bg.rows)))
    return phi, phi0


# ---------------------------------------------------------------- KernelSHAP


def default_coalition_budget(n: int) -> int:
    return min((1 << n) - 2, 2 * n + 2048)


def _kernel_weight(n: int, size: int) -> float:
    return (n - 1) / (math.comb(n, size) * size * (n - size))


def kernel_shap(
    model_fn,
    x,
    bg: Background,
    n_coalitions: int | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """SHAP values from the Shapley-kernel weighted least squares problem.

    The intercept (base value) and the coefficient total (prediction minus
    base) are eliminated exactly, so local accuracy holds by construction.
    When the budget covers all 2^n - 2 proper nonempty coalitions they are
    enumerated with their exact kernel weights (exact mode, equal to
    exact_shap); otherwise coalition sizes are sampled from the kernel
    weight distribution and subsets are paired with their complements.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("kernel regression needs at least 2 features")
    if bg.n_features != n:
        raise ValueError("background width does not match the explained row")
    budget = default_coalition_budget(n) if n_coalitions is None else int(n_coalitions)
    if budget < 2:
        raise ValueError("n_coalitions must be at least 2")

    fx = float(model_fn(x[None, :])[0])
    phi0 = float(np.mean(model_fn(bg.rows)))
    full = (1 << n) - 1

    if (1 << n) - 2 <= budget:
        masks = np.arange(1, full, dtype=np.int64)
        sizes = ((masks[:, None] >> np.arange(n)) & 1).sum(axis=1)
        size_weight = np.array([0.0] + [_kernel_weight(n, s) for s in range(1, n)])
        weights = size_weight[sizes]
    else:
        rng = np.random.default_rng(seed)
        size_mass = np.array([(n - 1) / (s * (n - s)) for s in range(1, n)])
        size_dist = size_mass / size_mass.sum()
        counts: dict[int, int] = {}
        drawn = 0
        while drawn < budget:
            s = 1 + int(rng.choice(n - 1, p=size_dist))
            members = rng.choice(n, size=s, replace=False)
            mask = 0
            for f in members:
                mask |= 1 << int(f)
            for m in (mask, full ^ mask):
                counts[m] = counts.get(m, 0) + 1
                drawn += 1
                if drawn >= budget:
                    break
        masks = np.array(sorted(counts), dtype=np.int64)
        weights = np.array([counts[int(m)] for m in masks], dtype=np.float64)

    y = _mask_values(model_fn, x, bg, masks, n)
    Z = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)

    # eliminate the intercept (= phi0) and pivot feature n-1 (= remainder)
    target = y - phi0 - Z[:, -1] * (fx - phi0)
    design = Z[:, :-1] - Z[:, -1:]
    sw = np.sqrt(weights)
    coef, _, rank, _ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
    if rank < n - 1:
        raise SingularSystemError(
            f"coalition design has rank {rank} < {n - 1}; raise n_coalitions"
        )
    phi = np.append(coef, (fx - phi0) - coef.sum())
    return phi, phi0


# ------------------------------------------------------------ dataset driver


def explain_dataset(
    model,
    X,
    bg: Background,
    method: str = "tree",
    seed: int = 0,
    n_coalitions: int | None = None,
    feature_names=None,
    n_workers: int = 1,
) -> Explanation:
    """Explain every row of X with the chosen engine.

    Local accuracy is verified per row at 1e-6 and violations raise
    LocalAccuracyError: an engine that cannot reproduce its own model's
    prediction is broken, not inaccurate. Rows are independent; per-row
    seeds are derived from (seed, row index) so any execution order gives
    identical results. n_workers > 1 parallelizes across rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2D")
    if method not in ("exact", "tree", "kernel"):
        raise ValueError(f"unknown method {method!r}")
    if method == "tree" and not isinstance(model, TreeEnsemble):
        raise ValueError("tree method requires a TreeEnsemble")

    model_fn = as_predict_fn(model)
    if feature_names is None:
        if isinstance(model, TreeEnsemble):
            feature_names = model.feature_names
        else:
            feature_names = tuple(f"f{i}" for i in range(X.shape[1]))

    phi0 = float(np.mean(model_fn(bg.rows)))
    if X.shape[0] == 0:
        return Explanation(feature_names, np.empty((0, X.shape[1])), phi0, np.empty(0))

    predictions = model_fn(X)

    if method == "tree":
        phi = _tree_shap_matrix(model, X, bg)
    else:

        def explain_row(i: int) -> np.ndarray:
            row = X[i]
            if method == "exact":
                return exact_shap(model_fn, row, bg)[0]
            return kernel_shap(model_fn, row, bg, n_coalitions, seed=derive_seed(seed, i))[0]

        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                rows = list(pool.map(explain_row, range(X.shape[0])))
        else:
            rows = [explain_row(i) for i in range(X.shape[0])]
        phi = np.vstack(rows)

    residuals = np.abs(phi0 + phi.sum(axis=1) - predictions)
    worst = int(np.argmax(residuals))
    if residuals[worst] >= LOCAL_ACCURACY_TOL:
        raise LocalAccuracyError(
            f"row {worst}: |phi0 + sum(phi) - f(x)| = {residuals[worst]:.3e} "
            f"exceeds {LOCAL_ACCURACY_TOL:g} under method {method!r}"
        )
    return Explanation(feature_names, phi, phi0, predictions)


def feature_importance(explanation: Explanation) -> ImportanceVector:
    """Mean absolute SHAP value per feature, normalized to sum to one.

    An all-zero explanation has no signal to normalize; it yields an all-zero
    vector flagged degenerate.
    """
    if len(explanation) == 0:
        raise ValueError("cannot compute importances from an empty explanation")
    mean_abs = np.abs(explanation.phi).mean(axis=0)
    total = mean_abs.sum()
    if total == 0.0:
        return ImportanceVector(np.zeros_like(mean_abs), True, explanation.feature_names)
    return ImportanceVector(mean_abs / total, False, explanation.feature_names)


def write_explanation_csv(path, explanation: Explanation, timestamps) -> None:
    """Export one row per explained input: timestamp, prediction, phi0, phi_*."""
    timestamps = np.asarray(timestamps)
    if len(timestamps) != len(explanation):
        raise ValueError("one timestamp per explained row required")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["timestamp", "prediction", "phi0"]
            + [f"phi_{name}" for name in explanation.feature_names]
        )
        for i in range(len(explanation)):
            writer.writerow(
                [format_timestamp(timestamps[i]), repr(float(explanation.predictions[i])),
                 repr(float(explanation.phi0))]
                + [repr(float(v)) for v in explanation.phi[i]]
            )
