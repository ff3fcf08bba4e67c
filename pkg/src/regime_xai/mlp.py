"""Small feedforward neural-network regressor with verifiable gradients.

The net standardizes inputs with training statistics, applies rectified
hidden layers and a linear output, and trains on mean squared error with
mini-batch adaptive-moment (Adam) updates. Backpropagation is hand-written
and checked against central finite differences (grad_check), which is the
correctness anchor for everything the optimizer does.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from regime_xai.timeseries import FeatureMatrix


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True, eq=False)
class MlpNet:
    """Feedforward regressor: standardize, rectified hidden layers, affine output.

    weights[l] has shape (layer_sizes[l+1], layer_sizes[l]); biases[l] matches
    the output side. x_std entries are strictly positive (constant features
    are stored with std 1 so they are centered only).
    """

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    x_mean: np.ndarray
    x_std: np.ndarray

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or sizes[-1] != 1:
            raise ValueError(f"layer_sizes must end in an output of 1, got {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("one weight matrix and bias vector required per layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ValueError(f"layer {l}: weight shape {W.shape} or bias shape {b.shape} "
                                 f"inconsistent with layer_sizes {sizes}")
        if len(self.x_mean) != sizes[0] or len(self.x_std) != sizes[0]:
            raise ValueError("standardization stats must match the input width")
        if np.any(self.x_std <= 0):
            raise ValueError("stored stds must be strictly positive")

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def predict(self, X) -> np.ndarray:
        return predict_mlp(self, X)


@dataclass(frozen=True)
class MlpParams:
    hidden_sizes: tuple[int, ...] = (64, 64)
    max_epochs: int = 300
    batch_size: int = 64
    step_size: float = 1e-3
    early_stop_patience: int = 20
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h < 1 for h in self.hidden_sizes) or not self.hidden_sizes:
            raise ValueError("hidden_sizes must be positive")
        if min(self.max_epochs, self.batch_size, self.early_stop_patience) < 1:
            raise ValueError("max_epochs, batch_size and early_stop_patience must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError(f"validation_fraction must be in (0, 0.5], got {self.validation_fraction}")


def _init_params(rng: np.random.Generator, sizes: tuple[int, ...], y_mean: float):
    """Uniform fan-in-scaled weights; zero biases except the output bias,
    which starts at the target mean so the net begins centered on the data."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    biases[-1][0] = y_mean
    return weights, biases


def _forward(weights, biases, Z):
    """Forward pass on standardized inputs; returns activations per layer."""
    acts = [Z]
    h = Z
    last = len(weights) - 1
    for l, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W.T + b
        h = np.maximum(z, 0.0) if l < last else z
        acts.append(h)
    return acts


def _mse(weights, biases, Z, y) -> float:
    pred = _forward(weights, biases, Z)[-1][:, 0]
    return float(np.mean((pred - y) ** 2))


def _backprop(weights, biases, Z, y):
    """Gradient of the MSE loss with respect to every weight and bias."""
    acts = _forward(weights, biases, Z)
    n = len(y)
    delta = (2.0 / n) * (acts[-1][:, 0] - y)[:, None]
    grads_w = [None] * len(weights)
    grads_b = [None] * len(biases)
    for l in range(len(weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * (acts[l] > 0)
    return grads_w, grads_b


def _standardize_stats(X: np.ndarray):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = X.max(axis=0) == X.min(axis=0)
    std = np.where(constant | (std == 0), 1.0, std)
    return mean, std


def initial_net(train: FeatureMatrix, params: MlpParams | None = None) -> MlpNet:
    """The untrained net fit_mlp would start from (same seed, same init draws)."""
    params = params or MlpParams()
    if len(train) == 0:
        raise ValueError("empty training set")
    sizes = (train.X.shape[1],) + params.hidden_sizes + (1,)
    n_val = int(np.clip(round(params.validation_fraction * len(train)), 1, max(len(train) - 1, 1)))
    n_fit = max(len(train) - n_val, 1)
    mean, std = _standardize_stats(train.X[:n_fit])
    rng = np.random.default_rng(params.seed)
    weights, biases = _init_params(rng, sizes, float(train.y[:n_fit].mean()))
    return MlpNet(sizes, tuple(weights), tuple(biases), mean, std)


def fit_mlp(train: FeatureMatrix, params: MlpParams | None = None) -> MlpNet:
    """Train by mini-batch Adam on MSE with early stopping.

    The validation slice is the time-ordered tail of the window
    (validation_fraction of the rows); input standardization uses the
    remaining head so the held-out rows never leak into the statistics.
    Targets stay in original units. Deterministic for a fixed seed.
    """
    params = params or MlpParams()
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    sizes = (train.X.shape[1],) + params.hidden_sizes + (1,)
    n_val = int(np.clip(round(params.validation_fraction * n), 1, max(n - 1, 1)))
    n_fit = max(n - n_val, 1)

    mean, std = _standardize_stats(train.X[:n_fit])
    Z = (train.X - mean) / std
    Z_fit, y_fit = Z[:n_fit], train.y[:n_fit]
    Z_val, y_val = (Z[n_fit:], train.y[n_fit:]) if n > 1 else (Z_fit, y_fit)

    rng = np.random.default_rng(params.seed)
    weights, biases = _init_params(rng, sizes, float(y_fit.mean()))

    adam_m = [np.zeros_like(p) for p in weights + biases]
    adam_v = [np.zeros_like(p) for p in weights + biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    best_val = _mse(weights, biases, Z_val, y_val)
    best = ([W.copy() for W in weights], [b.copy() for b in biases])
    stale = 0

    for epoch in range(params.max_epochs):
        perm = rng.permutation(n_fit)
        for start in range(0, n_fit, params.batch_size):
            idx = perm[start : start + params.batch_size]
            grads_w, grads_b = _backprop(weights, biases, Z_fit[idx], y_fit[idx])
            t += 1
            for k, (p, g) in enumerate(zip(weights + biases, grads_w + grads_b)):
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * g
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * g * g
                m_hat = adam_m[k] / (1 - beta1**t)
                v_hat = adam_v[k] / (1 - beta2**t)
                p -= params.step_size * m_hat / (np.sqrt(v_hat) + eps)

        val = _mse(weights, biases, Z_val, y_val)
        if not np.isfinite(val):
            raise TrainingDivergedError(epoch)
        if val < best_val:
            best_val = val
            best = ([W.copy() for W in weights], [b.copy() for b in biases])
            stale = 0
        else:
            stale += 1
            if stale >= params.early_stop_patience:
                break

    return MlpNet(sizes, tuple(best[0]), tuple(best[1]), mean, std)


def predict_mlp(net: MlpNet, X) -> np.ndarray:
    """Pure forward pass: standardize, hidden rectifiers, affine output."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_features:
        raise ValueError(
            f"X has {X.shape[1] if X.ndim == 2 else 'bad'} columns, net expects {net.n_features}"
        )
    Z = (X - net.x_mean) / net.x_std
    return _forward(list(net.weights), list(net.biases), Z)[-1][:, 0]


def grad_check(net: MlpNet, X, y, epsilon: float = 1e-5) -> float:
    """Compare analytic MSE gradients with central finite differences.

    Returns the maximum relative error over every weight and bias entry,
    with relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] > 32:
        raise ValueError("grad_check is meant for small inputs (<= 32 rows)")
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must be in [1e-7, 1e-4], got {epsilon}")

    Z = (X - net.x_mean) / net.x_std
    weights = [W.copy() for W in net.weights]
    biases = [b.copy() for b in net.biases]
    grads_w, grads_b = _backprop(weights, biases, Z, y)

    max_err = 0.0
    for params, grads in ((weights, grads_w), (biases, grads_b)):
        for p, g in zip(params, grads):
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + epsilon
                up = _mse(weights, biases, Z, y)
                flat_p[i] = orig - epsilon
                down = _mse(weights, biases, Z, y)
                flat_p[i] = orig
                numeric = (up - down) / (2 * epsilon)
                analytic = flat_g[i]
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                max_err = max(max_err, err)
    return max_err


# ------------------------------------------------------------- serialization


def net_to_json(net: MlpNet) -> str:
    payload = {
        "format": "regime-xai-mlp",
        "layer_sizes": list(net.layer_sizes),
        "x_mean": net.x_mean.tolist(),
        "x_std": net.x_std.tolist(),
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    return json.dumps(payload, indent=1)


def net_from_json(text: str) -> MlpNet:
    obj = json.loads(text)
    if obj.get("format") != "regime-xai-mlp":
        raise ValueError(f"not an mlp file (format={obj.get('format')!r})")
    sizes = tuple(int(s) for s in obj["layer_sizes"])
    weights = tuple(np.asarray(W, dtype=np.float64) for W in obj["weights"])
    biases = tuple(np.asarray(b, dtype=np.float64) for b in obj["biases"])
    return MlpNet(
        sizes,
        weights,
        biases,
        np.asarray(obj["x_mean"], dtype=np.float64),
        np.asarray(obj["x_std"], dtype=np.float64),
    )


def save_net(net: MlpNet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(net_to_json(net))


def load_net(path) -> MlpNet:
    with open(path, encoding="utf-8") as fh:
        return net_from_json(fh.read())
