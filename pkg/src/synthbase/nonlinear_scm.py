"""Nonlinear predictor variant: a from-scratch multilayer perceptron.

Replaces the linear weighting with f_theta mapping an augmented design row
to the treated outcome.  Architecture per the experiment protocol: two
hidden layers of 64 units, a layer of J (donor-count) units, and a scalar
output; rectified-linear hidden activations, identity output.  Training
minimizes mean squared error plus a weight-only squared-l2 penalty with an
adaptive-moment mini-batch rule and early stopping on validation loss.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .scm_solver import ColumnInfo


class NonlinearScmError(Exception):
    pass


class DivergenceError(NonlinearScmError):
    """Training loss became non-finite."""


class ShapeError(NonlinearScmError):
    """Input dimensions do not match the model."""


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    max_epochs: int = 2000
    patience: int = 10
    batch_size: int = 256
    seed: int = 0
    restarts: int = 3
    weight_decay: float = 1e-4
    hidden_sizes: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclasses.dataclass
class MlpModel:
    """Layer shapes, parameters, input scaler, and training trace."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_center: np.ndarray
    input_scale: np.ndarray
    columns: list[ColumnInfo] | None = None
    training_trace: list[tuple[int, float, float]] = dataclasses.field(default_factory=list)
    best_epoch: int = -1

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        return predict_mlp(self, rows)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "layer_sizes": self.layer_sizes,
                "weights": [w.ravel().tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "input_center": self.input_center.tolist(),
                "input_scale": self.input_scale.tolist(),
                "best_epoch": self.best_epoch,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        d = json.loads(text)
        sizes = d["layer_sizes"]
        weights = [
            np.array(w, dtype=float).reshape(sizes[i], sizes[i + 1])
            for i, w in enumerate(d["weights"])
        ]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(
            layer_sizes=sizes,
            weights=weights,
            biases=biases,
            input_center=np.array(d["input_center"], dtype=float),
            input_scale=np.array(d["input_scale"], dtype=float),
            best_epoch=d.get("best_epoch", -1),
        )

    def export_trace_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_mse,val_mse\n")
            for epoch, tr, va in self.training_trace:
                fh.write(f"{epoch},{tr!r},{va!r}\n")


def init_params(layer_sizes, rng) -> tuple[list[np.ndarray], list[np.ndarray]]:
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _forward(weights, biases, X):
    """Returns per-layer activations; hidden layers rectified, output linear."""
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def _backward(weights, acts, dout):
    """Gradients of a scalar-sum loss w.r.t. all weights and biases given d(loss)/d(output)."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = dout
    for i in range(len(weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (acts[i] > 0.0)
    return grads_w, grads_b


def _mse(weights, biases, X, y) -> float:
    pred = _forward(weights, biases, X)[-1].ravel()
    return float(np.mean((pred - y) ** 2))


def train_mlp(design, target, val_design, val_target, config: TrainConfig) -> MlpModel:
    """Fit the MLP on the design's usable rows; early stop on validation MSE.

    Accepts AugmentedDesign objects or plain matrices.  Inputs are z-scored
    with training statistics; the penalty applies to weights only.  Returns
    the parameters from the best validation epoch.
    """
    X, columns = _unpack(design)
    Xv, _ = _unpack(val_design)
    y = np.asarray(target, dtype=float).ravel()
    yv = np.asarray(val_target, dtype=float).ravel()
    if X.shape[0] != y.size or Xv.shape[0] != yv.size:
        raise ShapeError("row counts do not match targets")
    if X.shape[1] != Xv.shape[1]:
        raise ShapeError("train and validation designs differ in width")

    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Z = (X - center) / scale
    Zv = (Xv - center) / scale

    n_donors = sum(1 for c in (columns or []) if c.provenance == "donor")
    bottleneck = n_donors if n_donors > 0 else max(8, X.shape[1] // 2)
    layer_sizes = [X.shape[1], *config.hidden_sizes, bottleneck, 1]

    rng = np.random.default_rng(config.seed)
    weights, biases = init_params(layer_sizes, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr, lam = config.learning_rate, config.weight_decay

    n = Z.shape[0]
    batch = min(config.batch_size, n)
    trace: list[tuple[int, float, float]] = []
    best_val = np.inf
    best_epoch = -1
    best = None
    since_best = 0
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            acts = _forward(weights, biases, Z[idx])
            resid = acts[-1].ravel() - y[idx]
            # d/d(out) of mean((out - y)^2) over the batch
            dout = (2.0 / idx.size) * resid[:, None]
            gw, gb = _backward(weights, acts, dout)
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for i in range(len(weights)):
                g = gw[i] + 2.0 * lam * weights[i]
                m_w[i] = beta1 * m_w[i] + (1 - beta1) * g
                v_w[i] = beta2 * v_w[i] + (1 - beta2) * g * g
                weights[i] -= lr * (m_w[i] / c1) / (np.sqrt(v_w[i] / c2) + eps)
                m_b[i] = beta1 * m_b[i] + (1 - beta1) * gb[i]
                v_b[i] = beta2 * v_b[i] + (1 - beta2) * gb[i] * gb[i]
                biases[i] -= lr * (m_b[i] / c1) / (np.sqrt(v_b[i] / c2) + eps)

        train_mse = _mse(weights, biases, Z, y)
        val_mse = _mse(weights, biases, Zv, yv)
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        trace.append((epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best = ([w.copy() for w in weights], [b.copy() for b in biases])
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    weights, biases = best
    return MlpModel(
        layer_sizes=layer_sizes,
        weights=weights,
        biases=biases,
        input_center=center,
        input_scale=scale,
        columns=list(columns) if columns else None,
        training_trace=trace,
        best_epoch=best_epoch,
    )


def _unpack(design):
    if hasattr(design, "fit_matrix"):
        return np.asarray(design.fit_matrix, dtype=float), design.columns
    return np.asarray(design, dtype=float), None


def predict_mlp(model: MlpModel, rows: np.ndarray) -> np.ndarray:
    """Deterministic forward pass on raw-scale rows."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[1] != model.layer_sizes[0]:
        raise ShapeError(f"rows have {rows.shape[1]} columns, model expects {model.layer_sizes[0]}")
    Z = (rows - model.input_center) / model.input_scale
    return _forward(model.weights, model.biases, Z)[-1].ravel()


def _loss_and_grads(model: MlpModel, z: np.ndarray, target: float):
    acts = _forward(model.weights, model.biases, z[None, :])
    resid = float(acts[-1].ravel()[0]) - target
    gw, gb = _backward(model.weights, acts, np.array([[2.0 * resid]]))
    return resid * resid, gw, gb


def gradient_check(model: MlpModel, row: np.ndarray, target: float, step: float = 1e-5) -> float:
    """Max relative discrepancy between analytic and central-difference gradients.

    Checks the squared-error loss of a single (row, target) pair over every
    weight and bias.  The row is given in raw scale and passed through the
    model's input transform first.
    """
    row = np.asarray(row, dtype=float)
    if row.size != model.layer_sizes[0]:
        raise ShapeError("row width does not match the model input layer")
    z = (row - model.input_center) / model.input_scale
    _, gw, gb = _loss_and_grads(model, z, target)

    def loss() -> float:
        pred = _forward(model.weights, model.biases, z[None, :])[-1].ravel()[0]
        return float((pred - target) ** 2)

    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for arr, g in zip(params, grads):
            flat = arr.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                up = loss()
                flat[i] = keep - step
                down = loss()
                flat[i] = keep
                fd = (up - down) / (2.0 * step)
                denom = max(abs(gflat[i]), abs(fd), 1e-8)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
