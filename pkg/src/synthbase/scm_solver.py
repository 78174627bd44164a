"""Synthetic-control weight fitting under three constraint regimes.

Fits donor/feature coefficient vectors by
  * classic simplex-constrained least squares (projected gradient descent),
  * sum-to-one ridge (closed-form KKT solve), or
  * unconstrained ridge,
and predicts baselines as linear combinations of design columns.

`fit_equality_ridge` and `fit_classic_scm` operate literally on the matrix
they are given.  `fit_scm` is the pipeline entry point: it standardizes
columns with training-window statistics (a single penalty across kW and
degree-Celsius columns is meaningless otherwise), fits in the standardized
space, and stores the affine transform so predictions map back to kW.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

DONOR = "donor"
EXOGENOUS = "exogenous"
TREATED_LAG = "treated_lag"
DONOR_LAG = "donor_lag"

CLASSIC = "classic"
SUM_TO_ONE = "sum_to_one"
UNCONSTRAINED = "unconstrained"


class ScmError(Exception):
    """Base class for solver failures."""


class SingularSystemError(ScmError):
    """KKT matrix is rank-deficient at lambda = 0."""


class DimensionError(ScmError):
    """Design/target/weight dimensions do not agree."""


class NonConvergenceError(ScmError):
    """Projected gradient descent hit the iteration cap before the tolerance."""

    def __init__(self, message: str, objective: float, iterations: int):
        super().__init__(message)
        self.objective = objective
        self.iterations = iterations


@dataclasses.dataclass(frozen=True)
class ConstraintMode:
    """One of classic (w >= 0, sum w = 1), sum-to-one, or unconstrained, plus the ridge penalty."""

    kind: str
    ridge_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in (CLASSIC, SUM_TO_ONE, UNCONSTRAINED):
            raise ValueError(f"unknown constraint mode {self.kind!r}")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")


@dataclasses.dataclass(frozen=True)
class ColumnInfo:
    """Name, provenance tag, and (for lag columns) the lag offset of one design column."""

    name: str
    provenance: str
    lag: int | None = None
    source: str | None = None


@dataclasses.dataclass
class ScmWeights:
    """Fitted coefficient vector with constraint mode, column transform, and diagnostics.

    `coefficients` live in the space the solver saw (standardized when fitted
    through `fit_scm`); `column_center`, `column_scale`, and `target_center`
    define the affine map back to original units.  A raw fit has the identity
    transform, so prediction is exactly `X_new @ coefficients`.
    """

    coefficients: np.ndarray
    mode: ConstraintMode
    columns: list[ColumnInfo]
    column_center: np.ndarray
    column_scale: np.ndarray
    target_center: float
    fit_mse: float
    kkt_residual: float
    multiplier: float | None = None

    @classmethod
    def raw(cls, coefficients, mode, columns, fit_mse=float("nan"), kkt_residual=0.0, multiplier=None):
        w = np.asarray(coefficients, dtype=float)
        return cls(
            coefficients=w,
            mode=mode,
            columns=list(columns),
            column_center=np.zeros(w.size),
            column_scale=np.ones(w.size),
            target_center=0.0,
            fit_mse=fit_mse,
            kkt_residual=kkt_residual,
            multiplier=multiplier,
        )

    @property
    def donor_mask(self) -> np.ndarray:
        return np.array([c.provenance == DONOR for c in self.columns], dtype=bool)

    def donor_coefficients(self) -> np.ndarray:
        return self.coefficients[self.donor_mask]

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.coefficients.size:
            raise DimensionError(
                f"design has {rows.shape[1]} columns, weights expect {self.coefficients.size}"
            )
        z = (rows - self.column_center) / self.column_scale
        return self.target_center + z @ self.coefficients

    def to_json(self) -> str:
        payload = {
            "mode": self.mode.kind,
            "lambda": self.mode.ridge_lambda,
            "columns": [
                {
                    "name": c.name,
                    "provenance": c.provenance,
                    "coefficient": float(w),
                    **({"lag": c.lag} if c.lag is not None else {}),
                }
                for c, w in zip(self.columns, self.coefficients)
            ],
            "fit_mse": self.fit_mse,
            "kkt_residual": self.kkt_residual,
            "transform": {
                "column_center": self.column_center.tolist(),
                "column_scale": self.column_scale.tolist(),
                "target_center": self.target_center,
            },
        }
        if self.multiplier is not None:
            payload["multiplier"] = self.multiplier
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScmWeights":
        d = json.loads(text)
        cols = [ColumnInfo(c["name"], c["provenance"], c.get("lag")) for c in d["columns"]]
        tr = d["transform"]
        return cls(
            coefficients=np.array([c["coefficient"] for c in d["columns"]], dtype=float),
            mode=ConstraintMode(d["mode"], d["lambda"]),
            columns=cols,
            column_center=np.array(tr["column_center"], dtype=float),
            column_scale=np.array(tr["column_scale"], dtype=float),
            target_center=float(tr["target_center"]),
            fit_mse=float(d["fit_mse"]),
            kkt_residual=float(d["kkt_residual"]),
            multiplier=d.get("multiplier"),
        )


def _default_columns(d: int) -> list[ColumnInfo]:
    return [ColumnInfo(f"donor_{j}", DONOR) for j in range(d)]


def _check_design(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2:
        raise DimensionError(f"design must be a matrix, got ndim={X.ndim}")
    if X.shape[0] != y.size:
        raise DimensionError(f"design has {X.shape[0]} rows but target has {y.size}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise DimensionError("design must be at least 1 x 1")
    return X, y


def fit_equality_ridge(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    sum_to_one_columns: np.ndarray | list[int] | None = None,
    columns: list[ColumnInfo] | None = None,
) -> ScmWeights:
    """Exact minimizer of ||y - Xw||^2 + lam*||w||^2 s.t. sum of the selected columns' w = 1.

    Solves the (D+1)x(D+1) KKT system
        [X'X + lam*I, 1_S; 1_S', 0] [w; mu] = [X'y; 1]
    where 1_S indicates the sum-to-one column subset.  An empty subset drops
    the constraint row (plain ridge).
    """
    X, y = _check_design(X, y)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    n, d = X.shape
    if sum_to_one_columns is None:
        subset = np.arange(d)
    else:
        subset = np.asarray(sum_to_one_columns, dtype=int)
    if subset.size and (subset.min() < 0 or subset.max() >= d):
        raise DimensionError("sum_to_one_columns out of design range")

    gram = X.T @ X + lam * np.eye(d)
    rhs_top = X.T @ y
    if subset.size:
        ones = np.zeros(d)
        ones[subset] = 1.0
        kkt = np.zeros((d + 1, d + 1))
        kkt[:d, :d] = gram
        kkt[:d, d] = ones
        kkt[d, :d] = ones
        rhs = np.concatenate([rhs_top, [1.0]])
    else:
        ones = None
        kkt = gram
        rhs = rhs_top

    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"KKT system is singular (lambda={lam}): {exc}") from exc
    resid = np.abs(kkt @ sol - rhs).max()
    scale = max(1.0, np.abs(rhs).max())
    if resid > 1e-6 * scale:
        raise SingularSystemError(
            f"KKT system is numerically rank-deficient (residual {resid:.3e} at lambda={lam})"
        )

    if subset.size:
        w, mu = sol[:d], float(sol[d])
        stat = gram @ w + mu * ones - rhs_top
        kkt_residual = max(np.abs(stat).max(), abs(w[subset].sum() - 1.0))
    else:
        w, mu = sol, None
        kkt_residual = np.abs(gram @ w - rhs_top).max()

    fit_mse = float(np.mean((y - X @ w) ** 2))
    mode = ConstraintMode(SUM_TO_ONE if subset.size else UNCONSTRAINED, lam)
    return ScmWeights.raw(
        w, mode, columns or _default_columns(d), fit_mse=fit_mse,
        kkt_residual=float(kkt_residual), multiplier=mu,
    )


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def fit_classic_scm(
    X: np.ndarray,
    y: np.ndarray,
    lam: float = 0.0,
    max_iter: int = 50_000,
    tol: float = 1e-10,
    columns: list[ColumnInfo] | None = None,
) -> ScmWeights:
    """Simplex-feasible minimizer of ||y - Xw||^2 + lam*||w||^2 by projected gradient descent.

    Terminates when successive objectives differ by less than `tol` or raises
    NonConvergenceError after `max_iter` iterations.  The step size is the
    inverse Lipschitz constant of the gradient, so the objective is
    non-increasing across iterations.
    """
    X, y = _check_design(X, y)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    n, d = X.shape
    gram = X.T @ X
    xty = X.T @ y
    lips = 2.0 * (np.linalg.eigvalsh(gram).max() + lam)
    step = 1.0 / max(lips, 1e-12)

    def objective(w):
        r = y - X @ w
        return float(r @ r + lam * (w @ w))

    w = np.full(d, 1.0 / d)
    prev = objective(w)
    converged = False
    for it in range(1, max_iter + 1):
        grad = 2.0 * (gram @ w - xty + lam * w)
        w = project_simplex(w - step * grad)
        cur = objective(w)
        if abs(prev - cur) < tol:
            converged = True
            break
        prev = cur
    if not converged:
        raise NonConvergenceError(
            f"projected gradient did not converge in {max_iter} iterations", prev, max_iter
        )

    # KKT residual on the simplex: active coordinates share the multiplier,
    # inactive ones must not undercut it.
    grad = 2.0 * (gram @ w - xty + lam * w)
    active = w > 1e-9
    mu = float(grad[active].mean()) if active.any() else float(grad.min())
    stationarity = np.abs(grad[active] - mu).max() if active.any() else 0.0
    feasibility = max(0.0, float((mu - grad[~active]).max()) if (~active).any() else 0.0)
    kkt_residual = max(stationarity, feasibility, abs(w.sum() - 1.0))

    return ScmWeights.raw(
        w, ConstraintMode(CLASSIC, lam), columns or _default_columns(d),
        fit_mse=float(np.mean((y - X @ w) ** 2)), kkt_residual=float(kkt_residual), multiplier=mu,
    )


def fit_scm(
    X: np.ndarray,
    y: np.ndarray,
    mode: ConstraintMode,
    columns: list[ColumnInfo] | None = None,
    standardize: bool = True,
) -> ScmWeights:
    """Pipeline-level fit: standardize, delegate to the mode's solver, keep the transform.

    Classic mode always runs on raw columns (the simplex constraint carries a
    donor-share reading in kW).  For the ridge modes, columns are z-scored
    with the fitting-window statistics and the target is centered; constant
    columns get unit scale.  The sum-to-one constraint binds only donor-tagged
    columns of an augmented design.
    """
    X, y = _check_design(X, y)
    d = X.shape[1]
    columns = list(columns) if columns is not None else _default_columns(d)
    if len(columns) != d:
        raise DimensionError("column metadata does not match the design width")

    if mode.kind == CLASSIC:
        return fit_classic_scm(X, y, mode.ridge_lambda, columns=columns)

    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0.0] = 1.0
        ycenter = float(y.mean())
    else:
        center = np.zeros(d)
        scale = np.ones(d)
        ycenter = 0.0
    Z = (X - center) / scale
    yz = y - ycenter

    donor_idx = np.nonzero([c.provenance == DONOR for c in columns])[0]
    subset = donor_idx if mode.kind == SUM_TO_ONE else np.array([], dtype=int)
    fitted = fit_equality_ridge(Z, yz, mode.ridge_lambda, subset, columns=columns)
    fitted.mode = mode
    fitted.column_center = center
    fitted.column_scale = scale
    fitted.target_center = ycenter
    return fitted


def predict_linear(weights: ScmWeights, X_new: np.ndarray) -> np.ndarray:
    """Deterministic linear prediction; the identity transform yields X_new @ w exactly."""
    return weights.predict_rows(X_new)


def flexibility(observed: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """Delivered flexibility: baseline minus observed consumption, elementwise."""
    observed = np.asarray(observed, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    if observed.shape != baseline.shape:
        raise DimensionError(f"shape mismatch: observed {observed.shape} vs baseline {baseline.shape}")
    return baseline - observed
