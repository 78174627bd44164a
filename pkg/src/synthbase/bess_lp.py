"""Battery dispatch as a linear program, plus fleet simulation.

The LP minimizes energy cost net of flexibility rebates,
    min sum_t p_t * x_t - f_t * delta_t,
subject to
    x_t   = l_t - g_t + s_t                          (net grid consumption)
    SOC_t = SOC_{t-1} + eta * s_t                    (state of charge)
    b_t   = (1/n) * sum_{k in S_t} x_{t - spd*k}     (settlement baseline)
    delta_t = max(0, b_t - x_t)                      (rewarded reduction)
    s_t in [-s_max, s_max],  SOC_t in [soc_min, soc_max]
with S_t the subset of the last n days whose +/-12-step window around the
same slot is congestion-free.  Steps are treated as unit length: s_t is the
per-step energy moved, matching the SOC recursion above.

delta is linearized exactly only in the direction the objective pushes it:
at steps with f_t > 0 the pair {delta >= 0, delta <= b - x} applies and an
ex-post verifier confirms delta == max(0, b - x) and that the implied
x <= b restriction never bound against the optimum (re-solving once with
the pair dropped); elsewhere delta is identically zero.  Degenerate
zero-cost battery cycles are suppressed by a tiny per-step action penalty
that is excluded from the reported objective.

The solver is a bounded-variable revised simplex with a dense basis
inverse, eta-style pivot updates, periodic sparse refactorization, and
Bland's rule engaged after a degenerate stall.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import BessConfig
from .panel_store import CoverageError, PanelDataset


class BessError(Exception):
    pass


class InfeasibleWarmupError(BessError):
    """A rebate step lacks the history needed to form its baseline set."""


class UnboundedError(BessError):
    pass


class InfeasibleError(BessError):
    pass


class CycleGuardError(BessError):
    """The pivot cap was hit even under Bland's rule."""


class DeltaLinearizationError(BessError):
    """The delta relaxation bound against the optimum; the LP solution is not exact."""


@dataclasses.dataclass
class BessInstance:
    """One dispatch horizon: per-step data, battery parameters, and prior history.

    `history_x` / `history_congestion` hold the steps immediately before the
    horizon (already settled net consumption), used by baseline references
    that reach behind the window.
    """

    prices: np.ndarray
    rebates: np.ndarray
    load: np.ndarray
    pv: np.ndarray
    congestion: np.ndarray
    eta: float = 0.95
    s_max: float = 5.0
    soc_min: float = 0.0
    soc_max: float = 10.0
    soc_initial: float = 5.0
    n_baseline_days: int = 10
    steps_per_day: int = 48
    history_x: np.ndarray = dataclasses.field(default_factory=lambda: np.empty(0))
    history_congestion: np.ndarray = dataclasses.field(default_factory=lambda: np.empty(0, dtype=bool))
    action_penalty: float = 1e-7

    def __post_init__(self):
        T = len(self.prices)
        for name in ("rebates", "load", "pv", "congestion"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} must have the horizon length {T}")
        if not (self.soc_min <= self.soc_initial <= self.soc_max):
            raise ValueError("soc_initial must lie within the SOC bounds")
        if self.s_max <= 0:
            raise ValueError("s_max must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        reb = np.asarray(self.rebates, dtype=float)
        if (reb < 0).any():
            raise ValueError("rebates must be nonnegative")
        if (reb[~np.asarray(self.congestion, dtype=bool)] != 0).any():
            raise ValueError("rebate must be zero wherever congestion is false")
        if len(self.history_x) != len(self.history_congestion):
            raise ValueError("history_x and history_congestion must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.prices)


@dataclasses.dataclass
class StandardFormLp:
    """min c'v  s.t.  A v = b,  lower <= v <= upper."""

    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    basis_hint: np.ndarray | None = None  # per row: column index or -1 for artificial
    meta: dict | None = None


@dataclasses.dataclass
class LpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    reduced_costs: np.ndarray
    max_dual_violation: float


@dataclasses.dataclass
class BessSolution:
    """Per-step schedule: battery action (positive = charging draw), net grid
    consumption, state of charge, baseline, rewarded reduction, and the cost
    net of rebates (tie-break penalty excluded)."""

    s: np.ndarray
    x: np.ndarray
    soc: np.ndarray
    b: np.ndarray
    delta_plus: np.ndarray
    objective_value: float
    lp: LpSolution | None = None


NB_LO, NB_HI, BASIC, NB_FREE = 0, 1, 2, 3
_DTOL = 1e-9      # reduced-cost pivot tolerance
_PTOL = 1e-10     # pivot magnitude tolerance
_CERT_TOL = 1e-7  # final optimality certification


class _Simplex:
    def __init__(self, lp: StandardFormLp, max_iter: int | None = None):
        A = sp.csc_matrix(lp.A, dtype=float)
        self.m, n = A.shape
        self.n_struct = n
        signs = np.ones(self.m)
        self.A = sp.hstack([A, sp.diags(signs)], format="csc")
        self.AT = self.A.T.tocsr()
        self.c = np.concatenate([np.asarray(lp.c, dtype=float), np.zeros(self.m)])
        self.b = np.asarray(lp.b, dtype=float)
        self.lower = np.concatenate([np.asarray(lp.lower, dtype=float), np.zeros(self.m)])
        self.upper = np.concatenate([np.asarray(lp.upper, dtype=float), np.full(self.m, np.inf)])
        self.max_iter = max_iter or max(20_000, 60 * (self.m + n))
        self.iterations = 0
        self._init_basis(lp.basis_hint)

    # -- setup -------------------------------------------------------------

    def _init_basis(self, hint):
        n_all = self.n_struct + self.m
        self.vstat = np.empty(n_all, dtype=np.int8)
        self.x = np.zeros(n_all)
        for j in range(n_all):
            if np.isfinite(self.lower[j]):
                self.vstat[j] = NB_LO
                self.x[j] = self.lower[j]
            elif np.isfinite(self.upper[j]):
                self.vstat[j] = NB_HI
                self.x[j] = self.upper[j]
            else:
                self.vstat[j] = NB_FREE
                self.x[j] = 0.0

        self.basis = np.arange(self.n_struct, n_all)
        if hint is not None:
            hint = np.asarray(hint)
            use = hint >= 0
            self.basis[use] = hint[use]
        self.vstat[self.basis] = BASIC
        self._refactor()
        # A hinted basis can put a bounded variable outside its bounds; fall
        # back to the artificial for those rows.
        bad = (self.xB < self.lower[self.basis] - 1e-9) | (self.xB > self.upper[self.basis] + 1e-9)
        if bad.any():
            for r in np.nonzero(bad)[0]:
                j = self.basis[r]
                self.vstat[j] = NB_LO if np.isfinite(self.lower[j]) else (
                    NB_HI if np.isfinite(self.upper[j]) else NB_FREE
                )
                self.x[j] = self.lower[j] if self.vstat[j] == NB_LO else (
                    self.upper[j] if self.vstat[j] == NB_HI else 0.0
                )
                self.basis[r] = self.n_struct + r
                self.vstat[self.n_struct + r] = BASIC
            self._refactor()
        # Orient artificials so their (basic) values are nonnegative: flip the
        # effective sign by allowing them in (-inf, 0] when the residual is
        # negative, equivalently relax their lower bound for phase 1.
        art = self.basis >= self.n_struct
        neg = art & (self.xB < 0)
        self.art_negative = np.zeros(self.m, dtype=bool)
        if neg.any():
            rows = self.basis[neg] - self.n_struct
            self.lower[self.basis[neg]] = -np.inf
            self.upper[self.basis[neg]] = 0.0
            self.art_negative[rows] = True

    def _refactor(self):
        B = self.A[:, self.basis]
        try:
            lu = spla.splu(B.tocsc(), permc_spec="COLAMD")
            self.B_inv = lu.solve(np.eye(self.m))
        except RuntimeError:
            self.B_inv = np.linalg.pinv(B.toarray())
        xfull = self.x.copy()
        xfull[self.basis] = 0.0
        self.xB = self.B_inv @ (self.b - self.A @ xfull)
        self.x[self.basis] = self.xB

    # -- engine ------------------------------------------------------------

    def _column(self, j: int) -> np.ndarray:
        a, b = self.A.indptr[j], self.A.indptr[j + 1]
        idx = self.A.indices[a:b]
        vals = self.A.data[a:b]
        return self.B_inv[:, idx] @ vals

    def _reduced_costs(self, c: np.ndarray) -> np.ndarray:
        y = self.B_inv.T @ c[self.basis]
        return c - self.AT @ y

    def _run(self, c: np.ndarray, phase: int):
        stall = 0
        bland = False
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iter:
                raise CycleGuardError(
                    f"no termination after {self.iterations} pivots (phase {phase})"
                )
            d = self._reduced_costs(c)
            movable = self.upper - self.lower > _PTOL
            elig_lo = (self.vstat == NB_LO) & movable & (d < -_DTOL)
            elig_hi = (self.vstat == NB_HI) & movable & (d > _DTOL)
            elig_fr = (self.vstat == NB_FREE) & (np.abs(d) > _DTOL)
            eligible = elig_lo | elig_hi | elig_fr
            if not eligible.any():
                return
            cand = np.nonzero(eligible)[0]
            q = int(cand.min()) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if (self.vstat[q] == NB_LO or (self.vstat[q] == NB_FREE and d[q] < 0)) else -1.0

            u = self._column(q)
            rate = -direction * u
            t_best = np.inf
            r_best = -1
            hits_lower = None
            lo_b = self.lower[self.basis]
            hi_b = self.upper[self.basis]
            dec = rate < -_PTOL
            inc = rate > _PTOL
            with np.errstate(divide="ignore", invalid="ignore"):
                t_dec = np.where(dec, (self.xB - lo_b) / np.where(dec, -rate, 1.0), np.inf)
                t_inc = np.where(inc, (hi_b - self.xB) / np.where(inc, rate, 1.0), np.inf)
            t_dec = np.where(np.isfinite(lo_b), t_dec, np.inf)
            t_inc = np.where(np.isfinite(hi_b), t_inc, np.inf)
            t_rows = np.minimum(t_dec, t_inc)
            t_rows = np.maximum(t_rows, 0.0)
            r_min = int(np.argmin(t_rows))
            t_block = float(t_rows[r_min])
            if t_block < np.inf:
                ties = np.nonzero(t_rows <= t_block + 1e-12)[0]
                if bland:
                    r_best = int(ties[np.argmin(self.basis[ties])])
                else:
                    r_best = int(ties[np.argmax(np.abs(u[ties]))])
                t_best = float(t_rows[r_best])
                hits_lower = t_dec[r_best] <= t_inc[r_best]

            span = self.upper[q] - self.lower[q]
            t_flip = span if np.isfinite(span) else np.inf

            self.iterations += 1
            since_refactor += 1
            if t_best == np.inf and t_flip == np.inf:
                if phase == 2:
                    raise UnboundedError(f"unbounded ray on variable {q}")
                raise CycleGuardError("phase-1 ray should not occur")

            if t_flip <= t_best:
                # entering variable runs to its opposite bound; basis unchanged
                self.xB -= direction * u * t_flip
                self.x[self.basis] = self.xB
                self.x[q] = self.upper[q] if self.vstat[q] == NB_LO else self.lower[q]
                self.vstat[q] = NB_HI if self.vstat[q] == NB_LO else NB_LO
                step = t_flip
            else:
                leave = self.basis[r_best]
                self.xB -= direction * u * t_best
                new_val = self.x[q] + direction * t_best
                bound_val = lo_b[r_best] if hits_lower else hi_b[r_best]
                self.x[leave] = bound_val
                self.vstat[leave] = NB_LO if hits_lower else NB_HI
                self.basis[r_best] = q
                self.vstat[q] = BASIC
                self.xB[r_best] = new_val
                self.x[self.basis] = self.xB
                piv = u[r_best]
                self.B_inv[r_best, :] /= piv
                u2 = u.copy()
                u2[r_best] = 0.0
                self.B_inv -= np.outer(u2, self.B_inv[r_best, :])
                step = t_best

            if step <= 1e-12:
                stall += 1
                if stall > 40 and not bland:
                    bland = True
            else:
                stall = 0
                bland = False
            if since_refactor >= 150:
                self._refactor()
                since_refactor = 0

    def solve(self) -> LpSolution:
        # phase 1 only when some artificial carries a nonzero residual
        art_idx = np.arange(self.n_struct, self.n_struct + self.m)
        art_vals = np.abs(self.x[art_idx])
        if art_vals.max(initial=0.0) > 1e-11:
            c1 = np.zeros_like(self.c)
            c1[art_idx] = np.where(self.art_negative, -1.0, 1.0)
            self._run(c1, phase=1)
            self._refactor()
            infeas = float(c1[art_idx] @ self.x[art_idx])
            if infeas > 1e-7:
                raise InfeasibleError(f"phase-1 infeasibility {infeas:.3e}")
        # pin artificials so they can never move again
        self.lower[art_idx] = 0.0
        self.upper[art_idx] = 0.0
        self.x[art_idx[self.vstat[art_idx] != BASIC]] = 0.0
        self.vstat[art_idx[self.vstat[art_idx] == NB_FREE]] = NB_LO

        self._run(self.c, phase=2)
        # certify: refactor for accuracy, then confirm dual feasibility
        for _ in range(3):
            self._refactor()
            d = self._reduced_costs(self.c)
            viol = self._dual_violation(d)
            if viol <= _CERT_TOL:
                break
            self._run(self.c, phase=2)
        obj = float(self.c[: self.n_struct] @ self.x[: self.n_struct])
        return LpSolution(
            x=self.x[: self.n_struct].copy(),
            objective=obj,
            iterations=self.iterations,
            reduced_costs=d[: self.n_struct].copy(),
            max_dual_violation=float(viol),
        )

    def _dual_violation(self, d: np.ndarray) -> float:
        movable = self.upper - self.lower > _PTOL
        v_lo = np.where((self.vstat == NB_LO) & movable, np.maximum(0.0, -d), 0.0)
        v_hi = np.where((self.vstat == NB_HI) & movable, np.maximum(0.0, d), 0.0)
        v_fr = np.where(self.vstat == NB_FREE, np.abs(d), 0.0)
        return float(np.maximum(np.maximum(v_lo, v_hi), v_fr).max())


def solve_standard_form(lp: StandardFormLp, max_iter: int | None = None) -> LpSolution:
    """Solve a bounded-variable standard-form LP by revised simplex."""
    return _Simplex(lp, max_iter=max_iter).solve()


# -- LP construction ---------------------------------------------------------


def _baseline_refs(instance: BessInstance, t: int) -> tuple[list[int], bool]:
    """Offsets (window-relative, may be negative into history) of the baseline set S_t.

    Returns (offsets, available).  A day k is in S_t when its +/-12-step
    window around the same slot is congestion-free; `available` is False when
    some day's window reaches before the recorded history.
    """
    spd = instance.steps_per_day
    n_hist = len(instance.history_x)
    cong = np.concatenate([np.asarray(instance.history_congestion, dtype=bool),
                           np.asarray(instance.congestion, dtype=bool)])
    refs: list[int] = []
    for k in range(1, instance.n_baseline_days + 1):
        center = t - spd * k
        if center - 12 < -n_hist:
            return refs, False
        w = cong[center - 12 + n_hist : center + 13 + n_hist]
        if not w.any():
            refs.append(center)
    return refs, True


def build_lp(instance: BessInstance) -> StandardFormLp:
    """Emit the dispatch LP in equality standard form with bounds.

    Variables per step: charging draw s+, discharging s-, net consumption x,
    state of charge; plus baseline, reduction, and slack variables at each
    rebate step.  The triangular {x, SOC, b} crash basis is attached so
    rebate-free horizons start feasible without a phase 1.
    """
    T = instance.horizon
    p = np.asarray(instance.prices, dtype=float)
    f = np.asarray(instance.rebates, dtype=float)
    net = np.asarray(instance.load, dtype=float) - np.asarray(instance.pv, dtype=float)
    eta = instance.eta
    n = instance.n_baseline_days

    i_sp = np.arange(0, T)
    i_sm = np.arange(T, 2 * T)
    i_x = np.arange(2 * T, 3 * T)
    i_soc = np.arange(3 * T, 4 * T)
    rebate_steps = [t for t in range(T) if f[t] > 0]
    n_extra = len(rebate_steps)
    i_b = {t: 4 * T + 3 * i for i, t in enumerate(rebate_steps)}
    i_d = {t: 4 * T + 3 * i + 1 for i, t in enumerate(rebate_steps)}
    i_sl = {t: 4 * T + 3 * i + 2 for i, t in enumerate(rebate_steps)}
    n_vars = 4 * T + 3 * n_extra

    rows, cols, vals, rhs, hint = [], [], [], [], []

    def add(row, col, val):
        rows.append(row)
        cols.append(col)
        vals.append(val)

    r = 0
    for t in range(T):  # x_t - s+_t + s-_t = l_t - g_t
        add(r, i_x[t], 1.0)
        add(r, i_sp[t], -1.0)
        add(r, i_sm[t], 1.0)
        rhs.append(net[t])
        hint.append(i_x[t])
        r += 1
    for t in range(T):  # SOC_t - SOC_{t-1} - eta*(s+_t - s-_t) = [soc_init at t=0]
        add(r, i_soc[t], 1.0)
        if t > 0:
            add(r, i_soc[t - 1], -1.0)
        add(r, i_sp[t], -eta)
        add(r, i_sm[t], eta)
        rhs.append(instance.soc_initial if t == 0 else 0.0)
        hint.append(i_soc[t])
        r += 1

    warmup_bad = []
    for t in rebate_steps:
        refs, ok = _baseline_refs(instance, t)
        if not ok:
            warmup_bad.append(t)
            continue
        # b_t - (1/n) sum_{tau in refs, tau >= 0} x_tau = (1/n) sum_{tau < 0} hist_x[tau]
        add(r, i_b[t], 1.0)
        const = 0.0
        for tau in refs:
            if tau >= 0:
                add(r, i_x[tau], -1.0 / n)
            else:
                const += instance.history_x[len(instance.history_x) + tau] / n
        rhs.append(const)
        hint.append(i_b[t])
        r += 1
        # delta_t - b_t + x_t + slack_t = 0
        add(r, i_d[t], 1.0)
        add(r, i_b[t], -1.0)
        add(r, i_x[t], 1.0)
        add(r, i_sl[t], 1.0)
        rhs.append(0.0)
        hint.append(-1)
        r += 1
    if warmup_bad:
        raise InfeasibleWarmupError(
            f"rebate steps {warmup_bad[:5]} lack {n} days of recorded history for the baseline set"
        )

    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n_vars))
    c = np.zeros(n_vars)
    c[i_x] = p
    c[i_sp] = instance.action_penalty
    c[i_sm] = instance.action_penalty
    lower = np.full(n_vars, -np.inf)
    upper = np.full(n_vars, np.inf)
    lower[i_sp] = 0.0
    upper[i_sp] = instance.s_max
    lower[i_sm] = 0.0
    upper[i_sm] = instance.s_max
    lower[i_soc] = instance.soc_min
    upper[i_soc] = instance.soc_max
    for t in rebate_steps:
        c[i_d[t]] = -f[t]
        lower[i_d[t]] = 0.0
        lower[i_sl[t]] = 0.0

    meta = {
        "instance": instance,
        "i_sp": i_sp, "i_sm": i_sm, "i_x": i_x, "i_soc": i_soc,
        "i_b": i_b, "i_d": i_d, "rebate_steps": rebate_steps,
    }
    return StandardFormLp(c=c, A=A, b=np.array(rhs), lower=lower, upper=upper,
                          basis_hint=np.array(hint), meta=meta)


def baseline_series(instance: BessInstance, x: np.ndarray) -> np.ndarray:
    """Baseline at every step computed from a settled consumption series (NaN when
    the history needed for a step is not recorded)."""
    out = np.full(instance.horizon, np.nan)
    for t in range(instance.horizon):
        refs, ok = _baseline_refs(instance, t)
        if not ok:
            continue
        total = 0.0
        for tau in refs:
            total += x[tau] if tau >= 0 else instance.history_x[len(instance.history_x) + tau]
        out[t] = total / instance.n_baseline_days
    return out


def _extract(lp: StandardFormLp, sol: LpSolution) -> BessSolution:
    meta = lp.meta
    inst: BessInstance = meta["instance"]
    s = sol.x[meta["i_sp"]] - sol.x[meta["i_sm"]]
    x = sol.x[meta["i_x"]]
    soc = sol.x[meta["i_soc"]]
    delta = np.zeros(inst.horizon)
    for t in meta["rebate_steps"]:
        delta[t] = sol.x[meta["i_d"][t]]
    b = baseline_series(inst, x)
    for t in meta["rebate_steps"]:
        b[t] = sol.x[meta["i_b"][t]]
    value = float(np.asarray(inst.prices) @ x - np.asarray(inst.rebates) @ delta)
    return BessSolution(s=s, x=x, soc=soc, b=b, delta_plus=delta,
                        objective_value=value, lp=sol)


def _true_cost(inst: BessInstance, x: np.ndarray) -> float:
    """Cost under the exact (non-linearized) reduction definition."""
    b = baseline_series(inst, x)
    delta = np.where(np.asarray(inst.rebates) > 0, np.maximum(0.0, b - x), 0.0)
    return float(np.asarray(inst.prices) @ x - np.asarray(inst.rebates) @ delta)


def verify_delta_linearization(lp: StandardFormLp, solution: BessSolution, tol: float = 1e-7) -> None:
    """Ex-post exactness check for the delta relaxation.

    Asserts delta == max(0, b - x) at every rebate step and, where the
    implied x <= b restriction binds, re-solves once with those pairs
    dropped; a strictly better true cost means the linearization cut off the
    optimum, which fails the run.
    """
    inst: BessInstance = lp.meta["instance"]
    steps = lp.meta["rebate_steps"]
    if not steps:
        return
    gap = np.array([solution.delta_plus[t] - max(0.0, solution.b[t] - solution.x[t]) for t in steps])
    if np.abs(gap).max(initial=0.0) > tol:
        raise DeltaLinearizationError(
            f"delta deviates from max(0, b - x) by {np.abs(gap).max():.3e}"
        )
    binding = [t for t in steps if solution.b[t] - solution.x[t] <= tol]
    if not binding:
        return
    relaxed = dataclasses.replace(
        inst, rebates=np.where(np.isin(np.arange(inst.horizon), binding), 0.0, inst.rebates)
    )
    alt = solve_lp(build_lp(relaxed))
    base_cost = _true_cost(inst, solution.x)
    alt_cost = _true_cost(inst, alt.x)
    if alt_cost < base_cost - 1e-6:
        raise DeltaLinearizationError(
            f"x <= b bound against the optimum at steps {binding[:5]} "
            f"(true cost {base_cost:.6f} vs {alt_cost:.6f} without the pair)"
        )


def solve_lp(lp: StandardFormLp, max_iter: int | None = None):
    """Solve a built LP; returns a BessSolution for dispatch LPs (with the
    delta verifier applied), or a bare LpSolution for generic standard forms."""
    sol = solve_standard_form(lp, max_iter=max_iter)
    if lp.meta is None or "instance" not in (lp.meta or {}):
        return sol
    out = _extract(lp, sol)
    verify_delta_linearization(lp, out)
    return out


def read_prices(price_csv, timestamps) -> np.ndarray:
    import pandas as pd

    df = pd.read_csv(price_csv)
    if list(df.columns[:2]) != ["timestamp", "price"]:
        raise CoverageError("price CSV must have columns timestamp,price")
    ser = pd.Series(df["price"].to_numpy(dtype=float),
                    index=pd.DatetimeIndex(pd.to_datetime(df["timestamp"], format="ISO8601")))
    aligned = ser.reindex(timestamps)
    if aligned.isna().any():
        raise CoverageError("price series does not cover the panel horizon")
    return aligned.to_numpy()


def simulate_fleet(
    panel: PanelDataset,
    template: BessConfig,
    prices: np.ndarray | None = None,
    price_csv=None,
    window_steps: int = 336,
) -> PanelDataset:
    """Dispatch one battery per building over rolling windows; returns the panel
    with prosumption = load - pv + s.

    SOC and settled consumption are handed across windows, so the
    concatenated schedules satisfy every per-step constraint globally.
    Rebates are `template.rebate_rate` at each building's congested steps.
    """
    if prices is None:
        if price_csv is None:
            raise ValueError("provide prices or price_csv")
        prices = read_prices(price_csv, panel.timestamps)
    prices = np.asarray(prices, dtype=float)
    if prices.size != panel.n_steps:
        raise CoverageError("price series does not cover the panel horizon")

    T = panel.n_steps
    actions = np.zeros((T, len(panel.buildings)))
    for j, bid in enumerate(panel.buildings):
        rebates = np.where(panel.congestion[:, j], template.rebate_rate, 0.0)
        history_x = np.empty(0)
        soc = template.soc_init
        try:
            for a in range(0, T, window_steps):
                win = slice(a, min(a + window_steps, T))
                inst = BessInstance(
                    prices=prices[win],
                    rebates=rebates[win],
                    load=panel.load[win, j],
                    pv=panel.pv[win, j],
                    congestion=panel.congestion[win, j],
                    eta=template.eta,
                    s_max=template.s_max,
                    soc_min=template.soc_min,
                    soc_max=template.soc_max,
                    soc_initial=soc,
                    n_baseline_days=template.n_baseline_days,
                    steps_per_day=template.steps_per_day,
                    history_x=history_x,
                    history_congestion=panel.congestion[:a, j],
                    action_penalty=template.action_penalty,
                )
                sol = solve_lp(build_lp(inst))
                actions[win, j] = sol.s
                history_x = np.concatenate([history_x, sol.x])
                soc = sol.soc[-1]
        except BessError as exc:
            raise type(exc)(f"building {bid!r}: {exc}") from exc
    return panel.with_prosumption(panel.load - panel.pv + actions)


def export_solution_csv(solution: BessSolution, timestamps, path) -> None:
    import pandas as pd

    pd.DataFrame(
        {
            "timestamp": timestamps,
            "s": solution.s,
            "x": solution.x,
            "soc": solution.soc,
            "b": solution.b,
            "delta_plus": solution.delta_plus,
        }
    ).to_csv(path, index=False)
