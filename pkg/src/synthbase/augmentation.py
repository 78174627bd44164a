"""Augmented design construction and dynamic counterfactual prediction.

Builds the block design [donors | exogenous | treated lags | donor lags] on a
window of the panel, selects one lag per donor by maximal absolute Pearson
correlation with the treated series, and drives one-step and recursive
multi-step prediction over congestion events.

Leakage rules enforced here:
  * every lag entry at row t references panel values strictly before t;
  * donor lags are selected on the training window and frozen afterwards;
  * recursive prediction feeds previously predicted counterfactual values
    (never realized treated values) into the treated-lag block inside an
    event; donor and exogenous columns always use realized values.
"""

from __future__ import annotations

import dataclasses
import warnings
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .panel_store import PanelDataset
from .scm_solver import DONOR, DONOR_LAG, EXOGENOUS, TREATED_LAG, ColumnInfo

EXOGENOUS_NAMES = ("temp", "humidity", "wind_speed", "wind_dir", "weekday", "hour_sin", "hour_cos")


class AugmentationError(Exception):
    """Base class for design-construction failures."""


class DegenerateSeriesError(AugmentationError):
    """A series has zero variance on the correlation overlap."""


class InsufficientHistoryError(AugmentationError):
    """Not enough pre-window history for the requested lag depth."""


class ModeError(AugmentationError):
    """Unknown prediction mode."""


@dataclasses.dataclass(frozen=True)
class AugmentationSpec:
    """Block toggles and sizes for the augmented design.

    All-off degenerates to the raw donor matrix.  The donor-lag search depth
    defaults to the treated lag count.
    """

    use_exogenous: bool = False
    use_treated_lags: bool = False
    treated_lag_count: int = 336
    use_donor_lags: bool = False
    donor_lag_search_max: int | None = None

    def __post_init__(self):
        if self.use_treated_lags and self.treated_lag_count < 1:
            raise ValueError("treated_lag_count must be >= 1 when treated lags are enabled")
        if self.donor_lag_search_max is not None and self.donor_lag_search_max > self.treated_lag_count:
            raise ValueError("donor_lag_search_max must not exceed treated_lag_count")

    @property
    def lag_search_max(self) -> int:
        return self.donor_lag_search_max if self.donor_lag_search_max is not None else self.treated_lag_count


BASIC = AugmentationSpec()
WITH_EXOGENOUS = AugmentationSpec(use_exogenous=True)
WITH_TREATED_PAST = AugmentationSpec(use_exogenous=True, use_treated_lags=True)
WITH_DONOR_PAST = AugmentationSpec(use_exogenous=True, use_treated_lags=True, use_donor_lags=True)


@dataclasses.dataclass
class AugmentedDesign:
    """Design matrix with per-column provenance, frozen donor lags, and the usable-row offset.

    Rows before `usable_row_offset` lack full lag history (the window starts
    at the panel origin) and must be excluded from fitting; their lag entries
    are zero-filled placeholders.
    """

    matrix: np.ndarray
    columns: list[ColumnInfo]
    selected_lags: dict[str, int]
    lag_correlations: dict[str, float]
    usable_row_offset: int
    window: range
    treated_id: str
    donor_ids: tuple[str, ...]
    spec: AugmentationSpec

    @property
    def fit_matrix(self) -> np.ndarray:
        return self.matrix[self.usable_row_offset:]

    def fit_target(self, panel: PanelDataset) -> np.ndarray:
        j = panel.building_index(self.treated_id)
        rows = np.arange(self.window.start + self.usable_row_offset, self.window.stop)
        return panel.prosumption[rows, j]


def exogenous_matrix(panel: PanelDataset) -> np.ndarray:
    """The seven exogenous features: four weather columns plus three calendar indicators."""
    cal = panel.calendar
    return np.column_stack([panel.weather, cal.weekday, cal.hour_sin, cal.hour_cos])


def select_donor_lag(treated: np.ndarray, donor: np.ndarray, k_max: int) -> tuple[int, float]:
    """Lag in 1..k_max maximizing |Pearson corr(treated_t, donor_{t-k})|; ties go to the smallest k.

    `donor` must carry k_max extra leading history points so every lag is
    scored on the same sample.  Returns the signed correlation at the argmax.
    """
    treated = np.asarray(treated, dtype=float)
    donor = np.asarray(donor, dtype=float)
    n = treated.size
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if donor.size != n + k_max:
        raise InsufficientHistoryError(
            f"donor series must have {n + k_max} points ({k_max} leading history), got {donor.size}"
        )
    tc = treated - treated.mean()
    tnorm = np.sqrt(tc @ tc)
    if tnorm == 0.0:
        raise DegenerateSeriesError("treated series has zero variance on the overlap")
    # windows[i] = donor[i : i + n]; lag k aligns with window index k_max - k
    windows = sliding_window_view(donor, n)[: k_max + 1]
    wc = windows - windows.mean(axis=1, keepdims=True)
    wnorm = np.sqrt(np.einsum("ij,ij->i", wc, wc))
    valid = wnorm > 0.0
    if not valid[:k_max].any():
        raise DegenerateSeriesError("donor series has zero variance at every lag")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (wc @ tc) / (wnorm * tnorm)
    corr_by_lag = corr[k_max - np.arange(1, k_max + 1)]
    valid_by_lag = valid[k_max - np.arange(1, k_max + 1)]
    abs_corr = np.where(valid_by_lag, np.abs(corr_by_lag), -np.inf)
    k_star = int(np.argmax(abs_corr)) + 1  # argmax returns the first (smallest-k) maximizer
    return k_star, float(corr_by_lag[k_star - 1])


def select_all_lags(
    panel: PanelDataset, treated_id: str, window: range, k_max: int
) -> tuple[dict[str, int], dict[str, float]]:
    """Per-donor lag selection over `window`.

    Rows whose lag reaches before the panel origin are dropped from the
    correlation sample so every lag is scored on identical rows.  A donor
    with zero variance gets lag 1 and a NaN correlation, with a warning,
    rather than aborting the whole fit.
    """
    series = panel.prosumption
    t_idx = panel.building_index(treated_id)
    start = max(window.start, k_max)
    if start >= window.stop:
        raise InsufficientHistoryError(
            f"window of {len(window)} rows leaves no sample for lag search depth {k_max}"
        )
    rows = np.arange(start, window.stop)
    treated = series[rows, t_idx]
    lags: dict[str, int] = {}
    corrs: dict[str, float] = {}
    for j, bid in enumerate(panel.buildings):
        if bid == treated_id:
            continue
        donor = series[start - k_max : window.stop, j]
        try:
            k_star, corr = select_donor_lag(treated, donor, k_max)
        except DegenerateSeriesError:
            warnings.warn(f"donor {bid!r} is degenerate on the lag-search window; defaulting to lag 1")
            k_star, corr = 1, float("nan")
        lags[bid] = k_star
        corrs[bid] = corr
    return lags, corrs


def build_design(
    panel: PanelDataset,
    treated_id: str,
    spec: AugmentationSpec,
    window: range,
    frozen_lags: dict[str, int] | None = None,
    frozen_corrs: dict[str, float] | None = None,
) -> AugmentedDesign:
    """Assemble the block design over `window` with fixed column order.

    Order: donors, exogenous, treated lags newest-first, donor lags.  When
    donor lags are enabled and `frozen_lags` is None they are selected on
    this window; pass a training window's selection to freeze them for
    validation/test designs.
    """
    series = panel.prosumption
    t_idx = panel.building_index(treated_id)
    donor_ids = tuple(b for b in panel.buildings if b != treated_id)
    donor_idx = np.array([panel.building_index(b) for b in donor_ids])
    if window.start < 0 or window.stop > panel.n_steps or len(window) < 1:
        raise ValueError(f"window {window} outside the panel range")

    selected: dict[str, int] = {}
    corrs: dict[str, float] = {}
    if spec.use_donor_lags:
        if frozen_lags is None:
            selected, corrs = select_all_lags(panel, treated_id, window, spec.lag_search_max)
        else:
            missing = [b for b in donor_ids if b not in frozen_lags]
            if missing:
                raise AugmentationError(f"frozen lags missing donors {missing[:3]}...")
            selected = {b: int(frozen_lags[b]) for b in donor_ids}
            corrs = {b: float((frozen_corrs or {}).get(b, float("nan"))) for b in donor_ids}
        bad = {b: k for b, k in selected.items() if not 1 <= k <= spec.lag_search_max}
        if bad:
            raise AugmentationError(f"selected lags outside 1..{spec.lag_search_max}: {bad}")

    needed = 0
    if spec.use_treated_lags:
        needed = spec.treated_lag_count
    if spec.use_donor_lags and selected:
        needed = max(needed, max(selected.values()))
    offset = max(0, needed - window.start)
    if offset >= len(window):
        raise InsufficientHistoryError(
            f"window of {len(window)} rows has no usable row after a {needed}-step lag offset"
        )

    rows = np.arange(window.start, window.stop)
    blocks: list[np.ndarray] = [series[np.ix_(rows, donor_idx)]]
    columns: list[ColumnInfo] = [ColumnInfo(f"donor:{b}", DONOR, source=b) for b in donor_ids]

    if spec.use_exogenous:
        exo = exogenous_matrix(panel)
        blocks.append(exo[rows])
        columns.extend(ColumnInfo(f"exog:{n}", EXOGENOUS) for n in EXOGENOUS_NAMES)

    if spec.use_treated_lags:
        L = spec.treated_lag_count
        H = np.zeros((len(rows), L))
        treated_series = series[:, t_idx]
        for i, t in enumerate(rows):
            if t - L >= 0:
                H[i] = treated_series[t - L : t][::-1]
            elif i >= offset:  # unreachable by construction; guard stays for clarity
                raise InsufficientHistoryError(f"row {t} lacks {L} treated lags")
        blocks.append(H)
        columns.extend(
            ColumnInfo(f"treated_lag:{treated_id}:k={k}", TREATED_LAG, lag=k, source=treated_id)
            for k in range(1, L + 1)
        )

    if spec.use_donor_lags:
        R = np.zeros((len(rows), len(donor_ids)))
        for c, b in enumerate(donor_ids):
            k = selected[b]
            src = series[:, panel.building_index(b)]
            lo = rows - k
            ok = lo >= 0
            R[ok, c] = src[lo[ok]]
        blocks.append(R)
        columns.extend(
            ColumnInfo(f"donor_lag:{b}:k={selected[b]}", DONOR_LAG, lag=selected[b], source=b)
            for b in donor_ids
        )

    return AugmentedDesign(
        matrix=np.hstack(blocks),
        columns=columns,
        selected_lags=selected,
        lag_correlations=corrs,
        usable_row_offset=offset,
        window=window,
        treated_id=treated_id,
        donor_ids=donor_ids,
        spec=spec,
    )


def design_width(n_donors: int, spec: AugmentationSpec, n_exogenous: int = len(EXOGENOUS_NAMES)) -> int:
    """Column count: J + M*[exF] + L*[Tpast] + J*[Dpast]."""
    return (
        n_donors
        + (n_exogenous if spec.use_exogenous else 0)
        + (spec.treated_lag_count if spec.use_treated_lags else 0)
        + (n_donors if spec.use_donor_lags else 0)
    )


def verify_no_leakage(panel: PanelDataset, design: AugmentedDesign) -> dict[str, int]:
    """Audit that every lag entry at row t equals a panel value strictly before t.

    Recomputes each lag column from the panel via its declared (source, lag)
    and cross-checks the stored matrix on usable rows.  Returns counts of the
    audited cells per block; raises AssertionError on any violation.
    """
    series = panel.prosumption
    rows = np.arange(design.window.start, design.window.stop)
    usable = rows >= (design.window.start + design.usable_row_offset)
    audited = {"treated_lag": 0, "donor_lag": 0}
    for c, col in enumerate(design.columns):
        if col.provenance not in (TREATED_LAG, DONOR_LAG):
            continue
        assert col.lag is not None and col.lag >= 1, f"column {col.name} lacks a positive lag"
        src = series[:, panel.building_index(col.source)]
        ref = rows - col.lag
        ok = usable & (ref >= 0)
        assert np.array_equal(design.matrix[ok, c], src[ref[ok]]), f"column {col.name} mismatches its source"
        audited[col.provenance] += int(ok.sum())
    return audited


def _recover_lags(predictor, spec: AugmentationSpec, selected_lags) -> dict[str, int]:
    if selected_lags is not None:
        return dict(selected_lags)
    columns = getattr(predictor, "columns", None)
    if columns:
        lags = {c.source: c.lag for c in columns if c.provenance == DONOR_LAG}
        if lags:
            return lags
    if spec.use_donor_lags:
        raise AugmentationError("donor lags enabled but no frozen selection available on the predictor")
    return {}


def predict_counterfactual(
    predictor,
    panel: PanelDataset,
    treated_id: str,
    spec: AugmentationSpec,
    event: range,
    mode: str = "recursive",
    selected_lags: dict[str, int] | None = None,
) -> np.ndarray:
    """Counterfactual trajectory over an event window.

    `one_step` emits only the first event step, built from realized history.
    `recursive` emits the full event, feeding prior predictions into the
    treated-lag block; donor and exogenous entries always use realized
    values (donors are untreated).  The predictor must expose
    `predict_rows(matrix) -> vector` on designs matching `spec`.
    """
    if mode not in ("one_step", "recursive"):
        raise ModeError(f"unknown prediction mode {mode!r}")
    if len(event) < 1:
        raise ValueError("event window is empty")
    series = panel.prosumption
    t_idx = panel.building_index(treated_id)
    donor_ids = tuple(b for b in panel.buildings if b != treated_id)
    donor_idx = np.array([panel.building_index(b) for b in donor_ids])
    lags = _recover_lags(predictor, spec, selected_lags)

    needed = 0
    if spec.use_treated_lags:
        needed = spec.treated_lag_count
    if spec.use_donor_lags and lags:
        needed = max(needed, max(lags.values()))
    if event.start - needed < 0:
        raise InsufficientHistoryError(f"event start {event.start} lacks {needed} steps of history")

    exo = exogenous_matrix(panel) if spec.use_exogenous else None
    hist = series[:, t_idx].astype(float).copy()
    steps = [event.start] if mode == "one_step" else list(event)
    out = np.empty(len(steps))
    for i, t in enumerate(steps):
        parts = [series[t, donor_idx]]
        if spec.use_exogenous:
            parts.append(exo[t])
        if spec.use_treated_lags:
            L = spec.treated_lag_count
            parts.append(hist[t - L : t][::-1])
        if spec.use_donor_lags:
            parts.append(np.array([series[t - lags[b], panel.building_index(b)] for b in donor_ids]))
        row = np.concatenate(parts)
        yhat = float(np.asarray(predictor.predict_rows(row[None, :])).ravel()[0])
        out[i] = yhat
        hist[t] = yhat  # only read back in recursive mode via the H block
    return out


def export_selected_lags(design: AugmentedDesign, path) -> Path:
    """Audit CSV of the frozen donor-lag selection: donor_id,k_star,corr."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("donor_id,k_star,corr\n")
        for b in design.donor_ids:
            k = design.selected_lags.get(b, "")
            corr = design.lag_correlations.get(b, float("nan"))
            fh.write(f"{b},{k},{corr:.6f}\n")
    return path
