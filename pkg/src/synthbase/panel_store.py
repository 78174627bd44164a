"""Ingest, align, and partition the half-hourly building panel.

The panel bundles load, PV, prosumption, weather, calendar features, and the
congestion-event calendar behind one immutable dataset object.  Gaps in the
load series are hard errors: settlement-grade baselines must not run on
silently imputed meter data.
"""

from __future__ import annotations

import dataclasses
import functools
from pathlib import Path

import numpy as np
import pandas as pd

WEATHER_COLUMNS = ("temp", "humidity", "wind_speed", "wind_dir")


class PanelError(Exception):
    """Base class for panel ingestion and validation failures."""


class GapError(PanelError):
    """A load series is missing a timestamp or holds a non-finite value."""


class CoverageError(PanelError):
    """Weather (or price) data does not span the load range."""


class SchemaError(PanelError):
    """Malformed CSV header or non-conforming cell values."""


class FractionError(PanelError):
    """Split fractions are not positive or do not sum to one."""


class InvariantError(PanelError):
    """A constructed dataset violates a PanelDataset invariant."""


@dataclasses.dataclass(frozen=True)
class Splits:
    """Contiguous, ordered train/validation/test index ranges."""

    train: range
    val: range
    test: range

    def locate(self, index: int) -> str:
        for name in ("train", "val", "test"):
            if index in getattr(self, name):
                return name
        raise IndexError(f"index {index} is outside all splits")


@dataclasses.dataclass(frozen=True)
class FeatureCalendar:
    """Per-timestamp temporal indicators: weekday and hour-of-day on the unit circle."""

    weekday: np.ndarray
    hour_sin: np.ndarray
    hour_cos: np.ndarray

    @classmethod
    def from_timestamps(cls, timestamps: pd.DatetimeIndex) -> "FeatureCalendar":
        hours = timestamps.hour.to_numpy() + timestamps.minute.to_numpy() / 60.0
        angle = 2.0 * np.pi * hours / 24.0
        return cls(
            weekday=timestamps.weekday.to_numpy().astype(float),
            hour_sin=np.sin(angle),
            hour_cos=np.cos(angle),
        )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclasses.dataclass(frozen=True)
class PanelDataset:
    """Aligned half-hourly multi-building panel with congestion calendar and splits.

    All matrices are [time x building] (weather is [time x 4]) and share one
    strictly increasing, constant-step timestamp index.  Instances are
    immutable; per-building fits may share one panel across workers.
    """

    timestamps: pd.DatetimeIndex
    buildings: tuple[str, ...]
    load: np.ndarray
    pv: np.ndarray
    prosumption: np.ndarray
    weather: np.ndarray
    congestion: np.ndarray
    splits: Splits
    step_minutes: int = 30

    def __post_init__(self):
        n, b = len(self.timestamps), len(self.buildings)
        for name in ("load", "pv", "prosumption"):
            mat = getattr(self, name)
            if mat.shape != (n, b):
                raise InvariantError(f"{name} must be [time x building], got {mat.shape}")
            if not np.all(np.isfinite(mat)):
                t, j = np.argwhere(~np.isfinite(mat))[0]
                raise GapError(
                    f"non-finite {name} for building {self.buildings[j]!r} at {self.timestamps[t]}"
                )
        if self.weather.shape != (n, len(WEATHER_COLUMNS)):
            raise InvariantError(f"weather must be [time x {len(WEATHER_COLUMNS)}]")
        if self.congestion.shape != (n, b) or self.congestion.dtype != bool:
            raise InvariantError("congestion must be a boolean [time x building] matrix")
        if n > 1:
            deltas = np.diff(self.timestamps.asi8)
            step = np.int64(self.step_minutes) * 60 * 1_000_000_000
            if not np.all(deltas == step):
                t = int(np.argmax(deltas != step))
                raise GapError(
                    f"timestamp step breaks after {self.timestamps[t]} "
                    f"(expected {self.step_minutes} minutes)"
                )
        s = self.splits
        if (s.train.start, s.train.stop) != (0, s.val.start) or s.val.stop != s.test.start or s.test.stop != n:
            raise InvariantError("splits must partition the index range in order train/val/test")
        if self.congestion[s.train].any():
            t = s.train.start + int(np.argmax(self.congestion[s.train].any(axis=1)))
            raise InvariantError(f"congestion event inside the training range at {self.timestamps[t]}")
        for name in ("load", "pv", "prosumption", "weather", "congestion"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @functools.cached_property
    def calendar(self) -> FeatureCalendar:
        return FeatureCalendar.from_timestamps(self.timestamps)

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def steps_per_day(self) -> int:
        return (24 * 60) // self.step_minutes

    def building_index(self, building_id: str) -> int:
        try:
            return self.buildings.index(building_id)
        except ValueError:
            raise KeyError(f"unknown building {building_id!r}") from None

    def with_prosumption(self, prosumption: np.ndarray) -> "PanelDataset":
        return dataclasses.replace(self, prosumption=np.array(prosumption, dtype=float))

    def with_congestion(self, congestion: np.ndarray) -> "PanelDataset":
        return dataclasses.replace(self, congestion=np.array(congestion, dtype=bool))


def _read_csv(path, what: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise SchemaError(f"cannot parse {what} CSV {path}: {exc}") from exc
    if df.columns[0] != "timestamp":
        raise SchemaError(f"{what} CSV must start with a 'timestamp' column, got {df.columns[0]!r}")
    try:
        ts = pd.DatetimeIndex(pd.to_datetime(df["timestamp"], format="ISO8601"))
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{what} CSV has unparseable timestamps: {exc}") from exc
    df = df.drop(columns=["timestamp"])
    df.index = ts
    return df


def _to_float(df: pd.DataFrame, what: str) -> pd.DataFrame:
    try:
        return df.astype(float)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{what} CSV holds non-numeric values: {exc}") from exc


def _check_load_gaps(df: pd.DataFrame, step_minutes: int) -> None:
    expected = pd.date_range(df.index[0], df.index[-1], freq=f"{step_minutes}min")
    if len(expected) != len(df.index) or not df.index.equals(expected):
        missing = expected.difference(df.index)
        if len(missing):
            raise GapError(f"load series missing timestamp {missing[0]} (all buildings)")
        raise GapError("load timestamps are not on the expected half-hourly grid")
    for col in df.columns:
        vals = df[col].to_numpy()
        bad = ~np.isfinite(vals)
        if bad.any():
            raise GapError(f"load series for building {col!r} missing value at {df.index[int(np.argmax(bad))]}")


def _upsample_weather(weather: pd.DataFrame, target: pd.DatetimeIndex) -> pd.DataFrame:
    """Forward-fill coarser weather onto the load grid; never invent values."""
    if weather.index[0] > target[0]:
        raise CoverageError(
            f"weather starts {weather.index[0]}, after the load range start {target[0]}"
        )
    if len(weather.index) > 1:
        native_step = weather.index[1] - weather.index[0]
    else:
        native_step = pd.Timedelta(0)
    if weather.index[-1] + native_step < target[-1]:
        raise CoverageError(
            f"weather ends {weather.index[-1]}, before the load range end {target[-1]}"
        )
    out = weather.reindex(weather.index.union(target)).ffill().reindex(target)
    if out.isna().any().any():
        raise CoverageError("forward-filled weather leaves gaps at the start of the load range")
    return out


def ingest_panel(load_csv, weather_csv, congestion_csv, config) -> PanelDataset:
    """Read, align, and split the panel from its three (plus optional PV) CSVs.

    Weather is upsampled to the load grid by forward-fill.  Any missing load
    timestamp or cell is a GapError; weather not spanning the load range is a
    CoverageError; malformed headers are SchemaErrors.
    """
    from .config import RunConfig

    if not isinstance(config, RunConfig):
        raise TypeError("config must be a RunConfig")
    step = config.ingest.step_minutes

    load = _to_float(_read_csv(load_csv, "load"), "load")
    if load.shape[1] < 1:
        raise SchemaError("load CSV must have at least one building column")
    _check_load_gaps(load, step)
    buildings = tuple(str(c) for c in load.columns)
    index = load.index

    weather = _to_float(_read_csv(weather_csv, "weather"), "weather")
    if tuple(weather.columns) != WEATHER_COLUMNS:
        raise SchemaError(
            f"weather CSV must have columns {('timestamp',) + WEATHER_COLUMNS}, got {tuple(weather.columns)}"
        )
    weather = _upsample_weather(weather, index)

    congestion = _read_csv(congestion_csv, "congestion")
    if set(congestion.columns) != set(buildings):
        raise SchemaError("congestion CSV columns must match the load building columns")
    congestion = congestion[list(buildings)]
    vals = _to_float(congestion, "congestion").to_numpy()
    if not np.isin(vals[np.isfinite(vals)], (0.0, 1.0)).all():
        raise SchemaError("congestion CSV entries must be 0 or 1")
    cong = pd.DataFrame(vals, index=congestion.index, columns=congestion.columns)
    cong = cong.reindex(index).fillna(0.0).to_numpy().astype(bool)

    if config.ingest.pv_csv is not None:
        pv = _to_float(_read_csv(config.ingest.pv_csv, "pv"), "pv")
        if set(pv.columns) != set(buildings):
            raise SchemaError("pv CSV columns must match the load building columns")
        pv = pv[list(buildings)].reindex(index)
        if pv.isna().any().any():
            raise GapError("pv series does not cover the load range")
        pv = pv.to_numpy()
    else:
        pv = np.zeros_like(load.to_numpy())

    load_mat = load.to_numpy()
    fr = config.split
    splits = compute_splits(len(index), (fr.train, fr.val, fr.test), (24 * 60) // step)
    return PanelDataset(
        timestamps=index,
        buildings=buildings,
        load=load_mat,
        pv=pv,
        prosumption=load_mat - pv,
        weather=weather.to_numpy(),
        congestion=cong,
        splits=splits,
        step_minutes=step,
    )


def compute_splits(n_steps: int, fractions, steps_per_day: int) -> Splits:
    """Day-boundary split ranges; trailing partial day goes to the test range."""
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0:
        raise FractionError("split fractions must be positive")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise FractionError(f"split fractions must sum to 1, got {f_train + f_val + f_test}")
    n_days = n_steps // steps_per_day
    train_days = int(np.floor(f_train * n_days))
    val_days = int(np.floor(f_val * n_days))
    a = train_days * steps_per_day
    b = a + val_days * steps_per_day
    if not (0 < a < b < n_steps):
        raise FractionError("panel too short for the requested split fractions")
    return Splits(train=range(0, a), val=range(a, b), test=range(b, n_steps))


def make_split(panel: PanelDataset, fractions) -> PanelDataset:
    """Re-partition an existing panel; boundaries snap down to day boundaries."""
    splits = compute_splits(panel.n_steps, fractions, panel.steps_per_day)
    return dataclasses.replace(panel, splits=splits)


def export_panel(panel: PanelDataset, out_dir) -> dict[str, Path]:
    """Write load/pv/prosumption/weather/congestion CSVs; numerics round-trip bit-exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def write(name: str, mat: np.ndarray, columns, formatter="%.17g"):
        df = pd.DataFrame(mat, columns=list(columns))
        df.insert(0, "timestamp", panel.timestamps.strftime("%Y-%m-%dT%H:%M:%S"))
        path = out / f"{name}.csv"
        df.to_csv(path, index=False, float_format=formatter)
        paths[name] = path

    write("load", panel.load, panel.buildings)
    write("pv", panel.pv, panel.buildings)
    write("prosumption", panel.prosumption, panel.buildings)
    write("weather", panel.weather, WEATHER_COLUMNS)
    write("congestion", panel.congestion.astype(int), panel.buildings, formatter=None)
    return paths


def default_congestion_calendar(
    panel: PanelDataset, start_hour: float = 18.0, duration_steps: int = 4
) -> np.ndarray:
    """Artifact-defined default event calendar: one 2-hour event per test-set day at 18:00.

    The source protocol never states how events were placed; this calendar is
    a synthetic stand-in, applied identically to every building.
    """
    spd = panel.steps_per_day
    start_step = int(round(start_hour * 60 / panel.step_minutes))
    cong = np.zeros((panel.n_steps, len(panel.buildings)), dtype=bool)
    t0 = panel.splits.test.start
    for day_start in range(t0, panel.n_steps - spd + 1, spd):
        a = day_start + start_step
        cong[a : a + duration_steps, :] = True
    return cong


def event_windows(panel: PanelDataset, building_id: str, within: range | None = None) -> list[range]:
    """Contiguous congestion runs for one building, clipped to `within` (default: test split)."""
    within = panel.splits.test if within is None else within
    col = panel.congestion[:, panel.building_index(building_id)]
    out: list[range] = []
    t = within.start
    while t < within.stop:
        if col[t]:
            a = t
            while t < within.stop and col[t]:
                t += 1
            out.append(range(a, t))
        else:
            t += 1
    return out
