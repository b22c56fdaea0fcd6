"""Detector series cleaning and Table-1 style feature engineering."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .graph import RoadGraph, haversine_miles, shortest_path_miles

logger = logging.getLogger(__name__)

MAX_MISSING_FRACTION = 0.20
MAX_ZERO_FRACTION = 0.40
MAX_VPHPL = 2500.0

IN_SCOPE_START = 3
IN_SCOPE_END = 19  # exclusive


class TimePeriod(enum.IntEnum):
    EarlyMorning = 0
    Morning = 1
    MidDay = 2
    Evening = 3


PERIOD_BOUNDS = {
    TimePeriod.EarlyMorning: (3, 7),
    TimePeriod.Morning: (7, 11),
    TimePeriod.MidDay: (11, 15),
    TimePeriod.Evening: (15, 19),
}


def time_period(hour: int) -> TimePeriod:
    """Half-open [start, end) mapping of hour-of-day to period."""
    for period, (lo, hi) in PERIOD_BOUNDS.items():
        if lo <= hour < hi:
            return period
    raise ValueError(f"hour {hour} is outside the 3:00-19:00 modelling day")


@dataclass
class RawDetectorSeries:
    """Hourly records for one detector; NaN marks a missing value."""

    detector_id: str
    timestamps: np.ndarray  # datetime64[h]
    volume: np.ndarray
    speed: np.ndarray
    occupancy: np.ndarray
    lanes: int = 1

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.volume = np.asarray(self.volume, dtype=np.float64)
        self.speed = np.asarray(self.speed, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        n = len(self.timestamps)
        if not (len(self.volume) == len(self.speed) == len(self.occupancy) == n):
            raise ValueError(f"{self.detector_id}: column lengths differ")
        if n > 1 and np.any(np.diff(self.timestamps).astype(np.int64) <= 0):
            raise ValueError(f"{self.detector_id}: timestamps must be strictly increasing")
        if np.any(self.volume < 0) or np.any(self.speed < 0):
            raise ValueError(f"{self.detector_id}: negative volume or speed")


# ----------------------------------------------------------------------------- QC


def qc_filter(series: Sequence[RawDetectorSeries]):
    """Apply the missing / zero / vphpl rules.

    Returns ``(retained, report)`` where ``report`` is a list of
    ``{"detector_id", "rule", "value"}`` dicts, one per violated rule.
    """
    retained, report = [], []
    for s in series:
        n = len(s.volume)
        violations = []
        if n == 0:
            violations.append(("empty", 0.0))
        else:
            missing = float(np.isnan(s.volume).sum()) / n
            zeros = float((s.volume == 0).sum()) / n
            peak = float(np.nanmax(s.volume) / s.lanes) if missing < 1 else 0.0
            if missing > MAX_MISSING_FRACTION:
                violations.append(("missing>20%", missing))
            if zeros > MAX_ZERO_FRACTION:
                violations.append(("zeros>40%", zeros))
            if peak > MAX_VPHPL:
                violations.append(("vphpl>2500", peak))
        if violations:
            report.extend({"detector_id": s.detector_id, "rule": r, "value": v} for r, v in violations)
        else:
            retained.append(s)
    return retained, report


# ------------------------------------------------------------------------ impute


def _align(series: Sequence[RawDetectorSeries]):
    index = np.unique(np.concatenate([s.timestamps for s in series]))
    out = {}
    for col in ("volume", "speed", "occupancy"):
        mat = np.full((len(index), len(series)), np.nan)
        for d, s in enumerate(series):
            pos = np.searchsorted(index, s.timestamps)
            mat[pos, d] = getattr(s, col)
        out[col] = mat
    return index, out


def _neighbor_order(series: Sequence[RawDetectorSeries], graph: RoadGraph | None) -> np.ndarray:
    """``D x (D-1)`` matrix of other detectors, nearest first."""
    n = len(series)
    if graph is not None:
        idx = [graph.index_of(s.detector_id) for s in series]
        hops = shortest_path_miles(graph)[np.ix_(idx, idx)]
        coords = graph.coordinates[idx]
        crow = haversine_miles(coords[:, None, 0], coords[:, None, 1], coords[None, :, 0], coords[None, :, 1])
    else:
        hops = np.zeros((n, n))
        crow = np.zeros((n, n))
    order = np.empty((n, n - 1), dtype=int)
    for d in range(n):
        others = [j for j in range(n) if j != d]
        others.sort(key=lambda j: (hops[d, j], crow[d, j], abs(j - d), j))
        order[d] = others
    return order


def _ridge_fit_predict(x_obs, y_obs, x_new, ridge):
    xm, ym = x_obs.mean(axis=0), y_obs.mean()
    xc = x_obs - xm
    gram = xc.T @ xc + ridge * np.eye(xc.shape[1])
    beta = np.linalg.solve(gram, xc.T @ (y_obs - ym))
    return ym + (x_new - xm) @ beta


def _impute_matrix(values, hours, neighbors, lower, upper, k, ridge, max_iter, tol):
    missing = np.isnan(values)
    if not missing.any():
        return values.copy(), np.zeros(0, dtype=bool), 0
    filled = values.copy()
    n_rows, n_det = values.shape
    all_missing = missing.all(axis=1)

    # start from the detector's hour-of-day mean
    for d in range(n_det):
        obs = ~missing[:, d]
        overall = values[obs, d].mean() if obs.any() else 0.0
        for h in np.unique(hours[missing[:, d]]):
            same = obs & (hours == h)
            fill = values[same, d].mean() if same.any() else overall
            filled[missing[:, d] & (hours == h), d] = fill
    filled = np.where(missing, np.clip(filled, lower, upper), values)

    regress_rows = missing & ~all_missing[:, None]
    scale = max(1.0, float(np.nanstd(values)))
    iterations = 0
    for iterations in range(1, max_iter + 1):
        biggest = 0.0
        for d in range(n_det):
            target = regress_rows[:, d]
            obs = ~missing[:, d]
            if not target.any() or obs.sum() < 2:
                continue
            nb = neighbors[d][:k]
            if len(nb) == 0:
                continue
            x = filled[:, nb]
            pred = _ridge_fit_predict(x[obs], values[obs, d], x[target], ridge)
            pred = np.clip(pred, lower[d], upper[d])
            biggest = max(biggest, float(np.max(np.abs(pred - filled[target, d]))))
            filled[target, d] = pred
        if biggest / scale < tol:
            break
    return filled, all_missing, iterations


def impute(
    series: Sequence[RawDetectorSeries],
    graph: RoadGraph | None = None,
    k: int = 5,
    ridge: float = 1e-3,
    max_iter: int = 10,
    tol: float = 1e-3,
):
    """Round-robin iterative regression imputation across detectors.

    Every detector's missing hours are regressed (ridge least squares with an
    unpenalized intercept) on the current values of its ``k`` nearest
    detectors, cycling until the largest update falls below ``tol`` relative to
    the data scale. Hours missing at every detector keep the hour-of-day mean.

    Returns ``(complete_series, report)``; series are reindexed onto the union
    of all timestamps.
    """
    series = list(series)
    if not series:
        return [], {"all_missing_hours": [], "iterations": {}}
    index, mats = _align(series)
    hours = (index.astype("datetime64[h]").astype(np.int64) % 24).astype(int)
    neighbors = _neighbor_order(series, graph)
    lanes = np.array([s.lanes for s in series], dtype=np.float64)
    bounds = {
        "volume": (np.zeros(len(series)), MAX_VPHPL * lanes),
        "speed": (np.zeros(len(series)), np.full(len(series), np.inf)),
        "occupancy": (np.zeros(len(series)), np.ones(len(series))),
    }
    results, report = {}, {"all_missing_hours": [], "iterations": {}}
    for col, mat in mats.items():
        lo, hi = bounds[col]
        filled, all_missing, iters = _impute_matrix(mat, hours, neighbors, lo, hi, k, ridge, max_iter, tol)
        results[col] = filled
        report["iterations"][col] = iters
        if all_missing.any():
            stamps = [str(t) for t in index[all_missing]]
            report["all_missing_hours"] = sorted(set(report["all_missing_hours"]) | set(stamps))
            logger.warning("%d hours missing at every detector (%s); used hour-of-day means", len(stamps), col)
    out = [
        replace(s, timestamps=index, volume=results["volume"][:, d], speed=results["speed"][:, d],
                occupancy=results["occupancy"][:, d])
        for d, s in enumerate(series)
    ]
    return out, report


# ---------------------------------------------------------------------- features

FEATURE_COLUMNS = [
    "detector_id",
    "timestamp",
    "time_period",
    "is_weekend",
    "flow",
    "prev_day_mean_flow",
    "prev_day_std_flow",
    "prev_period_mean_flow",
    "prev_period_std_flow",
    "mean_speed",
    "fallback",
]

# numeric model inputs, in order, after the 4 one-hot period columns
MODEL_FEATURES = [
    "is_weekend",
    "flow",
    "prev_day_mean_flow",
    "prev_day_std_flow",
    "prev_period_mean_flow",
    "prev_period_std_flow",
    "mean_speed",
]
N_TRAFFIC_FEATURES = 4 + len(MODEL_FEATURES)


def series_to_frame(series: Sequence[RawDetectorSeries]) -> pd.DataFrame:
    parts = [
        pd.DataFrame(
            {
                "detector_id": s.detector_id,
                "timestamp": s.timestamps.astype("datetime64[ns]"),
                "volume": s.volume,
                "speed": s.speed,
                "occupancy": s.occupancy,
            }
        )
        for s in series
    ]
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(
        columns=["detector_id", "timestamp", "volume", "speed", "occupancy"]
    )


def engineer_features(series: Sequence[RawDetectorSeries]) -> pd.DataFrame:
    """Per (detector, in-scope hour) feature rows.

    Previous-day statistics use the same detector's in-scope hours of the prior
    calendar day; previous-period statistics use the preceding 4-hour block
    (Evening of the prior day for EarlyMorning). When the required day is absent
    the same-day value is used and ``fallback`` is set.
    """
    df = series_to_frame(series)
    if df[["volume", "speed"]].isna().any().any():
        raise ValueError("engineer_features needs complete series; run impute first")
    hour = df.timestamp.dt.hour
    df = df[(hour >= IN_SCOPE_START) & (hour < IN_SCOPE_END)].copy()
    df["date"] = df.timestamp.dt.normalize()
    df["hour"] = df.timestamp.dt.hour
    df["time_period"] = (df.hour - IN_SCOPE_START) // 4
    df["is_weekend"] = df.timestamp.dt.dayofweek >= 5

    day = (
        df.groupby(["detector_id", "date"]).volume.agg(day_mean="mean", day_std=lambda v: v.std(ddof=0)).reset_index()
    )
    per = (
        df.groupby(["detector_id", "date", "time_period"])
        .volume.agg(per_mean="mean", per_std=lambda v: v.std(ddof=0))
        .reset_index()
    )

    prev_day = day.rename(columns={"day_mean": "prev_day_mean_flow", "day_std": "prev_day_std_flow"})
    prev_day = prev_day.assign(date=prev_day.date + pd.Timedelta(days=1))
    df = df.merge(day, on=["detector_id", "date"], how="left")
    df = df.merge(prev_day, on=["detector_id", "date"], how="left")

    # key of the preceding period block
    df["pp_date"] = df.date.where(df.time_period > 0, df.date - pd.Timedelta(days=1))
    df["pp_period"] = (df.time_period - 1) % 4
    pp = per.rename(
        columns={"date": "pp_date", "time_period": "pp_period", "per_mean": "prev_period_mean_flow",
                 "per_std": "prev_period_std_flow"}
    )
    df = df.merge(per, on=["detector_id", "date", "time_period"], how="left")
    df = df.merge(pp, on=["detector_id", "pp_date", "pp_period"], how="left")

    no_day = df.prev_day_mean_flow.isna()
    no_per = df.prev_period_mean_flow.isna()
    df.loc[no_day, "prev_day_mean_flow"] = df.loc[no_day, "day_mean"]
    df.loc[no_day, "prev_day_std_flow"] = df.loc[no_day, "day_std"]
    df.loc[no_per, "prev_period_mean_flow"] = df.loc[no_per, "per_mean"]
    df.loc[no_per, "prev_period_std_flow"] = df.loc[no_per, "per_std"]
    df["fallback"] = no_day | no_per

    out = df.rename(columns={"volume": "flow", "speed": "mean_speed"})
    out["time_period"] = out.time_period.map(lambda k: TimePeriod(k).name)
    out = out.sort_values(["timestamp", "detector_id"], kind="stable").reset_index(drop=True)
    return out[FEATURE_COLUMNS]


def frame_to_arrays(frame: pd.DataFrame, graph: RoadGraph):
    """Dense ``(timestamps, features T x N x F, flow T x N, speed T x N)`` in graph order.

    Raises when a (timestamp, detector) cell is missing.
    """
    ids = graph.ids
    f = frame[frame.detector_id.isin(ids)]
    stamps = np.sort(f.timestamp.unique())
    t_pos = pd.Index(stamps).get_indexer(f.timestamp)
    n_pos = pd.Index(ids).get_indexer(f.detector_id)
    T, N = len(stamps), len(ids)
    if len(f) != T * N:
        raise ValueError(f"feature frame has {len(f)} rows, expected {T} hours x {N} detectors")
    feats = np.zeros((T, N, N_TRAFFIC_FEATURES))
    period = f.time_period.map(lambda p: TimePeriod[p].value if isinstance(p, str) else int(p)).to_numpy()
    feats[t_pos, n_pos, period] = 1.0
    for k, col in enumerate(MODEL_FEATURES):
        feats[t_pos, n_pos, 4 + k] = f[col].to_numpy(dtype=np.float64)
    flow = np.zeros((T, N))
    speed = np.zeros((T, N))
    flow[t_pos, n_pos] = f.flow.to_numpy(dtype=np.float64)
    speed[t_pos, n_pos] = f.mean_speed.to_numpy(dtype=np.float64)
    return stamps.astype("datetime64[h]"), feats, flow, speed


# ---------------------------------------------------------------------------- io

DETECTOR_COLUMNS = ["detector_id", "timestamp", "volume", "speed", "occupancy"]


def read_detector_csv(path, graph: RoadGraph | None = None) -> list[RawDetectorSeries]:
    df = pd.read_csv(path, dtype={"detector_id": str}, float_precision="round_trip")
    missing = [c for c in DETECTOR_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    df["timestamp"] = pd.to_datetime(df.timestamp)
    lanes = {n.detector_id: n.lane_count for n in graph.nodes} if graph is not None else {}
    out = []
    for det, g in df.groupby("detector_id", sort=False):
        g = g.sort_values("timestamp")
        out.append(
            RawDetectorSeries(
                det,
                g.timestamp.to_numpy().astype("datetime64[h]"),
                g.volume.to_numpy(dtype=np.float64),
                g.speed.to_numpy(dtype=np.float64),
                g.occupancy.to_numpy(dtype=np.float64),
                lanes.get(det, 1),
            )
        )
    if graph is not None:
        order = {d: i for i, d in enumerate(graph.ids)}
        out.sort(key=lambda s: order.get(s.detector_id, len(order)))
    return out


def write_detector_csv(series: Sequence[RawDetectorSeries], path) -> None:
    df = series_to_frame(series)
    df["timestamp"] = df.timestamp.dt.strftime("%Y-%m-%dT%H:%M:%S")
    df.to_csv(path, index=False)


def read_feature_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"detector_id": str}, float_precision="round_trip")
    df["timestamp"] = pd.to_datetime(df.timestamp)
    return df


def write_feature_csv(frame: pd.DataFrame, path) -> None:
    out = frame.copy()
    out["timestamp"] = out.timestamp.dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False)
