"""Tile-level crisis movement records to hourly per-detector inflow/outflow.

Every stage works on plain DataFrames so the CSV files map one-to-one onto
the in-memory records.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .autodiff import ShapeError
from .graph import RoadGraph, haversine_miles

WINDOW_HOURS = 8
WINDOW_START_HOURS = (3, 11)

MOVEMENT_COLUMNS = ["origin_tile", "destination_tile", "window_start", "window_end", "crisis_count", "baseline_count"]
OD_COLUMNS = ["origin_subdivision", "destination_subdivision", "window_start", "window_end", "count"]
DETECTOR_OD_COLUMNS = ["origin_detector", "destination_detector", "window_start", "window_end", "count"]
FLOW_COLUMNS = ["detector_id", "window_start", "window_end", "inflow", "outflow"]
HOURLY_COLUMNS = ["detector_id", "timestamp", "inflow", "outflow"]


@dataclass(frozen=True)
class DetectorMovement:
    detector_id: str
    window_start: pd.Timestamp
    window_end: pd.Timestamp
    inflow: float
    outflow: float


def validate_movements(movements: pd.DataFrame) -> pd.DataFrame:
    """Check window shape and counts; returns a copy with parsed timestamps."""
    missing = [c for c in MOVEMENT_COLUMNS if c not in movements.columns]
    if missing:
        raise ValueError(f"movement records missing columns {missing}")
    df = movements.copy()
    df["origin_tile"] = df.origin_tile.astype(str)
    df["destination_tile"] = df.destination_tile.astype(str)
    df["window_start"] = pd.to_datetime(df.window_start)
    df["window_end"] = pd.to_datetime(df.window_end)
    length = (df.window_end - df.window_start) / pd.Timedelta(hours=1)
    bad = df[(length != WINDOW_HOURS) | ~df.window_start.dt.hour.isin(WINDOW_START_HOURS)]
    if len(bad):
        raise ValueError(f"{len(bad)} records are not 8-hour windows starting at 03:00 or 11:00 "
                         f"(first: {bad.window_start.iloc[0]} - {bad.window_end.iloc[0]})")
    if (df.crisis_count < 0).any() or (df.baseline_count < 0).any():
        raise ValueError("movement counts must be non-negative")
    return df


def aggregate_to_subdivision(
    movements: pd.DataFrame, tile_map: Mapping[str, str], count: str = "crisis_count"
) -> pd.DataFrame:
    """Sum tile-to-tile counts by (origin subdivision, destination subdivision, window)."""
    tiles = pd.unique(pd.concat([movements.origin_tile, movements.destination_tile]).astype(str))
    unmapped = sorted(t for t in tiles if t not in tile_map)
    if unmapped:
        raise KeyError(f"tiles missing from tile map: {', '.join(unmapped)}")
    df = pd.DataFrame(
        {
            "origin_subdivision": movements.origin_tile.astype(str).map(tile_map),
            "destination_subdivision": movements.destination_tile.astype(str).map(tile_map),
            "window_start": movements.window_start,
            "window_end": movements.window_end,
            "count": movements[count].astype(np.float64),
        }
    )
    out = df.groupby(OD_COLUMNS[:4], sort=True, as_index=False)["count"].sum()
    return out[OD_COLUMNS]


def filter_intra(od: pd.DataFrame) -> pd.DataFrame:
    keep = od.origin_subdivision != od.destination_subdivision
    return od[keep].reset_index(drop=True)


def nearest_detectors(points, graph: RoadGraph) -> np.ndarray:
    """Index of the great-circle nearest detector for each ``(lat, lon)`` row; ties go to the lower index."""
    if graph.size == 0:
        raise ValueError("graph has no detectors")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    coords = graph.coordinates
    d = haversine_miles(pts[:, None, 0], pts[:, None, 1], coords[None, :, 0], coords[None, :, 1])
    return np.argmin(d, axis=1)


def assign_detectors(
    od: pd.DataFrame, centroids: Mapping[str, tuple[float, float]], graph: RoadGraph
) -> pd.DataFrame:
    """Map subdivision OD records to their nearest detectors; drop same-detector records."""
    if graph.size == 0:
        raise ValueError("cannot assign detectors: the graph is empty")
    subs = pd.unique(pd.concat([od.origin_subdivision, od.destination_subdivision]))
    missing = sorted(str(s) for s in subs if s not in centroids)
    if missing:
        raise KeyError(f"subdivisions without a centroid: {', '.join(missing)}")
    if len(subs) == 0:
        return pd.DataFrame(columns=DETECTOR_OD_COLUMNS)
    nearest = nearest_detectors([centroids[s] for s in subs], graph)
    ids = graph.ids
    lookup = {s: ids[k] for s, k in zip(subs, nearest)}
    out = pd.DataFrame(
        {
            "origin_detector": od.origin_subdivision.map(lookup),
            "destination_detector": od.destination_subdivision.map(lookup),
            "window_start": od.window_start,
            "window_end": od.window_end,
            "count": od["count"],
        }
    )
    out = out[out.origin_detector != out.destination_detector]
    return out.reset_index(drop=True)


def accumulate_flows(detector_od: pd.DataFrame, detectors: Sequence[str] | None = None) -> pd.DataFrame:
    """Per detector and window: outflow sums records leaving it, inflow sums records arriving.

    With ``detectors`` given, every (detector, window) pair appears, zero-filled.
    """
    keys = ["window_start", "window_end"]
    out_ = detector_od.groupby(["origin_detector", *keys])["count"].sum().rename("outflow")
    in_ = detector_od.groupby(["destination_detector", *keys])["count"].sum().rename("inflow")
    out_.index = out_.index.set_names("detector_id", level=0)
    in_.index = in_.index.set_names("detector_id", level=0)
    flows = pd.concat([in_, out_], axis=1).fillna(0.0)
    if detectors is not None:
        windows = list(detector_od[keys].drop_duplicates().itertuples(index=False, name=None))
        full = pd.MultiIndex.from_tuples(
            [(d, ws, we) for d in detectors for ws, we in windows], names=["detector_id", *keys]
        )
        if len(full):
            flows = flows.reindex(full.union(flows.index), fill_value=0.0)
    flows = flows.reset_index().sort_values(["detector_id", "window_start"], kind="stable")
    return flows[FLOW_COLUMNS].reset_index(drop=True)


def hourly_factor(totals) -> np.ndarray:
    """Share of an 8-hour window's network flow falling in each hour."""
    totals = np.asarray(totals, dtype=np.float64)
    if totals.shape != (WINDOW_HOURS,):
        raise ShapeError(f"expected {WINDOW_HOURS} hourly totals, got shape {totals.shape}")
    if np.any(totals < 0):
        raise ValueError("hourly totals must be non-negative")
    s = totals.sum()
    if s <= 0:
        raise ValueError("hourly factors are undefined for a window with zero total flow")
    return totals / s


def disaggregate(movement: DetectorMovement, factors) -> list[DetectorMovement]:
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != (WINDOW_HOURS,):
        raise ShapeError(f"expected {WINDOW_HOURS} factors, got shape {factors.shape}")
    start = pd.Timestamp(movement.window_start)
    return [
        DetectorMovement(
            movement.detector_id,
            start + pd.Timedelta(hours=z),
            start + pd.Timedelta(hours=z + 1),
            movement.inflow * f,
            movement.outflow * f,
        )
        for z, f in enumerate(factors)
    ]


def hourly_movement(flows: pd.DataFrame, network_flow: pd.Series) -> pd.DataFrame:
    """Disaggregate every window with factors from the network's total hourly flow.

    ``network_flow`` is indexed by hourly timestamp and holds the summed flow of
    all detectors in that hour. One factor vector is computed per window and
    shared by all detectors.
    """
    rows = []
    factor_cache: dict[pd.Timestamp, np.ndarray] = {}
    for rec in flows.itertuples(index=False):
        ws = pd.Timestamp(rec.window_start)
        if ws not in factor_cache:
            hours = pd.date_range(ws, periods=WINDOW_HOURS, freq="h")
            missing = hours.difference(network_flow.index)
            if len(missing):
                raise KeyError(f"network flow missing for hours {list(missing.astype(str))}")
            factor_cache[ws] = hourly_factor(network_flow.loc[hours].to_numpy())
        mv = DetectorMovement(rec.detector_id, ws, pd.Timestamp(rec.window_end), rec.inflow, rec.outflow)
        rows.extend(disaggregate(mv, factor_cache[ws]))
    out = pd.DataFrame(
        [(r.detector_id, r.window_start, r.inflow, r.outflow) for r in rows], columns=HOURLY_COLUMNS
    )
    return out.sort_values(["detector_id", "timestamp"], kind="stable").reset_index(drop=True)


def baseline_movement(hourly: pd.DataFrame, detectors: Sequence[str] | None = None) -> pd.DataFrame:
    """Mean inflow/outflow per detector, day of week and hour.

    Cells with no observations take the detector's mean for that hour over all
    days and are flagged ``filled``.
    """
    df = hourly.copy()
    df["timestamp"] = pd.to_datetime(df.timestamp)
    df["day_of_week"] = df.timestamp.dt.dayofweek
    df["hour"] = df.timestamp.dt.hour
    cells = df.groupby(["detector_id", "day_of_week", "hour"])[["inflow", "outflow"]].mean()
    by_hour = df.groupby(["detector_id", "hour"])[["inflow", "outflow"]].mean()
    dets = list(detectors) if detectors is not None else sorted(df.detector_id.unique())
    hours = sorted(df.hour.unique())
    full = pd.MultiIndex.from_product([dets, range(7), hours], names=["detector_id", "day_of_week", "hour"])
    out = cells.reindex(full)
    filled = out.inflow.isna()
    if filled.any():
        fill_keys = pd.MultiIndex.from_arrays(
            [out.index.get_level_values(0)[filled], out.index.get_level_values(2)[filled]]
        )
        fill = by_hour.reindex(fill_keys).fillna(0.0).to_numpy()
        out.loc[filled, ["inflow", "outflow"]] = fill
    out["filled"] = filled.to_numpy()
    return out.reset_index()


def baseline_lookup(baseline: pd.DataFrame, timestamps, detectors: Sequence[str]) -> np.ndarray:
    """``T x N x 2`` (inflow, outflow) from a baseline table for the given hours."""
    stamps = pd.to_datetime(np.asarray(timestamps).astype("datetime64[ns]"))
    table = baseline.set_index(["detector_id", "day_of_week", "hour"])[["inflow", "outflow"]]
    keys = pd.MultiIndex.from_arrays(
        [np.repeat(list(detectors), len(stamps)),
         np.tile(stamps.dayofweek, len(detectors)), np.tile(stamps.hour, len(detectors))]
    )
    vals = table.reindex(keys).fillna(0.0).to_numpy().reshape(len(detectors), len(stamps), 2)
    return np.transpose(vals, (1, 0, 2))


def movement_arrays(hourly: pd.DataFrame, timestamps, detectors: Sequence[str]) -> np.ndarray:
    """Dense ``T x N x 2`` (inflow, outflow) aligned to ``timestamps``; absent cells are zero."""
    stamps = pd.DatetimeIndex(np.asarray(timestamps).astype("datetime64[ns]"))
    out = np.zeros((len(stamps), len(detectors), 2))
    if len(hourly) == 0:
        return out
    t = stamps.get_indexer(pd.to_datetime(hourly.timestamp))
    n = pd.Index(list(detectors)).get_indexer(hourly.detector_id)
    ok = (t >= 0) & (n >= 0)
    out[t[ok], n[ok], 0] = hourly.inflow.to_numpy()[ok]
    out[t[ok], n[ok], 1] = hourly.outflow.to_numpy()[ok]
    return out


# ---------------------------------------------------------------------------- io


def read_movement_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"origin_tile": str, "destination_tile": str}, float_precision="round_trip")
    return validate_movements(df)


def read_tile_map(path) -> dict[str, str]:
    df = pd.read_csv(path, dtype=str, float_precision="round_trip")
    return dict(zip(df.tile_id, df.subdivision_id))


def read_centroids(path) -> dict[str, tuple[float, float]]:
    df = pd.read_csv(path, dtype={"subdivision_id": str}, float_precision="round_trip")
    return {s: (float(a), float(b)) for s, a, b in zip(df.subdivision_id, df.latitude, df.longitude)}


def write_hourly_csv(hourly: pd.DataFrame, path) -> None:
    out = hourly.copy()
    out["timestamp"] = pd.to_datetime(out.timestamp).dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False)


def read_hourly_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"detector_id": str}, float_precision="round_trip")
    df["timestamp"] = pd.to_datetime(df.timestamp)
    return df
