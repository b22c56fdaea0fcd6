"""Seeded synthetic corridors, regular traffic, evacuation surges and movement records.

The generators stand in for detector feeds and crisis movement exports: they
emit the same record layouts (and, via :func:`write_scenario`, the same CSV
files) that the ingestion pipelines read.

Speed-flow curve: ``speed = ffs * (1 - 0.7 * (flow / capacity)**2)``, floored at
10 mph. Movement coupling: crisis movement counts are ``kappa`` times the
surge-induced extra vehicles in each 8-hour window, plus background noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .detectors import MAX_VPHPL, RawDetectorSeries, write_detector_csv
from .graph import DetectorNode, Direction, RoadGraph, haversine_miles, write_graph_csv
from .movement import (
    WINDOW_HOURS,
    WINDOW_START_HOURS,
    accumulate_flows,
    aggregate_to_subdivision,
    assign_detectors,
    filter_intra,
    hourly_movement,
    movement_arrays,
)

MILES_PER_DEG_LAT = 69.0
MIN_SPEED = 10.0


@dataclass
class ScenarioConfig:
    corridors: int = 3
    nodes_per_corridor: int = 10
    spacing_miles: float = 2.0
    regular_days: int = 90
    regular_start: str = "2022-05-16"
    # daily profile, vehicles per hour per lane
    base_flow: float = 300.0
    am_peak: float = 400.0
    pm_peak: float = 450.0
    weekend_peak_factor: float = 0.4
    noise_std: float = 0.05
    daylight_amplitude: float = 0.8  # share of base flow that follows the daylight envelope
    detector_spread: float = 0.2  # per-detector demand scale drawn from 1 +/- spread
    free_flow_speed: float = 65.0
    capacity_per_lane: float = 2200.0
    # evacuation
    landfall: str = "2022-09-28T15:00"
    evac_days: int = 2
    lead_days: int = 1
    surge_magnitude: float = 2.0
    surge_variation: float = 0.5
    affected_corridors: tuple = (0,)
    ramp_hours: float = 12.0
    order_hours: tuple = (6.0, 30.0)
    order_population: tuple = (1.0e6, 1.5e6)
    movement_coupling: float = 0.05
    movement_background: float = 20.0
    movement_noise: float = 0.3
    seed: int = 0

    @property
    def node_count(self) -> int:
        return self.corridors * self.nodes_per_corridor

    @property
    def evac_start(self) -> pd.Timestamp:
        return pd.Timestamp(self.landfall).normalize() - pd.Timedelta(days=self.evac_days)

    def validate(self) -> None:
        if self.node_count < 2:
            raise ValueError("scenario needs at least 2 detectors")
        if self.nodes_per_corridor < 1 or self.corridors < 1:
            raise ValueError("corridor layout must be positive")
        if min(self.base_flow, self.capacity_per_lane, self.free_flow_speed, self.spacing_miles) <= 0:
            raise ValueError("flow, capacity, speed and spacing must be positive")
        if not 0 <= self.daylight_amplitude <= 1 or not 0 <= self.detector_spread < 1:
            raise ValueError("daylight_amplitude must lie in [0, 1] and detector_spread in [0, 1)")
        if self.surge_magnitude <= 0:
            raise ValueError("surge magnitude must be positive")
        if len(self.order_hours) != len(self.order_population):
            raise ValueError("order_hours and order_population differ in length")
        horizon = 24.0 * self.evac_days
        if any(h < 0 or h >= horizon for h in self.order_hours):
            raise ValueError("evacuation orders must fall inside the evacuation days")
        if any(c >= self.corridors for c in self.affected_corridors):
            raise ValueError("affected corridor index out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("affected_corridors", "order_hours", "order_population"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k in ("affected_corridors", "order_hours", "order_population"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _rng(config: ScenarioConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, stream]))


# ----------------------------------------------------------------------- network


def generate_network(config: ScenarioConfig) -> RoadGraph:
    """Parallel straight corridors with uniform milepost spacing."""
    config.validate()
    rng = _rng(config, 1)
    directions = [Direction.NB, Direction.EB, Direction.SB, Direction.WB]
    nodes = []
    for c in range(config.corridors):
        direction = directions[c % 4]
        lanes = rng.integers(2, 5, size=config.nodes_per_corridor)
        for k in range(config.nodes_per_corridor):
            mp = 2.0 + k * config.spacing_miles
            # corridors run north-south, 30 miles apart, starting at the coast
            lat = 27.0 + mp / MILES_PER_DEG_LAT
            lon = -82.5 + c * 0.5
            nodes.append(DetectorNode(f"D{c:02d}{k:03d}", f"C{c}", direction, mp, int(lanes[k]), lat, lon))
    return RoadGraph.from_nodes(nodes)


def _corridor_of(graph: RoadGraph) -> np.ndarray:
    names = sorted({n.corridor for n in graph.nodes}, key=lambda s: (len(s), s))
    lookup = {c: i for i, c in enumerate(names)}
    return np.array([lookup[n.corridor] for n in graph.nodes])


def _detector_scale(graph: RoadGraph, config: ScenarioConfig) -> np.ndarray:
    rng = _rng(config, 2)
    return rng.uniform(1.0 - config.detector_spread, 1.0 + config.detector_spread, size=graph.size)


# ------------------------------------------------------------------- regular flow


def _profile(hours: np.ndarray, weekend: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Per-lane expected flow at fractional hour-of-day."""
    daylight = np.clip(np.sin(np.pi * (hours - 4.0) / 19.0), 0.0, None)
    peaks = config.am_peak * np.exp(-((hours - 8.0) ** 2) / (2 * 1.5**2)) + config.pm_peak * np.exp(
        -((hours - 17.0) ** 2) / (2 * 2.0**2)
    )
    peak_scale = np.where(weekend, config.weekend_peak_factor, 1.0)
    a = config.daylight_amplitude
    return config.base_flow * ((1.0 - a) + a * daylight) + peak_scale * peaks


def expected_flow(graph: RoadGraph, config: ScenarioConfig, timestamps) -> np.ndarray:
    """Noise-free regular flow ``T x N``; the closed form the generators perturb."""
    stamps = pd.DatetimeIndex(np.asarray(timestamps).astype("datetime64[ns]"))
    hours = stamps.hour.to_numpy(dtype=np.float64)
    weekend = stamps.dayofweek.to_numpy() >= 5
    per_lane = _profile(hours, weekend, config)
    scale = _detector_scale(graph, config) * graph.lanes
    flow = per_lane[:, None] * scale[None, :]
    return np.minimum(flow, MAX_VPHPL * graph.lanes[None, :])


def speed_from_flow(flow, lanes, config: ScenarioConfig) -> np.ndarray:
    ratio = np.asarray(flow) / (config.capacity_per_lane * np.asarray(lanes))
    return np.maximum(config.free_flow_speed * (1.0 - 0.7 * ratio**2), MIN_SPEED)


def occupancy_from(flow, speed, lanes) -> np.ndarray:
    density = np.asarray(flow) / (np.asarray(speed) * np.asarray(lanes))
    return np.clip(density / 180.0, 0.0, 1.0)


def _noisy_flow(graph: RoadGraph, config: ScenarioConfig, stamps: pd.DatetimeIndex, stream: int) -> np.ndarray:
    base = expected_flow(graph, config, stamps)
    if config.noise_std <= 0:
        return base
    rng = _rng(config, stream)
    corridor = _corridor_of(graph)
    n_corr = corridor.max() + 1
    T = len(stamps)
    shocks = rng.standard_normal((T, n_corr))
    shared = np.empty_like(shocks)
    shared[0] = shocks[0]
    phi = 0.7
    for t in range(1, T):
        shared[t] = phi * shared[t - 1] + np.sqrt(1 - phi**2) * shocks[t]
    own = rng.standard_normal((T, graph.size))
    eps = config.noise_std * (shared[:, corridor] + own) / np.sqrt(2.0)
    return np.clip(base * (1.0 + eps), 0.0, MAX_VPHPL * graph.lanes[None, :])


def _to_series(graph, stamps, flow, config) -> list[RawDetectorSeries]:
    speed = speed_from_flow(flow, graph.lanes[None, :], config)
    occ = occupancy_from(flow, speed, graph.lanes[None, :])
    ts = stamps.to_numpy().astype("datetime64[h]")
    return [
        RawDetectorSeries(n.detector_id, ts, flow[:, d], speed[:, d], occ[:, d], n.lane_count)
        for d, n in enumerate(graph.nodes)
    ]


def hourly_stamps(start, days: int) -> pd.DatetimeIndex:
    return pd.date_range(pd.Timestamp(start), periods=24 * days, freq="h")


def generate_regular_traffic(graph: RoadGraph, config: ScenarioConfig) -> list[RawDetectorSeries]:
    """24-hour series over the regular period: daily profile plus corridor-correlated noise."""
    if config.regular_days < 1:
        raise ValueError("regular_days must be >= 1")
    stamps = hourly_stamps(config.regular_start, config.regular_days)
    return _to_series(graph, stamps, _noisy_flow(graph, config, stamps, 3), config)


def evacuation_period_traffic(graph: RoadGraph, config: ScenarioConfig) -> list[RawDetectorSeries]:
    """Counterfactual (no-surge) traffic for the lead-in and evacuation days."""
    start = config.evac_start - pd.Timedelta(days=config.lead_days)
    stamps = hourly_stamps(start, config.lead_days + config.evac_days)
    return _to_series(graph, stamps, _noisy_flow(graph, config, stamps, 4), config)


# -------------------------------------------------------------------- evacuation


def order_ramp(hours_since_start: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Share of the eventual surge in effect: each order phases in linearly over ``ramp_hours``."""
    t = np.asarray(hours_since_start, dtype=np.float64)
    pops = np.asarray(config.order_population, dtype=np.float64)
    if pops.sum() <= 0:
        return np.zeros_like(t)
    ramp = np.zeros_like(t)
    for h, p in zip(config.order_hours, pops):
        ramp += p * np.clip((t - h) / config.ramp_hours, 0.0, 1.0)
    return ramp / pops.sum()


def cumulative_population(hours_since_start: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    t = np.asarray(hours_since_start, dtype=np.float64)
    out = np.zeros_like(t)
    for h, p in zip(config.order_hours, config.order_population):
        out += np.where(t >= h, p, 0.0)
    return out


def evac_zone_centers(graph: RoadGraph, config: ScenarioConfig) -> np.ndarray:
    """One zone at the coastal end of each affected corridor, offset 3 miles seaward."""
    coords = graph.coordinates
    corridor = _corridor_of(graph)
    centers = []
    for c in config.affected_corridors:
        members = np.flatnonzero(corridor == c)
        lat, lon = coords[members[np.argmin(coords[members, 0])]]
        centers.append((lat - 3.0 / MILES_PER_DEG_LAT, lon))
    if not centers:
        centers.append((coords[:, 0].min() - 3.0 / MILES_PER_DEG_LAT, coords[:, 1].mean()))
    return np.array(centers)


def zone_distance(graph: RoadGraph, config: ScenarioConfig) -> np.ndarray:
    centers = evac_zone_centers(graph, config)
    coords = graph.coordinates
    d = haversine_miles(coords[:, None, 0], coords[:, None, 1], centers[None, :, 0], centers[None, :, 1])
    return d.min(axis=1)


def surge_multiplier(graph: RoadGraph, config: ScenarioConfig, stamps: pd.DatetimeIndex) -> np.ndarray:
    """``T x N`` factor applied to counterfactual flow.

    On affected corridors: ``1 + (M - 1) * ramp(t) * (1 + level(t))`` where
    ``level`` interpolates a random per-corridor draw in ``[0, surge_variation]``
    placed at the midpoint of every movement window. Elsewhere 1.
    """
    t = np.asarray((stamps - config.evac_start) / pd.Timedelta(hours=1), dtype=np.float64)
    ramp = order_ramp(t, config)
    corridor = _corridor_of(graph)
    rng = _rng(config, 5)

    # window midpoints covering the whole stamp range
    first = stamps[0].normalize() - pd.Timedelta(days=1)
    n_days = (stamps[-1].normalize() - first).days + 2
    mids = np.array(
        [
            ((first + pd.Timedelta(days=d, hours=h + WINDOW_HOURS / 2)) - config.evac_start) / pd.Timedelta(hours=1)
            for d in range(n_days)
            for h in WINDOW_START_HOURS
        ]
    )
    out = np.ones((len(stamps), graph.size))
    for c in sorted(set(config.affected_corridors)):
        draws = rng.uniform(0.0, config.surge_variation, size=len(mids))
        level = np.interp(t, mids, draws)
        factor = 1.0 + (config.surge_magnitude - 1.0) * ramp * (1.0 + level)
        out[:, corridor == c] = factor[:, None]
    return out


def surge_plateau(config: ScenarioConfig, stamps: pd.DatetimeIndex) -> np.ndarray:
    """Mask of hours where every order has fully phased in."""
    t = np.asarray((stamps - config.evac_start) / pd.Timedelta(hours=1), dtype=np.float64)
    return order_ramp(t, config) >= 1.0


@dataclass
class EvacuationData:
    series: list  # RawDetectorSeries with the surge applied
    baseline: list  # counterfactual RawDetectorSeries
    features: pd.DataFrame  # EvacFeatureFrame
    movements: pd.DataFrame  # tile movement records
    tile_map: dict = field(default_factory=dict)
    centroids: dict = field(default_factory=dict)


EVAC_FEATURE_COLUMNS = [
    "detector_id",
    "timestamp",
    "time_to_landfall",
    "distance_to_nearest_evac_zone",
    "cumulative_population_under_orders",
    "fb_inflow",
    "fb_outflow",
]


def subdivision_layout(graph: RoadGraph):
    """One subdivision per detector (centroid ~0.1 mile away) holding two tiles."""
    tile_map, centroids = {}, {}
    for n in graph.nodes:
        sub = f"S{n.detector_id}"
        centroids[sub] = (n.latitude + 0.1 / MILES_PER_DEG_LAT, n.longitude)
        tile_map[f"T{n.detector_id}a"] = sub
        tile_map[f"T{n.detector_id}b"] = sub
    return tile_map, centroids


def _movement_records(graph, config, stamps, extra_flow, stream) -> pd.DataFrame:
    """Tile movement for every window in ``stamps`` along each corridor edge.

    ``extra_flow`` (T x N) is the surge-induced flow; each edge u->v carries
    ``kappa * sum(extra_flow[:, v])`` over the window plus background noise.
    """
    rng = _rng(config, stream)
    ids = graph.ids
    stamp_pos = {ts: i for i, ts in enumerate(stamps)}
    rows = []
    for day in pd.DatetimeIndex(stamps.normalize().unique()):
        for h in WINDOW_START_HOURS:
            ws = day + pd.Timedelta(hours=h)
            we = ws + pd.Timedelta(hours=WINDOW_HOURS)
            idx = [stamp_pos[ws + pd.Timedelta(hours=z)] for z in range(WINDOW_HOURS) if ws + pd.Timedelta(hours=z) in stamp_pos]
            if len(idx) != WINDOW_HOURS:
                continue
            window_extra = extra_flow[idx].sum(axis=0)
            for u, v in graph.edges:
                bg = config.movement_background
                noise = bg * config.movement_noise * rng.standard_normal(3)
                count = max(0.0, config.movement_coupling * window_extra[v] + bg + noise[0])
                split = 0.6
                base = (ids[u], ids[v])
                rows.append((f"T{base[0]}a", f"T{base[1]}a", ws, we, split * count, split * bg))
                rows.append((f"T{base[0]}b", f"T{base[1]}b", ws, we, (1 - split) * count, (1 - split) * bg))
                # short trips inside the origin subdivision; dropped by the pipeline
                rows.append((f"T{base[0]}a", f"T{base[0]}b", ws, we, max(0.0, bg + noise[1]), bg))
    return pd.DataFrame(
        rows, columns=["origin_tile", "destination_tile", "window_start", "window_end", "crisis_count", "baseline_count"]
    )


def generate_regular_movement(graph: RoadGraph, config: ScenarioConfig) -> pd.DataFrame:
    """Background-only movement over the regular period (no surge)."""
    stamps = hourly_stamps(config.regular_start, config.regular_days)
    return _movement_records(graph, config, stamps, np.zeros((len(stamps), graph.size)), 6)


def run_movement_pipeline(movements, tile_map, centroids, graph, network_flow: pd.Series, count="crisis_count"):
    """Tile records to hourly per-detector inflow/outflow."""
    od = filter_intra(aggregate_to_subdivision(movements, tile_map, count))
    det = assign_detectors(od, centroids, graph)
    flows = accumulate_flows(det, graph.ids)
    return hourly_movement(flows, network_flow)


def inject_evacuation(series, graph: RoadGraph, config: ScenarioConfig) -> EvacuationData:
    """Apply the surge to counterfactual ``series`` and derive features and movement."""
    config.validate()
    stamps = pd.DatetimeIndex(series[0].timestamps.astype("datetime64[ns]"))
    base = np.stack([s.volume for s in series], axis=1)
    mult = surge_multiplier(graph, config, stamps)
    flow = np.minimum(base * mult, MAX_VPHPL * graph.lanes[None, :])
    evac_series = _to_series(graph, stamps, flow, config)

    movements = _movement_records(graph, config, stamps, flow - base, 7)
    tile_map, centroids = subdivision_layout(graph)
    network = pd.Series(flow.sum(axis=1), index=stamps)
    hourly = run_movement_pipeline(movements, tile_map, centroids, graph, network)
    mv = movement_arrays(hourly, stamps, graph.ids)

    t = np.asarray((stamps - config.evac_start) / pd.Timedelta(hours=1), dtype=np.float64)
    to_landfall = np.asarray((pd.Timestamp(config.landfall) - stamps) / pd.Timedelta(hours=1), dtype=np.float64)
    cum = cumulative_population(t, config)
    dist = zone_distance(graph, config)
    T, N = len(stamps), graph.size
    features = pd.DataFrame(
        {
            "detector_id": np.tile(graph.ids, T),
            "timestamp": np.repeat(stamps.to_numpy(), N),
            "time_to_landfall": np.repeat(to_landfall, N),
            "distance_to_nearest_evac_zone": np.tile(dist, T),
            "cumulative_population_under_orders": np.repeat(cum, N),
            "fb_inflow": mv[:, :, 0].reshape(-1),
            "fb_outflow": mv[:, :, 1].reshape(-1),
        }
    )
    return EvacuationData(evac_series, list(series), features, movements, tile_map, centroids)


# --------------------------------------------------------------------------- io


def write_scenario(out_dir, config: ScenarioConfig) -> dict:
    """Generate everything and write the CSV inputs the pipelines consume. Returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = generate_network(config)
    regular = generate_regular_traffic(graph, config)
    evac = inject_evacuation(evacuation_period_traffic(graph, config), graph, config)
    reg_movement = generate_regular_movement(graph, config)

    paths = {
        "graph": out / "graph.csv",
        "detectors_regular": out / "detectors_regular.csv",
        "detectors_evacuation": out / "detectors_evacuation.csv",
        "movement_evacuation": out / "movement_evacuation.csv",
        "movement_regular": out / "movement_regular.csv",
        "tile_map": out / "tile_map.csv",
        "centroids": out / "centroids.csv",
        "evacuation_features": out / "evacuation_features.csv",
        "scenario": out / "scenario.json",
    }
    write_graph_csv(graph, paths["graph"])
    write_detector_csv(regular, paths["detectors_regular"])
    write_detector_csv(evac.series, paths["detectors_evacuation"])
    fmt = "%Y-%m-%dT%H:%M:%S"
    for key, frame in (("movement_evacuation", evac.movements), ("movement_regular", reg_movement)):
        m = frame.copy()
        m["window_start"] = pd.to_datetime(m.window_start).dt.strftime(fmt)
        m["window_end"] = pd.to_datetime(m.window_end).dt.strftime(fmt)
        m.to_csv(paths[key], index=False)
    pd.DataFrame(sorted(evac.tile_map.items()), columns=["tile_id", "subdivision_id"]).to_csv(paths["tile_map"], index=False)
    pd.DataFrame(
        [(s, a, b) for s, (a, b) in sorted(evac.centroids.items())], columns=["subdivision_id", "latitude", "longitude"]
    ).to_csv(paths["centroids"], index=False)
    ef = evac.features.drop(columns=["fb_inflow", "fb_outflow"])
    ef["timestamp"] = pd.to_datetime(ef.timestamp).dt.strftime(fmt)
    ef.to_csv(paths["evacuation_features"], index=False)
    paths["scenario"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return {k: str(v) for k, v in paths.items()}
