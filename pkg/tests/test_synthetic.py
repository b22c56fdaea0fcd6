import numpy as np
import pandas as pd
import pytest

from evacflow.detectors import qc_filter, read_detector_csv
from evacflow.graph import read_graph_csv
from evacflow.movement import WINDOW_HOURS, read_centroids, read_movement_csv, read_tile_map
from evacflow.synthetic import (
    ScenarioConfig,
    cumulative_population,
    evacuation_period_traffic,
    expected_flow,
    generate_network,
    generate_regular_movement,
    generate_regular_traffic,
    inject_evacuation,
    speed_from_flow,
    surge_plateau,
    write_scenario,
)


def small(**kw):
    base = dict(corridors=2, nodes_per_corridor=4, regular_days=14, evac_days=3)
    base.update(kw)
    return ScenarioConfig(**base)


def stack(series, attr="volume"):
    return np.stack([getattr(s, attr) for s in series], axis=1)


# ------------------------------------------------------------------- network


def test_minimal_network():
    g = generate_network(ScenarioConfig(corridors=1, nodes_per_corridor=2))
    assert g.edges == ((0, 1),)
    assert g.distances[(0, 1)] == 2.0


def test_thirty_nodes_three_corridors():
    g = generate_network(ScenarioConfig(corridors=3, nodes_per_corridor=10))
    assert g.size == 30 and len(g.edges) == 27


def test_network_deterministic():
    a, b = generate_network(small(seed=4)), generate_network(small(seed=4))
    assert a.nodes == b.nodes and a.edges == b.edges


def test_config_validation():
    with pytest.raises(ValueError):
        generate_network(ScenarioConfig(corridors=1, nodes_per_corridor=1))
    with pytest.raises(ValueError):
        small(order_hours=(100.0,), order_population=(1.0,)).validate()
    with pytest.raises(ValueError):
        small(affected_corridors=(5,)).validate()


def test_config_dict_round_trip():
    cfg = small(affected_corridors=(0, 1), seed=9)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------------- regular


def test_flat_profile_without_noise_or_peaks():
    cfg = small(noise_std=0.0, am_peak=0.0, pm_peak=0.0, daylight_amplitude=0.0, detector_spread=0.0)
    g = generate_network(cfg)
    flow = stack(generate_regular_traffic(g, cfg))
    np.testing.assert_array_equal(flow / g.lanes[None, :], cfg.base_flow)


def test_noise_free_weekday_periodicity():
    cfg = small(noise_std=0.0)
    g = generate_network(cfg)
    series = generate_regular_traffic(g, cfg)
    flow = stack(series)
    days = pd.DatetimeIndex(series[0].timestamps.astype("datetime64[ns]")[::24])
    weekdays = [d for d in range(len(days)) if days[d].dayofweek < 5]
    for a, b in zip(weekdays, weekdays[1:]):
        np.testing.assert_array_equal(flow[24 * a : 24 * a + 24], flow[24 * b : 24 * b + 24])


def test_weekend_peaks_are_smaller():
    cfg = small(noise_std=0.0)
    g = generate_network(cfg)
    stamps = pd.date_range("2022-06-04", periods=48, freq="h")  # Saturday, Sunday
    weekend = expected_flow(g, cfg, stamps)
    weekday = expected_flow(g, cfg, stamps + pd.Timedelta(days=2))
    assert weekend[8].sum() < weekday[8].sum()


def test_flow_never_exceeds_lane_cap_and_passes_qc():
    cfg = small(noise_std=0.3, base_flow=900.0, am_peak=1500.0)
    g = generate_network(cfg)
    series = generate_regular_traffic(g, cfg)
    assert np.all(stack(series) <= 2500.0 * g.lanes[None, :])
    kept, report = qc_filter(series)
    assert len(kept) == g.size and report == []
    ev = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    assert np.all(stack(ev.series) <= 2500.0 * g.lanes[None, :])
    assert len(qc_filter(ev.series)[0]) == g.size


def test_speed_flow_curve():
    assert speed_from_flow(0.0, 1, ScenarioConfig()) == 65.0
    s = speed_from_flow(np.linspace(0, 5000, 50), 2, ScenarioConfig())
    assert np.all(np.diff(s) <= 0) and s.min() >= 10.0


def test_regular_traffic_deterministic():
    cfg = small(seed=3)
    g = generate_network(cfg)
    assert stack(generate_regular_traffic(g, cfg)).tobytes() == stack(generate_regular_traffic(g, cfg)).tobytes()


# ---------------------------------------------------------------- evacuation


def test_unit_magnitude_is_identity():
    cfg = small(surge_magnitude=1.0)
    g = generate_network(cfg)
    base = evacuation_period_traffic(g, cfg)
    ev = inject_evacuation(base, g, cfg)
    np.testing.assert_array_equal(stack(ev.series), stack(base))
    np.testing.assert_array_equal(stack(ev.series, "speed"), stack(base, "speed"))


def test_double_surge_doubles_cumulative_flow():
    cfg = small(surge_magnitude=2.0, noise_std=0.0)
    g = generate_network(cfg)
    base = evacuation_period_traffic(g, cfg)
    ev = inject_evacuation(base, g, cfg)
    stamps = pd.DatetimeIndex(base[0].timestamps.astype("datetime64[ns]"))
    plateau = surge_plateau(cfg, stamps)
    affected = np.array([n.corridor == "C0" for n in g.nodes])
    surged = stack(ev.series)[plateau][:, affected].sum()
    counterfactual = stack(base)[plateau][:, affected].sum()
    assert surged >= 2.0 * counterfactual
    # unaffected corridors keep their flow
    np.testing.assert_array_equal(stack(ev.series)[:, ~affected], stack(base)[:, ~affected])


def test_surge_lowers_speed():
    cfg = small()
    g = generate_network(cfg)
    base = evacuation_period_traffic(g, cfg)
    ev = inject_evacuation(base, g, cfg)
    assert np.all(stack(ev.series, "speed") <= stack(base, "speed"))
    assert (stack(ev.series, "speed") < stack(base, "speed")).any()


def test_movement_inflow_tracks_flow_increase():
    cfg = small(noise_std=0.0, movement_noise=0.0)
    g = generate_network(cfg)
    base = evacuation_period_traffic(g, cfg)
    ev = inject_evacuation(base, g, cfg)
    extra = stack(ev.series) - stack(base)
    stamps = pd.DatetimeIndex(base[0].timestamps.astype("datetime64[ns]"))
    feats = ev.features.copy()
    feats["timestamp"] = pd.to_datetime(feats.timestamp)
    # a surge-destination detector: downstream end of the affected corridor
    det = g.nodes[g.edges[0][1]].detector_id
    col = g.ids.index(det)
    inflow, increase = [], []
    for day in stamps.normalize().unique():
        for h in (3, 11):
            ws = day + pd.Timedelta(hours=h)
            hours = (stamps >= ws) & (stamps < ws + pd.Timedelta(hours=WINDOW_HOURS))
            if hours.sum() != WINDOW_HOURS:
                continue
            sel = (feats.detector_id == det) & (feats.timestamp >= ws) & (feats.timestamp < ws + pd.Timedelta(hours=8))
            inflow.append(feats.loc[sel, "fb_inflow"].sum())
            increase.append(extra[hours, col].sum())
    assert np.corrcoef(inflow, increase)[0, 1] > 0.8


def test_evacuation_feature_invariants():
    cfg = small()
    g = generate_network(cfg)
    ev = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    f = ev.features.sort_values(["detector_id", "timestamp"])
    for _, grp in f.groupby("detector_id"):
        assert np.all(np.diff(grp.cumulative_population_under_orders) >= 0)
        assert grp.distance_to_nearest_evac_zone.nunique() == 1
        assert np.allclose(np.diff(grp.time_to_landfall), -1.0)
    assert (f.fb_inflow >= 0).all() and (f.fb_outflow >= 0).all()


def test_cumulative_population_steps():
    cfg = small(order_hours=(6.0, 30.0), order_population=(1.0, 2.0))
    np.testing.assert_array_equal(cumulative_population(np.array([0, 6, 29, 30, 50.0]), cfg), [0, 1, 1, 3, 3])


def test_movement_records_skip_the_night():
    cfg = small()
    g = generate_network(cfg)
    ev = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    starts = pd.to_datetime(ev.movements.window_start).dt.hour.unique()
    assert set(starts) <= {3, 11}
    assert set(pd.to_datetime(generate_regular_movement(g, cfg).window_start).dt.hour.unique()) <= {3, 11}


def test_evacuation_deterministic():
    cfg = small(seed=5)
    g = generate_network(cfg)
    a = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    b = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    pd.testing.assert_frame_equal(a.features, b.features)
    pd.testing.assert_frame_equal(a.movements, b.movements)


# ------------------------------------------------------------------------ io


def test_write_scenario_round_trips_through_readers(tmp_path):
    cfg = small()
    paths = write_scenario(tmp_path, cfg)
    g = read_graph_csv(paths["graph"])
    assert g.ids == generate_network(cfg).ids
    regular = read_detector_csv(paths["detectors_regular"])
    np.testing.assert_array_equal(stack(regular), stack(generate_regular_traffic(generate_network(cfg), cfg)))
    mv = read_movement_csv(paths["movement_evacuation"])
    tiles = read_tile_map(paths["tile_map"])
    assert set(mv.origin_tile) <= set(tiles)
    assert set(tiles.values()) <= set(read_centroids(paths["centroids"]))
    feats = pd.read_csv(paths["evacuation_features"])
    assert "fb_inflow" not in feats.columns
