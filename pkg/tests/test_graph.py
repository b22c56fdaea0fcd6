import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evacflow.autodiff import ShapeError
from evacflow.graph import (
    DetectorNode,
    Direction,
    RoadGraph,
    adjacency_series,
    build_adjacency,
    median_edge_travel_time,
    normalize_adjacency,
    read_graph_csv,
    shortest_path_miles,
    travel_time,
    write_graph_csv,
)


def chain(n=3, spacing=2.0, direction="EB"):
    nodes = [DetectorNode(f"N{k}", "I-4", direction, spacing * k, 2, 28.0, -82.0 + 0.03 * k) for k in range(n)]
    return RoadGraph.from_nodes(nodes)


# --------------------------------------------------------------- travel time


def test_travel_time_hand_cases():
    assert travel_time(10, 60, 60) == 10.0
    assert travel_time(5, 30, 50) == 7.5


def test_travel_time_symmetric_in_speeds():
    assert travel_time(3.3, 17, 44) == travel_time(3.3, 44, 17)


def test_travel_time_floor_clamps_slow_speeds():
    assert travel_time(1, 0, 0) == 60.0 / 5.0
    assert travel_time(1, 1, 2) == travel_time(1, 5, 5)


def test_travel_time_rejects_negative_inputs():
    with pytest.raises(ValueError):
        travel_time(-1, 60, 60)
    with pytest.raises(ValueError):
        travel_time(1, -3, 60)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 50), st.floats(5, 90), st.floats(5, 90), st.floats(0.1, 20))
def test_travel_time_homogeneous(d, a, b, k):
    assert math.isclose(travel_time(k * d, a, b), k * travel_time(d, a, b), rel_tol=1e-12)


# ----------------------------------------------------------------- topology


def test_edges_follow_travel_direction():
    eb = chain(direction="EB")
    assert eb.edges == ((0, 1), (1, 2))
    wb = chain(direction="WB")
    assert wb.edges == ((1, 0), (2, 1))


def test_corridors_do_not_connect():
    nodes = [
        DetectorNode("A", "I-4", "EB", 0.0),
        DetectorNode("B", "I-4", "EB", 2.0),
        DetectorNode("C", "I-75", "NB", 1.0),
        DetectorNode("D", "I-4", "WB", 1.0),
    ]
    g = RoadGraph.from_nodes(nodes)
    assert g.edges == ((0, 1),)


def test_graph_validation():
    with pytest.raises(ValueError):
        RoadGraph.from_nodes([DetectorNode("A", "c", "EB", 0.0), DetectorNode("A", "c", "EB", 1.0)])
    with pytest.raises(ValueError):
        DetectorNode("A", "c", "EB", 0.0, lane_count=0)
    with pytest.raises(ValueError):
        RoadGraph.from_nodes([DetectorNode("A", "c", "EB", 0.0)], [("A", "Z", 1.0)])


def test_explicit_edges_override_inference():
    nodes = [DetectorNode("A", "c", "EB", 0.0), DetectorNode("B", "c", "EB", 1.0), DetectorNode("C", "c", "EB", 2.0)]
    g = RoadGraph.from_nodes(nodes, [("A", "C", 4.0)])
    assert g.edges == ((0, 2),)
    assert g.distances[(0, 2)] == 4.0


# ---------------------------------------------------------------- adjacency


def test_three_node_chain_by_hand():
    a = build_adjacency(chain(), np.full(3, 60.0)).matrix
    expected = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(a, expected)


def test_halving_speed_doubles_entry():
    g = chain()
    fast = build_adjacency(g, np.array([60.0, 40.0, 50.0])).matrix
    slow = build_adjacency(g, np.array([30.0, 20.0, 50.0])).matrix
    assert slow[0, 1] == 2.0 * fast[0, 1]


def test_adjacency_length_mismatch():
    with pytest.raises(ShapeError):
        build_adjacency(chain(), np.ones(4))


def test_off_support_exactly_zero_for_random_speeds():
    rng = np.random.default_rng(0)
    nodes = [DetectorNode(f"{c}{k}", c, d, 1.5 * k) for c, d in (("X", "EB"), ("Y", "NB")) for k in range(4)]
    g = RoadGraph.from_nodes(nodes)
    mask = g.edge_mask()
    for _ in range(100):
        a = build_adjacency(g, rng.uniform(0, 80, g.size)).matrix
        assert np.all(a[~mask] == 0.0)
        assert np.all(np.diag(a) == 0.0)
        assert np.all(a[mask] > 0)


def test_symmetric_option_takes_max():
    g = chain()
    a = adjacency_series(g, np.array([[60.0, 30.0, 20.0]]), symmetric=True)[0]
    np.testing.assert_array_equal(a, a.T)
    assert a[1, 0] == a[0, 1] > 0


def test_normalize_isolated_node_is_self_loop():
    n = normalize_adjacency(np.zeros((3, 3)))
    np.testing.assert_array_equal(n, np.eye(3))


def test_normalize_rows_sum_to_one_and_bounded():
    rng = np.random.default_rng(1)
    g = chain(6)
    for mode in ("affinity", "raw"):
        a = normalize_adjacency(adjacency_series(g, rng.uniform(5, 70, (10, 6))), tau=2.0, mode=mode)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        assert a.min() >= 0 and a.max() <= 1


def test_affinity_decreases_with_travel_time():
    a = np.array([[0.0, 1.0, 3.0], [0, 0, 0], [0, 0, 0]])
    n = normalize_adjacency(a, tau=1.0)
    assert n[0, 1] > n[0, 2]
    # hand value: weights exp(-1), exp(-3) plus a unit self-loop
    total = 1 + math.exp(-1) + math.exp(-3)
    assert n[0, 1] == pytest.approx(math.exp(-1) / total, rel=1e-15)


def test_normalize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        normalize_adjacency(np.zeros((2, 2)), tau=0)
    with pytest.raises(ValueError):
        normalize_adjacency(np.zeros((2, 2)), mode="inverse")


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    nodes = [DetectorNode(f"{c}{k}", c, "EB", 1.0 + k) for c in "PQ" for k in range(3)]
    g = RoadGraph.from_nodes(nodes)
    perm = rng.permutation(g.size)
    gp = g.permuted(perm)
    speeds = rng.uniform(5, 70, g.size)
    a = build_adjacency(g, speeds).matrix
    ap = build_adjacency(gp, speeds[perm]).matrix
    np.testing.assert_array_equal(ap, a[np.ix_(perm, perm)])


def test_median_edge_travel_time():
    g = chain(3)
    speeds = np.array([[60.0, 60.0, 60.0], [30.0, 30.0, 30.0]])
    # edge times: 2, 2, 4, 4 minutes
    assert median_edge_travel_time(g, speeds) == 3.0


def test_shortest_path_is_undirected():
    d = shortest_path_miles(chain(3, spacing=2.0))
    assert d[2, 0] == 4.0 and d[0, 2] == 4.0


def test_csv_round_trip(tmp_path):
    g = chain(4)
    write_graph_csv(g, tmp_path / "g.csv")
    back = read_graph_csv(tmp_path / "g.csv")
    assert back.ids == g.ids and back.edges == g.edges
    assert back.nodes[0].direction is Direction.EB


def test_csv_missing_column(tmp_path):
    (tmp_path / "g.csv").write_text("detector_id,corridor\nA,c\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_graph_csv(tmp_path / "g.csv")
