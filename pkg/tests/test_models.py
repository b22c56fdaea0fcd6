import numpy as np
import pytest

from evacflow import autodiff as ad
from evacflow.autodiff import ShapeError, Tensor
from evacflow.models import (
    Forecaster,
    ModelConfig,
    Normalizer,
    baseline_forward,
    dgcn_layer,
    forward,
    init_params,
    lstm_cell,
)


def small(mode="dynamic", n=5, f=4, h=4, l=3, p=2):
    return ModelConfig(n, f, hidden_size=h, input_length=l, horizon=p, adjacency_mode=mode)


def inputs(rng, cfg, batch=2):
    x = rng.standard_normal((batch, cfg.input_length, cfg.node_count, cfg.input_feature_count))
    a = rng.uniform(0, 1, (batch, cfg.input_length, cfg.node_count, cfg.node_count))
    a /= a.sum(axis=-1, keepdims=True)
    return x, a


# ---------------------------------------------------------------- dgcn layer


def test_dgcn_identity_propagation():
    x = np.random.default_rng(0).standard_normal((3, 2))
    out = dgcn_layer(x, np.eye(3), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.values, np.tanh(x), rtol=0, atol=1e-15)


def test_dgcn_zero_features():
    b = np.array([0.3, -0.7])
    out = dgcn_layer(np.zeros((3, 4)), np.eye(3), Tensor(np.ones((4, 2))), Tensor(b))
    np.testing.assert_allclose(out.values, np.tile(np.tanh(b), (3, 1)), rtol=0, atol=1e-15)


def test_dgcn_three_node_chain_by_hand():
    a = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]])
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    w = np.array([[1.0, 0.0, -1.0], [0.5, 1.0, 0.0]])
    b = np.array([0.1, 0.0, -0.1])
    # A X = [[2,3],[4,5],[5,6]]
    ax = [[2.0, 3.0], [4.0, 5.0], [5.0, 6.0]]
    want = [[np.tanh(r[0] * w[0, j] + r[1] * w[1, j] + b[j]) for j in range(3)] for r in ax]
    out = dgcn_layer(x, a, Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.values, want, rtol=0, atol=1e-15)


def test_dgcn_shape_mismatch():
    with pytest.raises(ShapeError):
        dgcn_layer(np.zeros((3, 2)), np.eye(4), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_dgcn_output_bounded():
    rng = np.random.default_rng(1)
    w, b = Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4))
    assert np.all(np.abs(dgcn_layer(rng.standard_normal((6, 3)), np.eye(6), w, b).values) < 1)
    # float64 tanh rounds to exactly 1 for large arguments
    assert np.all(np.abs(dgcn_layer(rng.standard_normal((6, 3)) * 50, np.eye(6), w, b).values) <= 1)


# ----------------------------------------------------------------- lstm cell


def test_lstm_zero_weights():
    c = np.array([[1.0, -2.0, 0.5]])
    z = lambda *s: Tensor(np.zeros(s))
    h2, c2 = lstm_cell(z(1, 3), z(1, 3), Tensor(c), z(3, 12), z(3, 12), z(12))
    np.testing.assert_allclose(c2.values, 0.5 * c, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h2.values, 0.5 * np.tanh(0.5 * c), rtol=0, atol=1e-15)


def test_lstm_state_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        c = rng.standard_normal((4, 5)) * 3
        args = [Tensor(rng.standard_normal(s) * 2) for s in [(4, 5), (4, 5)]]
        h2, c2 = lstm_cell(args[0], args[1], Tensor(c), Tensor(rng.standard_normal((5, 20))),
                           Tensor(rng.standard_normal((5, 20))), Tensor(rng.standard_normal(20)))
        assert np.all(np.abs(c2.values) <= np.abs(c) + 1)
        assert np.all(np.abs(h2.values) < 1)


# ------------------------------------------------------------------- forward


@pytest.mark.parametrize("mode", ["dynamic", "static", "none"])
def test_output_shape(mode):
    rng = np.random.default_rng(3)
    cfg = small(mode, n=7, p=4)
    m = Forecaster(cfg, seed=0)
    x, a = inputs(rng, cfg, batch=3)
    adj = {"dynamic": a, "static": a[0, 0], "none": None}[mode]
    assert m.predict(x, adj).shape == (3, 7, 4)
    single = a[0] if mode == "dynamic" else adj
    assert m.predict(x[0], single).shape == (7, 4)


def test_wrong_window_length():
    cfg = small()
    x, a = inputs(np.random.default_rng(4), cfg)
    with pytest.raises(ValueError, match="input_length"):
        Forecaster(cfg).predict(x[:, :2], a[:, :2])


def test_adjacency_shape_checked():
    cfg = small()
    x, a = inputs(np.random.default_rng(5), cfg)
    with pytest.raises(ShapeError):
        Forecaster(cfg).predict(x, a[:, :, :4, :4])
    with pytest.raises(ShapeError):
        Forecaster(small("static")).predict(x, a)


def test_forward_deterministic():
    cfg = small()
    x, a = inputs(np.random.default_rng(6), cfg)
    assert Forecaster(cfg, 1).predict(x, a).tobytes() == Forecaster(cfg, 1).predict(x, a).tobytes()


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    cfg = small(n=8)
    m = Forecaster(cfg, seed=2)
    x, a = inputs(rng, cfg)
    perm = rng.permutation(8)
    base = m.predict(x, a)
    permuted = m.predict(x[:, :, perm], a[:, :, perm][:, :, :, perm])
    np.testing.assert_allclose(permuted, base[:, perm], rtol=0, atol=1e-10)


def test_full_model_gradient_check():
    rng = np.random.default_rng(8)
    cfg = small()
    m = Forecaster(cfg, seed=3)
    x, a = inputs(rng, cfg)
    y = rng.standard_normal((2, 5, 2))
    errs = ad.grad_check_params(lambda: ad.mse_loss(m(x, a), y), m.params)
    assert set(errs) == set(m.params)
    assert max(errs.values()) < 1e-4


def test_dynamic_adjacency_changes_predictions():
    rng = np.random.default_rng(9)
    cfg = small()
    m = Forecaster(cfg, seed=4)
    x, a = inputs(rng, cfg, batch=1)
    b = a.copy()
    b[0, 1, 0, 1] *= 1.5
    assert np.abs(m.predict(x, a) - m.predict(x, b)).max() > 0


# ----------------------------------------------------------------- baselines


def reference_single_series(params, x):
    """Plain loop over time for one node: dense tanh layer, LSTM, affine head."""
    H = params["lstm_wh"].shape[0]
    h = np.zeros(H)
    c = np.zeros(H)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    for xt in x:
        g = np.tanh(xt @ params["gc_w"] + params["gc_b"])
        z = g @ params["lstm_wx"] + h @ params["lstm_wh"] + params["lstm_b"]
        i, f, u, o = sig(z[:H]), sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), sig(z[3 * H :])
        c = f * c + i * u
        h = o * np.tanh(c)
    return h @ params["head_w"] + params["head_b"]


def test_lstm_baseline_single_node_matches_reference():
    rng = np.random.default_rng(10)
    cfg = small("none", n=1, l=6, p=6, h=5)
    params = init_params(cfg, seed=5)
    x = rng.standard_normal((6, 1, 4))
    got = baseline_forward("lstm", {k: Tensor(v) for k, v in params.items()}, x, None, cfg).values
    np.testing.assert_allclose(got[0], reference_single_series(params, x[:, 0]), rtol=0, atol=1e-10)


def test_gcn_lstm_identity_adjacency_equals_lstm():
    rng = np.random.default_rng(11)
    params = {k: Tensor(v) for k, v in init_params(small("none"), seed=6).items()}
    x, _ = inputs(rng, small())
    lstm = baseline_forward("lstm", params, x, None, small("none")).values
    gcn = baseline_forward("gcn_lstm", params, x, np.eye(5), small("static")).values
    np.testing.assert_allclose(gcn, lstm, rtol=0, atol=1e-12)


def test_baseline_mode_mismatch():
    params = {k: Tensor(v) for k, v in init_params(small(), seed=0).items()}
    with pytest.raises(ValueError):
        baseline_forward("lstm", params, np.zeros((1, 3, 5, 4)), None, small("dynamic"))
    with pytest.raises(ValueError):
        baseline_forward("cnn_lstm", params, np.zeros((1, 3, 5, 4)), None, small("none"))


def test_functional_forward_shape():
    rng = np.random.default_rng(12)
    cfg = small()
    params = {k: Tensor(v) for k, v in init_params(cfg, 7).items()}
    x, a = inputs(rng, cfg)
    assert forward(params, x, a, cfg).shape == (2, 5, 2)


# --------------------------------------------------------------------- misc


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(5, 4, input_length=0)
    with pytest.raises(ValueError):
        ModelConfig(5, 4, adjacency_mode="diffusion")


def test_bad_params_rejected():
    params = init_params(small(), 0)
    params["gc_w"] = np.zeros((3, 3))
    with pytest.raises(ShapeError, match="gc_w"):
        Forecaster(small(), params=params)


def test_normalizer_round_trip_and_zero_spread():
    rng = np.random.default_rng(13)
    v = rng.standard_normal((100, 3)) * [1.0, 5.0, 0.0] + [0, 2, 7]
    n = Normalizer.fit(v, axis=0)
    np.testing.assert_allclose(n.inverse(n(v)), v, atol=1e-12)
    assert n.std[2] == 1.0
