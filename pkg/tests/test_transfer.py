import numpy as np
import pytest

from evacflow import autodiff as ad
from evacflow.autodiff import ShapeError, Tensor
from evacflow.checkpoint import params_digest
from evacflow.experiments import evac_feature_array, evaluate, fit_transfer, prepare_traffic, train_forecaster
from evacflow.models import Forecaster, ModelConfig
from evacflow.synthetic import (
    ScenarioConfig,
    evacuation_period_traffic,
    generate_network,
    generate_regular_traffic,
    inject_evacuation,
)
from evacflow.training import TrainConfig
from evacflow.transfer import TransferConfig, TransferModel, control_gate

CFG = ModelConfig(5, 4, hidden_size=4, input_length=3, horizon=2)


def make(seed=0, evac=3):
    return TransferModel(Forecaster(CFG, seed=seed + 100), TransferConfig(evac, hidden_size=4), seed=seed)


def batch(rng, b=2, evac=3):
    x = rng.standard_normal((b, 3, 5, 4))
    e = rng.standard_normal((b, 3, 5, evac))
    a = rng.uniform(0, 1, (b, 3, 5, 5))
    return x, e, a / a.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------- gate


def test_gate_zero_weights_is_half():
    g = control_gate(np.random.default_rng(0).standard_normal((5, 4)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(g.values, 0.5)


def test_gate_large_negative_bias_suppresses():
    g = control_gate(np.ones((5, 4)), Tensor(np.zeros((4, 2))), Tensor(np.full(2, -50.0)))
    assert g.values.max() < 1e-20


def test_gate_in_open_interval():
    rng = np.random.default_rng(1)
    for _ in range(100):
        g = control_gate(np.tanh(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((4, 2)) * 3),
                         Tensor(rng.standard_normal(2) * 3))
        assert np.all((g.values > 0) & (g.values < 1))


def test_gate_shape_mismatch():
    with pytest.raises(ShapeError):
        control_gate(np.ones((5, 3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


# ------------------------------------------------------------------- forward


def test_closed_gate_gives_branch_alone():
    m = make()
    m.params["control_w"].values[:] = 0.0
    m.params["control_b"].values[:] = -800.0
    x, e, a = batch(np.random.default_rng(2))
    out, _ = m.branch(x, e)
    np.testing.assert_array_equal(m.predict(x, e, a), out.values)


def test_open_gate_zero_branch_gives_pretrained():
    m = make()
    for k in ("control_w", "evac_head_w", "evac_head_b"):
        m.params[k].values[:] = 0.0
    m.params["control_b"].values[:] = 800.0
    x, e, a = batch(np.random.default_rng(3))
    np.testing.assert_array_equal(m.predict(x, e, a), m.pretrained.predict(x, a))


def test_composition_from_independent_pieces():
    m = make(seed=1)
    x, e, a = batch(np.random.default_rng(4))
    pre = m.pretrained.predict(x, a)
    branch, h = m.branch(x, e)
    gate = control_gate(h, m.params["control_w"], m.params["control_b"]).values
    np.testing.assert_allclose(m.predict(x, e, a), gate * pre + branch.values, rtol=0, atol=1e-12)


def test_unbatched_call():
    m = make()
    x, e, a = batch(np.random.default_rng(5), b=1)
    np.testing.assert_array_equal(m.predict(x[0], e[0], a[0]), m.predict(x, e, a)[0])


def test_misaligned_frames_rejected():
    m = make()
    x, e, a = batch(np.random.default_rng(6))
    with pytest.raises(ValueError, match="misaligned"):
        m.predict(x, e[:, :2], a)
    with pytest.raises(ShapeError):
        m.predict(x, e[..., :2], a)


def test_gradient_check_trainable_only():
    m = make(seed=2)
    x, e, a = batch(np.random.default_rng(7))
    y = np.random.default_rng(8).standard_normal((2, 5, 2))
    errs = ad.grad_check_params(lambda: ad.mse_loss(m(x, e, a), y), m.params)
    assert max(errs.values()) < 1e-4
    assert all(p.grad is None for p in m.pretrained.params.values())
    assert not set(m.trainable()) & set(m.pretrained.params)


def test_training_steps_leave_pretrained_untouched():
    m = make(seed=3)
    before = params_digest(m.pretrained.param_arrays())
    opt = ad.Adam(m.trainable(), lr=0.05)
    rng = np.random.default_rng(9)
    for _ in range(10):
        x, e, a = batch(rng)
        ad.backward(ad.mse_loss(m(x, e, a), rng.standard_normal((2, 5, 2))))
        opt.step()
    assert params_digest(m.pretrained.param_arrays()) == before
    m.verify_frozen()


def test_verify_frozen_detects_tampering():
    m = make()
    m.pretrained.params["gc_w"].values[0, 0] += 1e-9
    with pytest.raises(RuntimeError):
        m.verify_frozen()


def test_gate_not_constant_zero_at_init():
    # with evacuation inputs zeroed the output still tracks the traffic features
    m = make(seed=4)
    x, e, a = batch(np.random.default_rng(10))
    zero = np.zeros_like(e)
    _, h = m.branch(x, zero)
    gate = control_gate(h, m.params["control_w"], m.params["control_b"]).values
    assert gate.min() > 0.05
    assert np.abs(m.predict(x, zero, a) - m.predict(x * 1.5, zero, a)).max() > 0


def test_only_additive_composition():
    with pytest.raises(ValueError):
        TransferModel(Forecaster(CFG), TransferConfig(3, composition="multiplicative"))


# ------------------------------------------------------------------ fitting


@pytest.fixture(scope="module")
def fitted_transfer(tiny):
    before = params_digest(tiny.fitted.model.param_arrays())
    cfg = TransferConfig(tiny.evac.evac.shape[-1], hidden_size=8)
    fit = fit_transfer(tiny.fitted.model, tiny.evac, cfg, TrainConfig(lr=3e-3, max_epochs=15, patience=15))
    return fit, before


def test_fit_transfer_freezes_pretrained(tiny, fitted_transfer):
    fit, before = fitted_transfer
    assert params_digest(tiny.fitted.model.param_arrays()) == before
    assert fit.model.pretrained is tiny.fitted.model


def test_fit_transfer_records_history(fitted_transfer):
    fit, _ = fitted_transfer
    hist = fit.result.history
    assert len(hist) >= 1
    assert hist[-1][1] < hist[0][1]


def test_transfer_beats_untransferred_on_validation(tiny, fitted_transfer):
    fit, _ = fitted_transfer
    pre = evaluate(tiny.fitted.model, tiny.evac, fit.val).aggregate["rmse"]
    tf = evaluate(fit.model, tiny.evac, fit.val).aggregate["rmse"]
    assert tf < pre


def test_fit_transfer_rejects_other_network(tiny):
    other = Forecaster(ModelConfig(tiny.graph.size + 1, 11, hidden_size=4))
    with pytest.raises(ValueError, match="nodes"):
        fit_transfer(other, tiny.evac, TransferConfig(5), TrainConfig(max_epochs=1))


def test_loss_monotone_on_noise_free_surge():
    cfg = ScenarioConfig(corridors=2, nodes_per_corridor=3, regular_days=14, evac_days=4,
                         noise_std=0.0, movement_noise=0.0, surge_variation=0.0)
    g = generate_network(cfg)
    reg, _ = prepare_traffic(generate_regular_traffic(g, cfg), g)
    pre = train_forecaster(reg, ModelConfig(g.size, 11, hidden_size=8), TrainConfig(lr=3e-3, max_epochs=3)).model
    ev = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    data, _ = prepare_traffic(ev.series, g)
    data.evac = evac_feature_array(ev.features, data.timestamps, g.ids)
    fit = fit_transfer(pre, data, TransferConfig(5, hidden_size=8), TrainConfig(lr=3e-3, max_epochs=20, patience=20))
    losses = [h[1] for h in fit.result.history]
    assert all(b <= 1.05 * a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
