import math

import numpy as np
import pytest

from aolkit.data import synthetic_blobs
from aolkit.layers import build_model
from aolkit.training import (OptState, TrainConfig, TrainingDiverged, accuracy, augment_batch,
                             grad, loss_and_grad, margin_loss, one_hot, sgd_nesterov_step, train)

U = math.sqrt(2)


def scalar_margin_loss(s, y, u, t):
    """Per-example oracle written with math only."""
    z = [(si - u * (i == y)) / t for i, si in enumerate(s)]
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return t * (lse - z[y])


def tiny_fc(seed=0):
    return build_model({"input_shape": [2], "layers": [
        {"type": "aol_fc", "out_dim": 8, "activation": "maxmin"},
        {"type": "aol_fc", "out_dim": 2}]}, seed)


def test_loss_at_offset_is_t_log_l():
    y = one_hot([3], 10)
    assert abs(margin_loss(U * y, y, U, 0.25) - 0.25 * math.log(10)) < 1e-12
    assert abs(0.25 * math.log(10) - 0.575646) < 1e-6


def test_two_class_example_against_scalar_oracle():
    y = one_hot([0], 2)
    got = margin_loss(np.zeros((1, 2)), y, U, 0.25)
    oracle = scalar_margin_loss([0.0, 0.0], 0, U, 0.25)
    assert abs(got - oracle) < 1e-12
    # closed form: 0.25 * ln(1 + e^{4 sqrt 2}) = 1.415085...
    assert abs(got - 0.25 * math.log1p(math.exp(4 * U))) < 1e-12
    assert abs(got - 1.41505) < 1e-4


def test_loss_decreases_to_zero_as_true_logit_grows():
    y = one_hot([1], 3)
    values = [margin_loss(np.array([[0.0, s, 0.5]]), y) for s in np.linspace(0, 20, 41)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(a > b for a, b in zip(values[:20], values[1:21]))
    assert values[-1] < 1e-12


def test_loss_is_nonnegative_and_matches_oracle_on_batches():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((16, 5)) * 3
    labels = rng.integers(0, 5, 16)
    got = margin_loss(s, one_hot(labels, 5), 0.7, 0.3)
    oracle = np.mean([scalar_margin_loss(list(si), int(yi), 0.7, 0.3) for si, yi in zip(s, labels)])
    assert got >= 0 and abs(got - oracle) < 1e-12


def test_symmetric_two_class_gradient():
    y = one_hot([0], 2)
    _, g = margin_loss(U * y, y, U, 0.25, return_grad=True)
    assert np.allclose(g, [[-0.5, 0.5]], atol=1e-15)


def test_gradient_endpoint_magnitude():
    for l in (2, 5, 10):
        y = one_hot([0], l)
        _, g = margin_loss(U * y, y, U, 0.25, return_grad=True)
        assert abs(abs(g[0, 0]) - (l - 1) / l) < 1e-15


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((3, 4))
    y = one_hot([0, 2, 3], 4)
    _, g = margin_loss(s, y, 1.1, 0.4, return_grad=True)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        fd = (margin_loss(sp, y, 1.1, 0.4) - margin_loss(sm, y, 1.1, 0.4)) / (2 * h)
        assert abs(fd - g[idx]) < 1e-8


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        margin_loss(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.0]]))
    with pytest.raises(ValueError):
        one_hot([3], 3)


def _step(p, g, mu, wd, lr, v=0.0):
    cfg = TrainConfig(momentum=mu, weight_decay=wd, lr0=lr)
    params = [{"P": np.array([p]), "b": np.array([p])}]
    state = OptState([{"P": np.array([v]), "b": np.array([v])}], 0, lr)
    sgd_nesterov_step(params, [{"P": np.array([g]), "b": np.array([g])}], state, cfg)
    return params[0], state.velocity[0]


def test_plain_sgd_step():
    p, _ = _step(1.0, 0.5, 0.0, 0.0, 0.1)
    assert p["P"][0] == pytest.approx(0.95, abs=1e-15)


def test_nesterov_step():
    p, v = _step(1.0, 0.5, 0.9, 0.0, 0.1)
    assert v["P"][0] == pytest.approx(-0.05, abs=1e-15)
    assert p["P"][0] == pytest.approx(0.905, abs=1e-15)


def test_weight_decay_on_p_only():
    p, _ = _step(1.0, 0.0, 0.0, 5e-4, 0.1)
    assert p["P"][0] == pytest.approx(0.99995, abs=1e-15)
    assert p["b"][0] == 1.0


def test_step_shape_mismatch():
    cfg = TrainConfig()
    params = [{"P": np.zeros(2)}]
    state = OptState([{"P": np.zeros(2)}], 0, 0.1)
    with pytest.raises(ValueError):
        sgd_nesterov_step(params, [{"P": np.zeros(3)}], state, cfg)


def test_lr_schedule():
    cfg = TrainConfig(lr0=1e-3, milestones=(900, 990, 999), epochs=1000)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(900) == pytest.approx(1e-4)
    assert cfg.lr_at(995) == pytest.approx(1e-5)
    assert cfg.lr_at(999) == pytest.approx(1e-6)


@pytest.mark.parametrize("kwargs", [{"lr0": -1}, {"momentum": 1.0}, {"loss_temperature": 0},
                                    {"loss_offset": -0.1}, {"batch_size": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_grad_includes_rescale_dependence():
    # gradients through the rescale differ from gradients w.r.t. W alone
    m = tiny_fc()
    rng = np.random.default_rng(2)
    m.params[0]["P"] += rng.standard_normal(m.params[0]["P"].shape)
    x = rng.standard_normal((8, 2))
    labels = rng.integers(0, 2, 8)
    g = grad(m, (x, labels), TrainConfig())
    raw = build_model({"input_shape": [2], "layers": [
        {"type": "aol_fc", "out_dim": 8, "activation": "maxmin", "rescale": False},
        {"type": "aol_fc", "out_dim": 2, "rescale": False}]})
    raw.params = [None if p is None else dict(p) for p in m.params]
    raw.params[0]["P"] = m.effective_weights()[0][0]
    raw.params[2]["P"] = m.effective_weights()[2][0]
    g_raw = grad(raw, (x, labels), TrainConfig())
    assert not np.allclose(g[0]["P"], g_raw[0]["P"])


def test_nan_input_raises_divergence():
    m = tiny_fc()
    with pytest.raises(TrainingDiverged):
        loss_and_grad(m, np.array([[np.nan, 0.0]]), [0], U, 0.25)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_model():
    m = build_model({"input_shape": [2], "layers": [
        {"type": "aol_fc", "out_dim": 8, "activation": "maxmin", "rescale": False},
        {"type": "aol_fc", "out_dim": 2, "rescale": False}]})
    data = synthetic_blobs(40, seed=0)
    cfg = TrainConfig(lr0=1e300, momentum=0.0, weight_decay=0.0, batch_size=10, epochs=3)
    with pytest.raises(TrainingDiverged) as info:
        train(m, data, cfg)
    good = info.value.last_good
    assert good is not None
    assert all(np.all(np.isfinite(v)) for p in good.params if p for v in p.values())


def test_zero_lr_keeps_params_bitwise():
    m = tiny_fc()
    before = m.copy()
    train(m, synthetic_blobs(60, seed=1), TrainConfig(lr0=0.0, epochs=3, batch_size=16))
    for a, b in zip(m.params, before.params):
        if a is not None:
            for k in a:
                assert np.array_equal(a[k], b[k])


def test_training_is_deterministic():
    cfg = TrainConfig(lr0=0.05, epochs=4, batch_size=32, eval_eps=(0.1,))
    data = synthetic_blobs(100, seed=2)
    logs = [train(tiny_fc(), data, cfg, val_set=data).log for _ in range(2)]
    assert logs[0] == logs[1]


def test_blobs_smoke_accuracy():
    data = synthetic_blobs(400, classes=2, noise=0.5, seed=7)
    cfg = TrainConfig(lr0=0.05, epochs=50, batch_size=50, milestones=(40,))
    res = train(tiny_fc(), data, cfg)
    assert res.log[-1]["train_acc"] >= 0.95


def test_accuracy_counts_ties_as_wrong():
    logits = np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]])
    assert accuracy(logits, [0, 0, 0]) == pytest.approx(1 / 3)


def test_augment_flip_and_shift_preserve_content():
    rng = np.random.default_rng(3)
    x = rng.random((20, 10, 10, 1))
    out = augment_batch(x, np.random.default_rng(4), max_shift=0.0)
    for a, b in zip(out, x):
        assert np.array_equal(a, b) or np.array_equal(a, b[:, ::-1])
    shifted = augment_batch(x, np.random.default_rng(5), max_shift=0.2)
    assert shifted.shape == x.shape
    assert np.all(np.linalg.norm(shifted.reshape(20, -1), axis=1)
                  <= np.linalg.norm(x.reshape(20, -1), axis=1) + 1e-12)
