import numpy as np
import pytest
from oracles import gradient_check

from iotab.neural import (BN_EPS, EarlyStopping, LRSchedule, NetworkConfig, NetworkParams, TrainedItemModel, TrainingError,
                          backward, forward, init_network, load_item_model, loss_value, lr_at, predict_item,
                          save_item_model, train_item, train_network)
from iotab.targets import BoundedScaler, Constant, ItemAddress

THUMB = dict(input_dim=3, width=8, n_blocks=2, dropout_prob=0.0)


def test_init_deterministic_and_finite():
    cfg = NetworkConfig(5, width=16, n_blocks=3)
    a = init_network(cfg, np.random.default_rng(7))
    b = init_network(cfg, np.random.default_rng(7))
    assert a.to_bytes() == b.to_bytes()
    assert np.all(np.isfinite(a.theta))


def test_init_shapes_full_size():
    p = init_network(NetworkConfig(60), np.random.default_rng(0))
    assert p.p["in.W"].shape == (60, 512)
    assert all(p.p[f"b{k}.W"].shape == (512, 512) for k in range(1, 11))
    assert p.p["out.W"].shape == (512, 1)
    assert "b11.W" not in p.p


def test_init_glorot_range_and_bn_defaults():
    cfg = NetworkConfig(4, width=6, n_blocks=1)
    p = init_network(cfg, np.random.default_rng(0))
    lim = np.sqrt(6 / (4 + 6))
    assert np.abs(p.p["in.W"]).max() <= lim
    assert np.all(p.p["in.b"] == 0)
    assert np.all(p.p["b1.gamma"] == 1) and np.all(p.p["b1.beta"] == 0)
    assert np.all(p.stats["b1.mean"] == 0) and np.all(p.stats["b1.var"] == 1)


def test_zero_params_sigmoid_half(rng):
    cfg = NetworkConfig(**THUMB)
    p = NetworkParams(cfg)
    for name in p.p:
        if name.endswith("gamma"):
            p.p[name][...] = 1.0
    out = forward(p, rng.normal(size=(4, 3)))
    assert np.all(out == 0.5)


def test_zero_params_identity_zero(rng):
    cfg = NetworkConfig(**THUMB, head="identity")
    p = NetworkParams(cfg)
    assert np.all(forward(p, rng.normal(size=(4, 3))) == 0.0)


def test_train_batch_norm_statistics(rng):
    cfg = NetworkConfig(**THUMB)
    p = init_network(cfg, rng)
    _, cache = forward(p, rng.normal(size=(16, 3)), train=True)
    for c in cache["blocks"]:
        xhat = c["xhat"]
        assert np.abs(xhat.mean(axis=0)).max() < 1e-6
        # the epsilon makes the variance var / (var + eps), so 1 - 1e-4 needs var >= 0.1
        np.testing.assert_allclose(xhat.var(axis=0), c["var"] / (c["var"] + BN_EPS), rtol=1e-10)
        wide = c["var"] >= 0.1
        assert np.abs(xhat.var(axis=0)[wide] - 1).max() < 1e-4


def test_train_mode_needs_two_rows(rng):
    p = init_network(NetworkConfig(**THUMB), rng)
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 3)), train=True)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 4)))


def test_zero_loss_batch_zero_gradient(rng):
    cfg = NetworkConfig(**THUMB, head="identity")
    p = init_network(cfg, rng)
    x = rng.normal(size=(6, 3))
    pred, cache = forward(p, x, train=True)
    assert np.all(backward(p, cache, pred, l1=0.0) == 0)


@pytest.mark.parametrize("head", ["sigmoid", "identity"])
@pytest.mark.parametrize("bn", [True, False])
def test_gradient_finite_differences(head, bn):
    cfg = NetworkConfig(**THUMB, head=head, batch_norm=bn)
    assert gradient_check(cfg, seed=11) < 1e-4


def test_l1_adds_sign(rng):
    cfg = NetworkConfig(**THUMB)
    p = init_network(cfg, rng)
    x, t = rng.normal(size=(5, 3)), rng.uniform(size=5)
    _, cache = forward(p, x, train=True)
    g0 = backward(p, cache, t, l1=0.0)
    g1 = backward(p, cache, t, l1=0.01)
    np.testing.assert_allclose(g1 - g0, 0.01 * np.sign(p.theta) * p.weight_mask(), atol=1e-15)


def test_dropout_only_in_train_mode(rng):
    cfg = NetworkConfig(**dict(THUMB, dropout_prob=0.5), dropout_after=(1,))
    p = init_network(cfg, rng)
    x = rng.normal(size=(32, 3))
    _, cache = forward(p, x, train=True, rng=np.random.default_rng(0))
    mask = cache["blocks"][0]["mask"]
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert "mask" not in cache["blocks"][1]
    assert np.array_equal(forward(p, x), forward(p, x))


def test_lr_schedule_points():
    s = LRSchedule()
    assert s.rate(0) == 1e-6 and s.rate(10) == 1e-2 and s.rate(20) == 1e-6
    assert s.rate(5) == pytest.approx(1e-4, rel=1e-12)  # geometric midpoint
    assert s.rate(15) == pytest.approx(1e-4, rel=1e-12)
    rates = []
    for _ in range(1000):
        rates.append(lr_at(s))
        s.advance()
    assert min(rates) >= 1e-6 and max(rates) <= 1e-2


def test_early_stopping_ties_do_not_count():
    es = EarlyStopping(2)
    assert not es.update(0, 1.0, lambda: "e0")
    assert not es.update(1, 1.0, lambda: "e1")  # tie
    assert not es.update(2, 1.5, lambda: "e2")
    assert es.update(3, 1.2, lambda: "e3")
    assert es.snapshot == "e0" and es.best_epoch == 0


def test_early_stopping_restores_snapshot_before_increases(rng, monkeypatch):
    import iotab.neural as nn

    # validation loss: decreasing for 3 epochs, then strictly increasing
    losses = iter([0.5, 0.4, 0.3] + [0.31 + 0.01 * k for k in range(20)])
    real_forward = nn.forward
    seen = {}

    def fake_forward(params, x, train=False, rng=None):
        out = real_forward(params, x, train, rng)
        if not train:
            v = next(losses)
            seen[len(seen)] = params.theta.copy()
            return np.full(x.shape[0], np.sqrt(v))
        return out

    monkeypatch.setattr(nn, "forward", fake_forward)
    cfg = NetworkConfig(2, width=4, n_blocks=1, batch_size=8, max_epochs=50, patience=10)
    x = rng.normal(size=(40, 2))
    res = train_network(x, np.zeros(40), cfg, np.random.default_rng(0))
    assert res.epochs_run == 13
    assert res.best_epoch == 3
    assert np.array_equal(res.params.theta, seen[2])


def test_overfit_small_problem(rng):
    # capacity smoke test; batch norm is off because its batch statistics on
    # 8-row batches keep the training loss near 1e-2
    x = rng.normal(size=(64, 3))
    t = x @ np.array([0.5, -0.3, 0.2])
    cfg = NetworkConfig(3, width=32, n_blocks=2, dropout_after=(), l1_lambda=0.0, head="identity",
                        batch_norm=False, batch_size=8, max_epochs=200, patience=200)
    res = train_network(x, t, cfg, np.random.default_rng(1))
    assert res.history[-1][0] < 1e-3
    assert np.all(np.isfinite(forward(res.params, x)))


def test_too_little_data(rng):
    with pytest.raises(TrainingError):
        train_network(rng.normal(size=(10, 2)), np.zeros(10), NetworkConfig(2, batch_size=8), rng)


def test_zero_item_is_constant(rng):
    m = train_item(ItemAddress.parse("a_1_2"), rng.normal(size=(50, 3)), np.zeros(50),
                   NetworkConfig(3, width=4, n_blocks=1), seed=0)
    assert m.is_constant and m.params is None
    assert np.all(predict_item(m, rng.normal(size=(7, 3))) == 0.0)


def test_sigmoid_item_in_scaler_range(rng):
    x = rng.normal(size=(80, 3))
    y = 0.1 + 0.05 * np.tanh(x[:, 0])
    base = NetworkConfig(3, width=8, n_blocks=1, dropout_after=(), batch_size=16, max_epochs=5)
    m = train_item(ItemAddress.parse("y_1"), x, y, base, seed=3, pipeline_ref="abc")
    assert isinstance(m.scaler, BoundedScaler)
    probe = rng.normal(size=(200, 3)) * 50
    pred = predict_item(m, probe, "abc")
    assert np.all(pred >= m.scaler.y_l) and np.all(pred <= m.scaler.y_u)
    assert np.array_equal(pred, predict_item(m, probe, "abc"))
    with pytest.raises(ValueError, match="pipeline"):
        predict_item(m, x, "other")


def test_item_seed_reproducible(rng):
    x = rng.normal(size=(64, 3))
    y = x[:, 0] * 0.01
    base = NetworkConfig(3, width=8, n_blocks=1, batch_size=16, max_epochs=3)
    a = train_item(ItemAddress.parse("v_1_1"), x, y, base, seed=5)
    b = train_item(ItemAddress.parse("v_1_1"), x, y, base, seed=5)
    assert a.params.to_bytes() == b.params.to_bytes()
    assert a.params.cfg.head == "identity"


def test_model_store_round_trip(tmp_path, rng):
    x = rng.normal(size=(64, 3))
    base = NetworkConfig(3, width=8, n_blocks=2, batch_size=16, max_epochs=3)
    m = train_item(ItemAddress.parse("d_2_1"), x, x[:, 1], base, seed=1, pipeline_ref="ref1")
    d = save_item_model(m, tmp_path)
    assert d.name == "d_2_1"
    assert {p.name for p in d.iterdir()} == {"meta.csv", "weights.bin", "scaler.csv", "history.csv"}
    n_values = m.params.theta.size + sum(v.size for v in m.params.stats.values())
    assert (d / "weights.bin").stat().st_size == 8 * n_values
    back = load_item_model(d)
    assert back.params.to_bytes() == m.params.to_bytes()
    assert back.history == m.history
    np.testing.assert_array_equal(predict_item(back, x), predict_item(m, x))
    c = TrainedItemModel(ItemAddress.parse("a_1_1"), Constant(0.0), "ref1")
    back_c = load_item_model(save_item_model(c, tmp_path))
    assert back_c.is_constant and back_c.params is None


def test_weights_file_layout(rng):
    cfg = NetworkConfig(2, width=3, n_blocks=1)
    p = init_network(cfg, rng)
    flat = np.frombuffer(p.to_bytes(), dtype="<f8")
    order = ["in.W", "in.b", "b1.W", "b1.b", "b1.gamma", "b1.beta", "b1.mean", "b1.var", "out.W", "out.b"]
    parts = [p.p[n] if n in p.p else p.stats[n] for n in order]
    np.testing.assert_array_equal(flat, np.concatenate([a.ravel() for a in parts]))
    with pytest.raises(ValueError):
        NetworkParams.from_bytes(cfg, p.to_bytes()[:-8])


def test_head_only_loss_non_increasing(rng):
    cfg = NetworkConfig(3, width=1, n_blocks=0, head="identity", l1_lambda=1e-3)
    p = init_network(cfg, rng)
    x, t = rng.normal(size=(20, 3)), rng.normal(size=20)
    prev = None
    for _ in range(50):
        pred, cache = forward(p, x, train=True)
        loss = loss_value(p, pred, t)
        if prev is not None:
            assert loss <= prev + 1e-12
        prev = loss
        p.theta -= 1e-3 * backward(p, cache, t)
