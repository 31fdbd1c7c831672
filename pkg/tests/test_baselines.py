import numpy as np
import pytest

from dit_lab import analytics, baselines, data, numkit, trainer
from dit_lab.dit import TimeWindow
from dit_lab.errors import ContractError
from dit_lab.numkit import ModelSpec
from dit_lab.trainer import TrainConfig


def _lr_fixture(seed=0, N=20, n_test=20, d=3, T=40, B=5, lr=0.2):
    full = data.make_synthetic(seed, N + n_test, d, 2.0)
    train, test = data.split(full, N)
    model = ModelSpec("logistic", d)
    cfg = TrainConfig(steps=T, batch_size=B, lr=lr, seed=seed)
    store = trainer.train(train, model, cfg)
    return train, test, model, cfg, store


def test_unsampled_sample_has_zero_loo():
    train, test, model, _, _ = _lr_fixture(N=6)
    cfg = TrainConfig(steps=4, batch_size=2, lr=0.3)
    batches = [np.array([0, 1]), np.array([2, 3]), np.array([1, 2]), np.array([0, 3])]
    for j in (4, 5):
        assert baselines.loo_influence(train, model, cfg, batches, j, test).delta_test_loss == 0.0


def test_loo_matches_hand_replay():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([1.0, 0.0, 1.0])
    ds = data.Dataset(X, y)
    test = data.Dataset(np.array([[0.5, 0.5], [-1.0, 0.2]]), np.array([1.0, 0.0]))
    model = ModelSpec("logistic", 2)
    cfg = TrainConfig(steps=3, batch_size=1, lr=0.5, seed=0)
    batches = [np.array([2]), np.array([0]), np.array([1])]

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    def step(th, i):
        u = np.append(X[i], 1.0)
        return th - 0.5 * (sig(th @ u) - y[i]) * u

    def test_loss(th):
        U = np.hstack([test.X, np.ones((2, 1))])
        p = sig(U @ th)
        return float(np.mean(-(test.y * np.log(p) + (1 - test.y) * np.log(1 - p))))

    theta0 = numkit.init_params(model, 0)
    normal = [theta0]
    for i in (2, 0, 1):
        normal.append(step(normal[-1], i))
    counter = [theta0, step(theta0, 2)]
    counter.append(counter[-1])
    counter.append(step(counter[-1], 1))
    want = (test_loss(counter[3]) - test_loss(theta0)) - (test_loss(normal[3]) - test_loss(theta0))
    got = baselines.loo_influence(ds, model, cfg, batches, 0, test).delta_test_loss
    assert got == pytest.approx(want, rel=1e-12, abs=1e-15)
    # a window starting after the skipped step
    w = TimeWindow(1, 3)
    want_w = (test_loss(counter[3]) - test_loss(counter[1])) - (test_loss(normal[3]) - test_loss(normal[1]))
    got_w = baselines.loo_influence(ds, model, cfg, batches, 0, test, window=w).delta_test_loss
    assert got_w == pytest.approx(want_w, rel=1e-12, abs=1e-15)


def test_loo_vectorised_paths_agree():
    train, test, model, cfg, store = _lr_fixture()
    batches = store.batches()
    ws = [TimeWindow(0, 40), TimeWindow(10, 30)]
    M = baselines.loo_windows(train, model, cfg, batches, test, ws, indices=[3, 8], reference=store)
    for r, j in enumerate([3, 8]):
        for c, w in enumerate(ws):
            assert M[r, c] == baselines.loo_influence(train, model, cfg, batches, j, test, window=w).delta_test_loss
    full = baselines.loo_all(train, model, cfg, batches, test, reference=store)
    assert full.shape == (20,) and full[3] == M[0, 0]


def test_loo_parallel_matches_serial():
    train, test, model, cfg, store = _lr_fixture()
    a = baselines.loo_all(train, model, cfg, store.batches(), test, reference=store)
    b = baselines.loo_all(train, model, cfg, store.batches(), test, reference=store, jobs=2)
    np.testing.assert_array_equal(a, b)


def test_resampled_loo_differs_from_replay():
    train, test, model, cfg, store = _lr_fixture()
    a = baselines.loo_influence(train, model, cfg, store.batches(), 2, test, reference=store)
    b = baselines.loo_influence(train, model, cfg, store.batches(), 2, test, reference=store, resample=True)
    assert np.isfinite(b.delta_test_loss) and a.delta_test_loss != b.delta_test_loss


def test_one_epoch_series_equals_windowed_loo():
    train, test, model, _, _ = _lr_fixture(T=4)
    cfg = TrainConfig(steps=4, batch_size=5, lr=0.2, seed=0)
    batches = trainer.sample_batches(20, 4, 5, 0)
    s = baselines.loo_epoch_series(train, model, cfg, batches, [1, 7], test)
    assert s.values.shape == (2, 1)
    for r, j in enumerate([1, 7]):
        assert s.values[r, 0] == baselines.loo_influence(train, model, cfg, batches, j, test).delta_test_loss
    again = baselines.loo_epoch_series(train, model, cfg, batches, [1, 7], test)
    np.testing.assert_array_equal(s.values, again.values)


def test_epoch_series_validation():
    train, test, model, cfg, store = _lr_fixture()
    with pytest.raises(ContractError):
        baselines.loo_epoch_series(train, model, cfg, store.batches(), [25], test)
    with pytest.raises(ContractError):
        baselines.epoch_windows(3, 4)


def test_late_epoch_loo_shrinks():
    train, test, model, cfg, store = _lr_fixture(seed=1, N=100, n_test=100, d=5, T=200, B=10, lr=0.1)
    rng = np.random.default_rng(0)
    subset = rng.choice(100, size=64, replace=False)
    s = baselines.loo_epoch_series(train, model, cfg, store.batches(), subset, test, reference=store)
    assert s.values.shape == (64, 20)
    norms = np.linalg.norm(s.values, axis=0)
    assert norms[-5:].mean() < norms[:5].mean()


def test_if_zero_gradient_gives_zero_score():
    train, test, model, _, _ = _lr_fixture()
    model = ModelSpec("least_squares", 3)
    theta = np.array([0.3, -0.2, 0.5, 0.0])
    x0 = train.X[0]
    theta[-1] = train.y[0] - theta[:3] @ x0
    assert np.allclose(numkit.grad(model, theta, train[0]), 0.0)
    r = baselines.if_influence(train, model, theta, 0, test)
    assert abs(r.score) <= 1e-15 and r.damping > 0


def test_if_matches_closed_form_quadratic():
    train, test, _, _, _ = _lr_fixture()
    model = ModelSpec("least_squares", 3)
    theta = np.array([0.1, 0.4, -0.3, 0.2])
    U = np.hstack([train.X, np.ones((20, 1))])
    H = U.T @ U / 20
    Ut = np.hstack([test.X, np.ones((20, 1))])
    g_test = Ut.T @ (Ut @ theta - test.y) / 20
    g = (U @ theta - train.y)[:, None] * U
    want = -(g @ np.linalg.solve(H, g_test))
    scores, lam = baselines.if_scores(train, model, theta, test, damping=1e-13)
    np.testing.assert_allclose(scores, want, rtol=1e-8)


def test_if_default_damping_scale():
    H = np.diag([2.0, 4.0, 6.0])
    assert baselines.default_damping(H) == pytest.approx(4e-3)


def test_if_rejects_bad_damping():
    train, test, model, _, store = _lr_fixture()
    with pytest.raises(ContractError):
        baselines.if_scores(train, model, store.params_at(40), test, damping=0.0)


def test_if_orientation_matches_loo_on_convex_lr():
    taus, top = [], 0
    model = ModelSpec("logistic", 2)
    for seed in range(8):
        full = data.make_synthetic(seed, 60, 2, 1.0)
        train, test = data.split(full, 10)
        cfg = TrainConfig(steps=300, batch_size=10, lr=0.5, seed=seed)
        store = trainer.train(train, model, cfg)
        est, _ = baselines.if_removal_estimates(train, model, store.params_at(300), test)
        loo = baselines.loo_all(train, model, cfg, store.batches(), test, reference=store)
        taus.append(analytics.kendall_tau(est, loo))
        top += int(np.argmax(est)) == int(np.argmax(loo))
    assert min(taus) > 0
    assert top >= 5


def test_if_result_removal_estimate():
    r = baselines.IfResult(j=0, score=-2.0, damping=0.1, n_train=4)
    assert r.removal_estimate == 0.5
