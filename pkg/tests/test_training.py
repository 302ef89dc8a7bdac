import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from precor.graphnet import GnnConfig, flatten_params, forward, init_params, unflatten_params
from precor.icfactor import FactorizationConfig, ic0
from precor.pdegen import build_dataset, make_system
from precor.training import (
    Adam,
    LossClosure,
    LossSpec,
    TrainConfig,
    _probes,
    dataset_loss,
    factor_loss,
    grad,
    inplace_ic_update,
    loss_unweighted_hutchinson,
    loss_weighted,
    train,
)

CFG = GnnConfig(rounds_T=2, hidden=5, mlp_hidden_layers=1, activation="tanh")


@pytest.fixture(scope="module")
def systems():
    return [make_system("diffusion", 5, 0.5, s) for s in (11, 12, 13)]


def _params(alpha=0.3, seed=3):
    p = init_params(CFG, seed)
    p.alpha = alpha
    return p


def _dense_factor(params, system):
    return forward(params, CFG, ic0(system.A).L).L.to_dense()


def test_weighted_loss_matches_dense_oracle(systems):
    p = _params()
    want = np.mean([np.sum((_dense_factor(p, s) @ _dense_factor(p, s).T @ s.x_ref - s.b) ** 2) for s in systems])
    got = loss_weighted(p, CFG, systems, [ic0(s.A) for s in systems])
    assert got == pytest.approx(want, rel=1e-10)


def test_unweighted_loss_matches_dense_oracle(systems):
    p = _params()
    want = []
    for k, s in enumerate(systems):
        L = _dense_factor(p, s)
        eps = _probes(s.n, 4, 7, k)
        want.append(np.sum(((L @ L.T - s.A.to_dense()) @ eps) ** 2) / 4)
    got = loss_unweighted_hutchinson(p, CFG, systems, [ic0(s.A) for s in systems], probe_seed=7, n_probes=4)
    assert got == pytest.approx(np.mean(want), rel=1e-10)


def test_hutchinson_estimates_frobenius_norm(systems):
    s = systems[0]
    F = ic0(s.A)
    L = F.L.to_dense()
    frob = np.sum((L @ L.T - s.A.to_dense()) ** 2)
    est = loss_unweighted_hutchinson(init_params(CFG), CFG, [s], [F], probe_seed=1, n_probes=4000)
    assert est == pytest.approx(frob, rel=0.1)


def test_zero_alpha_reproduces_ic0_loss(systems):
    factors = [ic0(s.A) for s in systems]
    got = loss_weighted(init_params(CFG), CFG, systems, factors)
    assert got == pytest.approx(np.mean([factor_loss(s, f) for s, f in zip(systems, factors)]), rel=1e-12)


@pytest.mark.parametrize("kind", ["weighted", "unweighted"])
def test_gradient_matches_finite_differences(systems, kind):
    p = _params()
    closure = LossClosure(CFG, systems[:2], [ic0(s.A) for s in systems[:2]], LossSpec(kind, 3), probe_seed=5)
    theta = flatten_params(p)
    g = grad(p, closure)
    rng = np.random.default_rng(0)
    for _ in range(4):
        d = rng.standard_normal(theta.size)
        h = 1e-6
        fd = (closure(theta + h * d) - closure(theta - h * d)) / (2 * h)
        assert g @ d == pytest.approx(fd, rel=1e-5, abs=1e-8)
    fd_alpha = (closure(theta + 1e-6 * np.eye(theta.size)[-1]) - closure(theta - 1e-6 * np.eye(theta.size)[-1])) / 2e-6
    assert g[-1] == pytest.approx(fd_alpha, rel=1e-5)


def test_empty_batch_is_zero():
    closure = LossClosure(CFG, [], [])
    val, g = closure.value_and_grad(init_params(CFG))
    assert val == 0.0 and not g.any()
    assert dataset_loss(init_params(CFG), CFG, [], [], LossSpec()) == 0.0


def test_closure_validates_inputs(systems):
    with pytest.raises(ValueError):
        LossClosure(CFG, systems, [ic0(systems[0].A)])
    with pytest.raises(ValueError):
        LossSpec("frobenius")
    with pytest.raises(ValueError):
        LossSpec(n_probes=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_adam_against_hand_computation():
    opt = Adam(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    theta = np.array([1.0, -2.0])
    g1, g2 = np.array([0.5, -3.0]), np.array([1.0, 1.0])
    t1 = opt.step(theta, g1)
    np.testing.assert_allclose(t1, theta - 0.1 * np.sign(g1), rtol=1e-7)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    mhat, vhat = m / (1 - 0.81), v / (1 - 0.999**2)
    np.testing.assert_allclose(opt.step(t1, g2), t1 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), rtol=1e-12)


@given(x0=st.floats(-5, 5), c=st.floats(0.5, 4))
def test_adam_minimises_quadratic(x0, c):
    opt = Adam(lr=0.05)
    x = np.array([x0])
    for _ in range(2000):
        x = opt.step(x, 2 * c * x)
    assert abs(x[0]) < 0.05


@pytest.fixture(scope="module")
def tiny():
    return build_dataset("diffusion", 6, 0.5, 6, 3, 5)


def test_train_smoke_and_determinism(tiny):
    tc = TrainConfig(epochs=3, batch_size=2, learning_rate=1e-2, patience=None)
    r1 = train(tiny, FactorizationConfig(), CFG, LossSpec(), tc)
    r2 = train(tiny, FactorizationConfig(), CFG, LossSpec(), tc)
    assert r1.alpha[0] == 0.0
    assert len(r1.test_loss) == len(r1.train_loss) == len(r1.alpha) == 4
    assert r1.steps == 9 and r1.status == "ok"
    assert np.all(np.isfinite(r1.test_loss))
    assert r1.test_loss == r2.test_loss
    np.testing.assert_array_equal(flatten_params(r1.params), flatten_params(r2.params))
    assert r1.test_loss[r1.best_epoch] == min(r1.test_loss)
    factors = [ic0(s.A) for s in tiny["test"]]
    best = dataset_loss(r1.params, CFG, tiny["test"], factors, LossSpec(), batch_size=2)
    assert best == pytest.approx(min(r1.test_loss), rel=1e-12)


def test_training_reduces_weighted_loss(tiny):
    r = train(tiny, FactorizationConfig(), CFG, LossSpec(), TrainConfig(epochs=6, batch_size=2, learning_rate=1e-2))
    assert min(r.test_loss[1:]) < r.test_loss[0]


def test_early_stopping(tiny):
    r = train(tiny, FactorizationConfig(), CFG, LossSpec(), TrainConfig(epochs=10, batch_size=3, learning_rate=0.0, patience=2))
    assert r.status == "early-stopped"
    assert len(r.test_loss) == 3 and r.best_epoch == 0


def test_train_rejects_empty_training_set(tiny):
    with pytest.raises(ValueError):
        train({"train": [], "test": tiny["test"]}, FactorizationConfig(), CFG)


def test_grad_clip_bounds_first_step(tiny):
    tc = TrainConfig(epochs=1, batch_size=6, learning_rate=1e-2, grad_clip=1e-9, shuffle=False)
    r = train({"train": tiny["train"], "test": tiny["test"]}, FactorizationConfig(), CFG, LossSpec(), tc)
    assert r.status == "ok" and r.steps == 1


def test_inplace_update_is_monotone(systems):
    s = systems[0]
    history = []
    F = inplace_ic_update(s, ic0(s.A), steps=40, lr=1e-2, history=history)
    assert len(history) >= 2
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert history[-1] < history[0]
    assert F.provenance == "inplace-updated"
    assert F.L.same_pattern(ic0(s.A).L)
    assert factor_loss(s, F) == pytest.approx(history[-1], rel=1e-12)
    assert inplace_ic_update(s, ic0(s.A), steps=0).provenance == "ic0"


def test_unflatten_round_trip():
    p = _params()
    theta = flatten_params(p)
    np.testing.assert_array_equal(flatten_params(unflatten_params(theta, CFG)), theta)
