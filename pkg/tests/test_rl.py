import numpy as np
import pytest

from mpc_battery_rl import rl
from mpc_battery_rl.model import FleetConfig, Transition, rollout_month
from mpc_battery_rl.mpc import MpcConfig, Theta
from mpc_battery_rl.prices import synth_daily
from oracles import bellman_exact


def test_state_features():
    assert rl.state_features([0, 0, 0]).tolist() == [0, 0, 0, 0, 0, 0, 1]
    assert rl.state_features(0.5).tolist() == [0.25, 0.5, 1]
    assert rl.state_features([1, 1, 1]).tolist() == [1] * 7


def test_compatible_q():
    S = np.array([[2.0]])
    assert rl.compatible_q(0.3, [0.4], [0.4], [1.0], [1.0, 2.0, 3.0], S) == pytest.approx(
        rl.state_features(0.3) @ [1.0, 2.0, 3.0])
    assert rl.compatible_q(0.3, [0.4], [0.1], [0.0], [0.0] * 3, S) == 0.0
    # (a - pi) = 0.1, S'w = 2, Phi'v = 3
    v = np.array([0.0, 0.0, 3.0])
    assert rl.compatible_q(0.3, [0.6], [0.5], [1.0], v, S) == pytest.approx(3.2)


def test_lstd_self_loop():
    x = rl.lstd_solve(np.ones((50, 1)), np.ones((50, 1)), np.ones(50), 0.5, ridge=0.0)
    assert x[0] == 2.0


def test_lstd_two_state_chain():
    gamma = 0.99
    Z = np.array([[1.0, 0.0], [0.0, 1.0]] * 10)
    Zn = np.array([[0.0, 1.0], [1.0, 0.0]] * 10)
    c = np.array([1.0, 0.0] * 10)
    v = rl.lstd_solve(Z, Zn, c, gamma, ridge=0.0)
    exact = bellman_exact([[0, 1], [1, 0]], [1, 0], gamma)
    assert np.abs(v - exact).max() <= 1e-9


def _transition(rng, n=2, terminal=False, action=None):
    soc = rng.uniform(0, 1, n)
    planned = rng.uniform(-1, 1, n)
    return Transition(
        day=0, hour=0, soc=soc, action=planned if action is None else action, planned=planned,
        buy_price=np.ones(n), sell_price=np.ones(n), noise=np.zeros(n),
        correction=np.zeros(n), next_soc=rng.uniform(0, 1, n), cost=float(rng.normal()),
        agent_cost=np.zeros(n), terminal=terminal, sensitivity=rng.normal(size=(20, n)))


def _batch(seed, size=60, on_policy=False):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(size):
        t = _transition(rng, terminal=(k % 24 == 23))
        if not on_policy:
            t.action = t.planned + rng.normal(0, 0.1, 2)
        out.append(t)
    return out


def test_lstd_order_invariance():
    batch = _batch(0)
    a = rl.lstd_fit(batch, 0.9)
    perm = np.random.default_rng(1).permutation(len(batch))
    b = rl.lstd_fit([batch[i] for i in perm], 0.9)
    assert np.abs(a.w - b.w).max() <= 1e-12 and np.abs(a.v - b.v).max() <= 1e-12


def test_on_policy_batch_leaves_w_to_ridge():
    cw = rl.lstd_fit(_batch(2, on_policy=True), 0.9)
    assert np.linalg.norm(cw.w) <= 1e-3


def test_critic_features_layout():
    batch = _batch(3, size=24)
    Z, Zn, c = rl.critic_features(batch)
    t = batch[0]
    assert np.allclose(Z[0, :20], t.sensitivity @ (t.action - t.planned))
    assert np.allclose(Z[0, 20:], rl.state_features(t.soc))
    assert np.all(Zn[0, :20] == 0) and np.allclose(Zn[0, 20:], rl.state_features(t.next_soc))
    assert np.all(Zn[23] == 0)  # terminal


def test_policy_gradient_properties():
    batch = _batch(4)
    w = np.random.default_rng(5).normal(size=20)
    rep = rl.policy_gradient(batch, w, month_index=3)
    M = np.mean([t.sensitivity @ t.sensitivity.T for t in batch], axis=0)
    assert np.allclose(rep.grad, M @ w)
    assert rep.grad @ w >= 0
    assert rep.grad_norm == pytest.approx(np.linalg.norm(rep.grad))
    assert rep.month_index == 3 and rep.samples_used == len(batch)
    assert np.all(rl.policy_gradient(batch, np.zeros(20)).grad == 0)


def test_degenerate_samples_counted():
    batch = _batch(6)
    for t in batch[:10]:
        t.degenerate = True
        t.sensitivity = np.zeros_like(t.sensitivity)
    rep = rl.policy_gradient(batch, np.ones(20))
    assert rep.samples_degenerate == 10 and rep.samples_used == len(batch) - 10


def test_critic_weights_reject_nan():
    with pytest.raises(rl.CriticError):
        rl.CriticWeights([np.nan], [0.0])
    with pytest.raises(rl.CriticError):
        rl.lstd_solve(np.array([[np.inf]]), np.zeros((1, 1)), np.ones(1), 0.9)


def test_update_theta():
    cfg = FleetConfig()
    th = Theta.nominal(cfg)
    g = np.arange(30.0)
    new = rl.update_theta(th, g)
    expected = th.flatten() - rl.STEP * g
    expected[12:15] = np.maximum(expected[12:15], 0)  # phi1
    expected[21:24] = np.maximum(expected[21:24], 0)  # t1
    assert np.array_equal(new.flatten(), expected)
    assert np.array_equal(rl.update_theta(th, np.zeros(30)).flatten(), th.flatten())
    push = np.zeros(30)
    push[12] = 1e9
    assert rl.update_theta(th, push).phi1[0] == 0.0
    with pytest.raises(ValueError):
        rl.update_theta(th, np.full(30, np.nan))


def test_update_theta_freeze_and_cap():
    th = Theta.nominal(FleetConfig())
    g = np.ones(30)
    new = rl.update_theta(th, g, step=1.0, freeze={"theta_alpha": True, "theta_delta": True},
                          max_norm=0.5)
    d = new.flatten() - th.flatten()
    assert np.all(d[:6] == 0)
    assert np.linalg.norm(d) <= 0.5 + 1e-12
    with pytest.raises(ValueError):
        rl.freeze_mask({"bogus": True}, 3)


def test_gradient_on_rollout_batch():
    cfg = FleetConfig(n=1, p_max=0.9)
    mc = MpcConfig(u_reg=1.0)
    batch = rollout_month(Theta.nominal(cfg), synth_daily(), cfg, 0, 0.2, mc, days=1,
                          with_sensitivity=True)
    cw = rl.lstd_fit(batch, cfg.gamma)
    rep = rl.policy_gradient(batch, cw.w)
    assert rep.grad.shape == (10,) and np.all(np.isfinite(rep.grad))
    assert rep.samples_used + rep.samples_degenerate == 24
