import numpy as np
import pytest
import scipy.sparse as sp

from mpc_battery_rl import mpc, qp
from mpc_battery_rl.model import FleetConfig, step_dynamics
from mpc_battery_rl.mpc import GROUPS, MpcConfig, Theta, build_qp, evaluate, project_theta
from mpc_battery_rl.prices import synth_daily

CFG = FleetConfig()
MC = MpcConfig()
PRICES = synth_daily()


def test_theta_flatten_roundtrip():
    th = Theta.unflatten(np.arange(30.0), 3)
    assert np.array_equal(th.phi1, [12, 13, 14])
    assert np.array_equal(th.flatten(), np.arange(30.0))
    assert Theta.from_dict(th.to_dict()).flatten().tolist() == th.flatten().tolist()
    assert Theta.labels(3)[:2] == ["theta_alpha_1", "theta_alpha_2"]
    assert len(GROUPS) == 10


def test_project_theta():
    th = Theta.nominal(CFG)
    assert np.array_equal(project_theta(th).flatten(), th.flatten())
    th.phi1[0] = -0.2
    th.theta_alpha[1] = 0.0
    th.t1[2] = -1.0
    th.phi2[0] = -5.0
    p = project_theta(th)
    assert p.phi1[0] == 0 and p.theta_alpha[1] == mpc.ALPHA_MIN and p.t1[2] == 0
    assert p.phi2[0] == -5.0
    p.validate()
    with pytest.raises(ValueError):
        th.validate()


def test_dimensions():
    p = build_qp(Theta.nominal(CFG), [0.6] * 3, PRICES.forecast_window(0, 12), CFG, MC)
    assert (p.n, p.m_eq, p.m_ineq) == (189, 39, 324)
    assert len(mpc.layout(3, 12).var_names()) == 189


def test_lp_structure_without_regularization():
    p = build_qp(Theta.nominal(CFG), [0.6] * 3, PRICES.forecast_window(0, 12), CFG,
                 MpcConfig(u_reg=0.0))
    assert p.H.nnz == 0 or abs(p.H).max() == 0


def test_dynamics_rows_match_simulator():
    th = Theta.nominal(CFG)
    p = build_qp(th, [0.6] * 3, PRICES.forecast_window(0, 12), CFG, MC)
    rng = np.random.default_rng(0)
    L = mpc.layout(3, 12)
    x = np.zeros(p.n)
    soc = np.full(3, 0.6)
    x[L.soc[:, 0]] = soc
    for j in range(12):
        a = rng.uniform(-1, 1, 3)
        x[L.buy[:, j]], x[L.sell[:, j]] = np.maximum(a, 0), np.maximum(-a, 0)
        soc = step_dynamics(soc, a, np.zeros(3), CFG)
        x[L.soc[:, j + 1]] = soc
    assert np.abs(p.A @ x - p.b).max() <= 1e-12


def test_policy_feasible_and_buys_when_pushed_up():
    th = Theta.nominal(CFG)
    th.phi1[:] = 100.0
    th.phi2[:] = -180.0  # stage cost minimized at soc 0.9
    res = evaluate(th, [0.5] * 3, PRICES.forecast_window(2, 12), CFG, MC)
    a = res.action
    assert np.all(a > 0)
    assert np.all(np.abs(a) <= CFG.u_max + 1e-9)
    assert np.maximum(a, 0).sum() <= CFG.p_max + 1e-6


def test_symmetric_agents_share_binding_peak():
    th = Theta.nominal(CFG)
    th.phi1[:] = 100.0
    th.phi2[:] = -180.0  # every agent wants to charge at full power
    a = evaluate(th, [0.2] * 3, PRICES.forecast_window(0, 12), CFG, MC).action
    assert np.allclose(a, 0.5, atol=1e-6)
    assert a.sum() == pytest.approx(CFG.p_max, abs=1e-6)


def test_single_stage_grid_oracle():
    cfg = FleetConfig(n=1, p_max=0.9)
    mc = MpcConfig(N=1, u_reg=1e-8)
    th = Theta.nominal(cfg)
    th.phi1[:], th.phi2[:] = 10.0, -10.0
    window = (np.array([1.0]), np.array([0.5]))
    a = evaluate(th, [0.3], window, cfg, mc).action[0]

    def cost(u):
        b, s = max(u, 0), max(-u, 0)
        nxt = 0.3 + cfg.alpha[0] * u
        slack = 20 * (max(nxt - 0.9, 0) + max(0.1 - nxt, 0)) + 20 * (max(0.3 - 0.9, 0) + max(0.1 - 0.3, 0))
        return b - 0.5 * s + 10 * 0.3 ** 2 - 10 * 0.3 + slack + 1e-8 * (b * b + s * s)

    grid = np.linspace(-0.9, 0.9, 1801)
    best = grid[np.argmin([cost(u) for u in grid])]
    assert abs(a - best) <= 1e-3


@pytest.mark.parametrize("seed", range(40))
def test_always_solved_and_peak_respected(seed):
    rng = np.random.default_rng(seed)
    th = Theta.nominal(CFG)
    th = project_theta(Theta.unflatten(th.flatten() + np.r_[rng.normal(0, 0.01, 6),
                                                            rng.normal(0, 3, 24)], 3))
    soc = rng.uniform(0, 1, 3)
    res = evaluate(th, soc, PRICES.forecast_window(int(rng.integers(24)), 12), CFG, MC)
    sol = res.solution
    assert sol.solved
    R = qp.kkt_residual(res.problem, sol.x, sol.lam, sol.mu,
                        H=res.problem.H + qp.EPS_REG * sp.identity(res.problem.n))
    assert np.abs(R).max() <= 1e-6
    b, s = np.maximum(res.action, 0), np.maximum(-res.action, 0)
    assert b.sum() <= CFG.p_max + 1e-6 and s.sum() <= CFG.p_max + 1e-6


def _fd(th, soc, window, cfg, mc, h=1e-5):
    f = th.flatten()
    out = np.zeros((f.size, cfg.n))
    for k in range(f.size):
        e = np.zeros(f.size)
        e[k] = h
        out[k] = (mpc.policy(Theta.unflatten(f + e, cfg.n), soc, window, cfg, mc)
                  - mpc.policy(Theta.unflatten(f - e, cfg.n), soc, window, cfg, mc)) / (2 * h)
    return out


def test_sensitivity_matches_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 4:
        th = Theta.nominal(CFG)
        th = project_theta(Theta.unflatten(th.flatten() + np.r_[rng.normal(0, 0.01, 6),
                                                                rng.normal(0, 2, 24)], 3))
        th.phi1 += rng.uniform(0, 20, 3)
        th.t1 += rng.uniform(0, 20, 3)
        soc = rng.uniform(0, 1, 3)
        window = PRICES.forecast_window(int(rng.integers(24)), 12)
        res = evaluate(th, soc, window, CFG, MC, sensitivity=True)
        if res.degenerate:
            continue
        fd = _fd(th, soc, window, CFG, MC)
        assert np.all(np.abs(fd - res.sensitivity) <= 1e-4 * np.abs(fd) + 1e-7)
        checked += 1


def test_decoupled_agents_have_block_diagonal_sensitivity():
    with pytest.warns(UserWarning):
        cfg = FleetConfig(u_max=0.45)  # peak rows can never bind
    rng = np.random.default_rng(4)
    found = 0
    for _ in range(20):
        th = Theta.nominal(cfg)
        th.phi1[:] = rng.uniform(20, 60, 3)
        th.phi2[:] = -th.phi1 * rng.uniform(0.8, 1.2, 3)
        th.t1[:] = 10.0
        res = evaluate(th, rng.uniform(0.3, 0.7, 3),
                       PRICES.forecast_window(int(rng.integers(24)), 12), cfg, MC,
                       sensitivity=True)
        if res.degenerate:
            continue
        S = res.sensitivity.reshape(len(GROUPS), 3, 3)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert np.abs(S[:, i, j]).max() <= 1e-9
        found += 1
    assert found >= 3


def test_bang_bang_plateau_has_zero_sensitivity():
    cfg = FleetConfig(n=1, p_max=0.9)
    th = Theta.nominal(cfg)
    th.phi1[:] = 100.0
    th.phi2[:] = -180.0  # charging pays off until 0.9, input sits at the peak bound
    res = evaluate(th, [0.1], PRICES.forecast_window(0, 12), cfg, MC, sensitivity=True)
    assert not res.degenerate
    assert res.action[0] == pytest.approx(0.9, abs=1e-7)
    assert np.abs(res.sensitivity).max() <= 1e-7


def test_full_kkt_agrees_with_reduced():
    th = Theta.nominal(CFG)
    th.phi1[:] = 20.0
    th.phi2[:] = -20.0
    res = evaluate(th, [0.3, 0.5, 0.7], PRICES.forecast_window(5, 12), CFG, MC, sensitivity=True)
    if not res.degenerate:
        full = mpc.sensitivity_full_kkt(th, res.problem, res.solution, CFG, MC)
        assert np.allclose(full, res.sensitivity, atol=1e-6)


def test_predicted_soc_matches_nominal_model():
    th = Theta.nominal(CFG)
    res = evaluate(th, [0.6] * 3, PRICES.forecast_window(0, 12), CFG, MC)
    L = mpc.layout(3, 12)
    soc = np.full(3, 0.6)
    pred = res.predicted_soc(CFG, MC)
    for j in range(12):
        a = res.solution.x[L.buy[:, j]] - res.solution.x[L.sell[:, j]]
        soc = step_dynamics(soc, a, CFG.delta_mean, CFG)
        assert np.allclose(pred[:, j + 1], soc, atol=1e-9)


def test_diagnostics_dump(tmp_path):
    th = Theta.nominal(CFG)
    res = evaluate(th, [0.6] * 3, PRICES.forecast_window(0, 12), CFG, MC)
    diag = mpc.diagnostics(th, res.problem, res.solution, CFG, MC, soc=[0.6] * 3)
    mpc.dump_diagnostics(tmp_path / "d.json", diag)
    import json
    data = json.loads((tmp_path / "d.json").read_text())
    assert data["status"] == "solved" and len(data["first_stage"]["buy"]) == 3


def test_window_length_checked():
    with pytest.raises(ValueError):
        build_qp(Theta.nominal(CFG), [0.6] * 3, PRICES.forecast_window(0, 5), CFG, MC)


def test_config_roundtrip():
    mc = MpcConfig(N=6, u_reg=0.5, sc_tol=1e-8)
    assert MpcConfig.from_dict(mc.to_dict()).to_dict() == mc.to_dict()
    with pytest.raises(ValueError):
        MpcConfig(omega=[0.0, 1.0])
