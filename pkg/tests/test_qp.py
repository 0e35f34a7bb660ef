import numpy as np
import pytest

from mpc_battery_rl import qp
from mpc_battery_rl.qp import QpProblem, kkt_residual, solve
from oracles import enumerate_active_sets, random_qp


def test_scalar_lower_bound():
    # min x^2 s.t. x >= 1
    p = QpProblem(H=[[2.0]], g=[0.0], A=None, b=None, C=[[-1.0]], d=[-1.0])
    s = solve(p)
    assert s.solved
    assert s.x[0] == pytest.approx(1.0, abs=1e-8)
    assert s.mu[0] == pytest.approx(2.0, abs=1e-6)
    assert list(s.active_set) == [0]


def test_simplex_equality():
    # min 1/2 |x|^2 s.t. sum x = 1
    p = QpProblem(H=np.eye(3), g=np.zeros(3), A=np.ones((1, 3)), b=[1.0], C=None, d=None)
    s = solve(p)
    assert np.allclose(s.x, 1 / 3, atol=1e-8)
    assert s.lam[0] == pytest.approx(-1 / 3, abs=1e-8)


def test_hand_residual_is_exactly_zero():
    p = QpProblem(H=[[2.0]], g=[0.0], A=None, b=None, C=[[-1.0]], d=[-1.0])
    R = kkt_residual(p, [1.0], [], [2.0])
    assert np.all(R == 0.0)


def test_residual_detects_perturbation():
    p = QpProblem(H=np.eye(3), g=np.zeros(3), A=np.ones((1, 3)), b=[1.0], C=None, d=None)
    s = solve(p)
    R = kkt_residual(p, s.x + 1e-3, s.lam, s.mu)
    assert np.abs(R[:3]).max() > 0


@pytest.mark.parametrize("seed", range(5))
def test_random_against_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    H, g, A, b, C, d = random_qp(rng, n_max=12)
    s = solve(QpProblem(H, g, A, b, C, d))
    val, _ = enumerate_active_sets(H, g, A, b, C, d)
    assert s.solved
    assert abs(0.5 * s.x @ H @ s.x + g @ s.x - val) <= 1e-6
    R = kkt_residual(QpProblem(H, g, A, b, C, d), s.x, s.lam, s.mu)
    assert np.abs(R).max() <= 1e-6
    assert s.mu.min() >= -1e-9


def test_linear_program_with_tie_is_solved():
    # flat cost along x1 + x2; Tikhonov term picks the midpoint
    p = QpProblem(H=np.zeros((2, 2)), g=[-1.0, -1.0], A=None, b=None,
                  C=[[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], d=[1.0, 0.0, 0.0])
    s = solve(p)
    assert s.solved
    assert s.x.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.allclose(s.x, 0.5, atol=1e-6)


def test_nonconvex_rejected():
    p = QpProblem(H=[[-1.0]], g=[0.0], A=None, b=None, C=[[1.0], [-1.0]], d=[1.0, 1.0])
    with pytest.raises(qp.NonConvexError):
        solve(p)


def test_infeasible_status():
    p = QpProblem(H=[[1.0]], g=[0.0], A=None, b=None, C=[[1.0], [-1.0]], d=[-1.0, -1.0])
    s = solve(p)
    assert not s.solved


def test_deterministic():
    rng = np.random.default_rng(7)
    data = random_qp(rng)
    a = solve(QpProblem(*data))
    b = solve(QpProblem(*data))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.mu, b.mu)


def test_dump_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    p = QpProblem(*random_qp(rng))
    path = tmp_path / "qp.txt"
    p.dump(path)
    q = QpProblem.load(path)
    for name in ("H", "A", "C"):
        assert (getattr(p, name) != getattr(q, name)).nnz == 0
    for name in ("g", "b", "d"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        QpProblem(H=np.eye(2), g=np.zeros(3), A=None, b=None, C=None, d=None)
