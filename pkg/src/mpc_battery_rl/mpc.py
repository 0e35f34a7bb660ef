"""Parametrized economic MPC for the battery fleet, and its sensitivity.

The MPC is assembled as a sparse convex QP. The policy is the first
planned net power of every agent. Its Jacobian with respect to the
parameters is obtained by implicit differentiation of the KKT conditions
at the solver optimum.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import qp
from .model import SOC_HIGH, SOC_LOW, FleetConfig

ALPHA_MIN = 1e-3
GROUPS = ("theta_alpha", "theta_delta", "theta_b", "theta_s",
          "phi1", "phi2", "phi3", "t1", "t2", "t3")


class MpcSolveError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Theta:
    """Learnable MPC parameters, one value per agent in each group.

    Flattened order is group-major: all ``theta_alpha`` entries, then all
    ``theta_delta``, ..., then all ``t3``.
    """

    theta_alpha: np.ndarray
    theta_delta: np.ndarray
    theta_b: np.ndarray
    theta_s: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.theta_alpha).size
        for name in GROUPS:
            setattr(self, name, np.broadcast_to(
                np.asarray(getattr(self, name), dtype=float), (n,)).copy())

    @property
    def n(self) -> int:
        return self.theta_alpha.size

    @classmethod
    def nominal(cls, cfg: FleetConfig) -> "Theta":
        """Certainty-equivalent start: true model gain, everything else 0."""
        z = np.zeros(cfg.n)
        return cls(cfg.alpha.copy(), z, z, z, z, z, z, z, z, z)

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name in GROUPS])

    @classmethod
    def unflatten(cls, vec, n: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.size != len(GROUPS) * n:
            raise ValueError(f"expected {len(GROUPS) * n} entries, got {vec.size}")
        return cls(*(vec[g * n:(g + 1) * n] for g in range(len(GROUPS))))

    def validate(self) -> None:
        if np.any(self.phi1 < 0) or np.any(self.t1 < 0):
            raise ValueError("phi1 and t1 must be nonnegative for a convex MPC")
        if np.any(self.theta_alpha < ALPHA_MIN):
            raise ValueError(f"theta_alpha must be >= {ALPHA_MIN}")
        if not np.all(np.isfinite(self.flatten())):
            raise ValueError("theta has non-finite entries")

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in GROUPS}

    @classmethod
    def from_dict(cls, data: dict) -> "Theta":
        return cls(*(data[name] for name in GROUPS))

    @staticmethod
    def labels(n: int) -> list[str]:
        return [f"{name}_{i + 1}" for name in GROUPS for i in range(n)]


def project_theta(theta: Theta) -> Theta:
    """Clip phi1, t1 to >= 0 and theta_alpha to >= ALPHA_MIN."""
    out = Theta.unflatten(theta.flatten(), theta.n)
    out.phi1 = np.maximum(out.phi1, 0.0)
    out.t1 = np.maximum(out.t1, 0.0)
    out.theta_alpha = np.maximum(out.theta_alpha, ALPHA_MIN)
    return out


@dataclass
class MpcConfig:
    N: int = 12
    omega: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0]))
    omega_f: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0]))
    gamma: float = 0.99
    u_reg: float = 1e-8
    tol: float = 1e-8
    sc_tol: float = 1e-9

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.omega_f = np.asarray(self.omega_f, dtype=float)
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if np.any(self.omega <= 0) or np.any(self.omega_f <= 0):
            raise ValueError("slack weights must be positive")

    def weights(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent (n, 2) slack weights; a single 2-vector is broadcast."""
        return (np.broadcast_to(self.omega, (n, 2)),
                np.broadcast_to(self.omega_f, (n, 2)))

    def to_dict(self) -> dict:
        return {"N": self.N, "omega": self.omega.tolist(), "omega_f": self.omega_f.tolist(),
                "gamma": self.gamma, "u_reg": self.u_reg, "tol": self.tol,
                "sc_tol": self.sc_tol}

    @classmethod
    def from_dict(cls, data: dict) -> "MpcConfig":
        return cls(**data)


class Layout:
    """Index bookkeeping for the stacked decision vector.

    Per agent: SOC (N+1), buys (N), sells (N), slack pairs 2(N+1).
    """

    def __init__(self, n: int, N: int):
        self.n, self.N = n, N
        self.block = 5 * N + 3
        self.nx = n * self.block
        base = np.arange(n)[:, None] * self.block
        self.soc = base + np.arange(N + 1)
        self.buy = base + N + 1 + np.arange(N)
        self.sell = base + 2 * N + 1 + np.arange(N)
        self.slack_hi = base + 3 * N + 1 + 2 * np.arange(N + 1)
        self.slack_lo = self.slack_hi + 1
        self.eq_init = np.arange(n) * (N + 1)
        self.eq_dyn = self.eq_init[:, None] + 1 + np.arange(N)
        self.m_eq = n * (N + 1)

    def var_names(self) -> list[str]:
        names = [""] * self.nx
        for i in range(self.n):
            for j in range(self.N + 1):
                names[self.soc[i, j]] = f"soc[{i},{j}]"
                names[self.slack_hi[i, j]] = f"sigma_hi[{i},{j}]"
                names[self.slack_lo[i, j]] = f"sigma_lo[{i},{j}]"
            for j in range(self.N):
                names[self.buy[i, j]] = f"b[{i},{j}]"
                names[self.sell[i, j]] = f"s[{i},{j}]"
        return names


@lru_cache(maxsize=16)
def layout(n: int, N: int) -> Layout:
    return Layout(n, N)


@lru_cache(maxsize=16)
def _inequalities(n: int, N: int, u_max: tuple, p_max: float):
    """Constant inequality system C x <= d (depends only on bounds)."""
    L = layout(n, N)
    rows, cols, vals, d = [], [], [], []
    r = 0

    def add(rr, cc, vv):
        rows.append(np.ravel(rr))
        cols.append(np.ravel(cc))
        vals.append(np.ravel(vv).astype(float))

    # SOC band: soc - sig_hi <= 0.9 ; -soc - sig_lo <= -0.1
    m = n * (N + 1)
    rr = r + np.arange(m)
    add(rr, L.soc, 1.0 * np.ones(m)); add(rr, L.slack_hi, -np.ones(m))
    d.append(np.full(m, SOC_HIGH)); r += m
    rr = r + np.arange(m)
    add(rr, L.soc, -np.ones(m)); add(rr, L.slack_lo, -np.ones(m))
    d.append(np.full(m, -SOC_LOW)); r += m
    # slack nonnegativity
    for idx in (L.slack_hi, L.slack_lo):
        rr = r + np.arange(m)
        add(rr, idx, -np.ones(m)); d.append(np.zeros(m)); r += m
    # input boxes
    ub = np.repeat(np.asarray(u_max), N)
    mN = n * N
    for idx in (L.buy, L.sell):
        rr = r + np.arange(mN)
        add(rr, idx, np.ones(mN)); d.append(ub); r += mN
        rr = r + np.arange(mN)
        add(rr, idx, -np.ones(mN)); d.append(np.zeros(mN)); r += mN
    # grid peak, per stage over agents
    for idx in (L.buy, L.sell):
        rr = r + np.broadcast_to(np.arange(N), (n, N))
        add(rr, idx, np.ones(mN)); d.append(np.full(N, p_max)); r += N
    C = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(r, L.nx))
    return C, np.concatenate(d)


def _window(window, N):
    buy, sell = (np.asarray(w, dtype=float).ravel() for w in window)
    if buy.size != N or sell.size != N:
        raise ValueError(f"price window must have length N={N}, got {buy.size}/{sell.size}")
    return buy, sell


def build_qp(theta: Theta, soc, window, cfg: FleetConfig, mpc_cfg: MpcConfig) -> qp.QpProblem:
    """Assemble the MPC as a QpProblem.

    ``window`` is a pair of arrays (buy prices, sell prices) of length N,
    shared by all agents.
    """
    n, N = cfg.n, mpc_cfg.N
    if theta.n != n:
        raise ValueError(f"theta is for {theta.n} agents, fleet has {n}")
    theta.validate()
    soc = np.asarray(soc, dtype=float).ravel()
    if soc.size != n:
        raise ValueError(f"soc must have {n} entries")
    buy, sell = _window(window, N)
    L = layout(n, N)
    disc = mpc_cfg.gamma ** np.arange(N)
    omega, omega_f = mpc_cfg.weights(n)

    h = np.zeros(L.nx)
    g = np.zeros(L.nx)
    h[L.soc[:, :N]] = 2.0 * theta.phi1[:, None] * disc
    h[L.soc[:, N]] = 2.0 * theta.t1
    g[L.soc[:, :N]] = theta.phi2[:, None] * disc
    g[L.soc[:, N]] = theta.t2
    h[L.buy] = 2.0 * mpc_cfg.u_reg
    h[L.sell] = 2.0 * mpc_cfg.u_reg
    g[L.buy] = (buy + theta.theta_b[:, None]) * disc
    g[L.sell] = -(sell + theta.theta_s[:, None]) * disc
    g[L.slack_hi[:, :N]] = omega[:, [0]] * disc
    g[L.slack_lo[:, :N]] = omega[:, [1]] * disc
    g[L.slack_hi[:, N]] = omega_f[:, 0]
    g[L.slack_lo[:, N]] = omega_f[:, 1]

    # equalities: soc_0 = soc ; soc_{j+1} - soc_j - ta*b_j + ta*s_j = td
    ta = np.repeat(theta.theta_alpha, N)
    rows = np.concatenate([L.eq_init, L.eq_dyn.ravel(), L.eq_dyn.ravel(),
                           L.eq_dyn.ravel(), L.eq_dyn.ravel()])
    cols = np.concatenate([L.soc[:, 0], L.soc[:, 1:].ravel(), L.soc[:, :N].ravel(),
                           L.buy.ravel(), L.sell.ravel()])
    vals = np.concatenate([np.ones(n), np.ones(n * N), -np.ones(n * N), -ta, ta])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(L.m_eq, L.nx))
    b = np.zeros(L.m_eq)
    b[L.eq_init] = soc
    b[L.eq_dyn] = theta.theta_delta[:, None]

    C, d = _inequalities(n, N, tuple(cfg.u_max.tolist()), cfg.p_max)
    return qp.QpProblem(sp.diags(h, format="csc"), g, A, b, C, d)


def kkt_theta_jacobian(theta: Theta, sol: qp.QpSolution, cfg: FleetConfig,
                       mpc_cfg: MpcConfig) -> sp.csc_matrix:
    """Partial derivatives of the stationarity and equality KKT blocks in theta.

    Returns a (nx + m_eq) x |theta| matrix. The complementarity block does
    not depend on theta (C and d are parameter free).
    """
    n, N = cfg.n, mpc_cfg.N
    L = layout(n, N)
    nx = L.nx
    x, lam = sol.x, sol.lam
    disc = mpc_cfg.gamma ** np.arange(N)
    col = {name: k * n + np.arange(n) for k, name in enumerate(GROUPS)}
    rows, cols, vals = [], [], []

    def add(r, c, v):
        r, c, v = np.broadcast_arrays(r, c, v)
        rows.append(r.ravel()); cols.append(c.ravel()); vals.append(v.ravel().astype(float))

    lam_dyn = lam[L.eq_dyn]
    ci = col["theta_alpha"][:, None]
    add(L.buy, ci, -lam_dyn)
    add(L.sell, ci, lam_dyn)
    add(nx + L.eq_dyn, ci, x[L.sell] - x[L.buy])
    add(nx + L.eq_dyn, col["theta_delta"][:, None], -1.0)
    add(L.buy, col["theta_b"][:, None], disc)
    add(L.sell, col["theta_s"][:, None], -disc)
    add(L.soc[:, :N], col["phi1"][:, None], 2.0 * disc * x[L.soc[:, :N]])
    add(L.soc[:, :N], col["phi2"][:, None], disc)
    add(L.soc[:, N], col["t1"], 2.0 * x[L.soc[:, N]])
    add(L.soc[:, N], col["t2"], 1.0)
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx + L.m_eq, len(GROUPS) * n),
    )


def first_input_selector(cfg: FleetConfig, mpc_cfg: MpcConfig, size: int) -> np.ndarray:
    """Dense (size x n) operator mapping y to u0 = b0 - s0 for each agent."""
    L = layout(cfg.n, mpc_cfg.N)
    E = np.zeros((size, cfg.n))
    E[L.buy[:, 0], np.arange(cfg.n)] = 1.0
    E[L.sell[:, 0], np.arange(cfg.n)] = -1.0
    return E


@dataclass
class MpcResult:
    action: np.ndarray
    solution: qp.QpSolution
    problem: qp.QpProblem
    sensitivity: np.ndarray | None = None
    degenerate: bool = False

    def predicted_soc(self, cfg: FleetConfig, mpc_cfg: MpcConfig) -> np.ndarray:
        return self.solution.x[layout(cfg.n, mpc_cfg.N).soc]


def _piece_jacobian(lu, dR, nx, me, size):
    """Forward solve for dy/dtheta on one active-set piece."""
    rhs = np.zeros((size, dR.shape[1]))
    rhs[:nx + me] = dR.toarray()
    with np.errstate(all="ignore"):
        return -lu.solve(rhs)


def _sensitivity(theta, problem, sol, cfg, mpc_cfg):
    """Implicit-function Jacobian of u0 in theta; None if degenerate.

    At a strictly complementary optimum the inactive rows of the KKT
    Jacobian decouple (their multipliers stay at zero) and the active
    complementarity rows reduce to ``C_a dx = 0`` after division by mu. What
    remains is the active-set KKT matrix the solver already factorized when
    polishing, so its LU is reused here.

    Weakly active rows (zero slack and zero multiplier) and rows dropped as
    linearly dependent make the solution map piecewise. The Jacobian is
    then accepted only if the two extreme pieces (all weak rows held active,
    all released) give the same u0 Jacobian and the dependent rows stay
    tight on both.
    """
    nx, me, mi = problem.n, problem.m_eq, problem.m_ineq
    active = sol.kkt_active
    if sol.kkt_lu is None or active is None:
        return None
    size = nx + me + mi
    implied = sol.kkt_implied if sol.kkt_implied is not None else np.zeros_like(active)
    slack = problem.d - problem.C @ sol.x
    weak = (active & (sol.mu <= mpc_cfg.sc_tol)) | (~active & ~implied & (slack <= mpc_cfg.sc_tol))
    dR = kkt_theta_jacobian(theta, sol, cfg, mpc_cfg)
    E = first_input_selector(cfg, mpc_cfg, size)
    if not weak.any() and not implied.any():
        with np.errstate(all="ignore"):
            z = sol.kkt_lu.solve(E)
        if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e10:
            return None
        return -(dR.T @ z[:nx + me])

    pieces = []
    for mask in (active | weak, active & ~weak):
        lu = sol.kkt_lu if np.array_equal(mask, active) else sol.active_set_lu(mask)
        if lu is None:
            return None
        Y = _piece_jacobian(lu, dR, nx, me, size)
        if not np.all(np.isfinite(Y)) or np.abs(Y).max() > 1e10:
            return None
        dx = Y[:nx]
        scale = 1.0 + np.abs(dx).max()
        if implied.any() and np.abs(problem.C[implied] @ dx).max() > 1e-7 * scale:
            return None
        pieces.append((E[:nx].T @ dx).T)
    S_in, S_out = pieces
    if np.abs(S_in - S_out).max() > 1e-7 + 1e-6 * np.abs(S_in).max():
        return None
    return S_in


def sensitivity_full_kkt(theta, problem, sol, cfg, mpc_cfg) -> np.ndarray:
    """Same Jacobian via the full stacked KKT Jacobian (slow; for checks)."""
    H = problem.H + qp.EPS_REG * sp.identity(problem.n, format="csc")
    Jy = qp.kkt_jacobian(problem, sol.x, sol.lam, sol.mu, H=H).toarray()
    grad_y = Jy.T
    E = first_input_selector(cfg, mpc_cfg, grad_y.shape[0])
    z = np.linalg.solve(grad_y, E)
    dR = kkt_theta_jacobian(theta, sol, cfg, mpc_cfg).toarray()
    m = problem.n + problem.m_eq
    return -(dR.T @ z[:m])


def diagnostics(theta: Theta, problem: qp.QpProblem, sol: qp.QpSolution,
                cfg: FleetConfig, mpc_cfg: MpcConfig, soc=None) -> dict:
    L = layout(cfg.n, mpc_cfg.N)
    return {
        "theta": theta.to_dict(),
        "soc": None if soc is None else np.asarray(soc).tolist(),
        "status": sol.status,
        "iterations": sol.iterations,
        "kkt_residual_norm": sol.kkt_residual_norm,
        "active_set": sol.active_set.tolist(),
        "first_stage": {
            "buy": sol.x[L.buy[:, 0]].tolist(),
            "sell": sol.x[L.sell[:, 0]].tolist(),
        },
        "lam": sol.lam.tolist(),
        "mu": sol.mu.tolist(),
    }


def dump_diagnostics(path, diag: dict) -> None:
    with open(path, "w") as f:
        json.dump(diag, f, indent=1)


def evaluate(theta: Theta, soc, window, cfg: FleetConfig, mpc_cfg: MpcConfig,
             sensitivity: bool = False) -> MpcResult:
    """Solve the MPC; optionally attach the policy sensitivity.

    A degenerate solution (weakly active constraint or singular KKT
    matrix) gets ``degenerate=True`` and a zero sensitivity.
    """
    problem = build_qp(theta, soc, window, cfg, mpc_cfg)
    sol = qp.solve(problem, tol=mpc_cfg.tol, check_convex=False)
    if not sol.solved:
        raise MpcSolveError(f"MPC solve failed with status {sol.status}",
                            diagnostics(theta, problem, sol, cfg, mpc_cfg, soc))
    L = layout(cfg.n, mpc_cfg.N)
    action = sol.x[L.buy[:, 0]] - sol.x[L.sell[:, 0]]
    res = MpcResult(action=action, solution=sol, problem=problem)
    if sensitivity:
        S = _sensitivity(theta, problem, sol, cfg, mpc_cfg)
        if S is None:
            res.degenerate = True
            S = np.zeros((len(GROUPS) * cfg.n, cfg.n))
        res.sensitivity = S
    return res


def policy(theta, soc, window, cfg, mpc_cfg) -> np.ndarray:
    """Net power u0 = b0 - s0 per agent."""
    return evaluate(theta, soc, window, cfg, mpc_cfg).action


def policy_sensitivity(theta, soc, window, cfg, mpc_cfg) -> np.ndarray:
    """|theta| x n Jacobian of the policy (zeros when degenerate)."""
    return evaluate(theta, soc, window, cfg, mpc_cfg, sensitivity=True).sensitivity
