"""LSTD critic with compatible features and the deterministic policy gradient.

The critic is

    Q_w(s, a) = (a - pi(s))' dpi(s)' w + Phi(s)' v

where ``dpi`` is the |theta| x n policy sensitivity and ``Phi`` the per-agent
quadratic SOC monomials. With that form ``grad_a Q = dpi' w`` and the policy
gradient is ``E[dpi dpi' w]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Transition
from .mpc import GROUPS, Theta, project_theta

RIDGE = 1e-6
STEP = 5e-8


class CriticError(RuntimeError):
    pass


@dataclass
class CriticWeights:
    w: np.ndarray  # compatible block, length |theta|
    v: np.ndarray  # baseline block, length 2n + 1

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.v))):
            raise CriticError("critic weights are not finite")


@dataclass
class GradientReport:
    grad: np.ndarray
    samples_used: int
    samples_degenerate: int
    month_index: int = 0
    grad_norm: float = field(init=False)

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=float)
        self.grad_norm = float(np.linalg.norm(self.grad))


def state_features(soc) -> np.ndarray:
    """[soc_1^2 .. soc_n^2, soc_1 .. soc_n, 1]."""
    soc = np.atleast_1d(np.asarray(soc, dtype=float))
    return np.concatenate([soc ** 2, soc, [1.0]])


def compatible_q(soc, action, policy_action, w, v, sensitivity) -> float:
    adv = (np.asarray(action, dtype=float) - np.asarray(policy_action, dtype=float))
    return float(adv @ (np.asarray(sensitivity).T @ w) + state_features(soc) @ v)


def lstd_solve(Z, Z_next, costs, gamma: float, ridge: float = RIDGE) -> np.ndarray:
    """Solve (sum z (z - gamma z+)' + ridge I) x = sum z c.

    Rows of ``Z``/``Z_next`` are per-sample features; a zero row in
    ``Z_next`` ends the episode at that sample.
    """
    Z = np.asarray(Z, dtype=float)
    Z_next = np.asarray(Z_next, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if Z.ndim != 2 or Z.shape != Z_next.shape or costs.shape != (Z.shape[0],):
        raise ValueError("inconsistent LSTD feature shapes")
    if Z.shape[0] == 0:
        raise ValueError("empty batch")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Z_next)) and np.all(np.isfinite(costs))):
        raise CriticError("non-finite LSTD features or costs")
    M = Z.T @ (Z - gamma * Z_next) + ridge * np.eye(Z.shape[1])
    rhs = Z.T @ costs
    try:
        x = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise CriticError(f"LSTD system is singular: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise CriticError("LSTD solution is not finite")
    return x


def _sensitivities(batch, sensitivities):
    if sensitivities is not None:
        return [np.asarray(S, dtype=float) for S in sensitivities]
    out = []
    for t in batch:
        if t.sensitivity is None:
            raise ValueError("transition carries no policy sensitivity")
        out.append(t.sensitivity)
    return out


def critic_features(batch: Sequence[Transition], sensitivities=None):
    """Joint features z, successors z+ and costs for a batch.

    The successor's compatible block is zero (next action on-policy);
    terminal samples get an all-zero successor.
    """
    sens = _sensitivities(batch, sensitivities)
    n_theta = sens[0].shape[0]
    rows, nxt, costs = [], [], []
    for t, S in zip(batch, sens):
        comp = S @ (t.action - t.planned)
        rows.append(np.concatenate([comp, state_features(t.soc)]))
        succ = np.zeros(n_theta + 2 * t.soc.size + 1)
        if not t.terminal:
            succ[n_theta:] = state_features(t.next_soc)
        nxt.append(succ)
        costs.append(t.cost)
    return np.array(rows), np.array(nxt), np.array(costs)


def lstd_fit(batch: Sequence[Transition], gamma: float, ridge: float = RIDGE,
             sensitivities=None) -> CriticWeights:
    if len(batch) == 0:
        raise ValueError("empty batch")
    Z, Zn, c = critic_features(batch, sensitivities)
    x = lstd_solve(Z, Zn, c, gamma, ridge)
    n_theta = Z.shape[1] - (2 * batch[0].soc.size + 1)
    return CriticWeights(x[:n_theta], x[n_theta:])


def policy_gradient(batch: Sequence[Transition], w, sensitivities=None,
                    month_index: int = 0, gamma: float | None = None) -> GradientReport:
    """Mean of dpi dpi' w; degenerate samples count with zero sensitivity.

    With ``gamma`` given, samples are weighted by ``gamma**hour`` and summed
    per day instead, which estimates the gradient of the mean discounted
    daily cost itself rather than a normalized version of it.
    """
    sens = _sensitivities(batch, sensitivities)
    w = np.asarray(w, dtype=float)
    grad = np.zeros_like(w)
    degenerate = 0
    for t, S in zip(batch, sens):
        if t.degenerate:
            degenerate += 1
            continue
        weight = 1.0 if gamma is None else gamma ** t.hour
        grad += weight * (S @ (S.T @ w))
    if gamma is None:
        grad /= max(len(sens), 1)
    else:
        grad /= max(len({t.day for t in batch}), 1)
    return GradientReport(grad, len(sens) - degenerate, degenerate, month_index)


def freeze_mask(freeze, n: int) -> np.ndarray:
    """Boolean mask over flattened theta, True where the group is frozen."""
    freeze = freeze or {}
    unknown = set(freeze) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown theta groups: {sorted(unknown)}")
    return np.repeat([bool(freeze.get(g, False)) for g in GROUPS], n)


def update_theta(theta: Theta, grad, step: float = STEP, freeze=None,
                 max_norm: float | None = None) -> Theta:
    """Projected gradient step; frozen groups keep their values.

    ``max_norm`` caps the Euclidean length of the step before projection.
    """
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient is not finite")
    delta = -step * np.where(freeze_mask(freeze, theta.n), 0.0, grad)
    norm = np.linalg.norm(delta)
    if max_norm is not None and norm > max_norm:
        delta *= max_norm / norm
    return project_theta(Theta.unflatten(theta.flatten() + delta, theta.n))
