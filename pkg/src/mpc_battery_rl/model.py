"""Stochastic battery fleet simulator.

The true plant: hourly SOC update driven by net traded power and a Gaussian
production-demand imbalance, a low-level controller that clamps SOC into
[0, 1] by trading extra energy, and the economic stage cost with soft
penalties outside the 10%-90% band.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SOC_LOW = 0.1
SOC_HIGH = 0.9
HOURS_PER_DAY = 24
DAYS_PER_MONTH = 30


def _vec(value, n):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    return arr


@dataclass
class FleetConfig:
    """Physical and economic constants of an n-battery fleet.

    Scalars given for per-agent fields are broadcast to all agents.
    ``delta_var`` is the variance of the hourly imbalance; samples are drawn
    with standard deviation ``sqrt(delta_var)``.
    """

    n: int = 3
    alpha: np.ndarray = 1.0 / 12.0
    delta_mean: np.ndarray = 0.0
    delta_var: np.ndarray = 0.5
    u_max: np.ndarray = 1.0
    p_max: float = 1.5
    penalty: np.ndarray = 1000.0
    gamma: float = 0.99

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        for name in ("alpha", "delta_mean", "delta_var", "u_max", "penalty"):
            setattr(self, name, _vec(getattr(self, name), self.n))
        self.p_max = float(self.p_max)
        self.gamma = float(self.gamma)
        if np.any(self.alpha <= 0):
            raise ValueError("alpha must be positive")
        if np.any(self.u_max <= 0):
            raise ValueError("u_max must be positive")
        if np.any(self.penalty < 0):
            raise ValueError("penalty must be nonnegative")
        if np.any(self.delta_var < 0):
            raise ValueError("delta_var must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        if self.p_max >= self.u_max.sum():
            warnings.warn(
                f"p_max={self.p_max} >= sum(u_max)={self.u_max.sum()}: "
                "the grid peak constraint can never bind",
                stacklevel=2,
            )

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(self.delta_var)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "alpha": self.alpha.tolist(),
            "delta_mean": self.delta_mean.tolist(),
            "delta_var": self.delta_var.tolist(),
            "u_max": self.u_max.tolist(),
            "p_max": self.p_max,
            "penalty": self.penalty.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FleetConfig":
        return cls(**data)


def buy_sell(action) -> tuple[np.ndarray, np.ndarray]:
    """Split net power a = b - s into nonnegative buy and sell parts."""
    a = np.asarray(action, dtype=float)
    return np.maximum(a, 0.0), np.maximum(-a, 0.0)


def step_dynamics(soc, action, noise, cfg: FleetConfig) -> np.ndarray:
    """Unclamped SOC after one hour: soc + alpha * (noise + a)."""
    return np.asarray(soc, dtype=float) + cfg.alpha * (np.asarray(noise) + np.asarray(action))


def low_level_correct(raw, cfg: FleetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Clamp SOC into [0, 1]; return (soc, corrective power).

    Positive correction means extra power bought, negative extra power sold.
    """
    raw = np.asarray(raw, dtype=float)
    soc = np.clip(raw, 0.0, 1.0)
    return soc, (soc - raw) / cfg.alpha


def stage_cost(action, buy_price, sell_price) -> np.ndarray:
    """Per-agent economic cost of trading ``action``."""
    b, s = buy_sell(action)
    return np.asarray(buy_price) * b - np.asarray(sell_price) * s


def soc_penalty(soc, cfg: FleetConfig) -> np.ndarray:
    soc = np.asarray(soc, dtype=float)
    return cfg.penalty * (np.maximum(soc - SOC_HIGH, 0.0) + np.maximum(SOC_LOW - soc, 0.0))


def agent_costs(soc, action, buy_price, sell_price, cfg: FleetConfig) -> np.ndarray:
    return stage_cost(action, buy_price, sell_price) + soc_penalty(soc, cfg)


def modified_stage_cost(soc, action, buy_price, sell_price, cfg: FleetConfig) -> float:
    """Fleet cost: economic terms plus SOC band penalties, summed over agents."""
    return float(agent_costs(soc, action, buy_price, sell_price, cfg).sum())


def peak_power(action) -> float:
    """Largest of total bought and total sold power."""
    b, s = buy_sell(action)
    return float(max(b.sum(), s.sum()))


@dataclass
class Transition:
    """One simulated hour.

    ``action`` is the applied net power (policy plus exploration),
    ``planned`` the MPC output before exploration. ``cost`` is the realized
    modified stage cost including the cost of corrective trades and
    ``agent_cost`` its per-agent split.
    """

    day: int
    hour: int
    soc: np.ndarray
    action: np.ndarray
    planned: np.ndarray
    buy_price: np.ndarray
    sell_price: np.ndarray
    noise: np.ndarray
    correction: np.ndarray
    next_soc: np.ndarray
    cost: float
    agent_cost: np.ndarray
    terminal: bool = False
    sensitivity: np.ndarray | None = None
    degenerate: bool = False

    @property
    def planned_peak(self) -> float:
        return peak_power(self.planned)

    @property
    def applied_peak(self) -> float:
        return peak_power(self.action)


@dataclass
class RolloutStats:
    correction_peak_violations: int = 0
    degenerate_samples: int = 0


class RolloutError(RuntimeError):
    def __init__(self, message, day=None, hour=None):
        super().__init__(message)
        self.day = day
        self.hour = hour


PolicyFn = Callable[[np.ndarray, int], tuple]


def simulate_hour(soc, planned, buy_price, sell_price, cfg: FleetConfig, rng,
                  exploration: float = 0.0):
    """Apply exploration, draw noise, step and correct one hour.

    Returns (action, noise, correction, next_soc, agent_cost). Draw order per
    hour is exploration first, then imbalance noise.
    """
    explore = rng.standard_normal(cfg.n) * exploration * cfg.u_max
    action = np.clip(planned + explore, -cfg.u_max, cfg.u_max)
    noise = cfg.delta_mean + cfg.noise_std * rng.standard_normal(cfg.n)
    raw = step_dynamics(soc, action, noise, cfg)
    next_soc, correction = low_level_correct(raw, cfg)
    cost = (agent_costs(soc, action, buy_price, sell_price, cfg)
            + stage_cost(correction, buy_price, sell_price))
    return action, noise, correction, next_soc, cost


def rollout_day(theta, prices, cfg: FleetConfig, seed, exploration: float = 0.05,
                mpc_cfg=None, day: int = 0, soc_reset: float = 0.6,
                with_sensitivity: bool = False, stats: RolloutStats | None = None,
                start_hour: int | None = None) -> list[Transition]:
    """Closed-loop simulation of one day under the MPC policy.

    SOC starts at ``soc_reset`` for every agent. ``exploration`` is the
    standard deviation of the additive action noise as a fraction of each
    agent's power bound. ``seed`` may be an int or a SeedSequence.
    """
    from . import mpc

    if mpc_cfg is None:
        mpc_cfg = mpc.MpcConfig(gamma=cfg.gamma)
    rng = np.random.default_rng(seed)
    if start_hour is None:
        start_hour = day * HOURS_PER_DAY
    soc = np.full(cfg.n, float(soc_reset))
    out = []
    for hour in range(HOURS_PER_DAY):
        k = start_hour + hour
        buy, sell = prices.forecast_window(k, mpc_cfg.N)
        try:
            res = mpc.evaluate(theta, soc, (buy, sell), cfg, mpc_cfg,
                               sensitivity=with_sensitivity)
        except mpc.MpcSolveError as exc:
            raise RolloutError(f"day {day} hour {hour}: {exc}", day, hour) from exc
        bp = np.full(cfg.n, buy[0])
        spr = np.full(cfg.n, sell[0])
        action, noise, corr, next_soc, agent_cost = simulate_hour(
            soc, res.action, bp, spr, cfg, rng, exploration)
        if stats is not None:
            if peak_power(action + corr) > cfg.p_max + 1e-6 >= peak_power(action):
                stats.correction_peak_violations += 1
            if res.degenerate:
                stats.degenerate_samples += 1
        out.append(Transition(
            day=day, hour=hour, soc=soc, action=action, planned=res.action,
            buy_price=bp, sell_price=spr, noise=noise, correction=corr,
            next_soc=next_soc, cost=float(agent_cost.sum()), agent_cost=agent_cost,
            terminal=hour == HOURS_PER_DAY - 1, sensitivity=res.sensitivity,
            degenerate=res.degenerate,
        ))
        soc = next_soc
    if stats is not None and stats.correction_peak_violations:
        logger.debug("day %d: %d corrective trades exceeded the peak bound",
                     day, stats.correction_peak_violations)
    return out


def day_seeds(seed, days: int = DAYS_PER_MONTH) -> list[np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(days)


def rollout_month(theta, prices, cfg: FleetConfig, seed, exploration: float = 0.05,
                  mpc_cfg=None, days: int = DAYS_PER_MONTH, soc_reset: float = 0.6,
                  with_sensitivity: bool = False, stats: RolloutStats | None = None,
                  day_indices: Sequence[int] | None = None) -> list[Transition]:
    """Concatenate ``days`` independent day rollouts with derived seeds."""
    seeds = day_seeds(seed, days)
    idx = range(days) if day_indices is None else day_indices
    out = []
    for d in idx:
        out.extend(rollout_day(theta, prices, cfg, seeds[d], exploration, mpc_cfg,
                               day=d, soc_reset=soc_reset,
                               with_sensitivity=with_sensitivity, stats=stats))
    return out


def daily_returns(batch: Sequence[Transition], gamma: float, agent: int | None = None):
    """Discounted cost of each day in a batch, indexed by day order."""
    days: dict[int, float] = {}
    for t in batch:
        c = t.cost if agent is None else float(t.agent_cost[agent])
        days[t.day] = days.get(t.day, 0.0) + gamma ** t.hour * c
    return np.array([days[d] for d in sorted(days)])


TRAJECTORY_COLUMNS_DOC = """\
Trajectory CSV, one row per simulated hour:
  month, day, hour, buy_price, sell_price,
  soc_<i>, action_<i>, planned_<i>, correction_<i>, noise_<i>, next_soc_<i>  (i = 1..n)
  cost, planned_peak, applied_peak
"""


def trajectory_header(n: int) -> list[str]:
    cols = ["month", "day", "hour", "buy_price", "sell_price"]
    for name in ("soc", "action", "planned", "correction", "noise", "next_soc"):
        cols += [f"{name}_{i + 1}" for i in range(n)]
    return cols + ["cost", "planned_peak", "applied_peak"]


def trajectory_rows(batch: Sequence[Transition], month: int = 0):
    for t in batch:
        row = [month, t.day, t.hour, _fmt(t.buy_price[0]), _fmt(t.sell_price[0])]
        for arr in (t.soc, t.action, t.planned, t.correction, t.noise, t.next_soc):
            row += [_fmt(v) for v in arr]
        row += [_fmt(t.cost), _fmt(t.planned_peak), _fmt(t.applied_peak)]
        yield row


def _fmt(v) -> str:
    return repr(float(v))


def write_trajectories(path, batches: dict[int, Sequence[Transition]], n: int) -> None:
    """Write {month: batch} to a trajectory CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(trajectory_header(n))
        for month, batch in batches.items():
            w.writerows(trajectory_rows(batch, month))


def read_trajectories(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k in ("month", "day", "hour") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
