"""Run configuration, the monthly training loop and the command line.

Subcommands::

    train --config <file> [--months M] [--seed S] [--out DIR]
    simulate --config <file> --theta <file> [--out DIR]
    prices validate <file>

Every output is a CSV with a one-line header (see README for schemas).
Failures print one ``error: {json}`` line on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model, mpc, prices, rl
from .model import SOC_HIGH, SOC_LOW, FleetConfig
from .mpc import GROUPS, MpcConfig, Theta

logger = logging.getLogger(__name__)

SLICE_POINTS = 101
SLICE_PIN = 0.5


class RunError(RuntimeError):
    """A failure inside a run, tagged with where it happened."""

    def __init__(self, message, kind="run", month=None, day=None, hour=None, dump=None):
        super().__init__(message)
        self.kind = kind
        self.month = month
        self.day = day
        self.hour = hour
        self.dump = dump

    def record(self) -> dict:
        return {"kind": self.kind, "month": self.month, "day": self.day, "hour": self.hour,
                "message": str(self), "dump": None if self.dump is None else str(self.dump)}


@dataclass
class PriceSource:
    """Either a ``hour_index,buy_price`` CSV or synthetic-profile parameters."""

    csv: str | None = None
    synthetic: dict = field(default_factory=dict)
    sell_ratio: float = 0.5

    def load(self) -> prices.PriceSeries:
        if self.csv is not None:
            return prices.load_csv(self.csv, sell_ratio=self.sell_ratio)
        return prices.synth_daily(sell_ratio=self.sell_ratio, **self.synthetic)

    def to_dict(self) -> dict:
        return {"csv": self.csv, "synthetic": dict(self.synthetic), "sell_ratio": self.sell_ratio}

    @classmethod
    def from_dict(cls, data: dict) -> "PriceSource":
        return cls(**data)


@dataclass
class RunConfig:
    fleet: FleetConfig = field(default_factory=FleetConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    prices: PriceSource = field(default_factory=PriceSource)
    months: int = 100
    days_per_month: int = 30
    hours_per_day: int = 24
    soc_reset: float = 0.6
    exploration_scale: float = 0.05
    step_size: float = rl.STEP
    max_step_norm: float | None = None  # cap on |step * grad|; None = plain step
    master_seed: int = 0
    freeze: dict = field(default_factory=dict)  # group name -> True to keep fixed
    out_dir: str = "run"

    def __post_init__(self):
        if isinstance(self.fleet, dict):
            self.fleet = FleetConfig.from_dict(self.fleet)
        if isinstance(self.mpc, dict):
            self.mpc = MpcConfig.from_dict(self.mpc)
        if isinstance(self.prices, dict):
            self.prices = PriceSource.from_dict(self.prices)
        self.validate()

    def validate(self) -> None:
        for name in ("months", "days_per_month", "hours_per_day"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hours_per_day != model.HOURS_PER_DAY:
            raise ValueError(f"hours_per_day must be {model.HOURS_PER_DAY}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_step_norm is not None and not self.max_step_norm > 0:
            raise ValueError("max_step_norm must be positive")
        if self.exploration_scale < 0:
            raise ValueError("exploration_scale must be nonnegative")
        if not 0.0 <= self.soc_reset <= 1.0:
            raise ValueError("soc_reset must lie in [0, 1]")
        unknown = set(self.freeze) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown freeze groups: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "fleet": self.fleet.to_dict(),
            "mpc": self.mpc.to_dict(),
            "prices": self.prices.to_dict(),
            "months": self.months,
            "days_per_month": self.days_per_month,
            "hours_per_day": self.hours_per_day,
            "soc_reset": self.soc_reset,
            "exploration_scale": self.exploration_scale,
            "step_size": self.step_size,
            "max_step_norm": self.max_step_norm,
            "master_seed": self.master_seed,
            "freeze": dict(self.freeze),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")


@dataclass
class MonthMetrics:
    month: int
    J: float  # mean over days of the discounted daily cost
    J_undiscounted: float
    J_agent: np.ndarray
    grad_norm: float
    samples_used: int
    samples_degenerate: int
    violation_rate: float  # fraction of (hour, agent) states outside the band
    peak_planned: float
    peak_applied: float
    grad: np.ndarray
    theta: np.ndarray  # theta used during the month


@dataclass
class RunMetrics:
    months: list = field(default_factory=list)
    theta_final: Theta | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.months], dtype=float)


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def metrics_header(n: int) -> list[str]:
    return (["month", "J", "J_undiscounted"] + [f"J_{i + 1}" for i in range(n)]
            + ["grad_norm", "samples_used", "samples_degenerate", "violation_rate",
               "peak_planned", "peak_applied"]
            + [f"grad_{lab}" for lab in Theta.labels(n)])


def metrics_row(m: MonthMetrics) -> list:
    return ([m.month, _fmt(m.J), _fmt(m.J_undiscounted)] + [_fmt(v) for v in m.J_agent]
            + [_fmt(m.grad_norm), m.samples_used, m.samples_degenerate, _fmt(m.violation_rate),
               _fmt(m.peak_planned), _fmt(m.peak_applied)]
            + [_fmt(v) for v in m.grad])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def month_summary(batch, cfg: FleetConfig) -> dict:
    """Performance statistics of one month of transitions."""
    days = len({t.day for t in batch})
    nxt = np.array([t.next_soc for t in batch])
    return {
        "J": float(model.daily_returns(batch, cfg.gamma).mean()),
        "J_undiscounted": float(sum(t.cost for t in batch) / days),
        "J_agent": np.array([model.daily_returns(batch, cfg.gamma, i).mean()
                             for i in range(cfg.n)]),
        "violation_rate": float(np.mean((nxt < SOC_LOW) | (nxt > SOC_HIGH))),
        "peak_planned": max(t.planned_peak for t in batch),
        "peak_applied": max(t.applied_peak for t in batch),
    }


def _dump(out: Path, name: str, payload: dict) -> Path:
    path = out / name
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, default=lambda o: np.asarray(o).tolist())
    return path


def _rollout(theta, series, config: RunConfig, seed, month: int, out: Path,
             sensitivity: bool, exploration=None, stats=None):
    """One month of closed-loop data; failures become RunError with a dump."""
    expl = config.exploration_scale if exploration is None else exploration
    try:
        return model.rollout_month(theta, series, config.fleet, seed, expl, config.mpc,
                                   days=config.days_per_month, soc_reset=config.soc_reset,
                                   with_sensitivity=sensitivity, stats=stats)
    except model.RolloutError as exc:
        cause = exc.__cause__
        diag = getattr(cause, "diagnostics", None) or {"theta": theta.to_dict()}
        path = _dump(out, f"failure_month{month}.json", diag)
        raise RunError(str(exc), "rollout", month, exc.day, exc.hour, path) from exc


def policy_slice(theta: Theta, series: prices.PriceSeries, cfg: FleetConfig,
                 mpc_cfg: MpcConfig, hour: int = 0, points: int = SLICE_POINTS):
    """Rows (agent, soc, action) sweeping one agent's SOC over [0, 1].

    The other agents sit at 0.5; no noise or exploration is involved.
    """
    window = series.forecast_window(hour, mpc_cfg.N)
    rows = []
    for i in range(cfg.n):
        for s in np.linspace(0.0, 1.0, points):
            soc = np.full(cfg.n, SLICE_PIN)
            soc[i] = s
            a = mpc.policy(theta, soc, window, cfg, mpc_cfg)
            rows.append((i + 1, float(s), float(a[i])))
    return rows


def peak_rows(batches: dict, p_max: float):
    for month, batch in batches.items():
        for t in batch:
            yield [month, t.day, t.hour, _fmt(t.planned_peak), _fmt(t.applied_peak), _fmt(p_max)]


PEAK_HEADER = ["month", "day", "hour", "planned_peak", "applied_peak", "p_max"]


def _month_seeds(config: RunConfig):
    return np.random.SeedSequence(config.master_seed).spawn(config.months)


def train(config: RunConfig, theta0: Theta | None = None) -> RunMetrics:
    """Monthly loop: rollout -> LSTD critic -> policy gradient -> projected step.

    Writes metrics.csv, theta_trace.csv, trajectories.csv (first and last
    month), policy_slice.csv, peak_power.csv, theta_final.json and
    config.json into ``config.out_dir``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config.fleet
    series = config.prices.load()
    theta = Theta.nominal(cfg) if theta0 is None else theta0
    theta.validate()
    metrics = RunMetrics()
    kept = {}
    theta_rows = []
    for month, seed in enumerate(_month_seeds(config)):
        batch = _rollout(theta, series, config, seed, month, out, sensitivity=True)
        try:
            critic = rl.lstd_fit(batch, cfg.gamma)
            report = rl.policy_gradient(batch, critic.w, month_index=month)
            new_theta = rl.update_theta(theta, report.grad, config.step_size,
                                        freeze=config.freeze, max_norm=config.max_step_norm)
        except (rl.CriticError, ValueError) as exc:
            path = _dump(out, f"failure_month{month}.json",
                         {"theta": theta.to_dict(), "error": str(exc)})
            raise RunError(str(exc), "learning", month, dump=path) from exc
        summary = month_summary(batch, cfg)
        metrics.months.append(MonthMetrics(
            month=month, grad_norm=report.grad_norm, samples_used=report.samples_used,
            samples_degenerate=report.samples_degenerate, grad=report.grad,
            theta=theta.flatten(), **summary))
        theta_rows.append([month] + [_fmt(v) for v in theta.flatten()])
        if month == 0 or month == config.months - 1:
            kept[month] = batch
        logger.info("month %d: J=%.2f grad_norm=%.3g degenerate=%d violation=%.3f",
                    month, summary["J"], report.grad_norm, report.samples_degenerate,
                    summary["violation_rate"])
        theta = new_theta
    metrics.theta_final = theta
    theta_rows.append([config.months] + [_fmt(v) for v in theta.flatten()])

    n = cfg.n
    _write_csv(out / "metrics.csv", metrics_header(n), (metrics_row(m) for m in metrics.months))
    _write_csv(out / "theta_trace.csv", ["month"] + Theta.labels(n), theta_rows)
    model.write_trajectories(out / "trajectories.csv", kept, n)
    _write_csv(out / "peak_power.csv", PEAK_HEADER, peak_rows(kept, cfg.p_max))
    _write_csv(out / "policy_slice.csv", ["agent", "soc", "action"],
               ([a, _fmt(s), _fmt(u)] for a, s, u in policy_slice(theta, series, cfg, config.mpc)))
    (out / "theta_final.json").write_text(json.dumps(theta.to_dict(), indent=2) + "\n")
    config.save(out / "config.json")
    return metrics


def load_theta(path, n: int) -> Theta:
    data = json.loads(Path(path).read_text())
    theta = Theta.from_dict(data)
    if theta.n != n:
        raise ValueError(f"theta has {theta.n} agents, config has {n}")
    theta.validate()
    return theta


SIM_HEADER = ["month", "J", "J_undiscounted", "violation_rate", "peak_planned", "peak_applied"]


def simulate(config: RunConfig, theta: Theta) -> list[dict]:
    """Fixed-theta rollout of every configured month, no learning.

    Writes trajectories.csv (all months), peak_power.csv and metrics.csv.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = config.prices.load()
    theta.validate()
    batches, rows, summaries = {}, [], []
    for month, seed in enumerate(_month_seeds(config)):
        batch = _rollout(theta, series, config, seed, month, out, sensitivity=False)
        s = month_summary(batch, config.fleet)
        summaries.append(s)
        rows.append([month] + [_fmt(s[k]) for k in SIM_HEADER[1:]])
        batches[month] = batch
    model.write_trajectories(out / "trajectories.csv", batches, config.fleet.n)
    _write_csv(out / "peak_power.csv", PEAK_HEADER, peak_rows(batches, config.fleet.p_max))
    _write_csv(out / "metrics.csv", SIM_HEADER, rows)
    return summaries


def _error(exc: RunError | Exception) -> int:
    rec = exc.record() if isinstance(exc, RunError) else {
        "kind": type(exc).__name__, "month": None, "day": None, "hour": None,
        "message": str(exc), "dump": None}
    print("error: " + json.dumps(rec, sort_keys=True), file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpc-battery-rl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="learn MPC parameters")
    t.add_argument("--config", required=True)
    t.add_argument("--months", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    s = sub.add_parser("simulate", help="roll out a fixed theta")
    s.add_argument("--config", required=True)
    s.add_argument("--theta", required=True)
    s.add_argument("--out")
    pr = sub.add_parser("prices", help="price file tools")
    prsub = pr.add_subparsers(dest="prices_command", required=True)
    v = prsub.add_parser("validate", help="check a price CSV and print statistics")
    v.add_argument("file")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    data = cfg.to_dict()
    if getattr(args, "months", None) is not None:
        data["months"] = args.months
    if getattr(args, "seed", None) is not None:
        data["master_seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    return RunConfig.from_dict(data)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prices":
            series = prices.load_csv(args.file)
            print(json.dumps(series.summary(), sort_keys=True))
            return 0
        config = _config(args)
        if args.command == "train":
            metrics = train(config)
            last = metrics.months[-1]
            print(json.dumps({"months": len(metrics.months), "J_first": metrics.months[0].J,
                              "J_last": last.J, "out": config.out_dir}, sort_keys=True))
        else:
            summaries = simulate(config, load_theta(args.theta, config.fleet.n))
            print(json.dumps({"months": len(summaries), "J_mean": float(np.mean(
                [s["J"] for s in summaries])), "out": config.out_dir}, sort_keys=True))
        return 0
    except (RunError, prices.PriceFormatError, ValueError, OSError, KeyError,
            json.JSONDecodeError, TypeError) as exc:
        return _error(exc)


if __name__ == "__main__":
    sys.exit(main())
