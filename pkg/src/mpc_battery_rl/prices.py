"""Hourly electricity prices and MPC forecast windows."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PriceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PriceSeries:
    """Hourly buy prices; sell prices are ``sell_ratio`` times buy prices.

    Indexing past the end wraps around, so a 24-hour series acts as a
    repeating daily profile.
    """

    buy: np.ndarray
    sell_ratio: float = 0.5

    def __post_init__(self):
        buy = np.asarray(self.buy, dtype=float).ravel()
        if buy.size < 24:
            raise PriceFormatError(f"need at least 24 hourly prices, got {buy.size}")
        if np.any(buy < 0) or not np.all(np.isfinite(buy)):
            raise PriceFormatError("buy prices must be finite and nonnegative")
        if self.sell_ratio < 0:
            raise PriceFormatError("sell_ratio must be nonnegative")
        buy.setflags(write=False)
        object.__setattr__(self, "buy", buy)

    @property
    def hours(self) -> int:
        return self.buy.size

    @property
    def sell(self) -> np.ndarray:
        return self.sell_ratio * self.buy

    def forecast_window(self, k: int, N: int) -> tuple[np.ndarray, np.ndarray]:
        """Buy and sell prices for hours k, ..., k+N-1 (wrapping)."""
        if N < 1:
            raise ValueError("horizon N must be >= 1")
        idx = (k + np.arange(N)) % self.hours
        buy = self.buy[idx]
        return buy, self.sell_ratio * buy

    def summary(self) -> dict:
        return {
            "hours": self.hours,
            "min": float(self.buy.min()),
            "max": float(self.buy.max()),
            "mean": float(self.buy.mean()),
            "argmax_hour": int(self.buy.argmax()),
            "argmin_hour": int(self.buy.argmin()),
        }


def load_csv(path, sell_ratio: float = 0.5) -> PriceSeries:
    """Read a ``hour_index,buy_price`` CSV with a one-line header.

    Hours must start at 0 and be contiguous and ascending.
    """
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["hour_index", "buy_price"]:
            raise PriceFormatError(f"{path}: header must be 'hour_index,buy_price', got {header}")
        buy = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise PriceFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                hour = int(row[0])
                price = float(row[1])
            except ValueError as exc:
                raise PriceFormatError(f"{path}:{lineno}: {exc}") from None
            expected = len(buy)
            if hour < expected:
                raise PriceFormatError(f"{path}:{lineno}: duplicate or out-of-order hour {hour}")
            if hour > expected:
                raise PriceFormatError(f"{path}:{lineno}: gap at hour {expected}")
            if price < 0:
                raise PriceFormatError(f"{path}:{lineno}: negative price {price} at hour {hour}")
            buy.append(price)
    return PriceSeries(np.array(buy), sell_ratio=sell_ratio)


def write_csv(series: PriceSeries, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["hour_index", "buy_price"])
        for i, p in enumerate(series.buy):
            w.writerow([i, repr(float(p))])


def synth_daily(base: float = 30.0, amplitude: float = 10.0, peak_hour: float = 8.0,
                second_peak_hour: float = 18.0, width: float = 4.0,
                sell_ratio: float = 0.5) -> PriceSeries:
    """Double-peaked 24-hour profile made of two raised-cosine bumps.

    Each bump has height ``amplitude`` and half-width ``width`` hours; the
    profile is ``base - amplitude`` away from both peaks, so prices lie in
    ``[base - amplitude, base + amplitude]`` when the bumps do not overlap.
    """
    if not base > amplitude >= 0:
        raise ValueError("need base > amplitude >= 0")
    hours = np.arange(24, dtype=float)

    def bump(center):
        dist = np.abs((hours - center + 12.0) % 24.0 - 12.0)
        return np.where(dist < width, 0.5 * (1.0 + np.cos(np.pi * dist / width)), 0.0)

    shape = np.minimum(bump(peak_hour) + bump(second_peak_hour), 1.0)
    return PriceSeries(base - amplitude + 2.0 * amplitude * shape, sell_ratio=sell_ratio)
