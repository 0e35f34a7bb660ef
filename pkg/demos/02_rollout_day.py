"""Simulate one day of the closed loop under the nominal MPC.

Prints an hourly table of SOC, applied power, low-level corrections and the
realized cost, then the day's discounted return.
"""
import numpy as np

from mpc_battery_rl import model
from mpc_battery_rl.model import FleetConfig
from mpc_battery_rl.mpc import MpcConfig, Theta
from mpc_battery_rl.prices import synth_daily

cfg = FleetConfig()
prices = synth_daily()
day = model.rollout_day(Theta.nominal(cfg), prices, cfg, seed=0, exploration=0.05,
                        mpc_cfg=MpcConfig())

print("hour  price   soc(1..3)            action(1..3)            correction   cost")
for t in day:
    print(f"{t.hour:4d} {t.buy_price[0]:6.1f}  {np.array2string(t.soc, precision=2):20s}"
          f" {np.array2string(t.action, precision=2):22s}"
          f" {np.abs(t.correction).sum():8.2f} {t.cost:9.2f}")
print("discounted daily cost:", round(float(model.daily_returns(day, cfg.gamma)[0]), 2))
print("band violations:", int(sum(((t.next_soc < 0.1) | (t.next_soc > 0.9)).sum() for t in day)),
      "of", 24 * cfg.n, "agent-hours")
