"""Solve one MPC instance and differentiate its first input.

Builds the fleet MPC at a chosen SOC and hour, prints the planned action
and the open-loop SOC plan, then compares the implicit-KKT sensitivity of
the first input with central finite differences.
"""
import numpy as np

from mpc_battery_rl import mpc
from mpc_battery_rl.model import FleetConfig
from mpc_battery_rl.mpc import MpcConfig, Theta
from mpc_battery_rl.prices import synth_daily

cfg = FleetConfig()
mc = MpcConfig(u_reg=1.0)  # quadratic input cost keeps u0 off its bounds
prices = synth_daily()

theta = Theta.nominal(cfg)
theta.phi1[:] = 20.0  # quadratic SOC cost centred at 0.5
theta.phi2[:] = -20.0
theta.t1[:] = 20.0
theta.t2[:] = -20.0

soc = np.array([0.3, 0.5, 0.8])
window = prices.forecast_window(2, mc.N)
res = mpc.evaluate(theta, soc, window, cfg, mc, sensitivity=True)
print("buy prices  :", np.round(window[0], 1))
print("action u0   :", np.round(res.action, 4))
print("SOC plan    :")
print(np.round(res.predicted_soc(cfg, mc), 3))
print("degenerate  :", res.degenerate)

if not res.degenerate:
    f, h = theta.flatten(), 1e-5
    fd = np.zeros_like(res.sensitivity)
    for k in range(f.size):
        e = np.zeros(f.size)
        e[k] = h
        fd[k] = (mpc.policy(Theta.unflatten(f + e, 3), soc, window, cfg, mc)
                 - mpc.policy(Theta.unflatten(f - e, 3), soc, window, cfg, mc)) / (2 * h)
    print("max |KKT sensitivity - finite differences| =",
          f"{np.abs(fd - res.sensitivity).max():.2e}")
    for label, row in zip(Theta.labels(3), res.sensitivity):
        if np.abs(row).max() > 1e-9:
            print(f"  d u0 / d {label:14s}", np.round(row, 5))
