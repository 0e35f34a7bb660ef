"""A short learning run through the same entry point as the CLI.

Trains for a few 5-day months and prints the monthly metrics; the output
directory holds the same CSV files as ``mpc-battery-rl train``.
"""
import sys
import tempfile

from mpc_battery_rl import cli

config = cli.RunConfig.load(sys.argv[1] if len(sys.argv) > 1 else "demos/configs/quick.json")
config.out_dir = tempfile.mkdtemp(prefix="mpc_rl_demo_")
metrics = cli.train(config)
print(f"{'month':>5} {'J':>9} {'grad_norm':>10} {'degenerate':>10} {'violations':>10}")
for m in metrics.months:
    print(f"{m.month:5d} {m.J:9.1f} {m.grad_norm:10.3g} {m.samples_degenerate:10d}"
          f" {m.violation_rate:10.3f}")
print("final theta:", {k: [round(v, 3) for v in vals]
                       for k, vals in metrics.theta_final.to_dict().items()})
print("files written to", config.out_dir)
