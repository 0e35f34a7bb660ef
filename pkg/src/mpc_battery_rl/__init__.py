"""MPC-based deterministic policy gradient learning for a battery fleet."""
from .model import FleetConfig
from .mpc import MpcConfig, Theta
from .prices import PriceSeries

__all__ = ["FleetConfig", "MpcConfig", "Theta", "PriceSeries"]
__version__ = "0.1.0"
