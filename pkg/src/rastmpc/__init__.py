"""Resource-aware stochastic self-triggered model predictive control."""

__version__ = "0.1.0"
