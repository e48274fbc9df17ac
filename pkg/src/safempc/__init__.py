"""Unicycle NMPC with discrete-time control-barrier-function obstacle avoidance."""

__version__ = "0.1.0"
