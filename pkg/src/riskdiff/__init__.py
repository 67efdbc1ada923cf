"""Risk-guided diffusion navigation.

A waypoint diffusion policy (fast, learned) constrained at inference time by
a CVaR traversability risk map (slow, physics-based).
"""

__version__ = "0.1.0"
