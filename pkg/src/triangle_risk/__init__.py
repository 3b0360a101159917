"""Reserving and economic-capital engine for multi-line P&C insurers.

The package fits Tweedie double generalized linear models with lag-one
autocorrelated innovations to loss-ratio run-off triangles, couples
business lines through a hierarchical copula on standardized innovations,
completes the lower triangles by conditional Monte Carlo, and reports
value-at-risk, tail value-at-risk, Euler allocations, diversification
benefit and cost-of-capital risk adjustments on the simulated reserves.
"""
from triangle_risk.backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
