"""Hemispherical perimeter-defense game: Nash breach-point geometry, a heterogeneous
multi-agent simulator, payoff-based assignment and an embedded mean-field
actor-critic learner with baselines."""

__version__ = "0.1.0"
