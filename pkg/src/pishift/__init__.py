"""Conformal prediction under covariate shift with physics-informed predictors."""
from .conformal import augmented_quantile, conformal_score, predict_interval
from .diagnostics import DivergenceReport, coverage_divergence, wasserstein_exact, wasserstein_grid
from .weighted import WeightedDistribution, weighted_distribution, weighted_quantile

__version__ = "0.1.0"
