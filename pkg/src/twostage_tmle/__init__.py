"""Two-stage targeted minimum loss-based estimation for cluster randomized
trials.

Stage 1 adjusts each cluster's endpoint for differential outcome
missingness (per-cluster TMLE with a cross-validated learner ensemble);
Stage 2 estimates the intervention effect across clusters with adaptive
covariate adjustment and influence-curve inference. A seeded simulation
laboratory generates benchmark trials, computes counterfactual truths, and
runs the comparator estimators head to head.
"""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
