"""Temporal IRT: proficiency drift with closed-form response discounting.

The student's proficiency is modeled as a random walk whose variance grows
linearly with interaction lag at rate gamma2. Integrating out past
proficiencies shrinks each historical response's contribution by a factor
alpha = (1 + gamma2 * lag)^(-1/2); the current proficiency is then a 1-D
MAP estimate over the discounted history, with item difficulties frozen
from a prior static fit.

gamma2 = 0 makes every discount 1.0 and reduces the model exactly to
static IRT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .irt import _link_terms, solve_theta_map


@dataclass(frozen=True)
class TirtConfig:
    gamma2: float = 0.0

    def __post_init__(self):
        if self.gamma2 < 0:
            raise ValueError(f"gamma2 must be non-negative, got {self.gamma2}")


@dataclass(eq=False)
class DiscountedHistory:
    """A student's past responses with their discount factors."""

    beta: np.ndarray
    correct: np.ndarray
    discount: np.ndarray

    @classmethod
    def build(cls, betas, corrects, lags, gamma2: float):
        betas = np.asarray(betas, dtype=float)
        corrects = np.asarray(corrects, dtype=float)
        return cls(beta=betas, correct=corrects,
                   discount=discount_factor(gamma2, lags))


def discount_factor(gamma2, lag):
    """Weight of a response ``lag`` interactions old: (1 + gamma2*lag)^(-1/2)."""
    lag = np.asarray(lag, dtype=float)
    if np.any(lag < 0):
        raise ValueError("lag must be non-negative")
    if np.any(np.asarray(gamma2, dtype=float) < 0):
        raise ValueError("gamma2 must be non-negative")
    out = (1.0 + gamma2 * lag) ** -0.5
    return float(out) if out.ndim == 0 else out


def tirt_log_posterior(theta: float, history: DiscountedHistory,
                       probability_floor: float = 1e-12):
    """Discounted log posterior of the current proficiency, with derivatives.

    Returns (value, grad, curvature); the curvature is strictly negative,
    so the 1-D MAP is unique.
    """
    a = history.discount
    z = a * (theta - history.beta)
    ll, d1, d2 = _link_terms(z, history.correct, probability_floor)
    value = float(np.sum(ll)) - 0.5 * theta * theta
    grad = float(np.sum(a * d1)) - theta
    curvature = float(np.sum(a * a * d2)) - 1.0
    return value, grad, curvature


def estimate_current_proficiency(betas, corrects, lags, cfg: TirtConfig,
                                 *, x0: float = 0.0,
                                 tolerance: float = 1e-9) -> float:
    """MAP proficiency at the time of the next response.

    ``lags`` are interaction-index distances from the prediction time to
    each history entry (the most recent entry has lag 1). Empty history
    returns the prior mean 0.
    """
    betas = np.asarray(betas, dtype=float)
    if betas.size == 0:
        return 0.0
    discounts = discount_factor(cfg.gamma2, lags)
    return solve_theta_map(betas, corrects, discounts, x0=x0,
                           tolerance=tolerance)


def predict_tirt(betas, corrects, lags, next_beta: float,
                 cfg: TirtConfig, *, x0: float = 0.0) -> float:
    """P(correct) for the next response given the discounted history."""
    theta = estimate_current_proficiency(betas, corrects, lags, cfg, x0=x0)
    return float(ndtr(theta - next_beta))
