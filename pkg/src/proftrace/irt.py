"""One-parameter ogive IRT and its hierarchical extension.

The response model is P(correct) = Phi(theta_s - beta_i) with Phi the
standard normal CDF. Parameters are MAP estimates under independent
Gaussian priors; the hierarchical variant shares a per-group difficulty
mean mu_j with variance sigma2, and mu_j ~ N(0, tau2).

Fitting uses damped Newton ascent with per-parameter curvature and a
backtracking line search, so the objective is non-decreasing across
iterations. The hierarchical objective is optimized in the offset
parameterization delta_i = beta_i - mu_j(i), which removes the stiff
coupling between beta and mu for small sigma2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr

from .dataio import DataError, Dataset

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_PARAM_MAGIC = "proftrace-params v1"


class DivergenceError(RuntimeError):
    """The objective became non-finite during optimization."""


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    damping: float = 0.0
    probability_floor: float = 1e-12

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if not 0.0 < self.probability_floor < 0.5:
            raise ValueError("probability_floor must be in (0, 0.5)")


@dataclass(eq=False)
class FitInfo:
    iterations: int
    converged: bool
    objective: float
    grad_norm: float
    objective_trace: list


@dataclass(eq=False)
class IrtParameters:
    theta: np.ndarray
    beta: np.ndarray
    fit_info: Optional[FitInfo] = field(default=None, repr=False)


@dataclass(eq=False)
class HirtParameters:
    theta: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: float
    tau2: float
    fit_info: Optional[FitInfo] = field(default=None, repr=False)


def probit(x):
    """Standard normal CDF, the ogive response link."""
    return ndtr(x)


def _phi(x):
    return np.exp(-0.5 * np.asarray(x, dtype=float) ** 2) / _SQRT_2PI


def _link_terms(z, r, floor):
    """Per-response log-likelihood and its first two derivatives in z.

    z is the (possibly discounted) proficiency-difficulty gap, r the 0/1
    correctness. Probabilities entering logs and denominators are clipped
    to [floor, 1-floor].
    """
    z = np.asarray(z, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.clip(ndtr(z), floor, 1.0 - floor)
    pdf = _phi(z)
    value = r * np.log(p) + (1.0 - r) * np.log(1.0 - p)
    d1 = pdf * (r - p) / (p * (1.0 - p))
    d2 = -d1 * (z + d1)
    return value, d1, d2


def _loglik_value(z, r, floor):
    z = np.asarray(z, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.clip(ndtr(z), floor, 1.0 - floor)
    return float(np.sum(r * np.log(p) + (1.0 - r) * np.log(1.0 - p)))


def irt_log_posterior(params: IrtParameters, dataset: Dataset,
                      probability_floor: float = 1e-12):
    """Log posterior of (theta, beta) up to a constant, with its gradient.

    Returns (value, grad_theta, grad_beta).
    """
    s, i, r, _ = dataset.arrays
    theta, beta = params.theta, params.beta
    z = theta[s] - beta[i]
    ll, d1, _ = _link_terms(z, r, probability_floor)
    value = float(np.sum(ll)) - 0.5 * float(np.dot(theta, theta)) \
        - 0.5 * float(np.dot(beta, beta))
    grad_theta = np.bincount(s, weights=d1, minlength=len(theta)) - theta
    grad_beta = -np.bincount(i, weights=d1, minlength=len(beta)) - beta
    return value, grad_theta, grad_beta


def hirt_log_posterior(params: HirtParameters, dataset: Dataset,
                       probability_floor: float = 1e-12):
    """Hierarchical log posterior up to a constant, with its gradients.

    Returns (value, grad_theta, grad_beta, grad_mu). Every item must
    belong to a group.
    """
    item_group = _require_groups(dataset)
    s, i, r, _ = dataset.arrays
    theta, beta, mu = params.theta, params.beta, params.mu
    z = theta[s] - beta[i]
    ll, d1, _ = _link_terms(z, r, probability_floor)
    dev = beta - mu[item_group]
    value = (float(np.sum(ll))
             - 0.5 * float(np.dot(theta, theta))
             - 0.5 / params.sigma2 * float(np.dot(dev, dev))
             - 0.5 / params.tau2 * float(np.dot(mu, mu)))
    grad_theta = np.bincount(s, weights=d1, minlength=len(theta)) - theta
    grad_beta = (-np.bincount(i, weights=d1, minlength=len(beta))
                 - dev / params.sigma2)
    grad_mu = (np.bincount(item_group, weights=dev, minlength=len(mu))
               / params.sigma2 - mu / params.tau2)
    return value, grad_theta, grad_beta, grad_mu


def _require_groups(dataset: Dataset):
    item_group = dataset.item_group
    if np.any(item_group < 0):
        missing = int(np.sum(item_group < 0))
        raise DataError(f"{missing} items have no group; the hierarchical "
                        "model requires a complete item-group map")
    return item_group


def _ascend(x0, evaluate, opts: FitOptions, label: str):
    """Damped Newton ascent with backtracking; returns (x, FitInfo).

    ``evaluate(x)`` -> (value, grad, curvature); curvature entries must be
    strictly negative (concave blocks). ``evaluate(x, value_only=True)``
    -> value.
    """
    x = np.asarray(x0, dtype=float).copy()
    x_prev = x.copy()
    value, grad, curv = evaluate(x)
    trace = [value]
    converged = False
    iterations = 0
    for it in range(opts.max_iterations):
        if not np.isfinite(value):
            raise DivergenceError(f"{label}: non-finite objective at "
                                  f"iteration {it}")
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= opts.gradient_tolerance:
            converged = True
            break
        step = grad / (-curv + opts.damping)
        # Momentum accelerates the linear tail of the block-diagonal Newton
        # iteration; the objective guard keeps the ascent monotone.
        momentum = x - x_prev
        x_new = None
        for m in (0.9, 0.5):
            x_try = x + step + m * momentum
            v_try = evaluate(x_try, value_only=True)
            if np.isfinite(v_try) and v_try > value:
                x_new = x_try
                break
        if x_new is None:
            slope = float(np.dot(grad, step))
            t = 1.0
            while t > 1e-14:
                x_try = x + t * step
                v_try = evaluate(x_try, value_only=True)
                if np.isfinite(v_try) and v_try >= value + 1e-4 * t * slope:
                    x_new = x_try
                    break
                t *= 0.5
            if x_new is None:
                break  # no uphill progress at machine precision
        x_prev, x = x, x_new
        value, grad, curv = evaluate(x)
        trace.append(value)
        iterations = it + 1
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    if not converged:
        converged = gnorm <= opts.gradient_tolerance
    return x, FitInfo(iterations=iterations, converged=converged,
                      objective=value, grad_norm=gnorm,
                      objective_trace=trace)


def fit_irt(dataset: Dataset, opts: Optional[FitOptions] = None,
            *, theta_prior_var: float = 1.0,
            beta_prior_var: float = 1.0) -> IrtParameters:
    """MAP fit of the one-parameter model. Starts from the prior means.

    The optional prior variances generalize the standard-normal priors;
    the defaults give the plain model.
    """
    opts = opts or FitOptions()
    s, i, r, _ = dataset.arrays
    if len(dataset.records) == 0:
        raise ValueError("cannot fit an empty dataset")
    n_s, n_i = dataset.n_students, dataset.n_items
    floor = opts.probability_floor
    inv_vt, inv_vb = 1.0 / theta_prior_var, 1.0 / beta_prior_var

    def evaluate(x, value_only=False):
        theta, beta = x[:n_s], x[n_s:]
        z = theta[s] - beta[i]
        prior = (-0.5 * inv_vt * float(np.dot(theta, theta))
                 - 0.5 * inv_vb * float(np.dot(beta, beta)))
        if value_only:
            return _loglik_value(z, r, floor) + prior
        ll, d1, d2 = _link_terms(z, r, floor)
        value = float(np.sum(ll)) + prior
        grad = np.concatenate([
            np.bincount(s, weights=d1, minlength=n_s) - inv_vt * theta,
            -np.bincount(i, weights=d1, minlength=n_i) - inv_vb * beta,
        ])
        curv = np.concatenate([
            np.bincount(s, weights=d2, minlength=n_s) - inv_vt,
            np.bincount(i, weights=d2, minlength=n_i) - inv_vb,
        ])
        return value, grad, curv

    x, info = _ascend(np.zeros(n_s + n_i), evaluate, opts, "irt")
    return IrtParameters(theta=x[:n_s], beta=x[n_s:], fit_info=info)


def fit_hirt(dataset: Dataset, sigma2: float, tau2: float,
             opts: Optional[FitOptions] = None) -> HirtParameters:
    """MAP fit of the hierarchical model for given (sigma2, tau2)."""
    if sigma2 <= 0 or tau2 <= 0:
        raise ValueError("sigma2 and tau2 must be positive")
    opts = opts or FitOptions()
    item_group = _require_groups(dataset)
    s, i, r, _ = dataset.arrays
    rec_group = item_group[i]
    n_s, n_i, n_g = dataset.n_students, dataset.n_items, dataset.n_groups
    floor = opts.probability_floor

    def evaluate(x, value_only=False):
        theta = x[:n_s]
        delta = x[n_s:n_s + n_i]
        mu = x[n_s + n_i:]
        z = theta[s] - delta[i] - mu[rec_group]
        prior = (-0.5 * float(np.dot(theta, theta))
                 - 0.5 / sigma2 * float(np.dot(delta, delta))
                 - 0.5 / tau2 * float(np.dot(mu, mu)))
        if value_only:
            return _loglik_value(z, r, floor) + prior
        ll, d1, d2 = _link_terms(z, r, floor)
        value = float(np.sum(ll)) + prior
        grad = np.concatenate([
            np.bincount(s, weights=d1, minlength=n_s) - theta,
            -np.bincount(i, weights=d1, minlength=n_i) - delta / sigma2,
            -np.bincount(rec_group, weights=d1, minlength=n_g) - mu / tau2,
        ])
        curv = np.concatenate([
            np.bincount(s, weights=d2, minlength=n_s) - 1.0,
            np.bincount(i, weights=d2, minlength=n_i) - 1.0 / sigma2,
            np.bincount(rec_group, weights=d2, minlength=n_g) - 1.0 / tau2,
        ])
        return value, grad, curv

    x, info = _ascend(np.zeros(n_s + n_i + n_g), evaluate, opts, "hirt")
    theta = x[:n_s]
    delta = x[n_s:n_s + n_i]
    mu = x[n_s + n_i:]
    beta = delta + mu[item_group]
    return HirtParameters(theta=theta, beta=beta, mu=mu, sigma2=sigma2,
                          tau2=tau2, fit_info=info)


def predict_irt(params: IrtParameters, student: Optional[int],
                item: Optional[int]) -> float:
    """P(correct) for a (student, item) index pair.

    ``None`` falls back to the prior mean 0 for the corresponding
    parameter (unseen student or item).
    """
    theta = params.theta[student] if student is not None else 0.0
    beta = params.beta[item] if item is not None else 0.0
    return float(ndtr(theta - beta))


def predict_hirt(params: HirtParameters, student: Optional[int],
                 item: Optional[int], group: Optional[int] = None) -> float:
    """Hierarchical prediction; an unseen item falls back to its group mean."""
    theta = params.theta[student] if student is not None else 0.0
    if item is not None:
        beta = params.beta[item]
    elif group is not None:
        beta = params.mu[group]
    else:
        beta = 0.0
    return float(ndtr(theta - beta))


def solve_theta_map(betas, corrects, discounts=None, *, x0: float = 0.0,
                    tolerance: float = 1e-9,
                    probability_floor: float = 1e-12,
                    max_iterations: int = 200) -> float:
    """1-D MAP of theta for a fixed response history under the N(0,1) prior.

    Maximizes sum_k ll(discount_k * (theta - beta_k)) - theta^2/2, which is
    strictly concave, by safeguarded Newton with a bisection fallback.
    ``discounts=None`` means the undiscounted (static) objective.
    """
    betas = np.asarray(betas, dtype=float)
    corrects = np.asarray(corrects, dtype=float)
    if betas.size == 0:
        return 0.0
    alphas = np.ones_like(betas) if discounts is None \
        else np.asarray(discounts, dtype=float)

    def grad_curv(theta):
        z = alphas * (theta - betas)
        _, d1, d2 = _link_terms(z, corrects, probability_floor)
        g = float(np.sum(alphas * d1)) - theta
        c = float(np.sum(alphas * alphas * d2)) - 1.0
        return g, c

    # The prior term dominates far out, so a sign change always exists.
    lo, hi = -8.0, 8.0
    g_lo, _ = grad_curv(lo)
    g_hi, _ = grad_curv(hi)
    while g_lo < 0 and lo > -1024.0:
        lo *= 2.0
        g_lo, _ = grad_curv(lo)
    while g_hi > 0 and hi < 1024.0:
        hi *= 2.0
        g_hi, _ = grad_curv(hi)

    x = float(np.clip(x0, lo, hi))
    for _ in range(max_iterations):
        g, c = grad_curv(x)
        if g > 0:
            lo = x
        else:
            hi = x
        if abs(g) <= 1e-13:
            break
        x_new = x - g / c
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tolerance and abs(g) < 1e-6:
            x = x_new
            break
        x = x_new
    return x


def refit_student(item_betas, corrects, *, x0: float = 0.0,
                  tolerance: float = 1e-9,
                  probability_floor: float = 1e-12) -> float:
    """Re-estimate a single student's proficiency on frozen item difficulties.

    Pure function of its inputs; an empty history returns the prior mean 0.
    """
    return solve_theta_map(item_betas, corrects, None, x0=x0,
                           tolerance=tolerance,
                           probability_floor=probability_floor)


def save_parameters(path: Union[str, Path], params, dataset: Dataset,
                    model: str, hyper: Optional[dict] = None):
    """Write fitted parameters as a versioned flat file.

    Floats are written with repr() so the round trip is bit-exact; the
    header records the model kind, hyperparameters, and the dataset's
    index-map hash.
    """
    hyper = hyper or {}
    students = list(dataset.student_index)
    items = list(dataset.item_index)
    groups = list(dataset.group_index)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_PARAM_MAGIC + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", model])
        writer.writerow(["index_hash", dataset.index_hash()])
        for name in sorted(hyper):
            writer.writerow(["hyper", name, repr(hyper[name])])
        writer.writerow(["kind", "id", "value"])
        for sid, v in zip(students, params.theta):
            writer.writerow(["theta", sid, repr(float(v))])
        for iid, v in zip(items, params.beta):
            writer.writerow(["beta", iid, repr(float(v))])
        if isinstance(params, HirtParameters):
            for gid, v in zip(groups, params.mu):
                writer.writerow(["mu", gid, repr(float(v))])


def load_parameters(path: Union[str, Path], dataset: Dataset):
    """Read a parameter file written by save_parameters.

    Returns (model, hyper, params). Fails if the file does not match the
    dataset's index maps.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != _PARAM_MAGIC:
            raise ValueError(f"{path}: not a parameter file (got {magic!r})")
        reader = csv.reader(fh)
        model = None
        hyper = {}
        theta = np.zeros(dataset.n_students)
        beta = np.zeros(dataset.n_items)
        mu = np.zeros(dataset.n_groups)
        saw_mu = False
        for row in reader:
            if not row:
                continue
            tag = row[0]
            if tag == "model":
                model = row[1]
            elif tag == "index_hash":
                if row[1] != dataset.index_hash():
                    raise ValueError(f"{path}: parameter file does not match "
                                     "this dataset's index maps")
            elif tag == "hyper":
                hyper[row[1]] = float(row[2])
            elif tag == "kind":
                continue
            elif tag == "theta":
                theta[dataset.student_index[row[1]]] = float(row[2])
            elif tag == "beta":
                beta[dataset.item_index[row[1]]] = float(row[2])
            elif tag == "mu":
                saw_mu = True
                mu[dataset.group_index[row[1]]] = float(row[2])
            else:
                raise ValueError(f"{path}: unknown row kind {tag!r}")
    if model is None:
        raise ValueError(f"{path}: missing model header")
    if saw_mu or model == "hirt":
        params = HirtParameters(theta=theta, beta=beta, mu=mu,
                                sigma2=hyper.get("sigma2", 1.0),
                                tau2=hyper.get("tau2", 1.0))
    else:
        params = IrtParameters(theta=theta, beta=beta)
    return model, hyper, params
