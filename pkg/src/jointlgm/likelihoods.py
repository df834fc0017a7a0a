"""Observation log-likelihoods and their derivatives in the linear predictor.

Two families: Gaussian (longitudinal outcomes) and Weibull with right
censoring (event times), the latter with the exponential model as the
shape-one special case.  Scalar wrappers carry the per-observation types;
the array forms are what the inference engine calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositivePrecision, NonPositiveShape, NonPositiveTime

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LongObs:
    """One longitudinal observation: response, linear predictor, noise precision."""

    y: float
    eta: float
    tau_eps: float

    def __post_init__(self):
        if self.tau_eps <= 0:
            raise NonPositivePrecision(f"tau_eps must be positive, got {self.tau_eps}")


@dataclass(frozen=True)
class SurvObs:
    """One right-censored survival observation.

    c = 1 means the event was observed at time s, c = 0 means s is a right
    censoring time.  The linear predictor is treated as constant over
    (0, s], so the cumulative hazard is s^kappa * exp(eta).
    """

    s: float
    c: int
    eta: float
    kappa: float

    def __post_init__(self):
        if self.s <= 0:
            raise NonPositiveTime(f"time must be positive, got {self.s}")
        if self.c not in (0, 1):
            raise ValueError(f"censoring indicator must be 0 or 1, got {self.c}")
        if self.kappa <= 0:
            raise NonPositiveShape(f"kappa must be positive, got {self.kappa}")


def gaussian_loglik_arrays(y, eta, tau_eps):
    """log N(y | eta, 1/tau_eps), elementwise."""
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    return 0.5 * (np.log(tau_eps) - LOG_2PI) - 0.5 * tau_eps * (y - eta) ** 2


def gaussian_grad_hess_arrays(y, eta, tau_eps):
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    grad = tau_eps * (y - eta)
    hess = np.full_like(grad, -tau_eps)
    return grad, hess


def weibull_loglik_arrays(s, c, eta, kappa, s_pow=None, log_s=None):
    """Right-censored Weibull log-likelihood, elementwise.

    c * [log kappa + (kappa-1) log s + eta] - s^kappa * exp(eta).
    No clamping: exp overflow yields -inf, which callers treat as a rejected
    point rather than a silently distorted value.  s_pow and log_s may carry
    precomputed s**kappa and log(s).
    """
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if s_pow is None:
        s_pow = np.power(s, kappa)
    if log_s is None:
        log_s = np.log(s)
    with np.errstate(over="ignore"):
        cumhaz = s_pow * np.exp(eta)
        out = c * (np.log(kappa) + (kappa - 1.0) * log_s + eta) - cumhaz
    return np.where(np.isfinite(out), out, -np.inf)


def weibull_grad_hess_arrays(s, c, eta, kappa, s_pow=None):
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if s_pow is None:
        s_pow = np.power(s, kappa)
    with np.errstate(over="ignore"):
        cumhaz = s_pow * np.exp(eta)
    return c - cumhaz, -cumhaz


def gaussian_loglik(obs: LongObs) -> float:
    return float(gaussian_loglik_arrays(obs.y, obs.eta, obs.tau_eps))


def weibull_loglik(obs: SurvObs) -> float:
    return float(weibull_loglik_arrays(obs.s, obs.c, obs.eta, obs.kappa))


def loglik_grad_hess(obs: LongObs | SurvObs) -> tuple[float, float]:
    """(d/d eta, d^2/d eta^2) of the observation log-likelihood.

    Gaussian: (tau_eps (y - eta), -tau_eps).  Weibull: (c - H, -H) with
    H = s^kappa exp(eta); the curvature is strictly negative for both
    families, so Newton steps on the latent field are always well-defined.
    """
    if isinstance(obs, LongObs):
        g, h = gaussian_grad_hess_arrays(obs.y, obs.eta, obs.tau_eps)
    elif isinstance(obs, SurvObs):
        g, h = weibull_grad_hess_arrays(obs.s, obs.c, obs.eta, obs.kappa)
    else:
        raise TypeError(f"unsupported observation type {type(obs)!r}")
    return float(g), float(h)
