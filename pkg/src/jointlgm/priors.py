"""Hyperparameter priors and transforms to the unconstrained scale.

Precision-type hyperparameters get penalized complexity priors by default:
exponential shrinkage of the standard deviation toward zero, which on the
precision scale is the Gumbel type-2 density

    pi(tau) = (lambda / 2) tau^{-3/2} exp(-lambda tau^{-1/2}),

normalized so that P(1/sqrt(tau) > u) = alpha exactly when
lambda = -ln(alpha) / u.  Remaining hyperparameters take Gaussian priors on
their unconstrained scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonPositivePrecision, NonPositiveTau, UnknownHyperparameter

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PcPrecisionPrior:
    """Shrinkage prior on a precision, parameterized by a tail condition.

    u and alpha fix P(sd > u) = alpha; lambda_ = -ln(alpha)/u is derived.
    """

    u: float
    alpha: float

    def __post_init__(self):
        if self.u <= 0:
            raise ValueError("u must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def lambda_(self) -> float:
        return -float(np.log(self.alpha)) / self.u

    def mode(self) -> float:
        return (self.lambda_ / 3.0) ** 2


def pc_precision_logdensity(tau, prior: PcPrecisionPrior):
    """Log density of the PC precision prior at tau (> 0)."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise NonPositiveTau("tau must be positive")
    lam = prior.lambda_
    return np.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)


def gaussian_logprior(x, mean: float, precision: float):
    """Gaussian log density with the given mean and precision."""
    if precision <= 0:
        raise NonPositivePrecision("precision must be positive")
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (np.log(precision) - LOG_2PI) - 0.5 * precision * (x - mean) ** 2


@dataclass(frozen=True)
class HyperTransform:
    """Bijection between a hyperparameter's user scale and the real line.

    log_jacobian(z) is log |d user / d z| at the unconstrained value z, the
    term that converts a user-scale density into an unconstrained one.
    """

    name: str
    forward: Callable[[float], float]
    backward: Callable[[float], float]
    log_jacobian: Callable[[float], float]


def log_transform(name: str) -> HyperTransform:
    return HyperTransform(name, forward=np.log, backward=np.exp, log_jacobian=lambda z: z)


def fisher_z_transform(name: str) -> HyperTransform:
    # rho = tanh(z/2);  d rho / d z = (1 - rho^2) / 2
    return HyperTransform(
        name,
        forward=lambda r: np.log((1.0 + r) / (1.0 - r)),
        backward=lambda z: np.tanh(z / 2.0),
        log_jacobian=lambda z: float(np.log((1.0 - np.tanh(z / 2.0) ** 2) / 2.0)),
    )


def identity_transform(name: str) -> HyperTransform:
    return HyperTransform(name, forward=lambda x: x, backward=lambda x: x,
                          log_jacobian=lambda z: 0.0)


# transform kind per hyperparameter name
_TRANSFORM_KINDS = {
    "tau_eps": log_transform,
    "kappa": log_transform,
    "tau_alpha": log_transform,
    "tau_w": log_transform,
    "tau_v": log_transform,
    "tau_m": log_transform,
    "rho": fisher_z_transform,
    "nu": identity_transform,
    "nu1": identity_transform,
    "nu2": identity_transform,
}


def transform_for(name: str) -> HyperTransform:
    try:
        return _TRANSFORM_KINDS[name](name)
    except KeyError:
        raise UnknownHyperparameter(f"no transform registered for {name!r}") from None


def transform_registry(names) -> list[HyperTransform]:
    """Transforms (in the given order) for the model's free hyperparameters."""
    return [transform_for(n) for n in names]


class HyperPrior:
    """Prior for one hyperparameter, evaluable on either scale.

    kind "pc_precision" places the PC density on the user (precision) scale;
    kind "gaussian" places a Gaussian directly on the unconstrained scale
    (log for precisions and the Weibull shape, Fisher-z for the correlation,
    identity for association weights).  The two evaluations are linked by the
    transform Jacobian, so prior mass is preserved under change of variables.
    """

    def __init__(self, name: str, spec: dict):
        self.name = name
        self.transform = transform_for(name)
        kind = spec.get("type")
        if kind == "pc_precision":
            self.pc = PcPrecisionPrior(u=float(spec["u"]), alpha=float(spec["alpha"]))
            self.kind = "pc_precision"
        elif kind == "gaussian":
            self.mean = float(spec["mean"])
            self.precision = float(spec["precision"])
            self.kind = "gaussian"
        else:
            raise UnknownHyperparameter(f"unknown prior type {kind!r} for {name!r}")

    def log_density_user(self, value: float) -> float:
        """Density of the hyperparameter on its user scale."""
        if self.kind == "pc_precision":
            return float(pc_precision_logdensity(value, self.pc))
        z = self.transform.forward(value)
        # Gaussian lives on z; pull back through |dz/d user| = 1/|d user/dz|
        return float(gaussian_logprior(z, self.mean, self.precision)) - self.transform.log_jacobian(z)

    def log_density_unconstrained(self, z: float) -> float:
        """Density of the transformed hyperparameter on the real line."""
        if self.kind == "pc_precision":
            tau = self.transform.backward(z)
            return float(pc_precision_logdensity(tau, self.pc)) + self.transform.log_jacobian(z)
        return float(gaussian_logprior(z, self.mean, self.precision))

    def start_value(self) -> float:
        """Deterministic optimizer start on the user scale."""
        if self.kind == "pc_precision":
            return self.pc.mode()
        return float(self.transform.backward(self.mean))


def default_prior_spec(name: str) -> dict:
    """Default prior settings per hyperparameter."""
    if name in ("tau_eps", "tau_alpha", "tau_w", "tau_v", "tau_m"):
        return {"type": "pc_precision", "u": 1.0, "alpha": 0.01}
    if name == "kappa":
        return {"type": "gaussian", "mean": 0.0, "precision": 0.01}
    if name == "rho":
        return {"type": "gaussian", "mean": 0.0, "precision": 0.15}
    if name in ("nu", "nu1", "nu2"):
        return {"type": "gaussian", "mean": 0.0, "precision": 0.001}
    raise UnknownHyperparameter(name)
