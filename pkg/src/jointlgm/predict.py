"""Post-fit prediction: Kaplan-Meier curves, model-based survival curves and
fitted longitudinal trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyData, TimeOutsideKnotRange, UnknownSubject
from .inference import FitResult
from .model import AssociationStructure, association_weights


@dataclass(frozen=True)
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    kind: str  # "KaplanMeier" | "ModelMean" | "SubjectSpecific"
    subject_id: object = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "survival", np.asarray(self.survival, dtype=np.float64))


def kaplan_meier(times, events) -> SurvivalCurve:
    """Product-limit estimator under right censoring.

    events uses 1 for an observed event, 0 for a censoring time.  The curve
    is the step function evaluated just after each distinct event time,
    starting from (0, 1).
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if times.size == 0:
        raise EmptyData("no survival rows")
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    out_t = [0.0]
    out_s = [1.0]
    s = 1.0
    for t in np.unique(times[events == 1]):
        at_risk = int(np.sum(times >= t))
        d = int(np.sum((times == t) & (events == 1)))
        s *= 1.0 - d / at_risk
        out_t.append(float(t))
        out_s.append(s)
    return SurvivalCurve(np.array(out_t), np.array(out_s), "KaplanMeier")


def _survival_from_predictor(times, eta_fn, kappa: float) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    out = np.empty(times.size)
    for i, s in enumerate(times):
        if s <= 0:
            out[i] = 1.0
        else:
            out[i] = np.exp(-(s**kappa) * np.exp(eta_fn(float(s))))
    return out


def subject_survival(fit: FitResult, subject_id, times) -> SurvivalCurve:
    """Plug-in survival curve S(s) = exp(-s^kappa e^eta(s)) at posterior means."""
    if subject_id not in fit.subject_effects:
        raise UnknownSubject(f"subject {subject_id!r} not in the fit")
    eff = fit.subject_effects[subject_id]
    struct = AssociationStructure(fit.association_kind)
    nu = fit.nu_mean if fit.nu_mean else tuple([0.0] * struct.n_params)

    def eta(s):
        ww, wv = association_weights(struct, nu, s)
        return eff["gz"] + ww * eff["w"] + wv * eff["v"] + eff["m"]

    surv = _survival_from_predictor(times, eta, fit.kappa_mean)
    return SurvivalCurve(np.asarray(times, dtype=np.float64), surv,
                         "SubjectSpecific", subject_id=subject_id)


def mean_survival(fit: FitResult, times) -> SurvivalCurve:
    """Population curve: zero random effects, average covariate contribution."""
    gz = [eff["gz"] for eff in fit.subject_effects.values()]
    gz_bar = float(np.mean(gz)) if gz else 0.0
    surv = _survival_from_predictor(times, lambda s: gz_bar, fit.kappa_mean)
    return SurvivalCurve(np.asarray(times, dtype=np.float64), surv, "ModelMean")


def trajectory(fit: FitResult, subject_id, times):
    """Posterior mean and 95% band of the subject's longitudinal predictor.

    Interpolated from the per-subject trajectory grid stored at fit time
    (exact at the spline knots).  Returns (mean, lower, upper) arrays.
    """
    if fit.subject_trajectory is None:
        raise EmptyData("fit carries no trajectory information")
    per = fit.subject_trajectory["per_subject"]
    if subject_id not in per:
        raise UnknownSubject(f"subject {subject_id!r} not in the fit")
    grid = np.asarray(fit.subject_trajectory["times"], dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    eps = 1e-9 * max(1.0, grid[-1] - grid[0])
    if np.any(times < grid[0] - eps) or np.any(times > grid[-1] + eps):
        raise TimeOutsideKnotRange(
            f"requested times outside the knot span [{grid[0]}, {grid[-1]}]")
    mean = np.interp(times, grid, np.asarray(per[subject_id]["mean"]))
    sd = np.interp(times, grid, np.asarray(per[subject_id]["sd"]))
    return mean, mean - 1.96 * sd, mean + 1.96 * sd
