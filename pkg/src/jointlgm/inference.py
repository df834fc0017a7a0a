"""Laplace-approximation inference engine.

Per hyperparameter point: a Gaussian approximation of the latent field by
Newton iteration on the sparse normal equations.  Across hyperparameters: a
Laplace estimate of the (unnormalized) hyperparameter posterior, maximized
by a derivative-free simplex search, then explored on a dense product grid
(low dimension) or a central composite design (higher dimension).  Latent
marginals are weight-mixed Gaussians across the explored points.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.special import ndtr, ndtri

from . import gmrf
from .errors import (
    EmptyGrid,
    JointLgmError,
    MaxIterations,
    NewtonDiverged,
    OptimizerFailed,
    SingularHessian,
)
from .model import LINK_PRECISION, LOG_2PI, HyperParams, StackedDesign

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
SIMPLEX_FATOL = 1e-6
SIMPLEX_MAXFEV = 300
SIMPLEX_MAX_RESTARTS = 20
HESSIAN_STEP = 1e-3
GRID_MAX_POINTS = 20000


@dataclass
class GaussianApprox:
    """Gaussian approximation of the latent field given data and theta.

    mode is over the full field (structural blocks then predictors);
    precision_factor factors the structural system Q(theta) + A' C A with C
    the link-adjusted negated likelihood curvatures.  log_normalizer is the
    approximation's log density at its own mode.
    """

    mode: np.ndarray
    precision_factor: gmrf.Factorization
    log_normalizer: float
    theta: HyperParams
    n_iter: int
    _design: StackedDesign
    _mapping: sp.csr_array
    _curv: np.ndarray        # likelihood curvatures c_i at the mode
    _cov_rest: np.ndarray | None = None

    def cov_rest(self) -> np.ndarray:
        if self._cov_rest is None:
            if self.precision_factor is not None:
                self._cov_rest = self.precision_factor.inverse()
            else:
                self._cov_rest = np.zeros((0, 0))
        return self._cov_rest

    def full_sd(self) -> np.ndarray:
        """Posterior SD of every latent coordinate (structural + predictors)."""
        cov = self.cov_rest()
        var_rest = np.diag(cov) if cov.size else np.zeros(0)
        d = LINK_PRECISION + self._curv
        if self._design._n_pred and cov.size:
            m = self._mapping @ cov
            quad = np.asarray((self._mapping.multiply(m)).sum(axis=1)).ravel()
            var_eta = (LINK_PRECISION / d) ** 2 * quad + 1.0 / d
        else:
            var_eta = 1.0 / d if self._design._n_pred else np.zeros(0)
        return np.sqrt(np.concatenate([var_rest, var_eta]))


def gaussian_approximation(theta: HyperParams, design: StackedDesign,
                           x_init: np.ndarray | None = None) -> GaussianApprox:
    """Newton iteration for the conditional posterior mode of the latent field.

    Each sweep linearizes every likelihood term at the current predictor
    value, solves the resulting Gaussian system, and damps the step if the
    joint objective decreased.  For an all-Gaussian model the first solve
    lands on the exact conditional.
    """
    theta.validate()
    n_rest = design.layout.rest_dim
    n_pred = design._n_pred
    q = design.prior_precision(theta)
    a = design.mapping(theta)

    if x_init is not None and x_init.size == n_rest + n_pred:
        x_rest = x_init[:n_rest].copy()
        eta = x_init[n_rest:].copy()
    else:
        x_rest = np.zeros(n_rest)
        eta = np.asarray(a @ x_rest) if n_pred else np.zeros(0)

    def objective(x_r, e):
        x_full = np.concatenate([x_r, e])
        val = design.log_latent_prior(x_full, theta, q=q)
        if n_pred:
            val += float(np.sum(design.loglik_terms(e, theta)))
        return val

    if n_pred == 0:
        fac = gmrf.cholesky(q) if n_rest else None
        logdet = fac.logdet() if fac is not None else 0.0
        mode = np.zeros(n_rest)
        log_norm = -0.5 * n_rest * LOG_2PI + 0.5 * logdet
        return GaussianApprox(mode, fac, log_norm, theta, 0, design, a, np.zeros(0))

    obj = objective(x_rest, eta)
    fac = None
    curv = None
    for it in range(1, NEWTON_MAX_ITER + 1):
        grad, hess = design.loglik_grad_hess(eta, theta)
        curv = -hess
        if not np.all(np.isfinite(grad)) or not np.all(np.isfinite(curv)) or np.any(curv <= 0):
            raise NewtonDiverged(f"non-finite likelihood linearization at iteration {it}")
        c_hat = LINK_PRECISION * curv / (LINK_PRECISION + curv)
        eta_tilde = eta + grad / curv
        p_rest = q + (a.T @ sp.diags_array(c_hat) @ a).tocsr()
        fac = gmrf.cholesky(p_rest)
        x_new = fac.solve(np.asarray(a.T @ (c_hat * eta_tilde)))
        eta_new = (LINK_PRECISION * np.asarray(a @ x_new) + curv * eta_tilde) \
            / (LINK_PRECISION + curv)

        step_x = x_new - x_rest
        step_eta = eta_new - eta
        scale = 1.0
        obj_new = objective(x_new, eta_new)
        while not np.isfinite(obj_new) or obj_new < obj - 1e-12:
            scale *= 0.5
            if scale < 1e-9:
                raise NewtonDiverged("step damping failed to find an ascent step")
            obj_new = objective(x_rest + scale * step_x, eta + scale * step_eta)
        x_rest = x_rest + scale * step_x
        eta = eta + scale * step_eta
        obj = obj_new
        delta = max(np.max(np.abs(step_x)) if step_x.size else 0.0,
                    np.max(np.abs(step_eta)) if step_eta.size else 0.0) * scale
        if delta < NEWTON_TOL:
            break
    else:
        raise MaxIterations(f"Newton did not converge in {NEWTON_MAX_ITER} iterations")

    # factor and curvature at the accepted mode
    grad, hess = design.loglik_grad_hess(eta, theta)
    curv = -hess
    c_hat = LINK_PRECISION * curv / (LINK_PRECISION + curv)
    p_rest = q + (a.T @ sp.diags_array(c_hat) @ a).tocsr()
    fac = gmrf.cholesky(p_rest) if n_rest else None
    logdet = (fac.logdet() if fac is not None else 0.0) \
        + float(np.sum(np.log(LINK_PRECISION + curv)))
    n_full = n_rest + n_pred
    log_norm = -0.5 * n_full * LOG_2PI + 0.5 * logdet
    mode = np.concatenate([x_rest, eta])
    return GaussianApprox(mode, fac, log_norm, theta, it, design, a, curv)


def log_theta_posterior(z: np.ndarray, design: StackedDesign,
                        x_init: np.ndarray | None = None,
                        transforms=None) -> float:
    """Laplace estimate of the log hyperparameter posterior (up to a constant).

    Evaluated on the unconstrained scale, so the free-hyperparameter prior
    includes the transform log-Jacobians.  An alternative transform list may
    be supplied to evaluate the same posterior under a reparameterization.
    """
    z = np.asarray(z, dtype=np.float64)
    if transforms is None:
        theta = design.hyper_from_z(z)
        lp_theta = design.log_prior_theta_z(z)
    else:
        vals = {nm: float(tr.backward(z[i]))
                for i, (nm, tr) in enumerate(zip(design.free_names, transforms))}
        theta = design.hyper_from_values(vals)
        lp_theta = sum(
            pr.log_density_user(theta.get(nm)) + tr.log_jacobian(z[i])
            for i, (nm, pr, tr) in enumerate(zip(design.free_names, design.hyper_priors,
                                                 transforms)))
    ga = gaussian_approximation(theta, design, x_init=x_init)
    lp_x, lp_y, _ = design.joint_logdensity_parts(ga.mode, theta)
    return float(lp_theta + lp_x + lp_y - ga.log_normalizer)


@dataclass
class ThetaGrid:
    """Explored hyperparameter points with normalized integration weights."""

    names: tuple
    points: np.ndarray        # (n, k) unconstrained coordinates
    log_posterior: np.ndarray
    weights: np.ndarray
    mode_index: int
    hessian_at_mode: np.ndarray
    chol_cov: np.ndarray      # Cholesky factor of the mode covariance
    strategy: str
    step: float
    log_marginal_likelihood: float
    mode_x: np.ndarray | None = None
    z_mode: np.ndarray | None = None
    # per-principal-axis split-normal scales fitted from the axial points
    axial_sigma_minus: np.ndarray | None = None
    axial_sigma_plus: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def _hadamard_columns(k: int) -> np.ndarray:
    """First k balanced columns of a Sylvester Hadamard matrix (col 0 dropped)."""
    m = 1
    h = np.array([[1.0]])
    while m < k + 1:
        h = np.block([[h, h], [h, -h]])
        m *= 2
    return h[:, 1:k + 1]


def _ccd_points(k: int, f0: float) -> tuple[np.ndarray, np.ndarray]:
    """Central composite design on the sphere of radius f0*sqrt(k).

    Integration weights match the Gaussian's zeroth and second moments: the
    center gets 1 - 1/f0^2, sphere points share the rest equally.
    """
    corners = f0 * _hadamard_columns(k)
    axial = np.zeros((2 * k, k))
    r = f0 * math.sqrt(k)
    for i in range(k):
        axial[2 * i, i] = r
        axial[2 * i + 1, i] = -r
    pts = np.vstack([np.zeros((1, k)), corners, axial])
    n_s = pts.shape[0] - 1
    w = np.full(pts.shape[0], (1.0 / f0**2) / n_s)
    w[0] = 1.0 - 1.0 / f0**2
    return pts, w


def optimize_theta(design: StackedDesign, n_threads: int = 1) -> ThetaGrid:
    """Maximize the hyperparameter posterior and lay out integration points.

    Simplex search from the deterministic start, finite-difference Hessian at
    the mode, then either a dense product grid in standardized coordinates
    (dimension <= grid.max_dense_dim; points more than grid.log_drop units
    below the mode are discarded) or a central composite design.
    """
    cfg = design.config.grid
    k = len(design.free_names)

    warm = {"x": None}

    def lp(z):
        try:
            theta = design.hyper_from_z(np.asarray(z, dtype=np.float64))
            ga = gaussian_approximation(theta, design, x_init=warm["x"])
        except JointLgmError:
            return -np.inf
        warm["x"] = ga.mode
        lp_x, lp_y, _ = design.joint_logdensity_parts(ga.mode, theta)
        val = design.log_prior_theta_z(np.asarray(z)) + lp_x + lp_y - ga.log_normalizer
        return val if np.isfinite(val) else -np.inf

    if k == 0:
        z0 = np.zeros((1, 0))
        val = lp(np.zeros(0))
        if not np.isfinite(val):
            raise OptimizerFailed("posterior not finite for the fixed-hyperparameter model")
        return ThetaGrid(
            names=(), points=z0, log_posterior=np.array([val]), weights=np.array([1.0]),
            mode_index=0, hessian_at_mode=np.zeros((0, 0)), chol_cov=np.zeros((0, 0)),
            strategy="fixed", step=cfg.step, log_marginal_likelihood=val,
            mode_x=warm["x"])

    z0 = design.z_start()
    f0_val = lp(z0)
    if not np.isfinite(f0_val):
        raise OptimizerFailed("posterior not finite at the start point")

    # simplex search, restarted from the incumbent until it stops improving
    z_mode = z0
    lp_mode = f0_val
    edge = 1.0
    for _ in range(SIMPLEX_MAX_RESTARTS):
        simplex = np.vstack([z_mode] + [z_mode + edge * e for e in np.eye(k)])
        res = scipy.optimize.minimize(
            lambda z: -lp(z), z_mode, method="Nelder-Mead",
            options={"fatol": SIMPLEX_FATOL, "xatol": 1e-6, "maxfev": SIMPLEX_MAXFEV,
                     "initial_simplex": simplex})
        improved = -res.fun - lp_mode
        if np.isfinite(res.fun) and improved > 0:
            z_mode = np.asarray(res.x, dtype=np.float64)
            lp_mode = float(-res.fun)
        edge = max(0.25 * edge, 0.05)
        if improved < SIMPLEX_FATOL:
            break
    lp_mode = lp(z_mode)
    if not np.isfinite(lp_mode):
        raise OptimizerFailed("posterior not finite at the located mode")
    mode_x = warm["x"]

    # symmetric finite-difference Hessian on the unconstrained scale
    h = HESSIAN_STEP
    hess = np.zeros((k, k))
    warm["x"] = mode_x
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        hess[i, i] = (lp(z_mode + ei) - 2.0 * lp_mode + lp(z_mode - ei)) / h**2
    for i in range(k):
        for j in range(i + 1, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h
            ej[j] = h
            val = (lp(z_mode + ei + ej) - lp(z_mode + ei - ej)
                   - lp(z_mode - ei + ej) + lp(z_mode - ei - ej)) / (4.0 * h**2)
            hess[i, j] = hess[j, i] = val
    neg_hess = -hess
    eigvals, eigvecs = np.linalg.eigh(neg_hess)
    if not np.all(np.isfinite(eigvals)) or np.min(eigvals) <= 0:
        raise SingularHessian(
            f"negative Hessian at the mode is not positive definite (eigs {eigvals})")
    cov = (eigvecs / eigvals) @ eigvecs.T
    chol_cov = np.linalg.cholesky(cov)

    strategy = cfg.strategy
    if strategy == "auto":
        strategy = "grid" if k <= cfg.max_dense_dim else "ccd"

    def eval_points(zs):
        if n_threads > 1:
            def one(z):
                return lp_from_fixed_init(z)
            with ThreadPoolExecutor(max_workers=n_threads) as ex:
                return list(ex.map(one, zs))
        return [lp_from_fixed_init(z) for z in zs]

    def lp_from_fixed_init(z):
        try:
            theta = design.hyper_from_z(z)
            ga = gaussian_approximation(theta, design, x_init=mode_x)
        except JointLgmError:
            return -np.inf
        lp_x, lp_y, _ = design.joint_logdensity_parts(ga.mode, theta)
        val = design.log_prior_theta_z(z) + lp_x + lp_y - ga.log_normalizer
        return float(val) if np.isfinite(val) else -np.inf

    if strategy == "grid":
        step = cfg.step
        seen = {tuple([0] * k): lp_mode}
        frontier = [tuple([0] * k)]
        while frontier and len(seen) < GRID_MAX_POINTS:
            nxt = []
            cand = []
            for pt in frontier:
                for axis in range(k):
                    for d in (-1, 1):
                        nb = list(pt)
                        nb[axis] += d
                        nb = tuple(nb)
                        if nb not in seen:
                            seen[nb] = None
                            cand.append(nb)
            vals = eval_points([z_mode + chol_cov @ (step * np.array(c, dtype=np.float64))
                                for c in cand])
            for c, v in zip(cand, vals):
                seen[c] = v
                if v >= lp_mode - cfg.log_drop:
                    nxt.append(c)
            frontier = nxt
        pts_idx = [p for p, v in seen.items() if v is not None and np.isfinite(v)]
        lps = np.array([seen[p] for p in pts_idx])
        zs = np.array([z_mode + chol_cov @ (step * np.array(p, dtype=np.float64))
                       for p in pts_idx])
        best = float(np.max(lps))
        keep = lps >= best - cfg.log_drop
        zs, lps = zs[keep], lps[keep]
        w = np.exp(lps - best)
        weights = w / w.sum()
        cell = step**k * float(np.prod(np.diag(chol_cov)))
        lml = best + float(np.log(np.sum(w))) + float(np.log(cell))
        sig_minus = sig_plus = None
    else:
        u, w_design = _ccd_points(k, cfg.ccd_f0)
        zs = z_mode + (chol_cov @ u.T).T
        zs[0] = z_mode
        lps = np.array(eval_points(list(zs)))
        lps[0] = lp_mode
        # split-normal scales per principal axis, from the +/- axial points:
        # a Gaussian along axis i would drop by d^2 / (2 sigma^2) at distance d
        n_corner = u.shape[0] - 1 - 2 * k
        d = cfg.ccd_f0 * math.sqrt(k)
        sig_plus = np.ones(k)
        sig_minus = np.ones(k)
        for i in range(k):
            lp_p = lps[1 + n_corner + 2 * i]
            lp_m = lps[1 + n_corner + 2 * i + 1]
            if np.isfinite(lp_p) and lp_mode > lp_p:
                sig_plus[i] = min(max(d / np.sqrt(2.0 * (lp_mode - lp_p)), 0.2), 5.0)
            if np.isfinite(lp_m) and lp_mode > lp_m:
                sig_minus[i] = min(max(d / np.sqrt(2.0 * (lp_mode - lp_m)), 0.2), 5.0)
        finite = np.isfinite(lps)
        zs, lps, w_design = zs[finite], lps[finite], w_design[finite]
        if zs.shape[0] == 0:
            raise OptimizerFailed("no finite CCD points")
        weights = w_design / w_design.sum()
        lml = lp_mode + 0.5 * k * LOG_2PI + float(np.sum(np.log(np.diag(chol_cov))))

    mode_index = int(np.argmax(lps))
    return ThetaGrid(
        names=design.free_names, points=zs, log_posterior=lps, weights=weights,
        mode_index=mode_index, hessian_at_mode=hess, chol_cov=chol_cov,
        strategy=strategy, step=cfg.step, log_marginal_likelihood=lml, mode_x=mode_x,
        z_mode=z_mode, axial_sigma_minus=sig_minus, axial_sigma_plus=sig_plus)


# --- posterior summaries ------------------------------------------------------

@dataclass
class Summary:
    mode: float | None
    mean: float
    sd: float
    q025: float
    q500: float
    q975: float

    def to_dict(self) -> dict:
        d = {"mean": self.mean, "sd": self.sd,
             "q0.025": self.q025, "q0.5": self.q500, "q0.975": self.q975}
        if self.mode is not None:
            d = {"mode": self.mode, **d}
        return d


@dataclass
class FitResult:
    """Posterior summaries for the latent field and the hyperparameters."""

    hyper: dict                      # name -> Summary (user scale)
    latent: dict                     # block name -> dict of summary arrays
    spline: dict | None              # knots, mean, lower, upper
    subjects: list
    subject_effects: dict            # id -> {"gz", "w", "v", "m"}
    subject_trajectory: dict | None  # {"times", per-id {"mean","sd"}}
    log_marginal_likelihood: float
    grid: ThetaGrid
    config_echo: dict = field(default_factory=dict)
    kappa_mean: float | None = None
    nu_mean: tuple = ()
    association_kind: str = "eq6"


def _split_normal_mgf(t: np.ndarray, sm: np.ndarray, sp: np.ndarray) -> np.ndarray:
    """E[exp(t u)] for a split normal with left/right scales sm, sp."""
    t = np.asarray(t, dtype=np.float64)
    return (2.0 / (sm + sp)) * (
        sp * np.exp(0.5 * (t * sp) ** 2) * ndtr(t * sp)
        + sm * np.exp(0.5 * (t * sm) ** 2) * ndtr(-t * sm))


def _theta_exp_moments(grid: ThetaGrid, axis: int, sign: float) -> tuple[float, float]:
    """Mean and SD of exp(sign * z_axis) under the split-normal CCD posterior.

    Returns None when the grid carries no split-normal information.
    """
    sp, sm = grid.axial_sigma_plus, grid.axial_sigma_minus
    row = grid.chol_cov[axis] * sign
    m0 = float(np.exp(sign * grid.z_mode[axis]))
    m1 = m0 * float(np.prod(_split_normal_mgf(row, sm, sp)))
    m2 = m0**2 * float(np.prod(_split_normal_mgf(2.0 * row, sm, sp)))
    return m1, float(np.sqrt(max(m2 - m1**2, 0.0)))


def _theta_z_moments(grid: ThetaGrid) -> list[tuple[float, float]]:
    """(mean, sd) of each unconstrained hyperparameter under the grid.

    Dense grids use the weighted empirical moments.  Composite designs use
    the split-normal correction: each principal axis gets separate left and
    right scales fitted from the axial log-posterior values, which restores
    the mode-to-mean skew shift a symmetric design cannot see.
    """
    k = grid.points.shape[1]
    if k == 0:
        return []
    if grid.strategy != "ccd" or grid.axial_sigma_plus is None:
        out = []
        for i in range(k):
            zc = grid.points[:, i]
            m = float(np.dot(grid.weights, zc))
            sd = float(np.sqrt(max(np.dot(grid.weights, zc**2) - m**2, 0.0)))
            out.append((m, sd))
        return out
    sp, sm = grid.axial_sigma_plus, grid.axial_sigma_minus
    # split-normal moments per standardized axis
    e_u = np.sqrt(2.0 / np.pi) * (sp - sm)
    e_u2 = (sp**3 + sm**3) / (sp + sm)
    var_u = np.maximum(e_u2 - e_u**2, 1e-12)
    z_mode = grid.z_mode
    out = []
    for j in range(k):
        row = grid.chol_cov[j]
        mean = float(z_mode[j] + row @ e_u)
        sd = float(np.sqrt(row**2 @ var_u))
        out.append((mean, sd))
    return out


def _mixture_quantiles(weights, means, sds, probs):
    """Quantiles of a Gaussian mixture, per coordinate (vectorized bisection)."""
    means = np.asarray(means)
    sds = np.maximum(np.asarray(sds), 1e-300)
    lo = np.min(means - 12.0 * sds, axis=0)
    hi = np.max(means + 12.0 * sds, axis=0)
    out = []
    for p in probs:
        a, b = lo.copy(), hi.copy()
        for _ in range(80):
            mid = 0.5 * (a + b)
            cdf = np.einsum("g,gi->i", weights, ndtr((mid[None, :] - means) / sds))
            high = cdf >= p
            b = np.where(high, mid, b)
            a = np.where(high, a, mid)
        out.append(0.5 * (a + b))
    return out


def _trajectory_variance(design: StackedDesign, cov: np.ndarray, times: np.ndarray,
                         mean_rest: np.ndarray):
    """Mean/variance of alpha(t) + beta'X_i + w_i + v_i t per subject and time."""
    lay = design.layout
    n_t = times.size
    n_subj = design.n_subjects
    a_sl = lay.slice("alpha")
    mean = np.zeros((n_subj, n_t))
    var = np.zeros((n_subj, n_t))

    # interpolation weights for alpha at the requested times
    wk = np.zeros((n_t, lay.length("alpha"))) if lay.has("alpha") else None
    if wk is not None:
        from .model import interp_weights
        for j, t in enumerate(times):
            idx, w0, w1 = interp_weights(design.knots, float(t))
            wk[j, idx] = w0
            wk[j, idx + 1] = w1
        alpha_mean = wk @ mean_rest[a_sl]
        cov_aa = wk @ cov[a_sl, a_sl.start:a_sl.stop] @ wk.T
        mean += alpha_mean[None, :]
        var += np.diag(cov_aa)[None, :]

    # subject baseline covariates: first longitudinal row per subject
    x_subj = np.zeros((n_subj, design.p_long))
    seen = np.zeros(n_subj, dtype=bool)
    for i in range(design.n_long):
        s = design.subj_long[i]
        if not seen[s]:
            x_subj[s] = design.x_long[i]
            seen[s] = True

    if lay.has("beta") and design.p_long:
        b_sl = lay.slice("beta")
        mean += (x_subj @ mean_rest[b_sl])[:, None]
        cov_bb = cov[b_sl, b_sl.start:b_sl.stop]
        var += np.einsum("ip,pq,iq->i", x_subj, cov_bb, x_subj)[:, None]
        if wk is not None:
            cov_ab = cov[a_sl, b_sl.start:b_sl.stop]
            var += 2.0 * (wk @ cov_ab @ x_subj.T).T

    if lay.has("w"):
        w_sl, v_sl = lay.slice("w"), lay.slice("v")
        wi = np.arange(n_subj) + w_sl.start
        vi = np.arange(n_subj) + v_sl.start
        mean += mean_rest[wi][:, None] + np.outer(mean_rest[vi], times)
        var += cov[wi, wi][:, None]
        var += np.outer(cov[vi, vi], times**2)
        var += 2.0 * np.outer(cov[wi, vi], times)
        if wk is not None:
            var += 2.0 * (wk @ cov[a_sl, :][:, wi]).T
            var += 2.0 * (wk @ cov[a_sl, :][:, vi]).T * times[None, :]
        if lay.has("beta") and design.p_long:
            b = lay.slice("beta")
            var += 2.0 * np.einsum("ip,pi->i", x_subj, cov[b, :][:, wi])[:, None]
            var += 2.0 * np.einsum("ip,pi->i", x_subj, cov[b, :][:, vi])[:, None] * times[None, :]
    return mean, var


def marginals(grid: ThetaGrid, design: StackedDesign) -> FitResult:
    """Mixture-of-Gaussians posterior summaries over the hyperparameter grid."""
    if grid.n_points == 0:
        raise EmptyGrid("theta grid has no points")
    n = design.layout.dim
    n_pts = grid.n_points
    means = np.zeros((n_pts, n))
    sds = np.zeros((n_pts, n))
    traj_mean = None
    traj_var = None
    knots = design.knots
    want_traj = design.knots is not None and design.has_wv and design.n_subjects > 0

    gz = np.zeros((n_pts, design.n_surv))
    for j in range(n_pts):
        theta = design.hyper_from_z(grid.points[j])
        ga = gaussian_approximation(theta, design, x_init=grid.mode_x)
        means[j] = ga.mode
        sds[j] = ga.full_sd()
        cov = ga.cov_rest()
        if want_traj:
            tm, tv = _trajectory_variance(design, cov, knots, ga.mode[:design.layout.rest_dim])
            if traj_mean is None:
                traj_mean = np.zeros((n_pts,) + tm.shape)
                traj_var = np.zeros((n_pts,) + tv.shape)
            traj_mean[j] = tm
            traj_var[j] = tv
        if design.p_surv and design.layout.has("gamma"):
            g_sl = design.layout.slice("gamma")
            gz[j] = design.z_surv @ ga.mode[g_sl]

    w = grid.weights
    mix_mean = np.einsum("g,gi->i", w, means)
    mix_m2 = np.einsum("g,gi->i", w, sds**2 + means**2)
    mix_sd = np.sqrt(np.maximum(mix_m2 - mix_mean**2, 0.0))
    q025, q500, q975 = _mixture_quantiles(w, means, sds, (0.025, 0.5, 0.975))

    latent = {}
    for name, off, ln in design.layout.blocks:
        sl = slice(off, off + ln)
        latent[name] = {
            "mean": mix_mean[sl].copy(), "sd": mix_sd[sl].copy(),
            "q0.025": q025[sl].copy(), "q0.5": q500[sl].copy(), "q0.975": q975[sl].copy(),
        }

    spline = None
    if design.layout.has("alpha"):
        sl = design.layout.slice("alpha")
        spline = {
            "knots": knots.copy(), "mean": mix_mean[sl].copy(),
            "lower": q025[sl].copy(), "upper": q975[sl].copy(),
        }

    # hyperparameter summaries on the user scale
    hyper = {}
    z_pts = grid.points
    z_mode = grid.points[grid.mode_index] if grid.z_mode is None else grid.z_mode
    z_moments = _theta_z_moments(grid)
    gh_nodes, gh_weights = np.polynomial.hermite_e.hermegauss(31)
    gh_weights = gh_weights / gh_weights.sum()
    use_split = (grid.strategy == "ccd" and grid.axial_sigma_plus is not None)
    log_scale_names = {"tau_eps", "kappa", "tau_alpha", "tau_w", "tau_v", "tau_m"}
    for i, (nm, tr) in enumerate(zip(design.free_names, design.transforms)):
        z_mean, z_sd = z_moments[i]
        if use_split and nm in log_scale_names:
            # exact split-normal moments of exp(z) (closed-form MGF)
            u_mean, u_sd = _theta_exp_moments(grid, i, 1.0)
        else:
            # user-scale moments through the transform, by Gauss-Hermite quadrature
            user_nodes = np.array([tr.backward(z_mean + z_sd * t) for t in gh_nodes])
            u_mean = float(np.dot(gh_weights, user_nodes))
            u_sd = float(np.sqrt(max(np.dot(gh_weights, user_nodes**2) - u_mean**2, 0.0)))
        qs = [float(tr.backward(z_mean + ndtri(p) * z_sd)) for p in (0.025, 0.5, 0.975)]
        hyper[nm] = Summary(mode=float(tr.backward(z_mode[i])), mean=u_mean, sd=u_sd,
                            q025=qs[0], q500=qs[1], q975=qs[2])
    # derived variance summaries for precision hyperparameters (1/tau mixture)
    for nm in list(hyper):
        if nm.startswith("tau_"):
            i = design.free_names.index(nm)
            if use_split:
                s_mean, s_sd = _theta_exp_moments(grid, i, -1.0)
            else:
                z_mean, z_sd = z_moments[i]
                s2_nodes = np.exp(-(z_mean + z_sd * gh_nodes))
                s_mean = float(np.dot(gh_weights, s2_nodes))
                s_sd = float(np.sqrt(max(np.dot(gh_weights, s2_nodes**2) - s_mean**2, 0.0)))
            t = hyper[nm]
            hyper["sigma2" + nm[3:]] = Summary(
                mode=1.0 / t.mode, mean=s_mean, sd=s_sd,
                q025=1.0 / t.q975, q500=1.0 / t.q500, q975=1.0 / t.q025)

    def theta_component(name, default=None):
        if name in design.fixed:
            return design.fixed[name]
        if name in hyper:
            return hyper[name].mean
        return default

    kappa_mean = theta_component("kappa")
    nu_mean = tuple(theta_component(nm, 0.0)
                    for nm in design.config.association.param_names) \
        if design.n_surv else ()

    subject_effects = {}
    gz_mix = np.einsum("g,gl->l", w, gz) if design.n_surv else np.zeros(0)
    for l, sid in enumerate(design.subjects):
        eff = {"gz": float(gz_mix[l]) if l < design.n_surv else 0.0}
        for blk in ("w", "v", "m"):
            if design.layout.has(blk):
                eff[blk] = float(latent[blk]["mean"][l])
            else:
                eff[blk] = 0.0
        subject_effects[sid] = eff

    subject_trajectory = None
    if want_traj and traj_mean is not None:
        tm = np.einsum("g,git->it", w, traj_mean)
        t2 = np.einsum("g,git->it", w, traj_var + traj_mean**2)
        tsd = np.sqrt(np.maximum(t2 - tm**2, 0.0))
        subject_trajectory = {"times": knots.copy(), "per_subject": {
            sid: {"mean": tm[i].copy(), "sd": tsd[i].copy()}
            for i, sid in enumerate(design.subjects)}}

    return FitResult(
        hyper=hyper, latent=latent, spline=spline, subjects=list(design.subjects),
        subject_effects=subject_effects, subject_trajectory=subject_trajectory,
        log_marginal_likelihood=grid.log_marginal_likelihood, grid=grid,
        kappa_mean=kappa_mean, nu_mean=nu_mean,
        association_kind=design.config.association.kind)


def fit(design: StackedDesign, n_threads: int = 1) -> FitResult:
    """Full pipeline: mode search, grid exploration, posterior summaries."""
    grid = optimize_theta(design, n_threads=n_threads)
    return marginals(grid, design)
