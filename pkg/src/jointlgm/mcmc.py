"""Random-walk Metropolis sampler over (latent field, hyperparameters).

Validation oracle for the Laplace pipeline at desk scale: it targets exactly
the joint log density exposed by the model module (same code path), so any
disagreement with the approximation isolates the approximation error.

Two implementation choices keep plain random-walk moves mixing without
touching the target density (Metropolis corrects any proposal shape):

* the predictors are sampled through their link residuals r = eta - A x_rest,
  a volume-preserving linear reparameterization, so structural moves carry
  the predictors along instead of fighting the stiff link;
* block proposals are preconditioned with the block covariance of a Gaussian
  approximation computed once at the start point, which aligns steps with
  the posterior's ridge directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTarget, DimensionTooLarge, JointLgmError
from .model import HyperParams, StackedDesign

TARGET_ACCEPT = 0.3
MAX_LATENT_DIM = 2000


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 20000     # sweeps; each updates every block once
    burn_in: int = 5000
    thinning: int = 20
    step_scales: dict = field(default_factory=dict)  # per-block overrides
    default_step: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")


@dataclass
class BlockSummary:
    mean: np.ndarray
    sd: np.ndarray
    ess: np.ndarray
    mcse: np.ndarray


@dataclass
class McmcResult:
    hyper: dict            # name -> {"mean","sd","ess","mcse"}
    latent: dict           # block name -> BlockSummary
    acceptance: dict       # block name -> rate
    n_samples: int
    config: McmcConfig

    def to_dict(self) -> dict:
        return {
            "tag": "oracle",
            "hyper": self.hyper,
            "latent": {
                nm: {"mean": list(b.mean), "sd": list(b.sd),
                     "ess": list(b.ess), "mcse": list(b.mcse)}
                for nm, b in self.latent.items()
            },
            "acceptance": self.acceptance,
            "n_samples": self.n_samples,
        }


def _batch_stats(series: np.ndarray):
    """Mean, SD, ESS and Monte Carlo SE by the batch-means method.

    series has shape (n_samples, dim).
    """
    n = series.shape[0]
    mean = series.mean(axis=0)
    sd = series.std(axis=0, ddof=1)
    nb = max(int(np.floor(np.sqrt(n))), 2)
    mb = n // nb
    trimmed = series[:nb * mb].reshape(nb, mb, -1)
    bmeans = trimmed.mean(axis=1)
    var_bm = bmeans.var(axis=0, ddof=1)
    mcse = np.sqrt(np.maximum(var_bm, 1e-300) / nb)
    ess = np.where(mcse > 0, (sd / mcse) ** 2, float(n))
    return mean, sd, ess, mcse


class _Target:
    """Joint log density in (z_theta, x_rest, r) coordinates.

    Hyperparameter-dependent matrices are cached between theta moves; the
    density itself is always the shared model evaluation.
    """

    def __init__(self, design: StackedDesign):
        self.design = design
        self._key = None
        self._theta = None
        self._q = None
        self._a = None

    def _theta_for(self, z: np.ndarray) -> HyperParams:
        key = z.tobytes()
        if key != self._key:
            theta = self.design.hyper_from_z(z)
            self._theta = theta
            self._q = self.design.prior_precision(theta)
            self._a = self.design.mapping(theta)
            self._key = key
        return self._theta

    def mapping_for(self, z: np.ndarray):
        self._theta_for(z)
        return self._a

    def logpdf(self, z: np.ndarray, x_rest: np.ndarray, r: np.ndarray) -> float:
        design = self.design
        try:
            theta = self._theta_for(z)
        except JointLgmError:
            return -np.inf
        if design._n_pred:
            eta = np.asarray(self._a @ x_rest) + r
            x = np.concatenate([x_rest, eta])
            lp_y = float(np.sum(design.loglik_terms(eta, theta)))
        else:
            x = x_rest
            lp_y = 0.0
        lp_x = design.log_latent_prior(x, theta, q=self._q, a=self._a)
        lp_z = design.log_prior_theta_z(z)
        val = lp_x + lp_y + lp_z
        return val if np.isfinite(val) else -np.inf


def _block_preconditioners(design: StackedDesign, z_start: np.ndarray):
    """Cholesky factors of per-block posterior covariances at the start point,
    plus the approximation's latent mode as a starting state.

    Shapes the random-walk proposals only; falls back to identity (and a zero
    start) when the approximation is unavailable.
    """
    from .inference import gaussian_approximation

    pre = {}
    x_start = np.zeros(design.layout.rest_dim)
    try:
        theta = design.hyper_from_z(z_start)
        ga = gaussian_approximation(theta, design)
        cov = ga.cov_rest()
        for name, off, ln in design.layout.blocks:
            if name in ("eta_L", "eta_S"):
                continue
            block = cov[off:off + ln, off:off + ln]
            block = block + 1e-12 * np.eye(ln)
            pre[name] = np.linalg.cholesky(block)
        x_start = ga.mode[:design.layout.rest_dim].copy()
    except (JointLgmError, np.linalg.LinAlgError):
        pass
    return pre, x_start


def run_mcmc(design: StackedDesign, config: McmcConfig,
             start_z: np.ndarray | None = None) -> McmcResult:
    """Blockwise random-walk Metropolis; deterministic under the seed.

    Step scales adapt toward 30% acceptance during burn-in only and are
    frozen afterward; the theta block additionally learns its proposal
    covariance from burn-in samples.  start_z optionally places the
    hyperparameter chain at a known high-density point (e.g. a fitted mode);
    it changes the starting state only, never the target.
    """
    if design.layout.dim > MAX_LATENT_DIM:
        raise DimensionTooLarge(
            f"latent dimension {design.layout.dim} exceeds the {MAX_LATENT_DIM} oracle guard")

    lay = design.layout
    n_rest = lay.rest_dim
    n_l, n_s = design.n_long, design.n_surv
    k_theta = len(design.free_names)

    blocks = []
    for name, off, ln in lay.blocks:
        if name == "eta_L":
            blocks.append(("eta_L", "r", slice(0, n_l)))
        elif name == "eta_S":
            blocks.append(("eta_S", "r", slice(n_l, n_l + n_s)))
        else:
            blocks.append((name, "x", slice(off, off + ln)))
    if k_theta:
        blocks.append(("theta", "z", slice(0, k_theta)))

    target = _Target(design)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    if start_z is not None:
        z = np.asarray(start_z, dtype=np.float64).copy()
        if z.size != k_theta:
            raise ValueError(f"start_z must have {k_theta} entries")
    else:
        z = design.z_start() if k_theta else np.zeros(0)
    pre, x_rest = _block_preconditioners(design, z)
    r = np.zeros(n_l + n_s)
    current = target.logpdf(z, x_rest, r)
    if not np.isfinite(current):
        x_rest = np.zeros(n_rest)
        current = target.logpdf(z, x_rest, r)
    if not np.isfinite(current):
        raise DegenerateTarget("joint log density not finite at the start state")
    scales = {}
    for name, _, _ in blocks:
        if name in ("eta_L", "eta_S"):
            # link residuals have prior scale 1/sqrt(link precision)
            scales[name] = float(config.step_scales.get(name, 1e-3))
        else:
            scales[name] = float(config.step_scales.get(name, config.default_step))
    accepts = {name: 0 for name, _, _ in blocks}
    proposals = {name: 0 for name, _, _ in blocks}

    # theta proposals learn an empirical covariance during burn-in
    theta_chol = np.eye(k_theta)
    theta_hist = np.empty((config.burn_in, k_theta))

    def propose(name, vec, sl):
        step = scales[name] * rng.standard_normal(sl.stop - sl.start)
        if name == "theta":
            step = theta_chol @ step
        elif name in pre:
            step = pre[name] @ step
        out = vec.copy()
        out[sl] = out[sl] + step
        return out

    n_keep = (config.iterations - config.burn_in + config.thinning - 1) // config.thinning
    kept_x = np.empty((n_keep, lay.dim))
    kept_z = np.empty((n_keep, k_theta))
    kept = 0

    for it in range(config.iterations):
        adapting = it < config.burn_in
        if adapting and k_theta:
            theta_hist[it] = z
            if it in (config.burn_in // 2, 3 * config.burn_in // 4) and it > 2 * k_theta:
                cov = np.cov(theta_hist[it // 2:it].T).reshape(k_theta, k_theta)
                eigval, eigvec = np.linalg.eigh(cov)
                top = float(eigval.max())
                if np.isfinite(top) and top > 0:
                    eigval = np.clip(eigval, top / 1e4, top)
                    cov = (eigvec * eigval) @ eigvec.T
                    theta_chol = np.linalg.cholesky(cov / top)
                    scales["theta"] = np.sqrt(top)
        for name, kind, sl in blocks:
            if kind == "z":
                prop = propose(name, z, sl)
                val = target.logpdf(prop, x_rest, r)
            elif kind == "x":
                prop = propose(name, x_rest, sl)
                val = target.logpdf(z, prop, r)
            else:
                prop = propose(name, r, sl)
                val = target.logpdf(z, x_rest, prop)
            proposals[name] += 1
            accept = np.log(rng.uniform()) < val - current
            if accept:
                current = val
                if kind == "z":
                    z = prop
                elif kind == "x":
                    x_rest = prop
                else:
                    r = prop
                accepts[name] += 1
            if adapting:
                gamma = (it + 1) ** -0.6
                scales[name] *= float(np.exp(gamma * ((1.0 if accept else 0.0) - TARGET_ACCEPT)))
        if not adapting and (it - config.burn_in) % config.thinning == 0 and kept < n_keep:
            if design._n_pred:
                eta = np.asarray(target.mapping_for(z) @ x_rest) + r
                kept_x[kept] = np.concatenate([x_rest, eta])
            else:
                kept_x[kept] = x_rest
            kept_z[kept] = z
            kept += 1

    kept_x = kept_x[:kept]
    kept_z = kept_z[:kept]

    latent = {}
    for name, off, ln in lay.blocks:
        series = kept_x[:, off:off + ln]
        mean, sd, ess, mcse = _batch_stats(series)
        latent[name] = BlockSummary(mean=mean, sd=sd, ess=ess, mcse=mcse)

    hyper = {}
    for i, (nm, tr) in enumerate(zip(design.free_names, design.transforms)):
        user = np.array([tr.backward(v) for v in kept_z[:, i]])
        mean, sd, ess, mcse = _batch_stats(user[:, None])
        hyper[nm] = {"mean": float(mean[0]), "sd": float(sd[0]),
                     "ess": float(ess[0]), "mcse": float(mcse[0])}

    acceptance = {nm: accepts[nm] / max(proposals[nm], 1) for nm in accepts}
    return McmcResult(hyper=hyper, latent=latent, acceptance=acceptance,
                      n_samples=kept, config=config)
