"""Joint-model assembly: data stacking, latent layout, mapping matrix,
hyperparameters and the full joint log-density.

The latent field is x = (alpha, beta, gamma, w, v, m, eta_L, eta_S).  The
linear predictors are part of the field: they are tied to the structural
blocks by a high-precision Gaussian link eta = A x_rest + e, so every
observation reads exactly one latent coordinate and the mapping matrix A
depends on hyperparameters only through the association weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import gmrf, likelihoods, priors
from .errors import (
    DuplicateSurvivalRow,
    InvalidRho,
    OrphanSurvivalRow,
    TimeOutsideKnotRange,
    TooFewKnots,
    UnknownHyperparameter,
    WrongNuArity,
)

# precision of the predictor-link noise (fixed, not a hyperparameter)
LINK_PRECISION = 1.0e6
# small diagonal added to the spline precision so the straight-line
# directions (the RW2 null space) get a diffuse proper prior
SPLINE_NULLSPACE_PRECISION = 1.0e-5

LOG_2PI = float(np.log(2.0 * np.pi))


# --- data ---------------------------------------------------------------

@dataclass(frozen=True)
class LongRow:
    subject_id: object
    t: float
    y: float
    x: tuple = ()


@dataclass(frozen=True)
class SurvRow:
    subject_id: object
    s: float
    c: int
    z: tuple = ()


@dataclass(frozen=True)
class JointData:
    """Longitudinal rows plus one right-censored survival row per subject."""

    long_rows: tuple
    surv_rows: tuple

    def __post_init__(self):
        object.__setattr__(self, "long_rows", tuple(self.long_rows))
        object.__setattr__(self, "surv_rows", tuple(self.surv_rows))
        seen = set()
        for r in self.surv_rows:
            if r.subject_id in seen:
                raise DuplicateSurvivalRow(f"subject {r.subject_id!r} has two survival rows")
            seen.add(r.subject_id)
            if r.s <= 0:
                raise ValueError(f"survival time must be positive (subject {r.subject_id!r})")
            if r.c not in (0, 1):
                raise ValueError("censoring indicator must be 0 or 1")
        if self.surv_rows:
            for r in self.long_rows:
                if r.subject_id not in seen:
                    raise OrphanSurvivalRow(
                        f"subject {r.subject_id!r} has longitudinal rows but no survival row")
        for r in self.long_rows:
            if r.t < 0:
                raise ValueError("longitudinal times must be non-negative")
        p_l = {len(r.x) for r in self.long_rows}
        if len(p_l) > 1:
            raise ValueError("inconsistent longitudinal covariate dimensions")
        p_s = {len(r.z) for r in self.surv_rows}
        if len(p_s) > 1:
            raise ValueError("inconsistent survival covariate dimensions")


# --- configuration --------------------------------------------------------

ASSOCIATION_KINDS = ("eq4", "eq5", "eq6", "eq7")
_ASSOCIATION_LABELS = {
    "eq4": "InterceptOnly",
    "eq5": "SlopeOnly",
    "eq6": "IntSlopeShared",
    "eq7": "IntSlopeSeparate",
}


@dataclass(frozen=True)
class AssociationStructure:
    """Functional form linking the shared (w, v) pair into the hazard.

    eq4: nu * w            (intercept only)
    eq5: nu * v s          (slope only)
    eq6: nu * (w + v s)    (shared scaling)
    eq7: nu1 * w + nu2 * v s
    """

    kind: str = "eq6"

    def __post_init__(self):
        if self.kind not in ASSOCIATION_KINDS:
            raise ValueError(f"unknown association kind {self.kind!r}")

    @property
    def n_params(self) -> int:
        return 2 if self.kind == "eq7" else 1

    @property
    def param_names(self) -> tuple:
        return ("nu1", "nu2") if self.kind == "eq7" else ("nu",)

    @property
    def label(self) -> str:
        return _ASSOCIATION_LABELS[self.kind]


def association_weights(structure: AssociationStructure, nu, s: float) -> tuple[float, float]:
    """Coefficients multiplying (w, v) in the survival predictor at time s."""
    nu = np.atleast_1d(np.asarray(nu, dtype=np.float64))
    if nu.size != structure.n_params:
        raise WrongNuArity(
            f"{structure.kind} expects {structure.n_params} association parameter(s), got {nu.size}")
    if s <= 0:
        raise ValueError("s must be positive")
    if structure.kind == "eq4":
        return float(nu[0]), 0.0
    if structure.kind == "eq5":
        return 0.0, float(nu[0]) * s
    if structure.kind == "eq6":
        return float(nu[0]), float(nu[0]) * s
    return float(nu[0]), float(nu[1]) * s


@dataclass(frozen=True)
class SplineConfig:
    """Knot rule for the non-linear trajectory.

    Either a number of equally spaced knots over the observed time span, or
    an explicit strictly increasing knot vector.
    """

    n_knots: int = 25
    scaled: bool = True
    knots: tuple | None = None


@dataclass(frozen=True)
class GridConfig:
    step: float = 0.75          # grid step in posterior-SD units
    log_drop: float = 6.0       # discard points this far below the mode
    max_dense_dim: int = 4      # product grid up to here, CCD beyond
    ccd_f0: float = 1.1         # CCD sphere radius factor
    strategy: str = "auto"      # "auto" | "grid" | "ccd"


@dataclass(frozen=True)
class ModelConfig:
    association: AssociationStructure = AssociationStructure("eq6")
    baseline_hazard: str = "weibull"  # "weibull" | "exponential"
    spline: SplineConfig | None = SplineConfig()
    frailty: bool = False
    priors: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    fixed_effect_precision: float = 0.001
    grid: GridConfig = GridConfig()

    def __post_init__(self):
        if self.baseline_hazard not in ("weibull", "exponential"):
            raise ValueError(f"unknown baseline hazard {self.baseline_hazard!r}")


# --- hyperparameters --------------------------------------------------------

HYPER_ORDER = ("tau_eps", "kappa", "tau_alpha", "tau_w", "tau_v", "rho",
               "nu", "nu1", "nu2", "tau_m")


@dataclass(frozen=True)
class HyperParams:
    """User-scale hyperparameter values; absent components are None."""

    tau_eps: float | None = None
    kappa: float | None = None
    tau_alpha: float | None = None
    tau_w: float | None = None
    tau_v: float | None = None
    rho: float | None = None
    nu: tuple = ()
    tau_m: float | None = None

    def get(self, name: str):
        if name == "nu1":
            return self.nu[0]
        if name == "nu2":
            return self.nu[1]
        if name == "nu":
            return self.nu[0]
        return getattr(self, name)

    def validate(self):
        for nm in ("tau_eps", "kappa", "tau_alpha", "tau_w", "tau_v", "tau_m"):
            v = getattr(self, nm)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValueError(f"{nm} must be positive and finite, got {v}")
        if self.rho is not None and not -1.0 < self.rho < 1.0:
            raise InvalidRho(f"rho must lie in (-1, 1), got {self.rho}")
        for v in self.nu:
            if not np.isfinite(v):
                raise ValueError("association parameters must be finite")


# --- latent layout ----------------------------------------------------------

BLOCK_ORDER = ("alpha", "beta", "gamma", "w", "v", "m", "eta_L", "eta_S")


@dataclass(frozen=True)
class LatentLayout:
    """Contiguous block offsets for the latent field."""

    blocks: tuple  # of (name, offset, length)

    @classmethod
    def from_lengths(cls, lengths: dict) -> "LatentLayout":
        blocks = []
        off = 0
        for name in BLOCK_ORDER:
            n = lengths.get(name, 0)
            if n > 0:
                blocks.append((name, off, n))
                off += n
        return cls(tuple(blocks))

    @property
    def dim(self) -> int:
        return sum(n for _, _, n in self.blocks)

    @property
    def names(self) -> tuple:
        return tuple(name for name, _, _ in self.blocks)

    def slice(self, name: str) -> slice:
        for nm, off, n in self.blocks:
            if nm == name:
                return slice(off, off + n)
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(nm == name for nm, _, _ in self.blocks)

    def length(self, name: str) -> int:
        for nm, _, n in self.blocks:
            if nm == name:
                return n
        return 0

    @property
    def rest_dim(self) -> int:
        """Dimension of the structural part (everything before the predictors)."""
        return self.dim - self.length("eta_L") - self.length("eta_S")


# --- spline helpers ---------------------------------------------------------

def knot_vector(times: np.ndarray, spline: SplineConfig) -> np.ndarray:
    if spline.knots is not None:
        knots = np.asarray(spline.knots, dtype=np.float64)
        if knots.size < 3:
            raise TooFewKnots("need at least 3 explicit knots")
        return knots
    if times.size == 0:
        raise TooFewKnots("no longitudinal times to place knots on")
    lo, hi = float(times.min()), float(times.max())
    if hi <= lo:
        raise TooFewKnots("longitudinal times are all equal; cannot place knots")
    return np.linspace(lo, hi, spline.n_knots)


def interp_weights(knots: np.ndarray, t: float) -> tuple[int, float, float]:
    """Linear interpolation: index j and weights on knots j, j+1 for time t."""
    eps = 1e-9 * max(1.0, abs(knots[-1] - knots[0]))
    if t < knots[0] - eps or t > knots[-1] + eps:
        raise TimeOutsideKnotRange(f"time {t} outside knot span [{knots[0]}, {knots[-1]}]")
    t = min(max(t, knots[0]), knots[-1])
    j = int(np.searchsorted(knots, t, side="right")) - 1
    j = min(max(j, 0), knots.size - 2)
    h = knots[j + 1] - knots[j]
    w1 = (t - knots[j]) / h
    return j, 1.0 - w1, w1


# --- stacked design ----------------------------------------------------------

class StackedDesign:
    """Assembled joint model: stacked data, layout, and cached matrix patterns.

    Immutable after construction.  All hyperparameter-dependent quantities
    (the latent prior precision, the mapping matrix) are produced on demand
    from cached sparsity patterns, so only values change across the grid.
    """

    def __init__(self, data: JointData, config: ModelConfig):
        self.data = data
        self.config = config

        # subjects: survival order when present, else longitudinal appearance
        if data.surv_rows:
            self.subjects = [r.subject_id for r in data.surv_rows]
        else:
            seen = {}
            for r in data.long_rows:
                seen.setdefault(r.subject_id, None)
            self.subjects = list(seen)
        self._subj_index = {s: i for i, s in enumerate(self.subjects)}

        self.n_long = len(data.long_rows)
        self.n_surv = len(data.surv_rows)
        self.n_subjects = len(self.subjects)
        self.p_long = len(data.long_rows[0].x) if data.long_rows else 0
        self.p_surv = len(data.surv_rows[0].z) if data.surv_rows else 0

        self.y_long = np.array([r.y for r in data.long_rows], dtype=np.float64)
        self.t_long = np.array([r.t for r in data.long_rows], dtype=np.float64)
        self.subj_long = np.array([self._subj_index[r.subject_id] for r in data.long_rows],
                                  dtype=np.int64)
        self.x_long = np.array([r.x for r in data.long_rows], dtype=np.float64).reshape(
            self.n_long, self.p_long)
        self.s_surv = np.array([r.s for r in data.surv_rows], dtype=np.float64)
        self.c_surv = np.array([r.c for r in data.surv_rows], dtype=np.float64)
        self.z_surv = np.array([r.z for r in data.surv_rows], dtype=np.float64).reshape(
            self.n_surv, self.p_surv)
        self._log_s = np.log(self.s_surv) if self.n_surv else np.zeros(0)
        self._s_pow_cache = (None, None)

        # spline knots
        self.knots = None
        if config.spline is not None and (self.n_long > 0 or config.spline.knots is not None):
            self.knots = knot_vector(self.t_long, config.spline)

        # which hyperparameters exist, before fixing
        self._association_active = self.n_surv > 0 and self.n_subjects > 0 and not all(
            config.fixed.get(nm) == 0.0 for nm in config.association.param_names)
        has_wv = self.n_subjects > 0 and (self.n_long > 0 or self._association_active)
        names = []
        if self.n_long > 0:
            names.append("tau_eps")
        if self.n_surv > 0:
            names.append("kappa")
        if self.knots is not None:
            names.append("tau_alpha")
        if has_wv:
            names += ["tau_w", "tau_v", "rho"]
        if self.n_surv > 0 and has_wv:
            names += list(config.association.param_names)
        if config.frailty and self.n_surv > 0:
            names.append("tau_m")
        self.hyper_names = tuple(names)

        fixed = dict(config.fixed)
        if config.baseline_hazard == "exponential" and "kappa" in names:
            fixed.setdefault("kappa", 1.0)
        for nm in fixed:
            if nm not in HYPER_ORDER:
                raise UnknownHyperparameter(f"cannot fix unknown hyperparameter {nm!r}")
        # fixing a hyperparameter the model does not use (e.g. nu = 0 on a
        # model whose shared effects were dropped because of it) is a no-op
        self.fixed = fixed
        self.free_names = tuple(n for n in names if n not in fixed)

        self.transforms = priors.transform_registry(self.free_names)
        prior_specs = dict(config.priors)
        for nm in prior_specs:
            if nm not in self.free_names:
                raise UnknownHyperparameter(f"prior given for unknown/fixed hyperparameter {nm!r}")
        self.hyper_priors = [
            priors.HyperPrior(nm, prior_specs.get(nm, priors.default_prior_spec(nm)))
            for nm in self.free_names
        ]

        lengths = {
            "alpha": 0 if self.knots is None else self.knots.size,
            "beta": self.p_long,
            "gamma": self.p_surv,
            "w": self.n_subjects if has_wv else 0,
            "v": self.n_subjects if has_wv else 0,
            "m": self.n_subjects if (config.frailty and self.n_surv > 0) else 0,
            "eta_L": self.n_long,
            "eta_S": self.n_surv,
        }
        self.layout = LatentLayout.from_lengths(lengths)
        self.has_wv = has_wv

        self._build_precision_pattern()
        self._build_mapping_pattern()

    # -- Appendix-style stacked view ------------------------------------

    @property
    def response(self) -> list:
        """Stacked responses: y on longitudinal rows, (s, c) on survival rows."""
        out = [r.y for r in self.data.long_rows]
        out += [(r.s, r.c) for r in self.data.surv_rows]
        return out

    @property
    def stacked_x_columns(self) -> list:
        """Longitudinal fixed-effect columns, zero-padded on survival rows."""
        cols = []
        for j in range(self.p_long):
            cols.append(list(self.x_long[:, j]) + [0.0] * self.n_surv)
        return cols

    @property
    def stacked_z_columns(self) -> list:
        """Survival fixed-effect columns, zero-padded on longitudinal rows.

        Absent (empty list) when there are no survival covariates.
        """
        cols = []
        for j in range(self.p_surv):
            cols.append([0.0] * self.n_long + list(self.z_surv[:, j]))
        return cols

    @property
    def spline_index(self) -> list:
        """Spline evaluation times on longitudinal rows, None elsewhere."""
        return list(self.t_long) + [None] * self.n_surv

    @property
    def subject_index(self) -> list:
        """Subject index of the shared effects on every stacked row."""
        return list(self.subj_long) + list(range(self.n_surv))

    def unstack(self) -> JointData:
        """Recover the original data (stacking is lossless)."""
        return self.data

    # -- latent prior precision ------------------------------------------

    def _build_precision_pattern(self):
        lay = self.layout
        n_rest = lay.rest_dim
        groups = {}  # name -> (rows, cols, base_vals)

        def add(name, r, c, v):
            groups[name] = (np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64),
                            np.asarray(v, dtype=np.float64))

        if lay.has("alpha"):
            off = lay.slice("alpha").start
            s = gmrf.rw2_structure(self.knots)
            if self.config.spline.scaled:
                s = gmrf.scale_rw2(s, knots=self.knots)
            self._spline_structure = s
            dense = s.to_dense()
            self._spline_eigs = np.clip(np.linalg.eigvalsh(dense), 0.0, None)
            add("alpha", s.rows + off, s.cols + off, s.vals)
            idx = np.arange(lay.length("alpha")) + off
            add("alpha_ridge", idx, idx, np.full(idx.size, SPLINE_NULLSPACE_PRECISION))
        for nm in ("beta", "gamma"):
            if lay.has(nm):
                idx = np.arange(lay.length(nm)) + lay.slice(nm).start
                add(nm, idx, idx, np.full(idx.size, self.config.fixed_effect_precision))
        if lay.has("w"):
            wi = np.arange(self.n_subjects) + lay.slice("w").start
            vi = np.arange(self.n_subjects) + lay.slice("v").start
            add("w_diag", wi, wi, np.ones(self.n_subjects))
            add("v_diag", vi, vi, np.ones(self.n_subjects))
            add("wv_cross", vi, wi, np.ones(self.n_subjects))
        if lay.has("m"):
            idx = np.arange(lay.length("m")) + lay.slice("m").start
            add("m_diag", idx, idx, np.ones(idx.size))

        self._q_groups = groups
        if groups:
            self._q_rows = np.concatenate([g[0] for g in groups.values()])
            self._q_cols = np.concatenate([g[1] for g in groups.values()])
            self._q_base = np.concatenate([g[2] for g in groups.values()])
            self._q_slices = {}
            off = 0
            for nm, g in groups.items():
                self._q_slices[nm] = slice(off, off + g[2].size)
                off += g[2].size
        else:
            self._q_rows = np.zeros(0, dtype=np.int64)
            self._q_cols = np.zeros(0, dtype=np.int64)
            self._q_base = np.zeros(0)
            self._q_slices = {}
        self._n_rest = n_rest

        # frozen CSR structure: mirror the lower triangle, coalesce duplicate
        # positions once, and keep the scatter map so each theta only fills
        # values (bincount + permutation) instead of rebuilding the matrix
        off_diag = self._q_rows != self._q_cols
        full_r = np.concatenate([self._q_rows, self._q_cols[off_diag]])
        full_c = np.concatenate([self._q_cols, self._q_rows[off_diag]])
        self._q_mirror = np.concatenate(
            [np.arange(self._q_rows.size), np.flatnonzero(off_diag)])
        flat = full_r * max(n_rest, 1) + full_c
        uniq, inverse = np.unique(flat, return_inverse=True)
        self._q_inverse = inverse
        self._q_nnz = uniq.size
        tagged = sp.coo_array(
            (np.arange(1, uniq.size + 1, dtype=np.float64),
             (uniq // max(n_rest, 1), uniq % max(n_rest, 1))),
            shape=(n_rest, n_rest)).tocsr()
        self._q_template = tagged
        self._q_perm = tagged.data.astype(np.int64) - 1

    def _q_coefficients(self, theta: HyperParams) -> dict:
        coef = {}
        if "alpha" in self._q_slices:
            coef["alpha"] = theta.tau_alpha
            coef["alpha_ridge"] = 1.0
        if "beta" in self._q_slices:
            coef["beta"] = 1.0
        if "gamma" in self._q_slices:
            coef["gamma"] = 1.0
        if "w_diag" in self._q_slices:
            q = gmrf.intslope_precision_2x2(theta.tau_w, theta.tau_v, theta.rho)
            coef["w_diag"] = q[0, 0]
            coef["v_diag"] = q[1, 1]
            coef["wv_cross"] = q[1, 0]
        if "m_diag" in self._q_slices:
            coef["m_diag"] = theta.tau_m
        return coef

    def prior_precision(self, theta: HyperParams) -> sp.csr_array:
        """Structural-block prior precision Q(theta) as symmetric CSR."""
        vals = self._q_base.copy()
        for nm, c in self._q_coefficients(theta).items():
            vals[self._q_slices[nm]] *= c
        full = vals[self._q_mirror]
        coalesced = np.bincount(self._q_inverse, weights=full, minlength=self._q_nnz)
        q = self._q_template.copy()
        q.data = coalesced[self._q_perm]
        return q

    def prior_logdet(self, theta: HyperParams) -> float:
        """log det of the structural prior precision, from block formulas."""
        lay = self.layout
        out = 0.0
        if lay.has("alpha"):
            out += float(np.sum(np.log(theta.tau_alpha * self._spline_eigs
                                       + SPLINE_NULLSPACE_PRECISION)))
        out += lay.length("beta") * np.log(self.config.fixed_effect_precision)
        out += lay.length("gamma") * np.log(self.config.fixed_effect_precision)
        if lay.has("w"):
            det2 = theta.tau_w * theta.tau_v / (1.0 - theta.rho**2)
            out += self.n_subjects * float(np.log(det2))
        if lay.has("m"):
            out += lay.length("m") * float(np.log(theta.tau_m))
        return out

    # -- mapping matrix -----------------------------------------------------

    def _build_mapping_pattern(self):
        lay = self.layout
        n_pred = self.n_long + self.n_surv
        rows, cols = [], []
        base, fac1, fac2 = [], [], []

        def add(r, c, const=0.0, f1=0.0, f2=0.0):
            rows.append(r)
            cols.append(c)
            base.append(const)
            fac1.append(f1)
            fac2.append(f2)

        for i in range(self.n_long):
            t = self.t_long[i]
            if lay.has("alpha"):
                j, w0, w1 = interp_weights(self.knots, t)
                off = lay.slice("alpha").start
                add(i, off + j, const=w0)
                add(i, off + j + 1, const=w1)
            for k in range(self.p_long):
                add(i, lay.slice("beta").start + k, const=self.x_long[i, k])
            if lay.has("w"):
                add(i, lay.slice("w").start + self.subj_long[i], const=1.0)
                add(i, lay.slice("v").start + self.subj_long[i], const=t)
        kind = self.config.association.kind
        for l in range(self.n_surv):
            r = self.n_long + l
            for k in range(self.p_surv):
                add(r, lay.slice("gamma").start + k, const=self.z_surv[l, k])
            if lay.has("w"):
                s = self.s_surv[l]
                if kind == "eq4":
                    add(r, lay.slice("w").start + l, f1=1.0)
                elif kind == "eq5":
                    add(r, lay.slice("v").start + l, f1=s)
                elif kind == "eq6":
                    add(r, lay.slice("w").start + l, f1=1.0)
                    add(r, lay.slice("v").start + l, f1=s)
                else:  # eq7
                    add(r, lay.slice("w").start + l, f1=1.0)
                    add(r, lay.slice("v").start + l, f2=s)
            if lay.has("m"):
                add(r, lay.slice("m").start + l, const=1.0)

        self._a_rows = np.array(rows, dtype=np.int64)
        self._a_cols = np.array(cols, dtype=np.int64)
        self._a_base = np.array(base, dtype=np.float64)
        self._a_fac1 = np.array(fac1, dtype=np.float64)
        self._a_fac2 = np.array(fac2, dtype=np.float64)
        self._n_pred = n_pred

        nnz = self._a_rows.size
        tagged = sp.coo_array((np.arange(1, nnz + 1, dtype=np.float64),
                               (self._a_rows, self._a_cols)),
                              shape=(n_pred, self._n_rest)).tocsr()
        if tagged.data.size != nnz:
            raise AssertionError("mapping pattern has duplicate positions")
        self._a_template = tagged
        self._a_perm = tagged.data.astype(np.int64) - 1

    def mapping(self, theta: HyperParams) -> sp.csr_array:
        """Predictor mapping A(theta): eta = A x_rest (+ link noise)."""
        if self.has_wv and self.n_surv > 0:
            nu = np.atleast_1d(np.asarray(
                [theta.get(n) for n in self.config.association.param_names], dtype=np.float64))
            if self.config.association.kind == "eq7":
                nu1, nu2 = nu[0], nu[1]
            else:
                nu1, nu2 = nu[0], 0.0
        else:
            nu1 = nu2 = 0.0
        vals = self._a_base + nu1 * self._a_fac1 + nu2 * self._a_fac2
        a = self._a_template.copy()
        a.data = vals[self._a_perm]
        return a

    # -- hyperparameter packing ----------------------------------------------

    def hyper_from_values(self, values: dict) -> HyperParams:
        """HyperParams from a name->value mapping of the free parameters."""
        full = dict(self.fixed)
        full.update(values)
        nu = tuple(full[nm] for nm in self.config.association.param_names
                   if nm in full)
        theta = HyperParams(
            tau_eps=full.get("tau_eps"),
            kappa=full.get("kappa"),
            tau_alpha=full.get("tau_alpha"),
            tau_w=full.get("tau_w"),
            tau_v=full.get("tau_v"),
            rho=full.get("rho"),
            nu=nu,
            tau_m=full.get("tau_m"),
        )
        theta.validate()
        return theta

    def hyper_from_z(self, z: np.ndarray) -> HyperParams:
        z = np.asarray(z, dtype=np.float64)
        if z.size != len(self.free_names):
            raise ValueError(f"expected {len(self.free_names)} free values, got {z.size}")
        vals = {nm: float(tr.backward(z[i]))
                for i, (nm, tr) in enumerate(zip(self.free_names, self.transforms))}
        return self.hyper_from_values(vals)

    def z_from_hyper(self, theta: HyperParams) -> np.ndarray:
        return np.array([tr.forward(theta.get(nm))
                         for nm, tr in zip(self.free_names, self.transforms)])

    def z_start(self) -> np.ndarray:
        """Deterministic optimizer start: prior modes, kappa 1, rho 0, nu 0.01."""
        vals = {}
        for nm, pr in zip(self.free_names, self.hyper_priors):
            if nm in ("nu", "nu1", "nu2"):
                vals[nm] = 0.01
            else:
                vals[nm] = pr.start_value()
        theta = self.hyper_from_values(vals)
        return self.z_from_hyper(theta)

    def log_prior_theta_user(self, theta: HyperParams) -> float:
        """Sum of free-hyperparameter prior log densities on the user scale."""
        return float(sum(pr.log_density_user(theta.get(nm))
                         for nm, pr in zip(self.free_names, self.hyper_priors)))

    def log_prior_theta_z(self, z: np.ndarray) -> float:
        """Prior density of the free hyperparameters on the unconstrained scale."""
        return float(sum(pr.log_density_unconstrained(z[i])
                         for i, pr in enumerate(self.hyper_priors)))

    # -- likelihood over stacked predictors -----------------------------------

    def _s_pow_kappa(self, kappa: float) -> np.ndarray:
        if self._s_pow_cache[0] != kappa:
            self._s_pow_cache = (kappa, np.power(self.s_surv, kappa))
        return self._s_pow_cache[1]

    def loglik_terms(self, eta: np.ndarray, theta: HyperParams) -> np.ndarray:
        """Per-row observation log-likelihoods at predictor values eta."""
        out = np.empty(self._n_pred)
        nl = self.n_long
        if nl:
            out[:nl] = likelihoods.gaussian_loglik_arrays(self.y_long, eta[:nl], theta.tau_eps)
        if self.n_surv:
            out[nl:] = likelihoods.weibull_loglik_arrays(
                self.s_surv, self.c_surv, eta[nl:], theta.kappa,
                s_pow=self._s_pow_kappa(theta.kappa), log_s=self._log_s)
        return out

    def loglik_grad_hess(self, eta: np.ndarray, theta: HyperParams):
        grad = np.empty(self._n_pred)
        hess = np.empty(self._n_pred)
        nl = self.n_long
        if nl:
            grad[:nl], hess[:nl] = likelihoods.gaussian_grad_hess_arrays(
                self.y_long, eta[:nl], theta.tau_eps)
        if self.n_surv:
            grad[nl:], hess[nl:] = likelihoods.weibull_grad_hess_arrays(
                self.s_surv, self.c_surv, eta[nl:], theta.kappa,
                s_pow=self._s_pow_kappa(theta.kappa))
        return grad, hess

    # -- joint density ---------------------------------------------------------

    def split_latent(self, x: np.ndarray):
        n_rest = self.layout.rest_dim
        return x[:n_rest], x[n_rest:]

    def log_latent_prior(self, x: np.ndarray, theta: HyperParams,
                         q: sp.csr_array | None = None,
                         a: sp.csr_array | None = None,
                         logdet: float | None = None) -> float:
        """log pi(x | theta) for the full field, link noise included.

        q, a and logdet may be supplied to reuse quantities already built for
        this theta; they must equal prior_precision(theta), mapping(theta)
        and prior_logdet(theta).
        """
        x_rest, eta = self.split_latent(x)
        if q is None:
            q = self.prior_precision(theta)
        if logdet is None:
            logdet = self.prior_logdet(theta)
        quad = float(x_rest @ (q @ x_rest)) if x_rest.size else 0.0
        out = 0.5 * (logdet - self._n_rest * LOG_2PI) - 0.5 * quad
        if self._n_pred:
            if a is None:
                a = self.mapping(theta)
            r = eta - a @ x_rest
            out += 0.5 * self._n_pred * (np.log(LINK_PRECISION) - LOG_2PI)
            out -= 0.5 * LINK_PRECISION * float(r @ r)
        return out

    def joint_logdensity_parts(self, x: np.ndarray, theta: HyperParams):
        """The three addends of the joint log density.

        Returns (log pi(x|theta), log pi(y|x,theta), log pi(theta)); the
        hyperparameter prior is on the user scale and covers the free
        parameters only (fixed values are model constants).
        """
        theta.validate()
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.layout.dim:
            raise ValueError(f"latent vector has dim {x.size}, expected {self.layout.dim}")
        lp_x = self.log_latent_prior(x, theta)
        _, eta = self.split_latent(x)
        lp_y = float(np.sum(self.loglik_terms(eta, theta))) if self._n_pred else 0.0
        lp_theta = self.log_prior_theta_user(theta)
        return lp_x, lp_y, lp_theta


# --- module-level operation wrappers ----------------------------------------

def stack(data: JointData, config: ModelConfig) -> StackedDesign:
    """Stack longitudinal and survival rows into one design (Appendix-style)."""
    return StackedDesign(data, config)


def build_mapping(design: StackedDesign, theta: HyperParams) -> sp.csr_array:
    return design.mapping(theta)


def joint_logdensity_parts(x, theta: HyperParams, design: StackedDesign):
    return design.joint_logdensity_parts(x, theta)
