"""Sparse symmetric matrix kernel and precision builders for structured effects.

Precision matrices are assembled as coordinate lists (append-friendly) and
compressed to CSR before any numerical work.  Factorization is backed by
LAPACK's dense Cholesky: every system this package factorizes is desk-scale
(a few thousand rows at most), where the dense kernel is both faster and
more robust than a hand-rolled sparse elimination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidRho, NonIncreasingKnots, NotPositiveDefinite, TooFewKnots

# Pivots below PIVOT_RTOL * max diagonal entry signal rank deficiency.
PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class SparseSymMatrix:
    """Symmetric matrix stored as the coordinate list of its lower triangle.

    Duplicate coordinates are allowed and are summed on conversion, so
    builders can append contributions without bookkeeping.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols, vals must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= self.dim):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= self.dim):
            raise ValueError("col index out of range")
        # canonicalize to the lower triangle
        lo = np.where(rows >= cols, rows, cols)
        hi = np.where(rows >= cols, cols, rows)
        object.__setattr__(self, "rows", lo)
        object.__setattr__(self, "cols", hi)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_entries(cls, dim, entries):
        """Build from an iterable of (row, col, value) triples."""
        entries = list(entries)
        if entries:
            r, c, v = zip(*entries)
        else:
            r, c, v = [], [], []
        return cls(dim, np.array(r, dtype=np.int64), np.array(c, dtype=np.int64),
                   np.array(v, dtype=np.float64))

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("matrix is not symmetric")
        r, c = np.tril_indices(a.shape[0])
        v = a[r, c]
        keep = v != 0.0
        return cls(a.shape[0], r[keep], c[keep], v[keep])

    def to_csr(self) -> sp.csr_array:
        """Full symmetric CSR (mirror of the stored lower triangle)."""
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        m = sp.coo_array((v, (r, c)), shape=(self.dim, self.dim))
        return m.tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def scaled(self, c: float) -> "SparseSymMatrix":
        return SparseSymMatrix(self.dim, self.rows, self.cols, c * self.vals)


class Factorization:
    """Cholesky factorization of a positive definite SparseSymMatrix.

    Supports solve, log-determinant and marginal-variance (diagonal of the
    inverse) extraction.  Immutable after construction; safe to share across
    threads.
    """

    def __init__(self, dense_lower: np.ndarray):
        self._chol = dense_lower
        self.dim = dense_lower.shape[0]

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        return sla.cho_solve((self._chol, True), b, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def inverse(self) -> np.ndarray:
        inv, info = sla.lapack.dpotri(self._chol, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"dpotri failed with info={info}")
        # dpotri fills one triangle only
        inv = np.tril(inv) + np.tril(inv, -1).T
        return inv

    def marginal_variances(self) -> np.ndarray:
        return np.diag(self.inverse()).copy()


def cholesky(m: SparseSymMatrix | sp.sparray | np.ndarray) -> Factorization:
    """Factor a symmetric positive definite matrix.

    Raises NotPositiveDefinite when a pivot falls below PIVOT_RTOL times the
    largest diagonal entry, which signals rank deficiency or pathological
    hyperparameter values.
    """
    if isinstance(m, SparseSymMatrix):
        a = m.to_dense()
    elif sp.issparse(m):
        a = m.toarray()
    else:
        a = np.asarray(m, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    max_diag = float(np.max(np.diag(a))) if a.shape[0] else 0.0
    if max_diag <= 0.0:
        raise NotPositiveDefinite("non-positive diagonal")
    c, info = sla.lapack.dpotrf(a, lower=1)
    if info != 0:
        raise NotPositiveDefinite(f"leading minor {info} not positive definite")
    pivots = np.diag(c) ** 2
    if np.min(pivots) <= PIVOT_RTOL * max_diag:
        raise NotPositiveDefinite("pivot below tolerance (rank deficient)")
    return Factorization(c)


# --- random walk of order two ----------------------------------------------

@dataclass(frozen=True)
class Rw2Spec:
    """Second-order random walk smoothing prior on a set of knots.

    The precision penalizes local deviation from a straight line; its null
    space is spanned by the constant and the linear function of the knots.
    """

    knots: np.ndarray
    scaled: bool = True
    tau_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=np.float64))
        if self.knots.ndim != 1 or self.knots.size < 3:
            raise TooFewKnots(f"need at least 3 knots, got {self.knots.size}")
        if np.any(np.diff(self.knots) <= 0):
            raise NonIncreasingKnots("knots must be strictly increasing")
        if self.tau_alpha <= 0:
            raise ValueError("tau_alpha must be positive")


def rw2_structure(knots: np.ndarray) -> SparseSymMatrix:
    """Unit-precision RW2 structure matrix for (possibly irregular) knots.

    Uses the finite-element second-difference construction: D' W D where D
    holds the interior second-difference stencils and W the inverse of the
    lumped integration weights.  For unit spacing this reduces exactly to the
    plain second-difference penalty.  The result annihilates constants and
    the knot-location vector, so its rank is n - 2.
    """
    knots = np.asarray(knots, dtype=np.float64)
    n = knots.size
    d = np.diff(knots)
    # interior stencil rows: [1/d[i-1], -(1/d[i-1] + 1/d[i]), 1/d[i]]
    data = []
    rows = []
    cols = []
    for i in range(1, n - 1):
        a, b = 1.0 / d[i - 1], 1.0 / d[i]
        rows += [i - 1] * 3
        cols += [i - 1, i, i + 1]
        data += [a, -(a + b), b]
    dmat = sp.coo_array((data, (rows, cols)), shape=(n - 2, n)).tocsr()
    w = 2.0 / (d[:-1] + d[1:])  # inverse lumped weights at interior knots
    q = (dmat.T @ sp.diags_array(w) @ dmat).tocoo()
    keep = q.row >= q.col
    return SparseSymMatrix(n, q.row[keep], q.col[keep], q.data[keep])


def rw2_precision(spec: Rw2Spec) -> SparseSymMatrix:
    """RW2 precision tau_alpha * S, optionally variance-scaled (see scale_rw2)."""
    s = rw2_structure(spec.knots)
    if spec.scaled:
        s = scale_rw2(s, knots=spec.knots)
    return s.scaled(spec.tau_alpha)


def constrained_marginal_variances(q: SparseSymMatrix, knots=None) -> np.ndarray:
    """Marginal variances of the RW2 field under null-space constraints.

    The generalized inverse is taken with the constant and linear trends
    projected out (double linear constraint), which is what makes the
    marginal variances finite for an intrinsic model.
    """
    n = q.dim
    if knots is None:
        knots = np.arange(n, dtype=np.float64)
    nullspace = np.column_stack([np.ones(n), np.asarray(knots, dtype=np.float64)])
    # orthonormal complement of the null space
    full, _ = np.linalg.qr(nullspace, mode="complete")
    w = full[:, 2:]
    reduced = w.T @ q.to_dense() @ w
    cov = cholesky(reduced).inverse()
    return np.einsum("ij,jk,ik->i", w, cov, w)


def scale_rw2(q: SparseSymMatrix, knots=None) -> SparseSymMatrix:
    """Rescale an RW2 precision so the typical marginal variance is one.

    The scaling constant is the geometric mean of the constrained marginal
    variances, after which the precision hyperparameter reads as the overall
    deviation from a straight line regardless of knot count or spacing.
    Idempotent up to floating point error.
    """
    sigma2 = constrained_marginal_variances(q, knots=knots)
    c = float(np.exp(np.mean(np.log(sigma2))))
    return q.scaled(c)


# --- correlated intercept / slope pair --------------------------------------

@dataclass(frozen=True)
class IntSlopeSpec:
    """Bivariate Gaussian random intercept and slope (per time unit)."""

    sigma_w: float
    sigma_v: float
    rho: float

    def __post_init__(self):
        if self.sigma_w <= 0 or self.sigma_v <= 0:
            raise ValueError("standard deviations must be positive")
        if not -1.0 < self.rho < 1.0:
            raise InvalidRho(f"rho must lie in (-1, 1), got {self.rho}")

    def covariance(self) -> np.ndarray:
        off = self.rho * self.sigma_w * self.sigma_v
        return np.array([[self.sigma_w**2, off], [off, self.sigma_v**2]])


def intslope_precision(spec: IntSlopeSpec, n_subjects: int = 1) -> SparseSymMatrix:
    """Inverse of the 2x2 intercept-slope covariance, replicated per subject.

    Subjects are laid out as consecutive (w_i, v_i) pairs.
    """
    cov = spec.covariance()
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    q = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
    rows, cols, vals = [], [], []
    for i in range(n_subjects):
        o = 2 * i
        rows += [o, o + 1, o + 1]
        cols += [o, o + 1, o]
        vals += [q[0, 0], q[1, 1], q[1, 0]]
    return SparseSymMatrix(2 * n_subjects, np.array(rows), np.array(cols), np.array(vals))


def intslope_precision_2x2(tau_w: float, tau_v: float, rho: float) -> np.ndarray:
    """2x2 precision from the (tau_w, tau_v, rho) hyperparameterization."""
    spec = IntSlopeSpec(sigma_w=1.0 / np.sqrt(tau_w), sigma_v=1.0 / np.sqrt(tau_v), rho=rho)
    cov = spec.covariance()
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    return np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
