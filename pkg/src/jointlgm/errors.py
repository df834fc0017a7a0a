"""Exception types raised across the package.

Kept in one flat module so the CLI can map them onto exit codes without
importing every subsystem.
"""


class JointLgmError(Exception):
    """Base class for all package-specific errors."""


# --- matrix kernel ---------------------------------------------------------

class NotPositiveDefinite(JointLgmError):
    """A pivot fell below tolerance during factorization."""


class TooFewKnots(JointLgmError):
    pass


class NonIncreasingKnots(JointLgmError):
    pass


class InvalidRho(JointLgmError):
    pass


# --- likelihoods -----------------------------------------------------------

class NonPositivePrecision(JointLgmError):
    pass


class NonPositiveTime(JointLgmError):
    pass


class NonPositiveShape(JointLgmError):
    pass


# --- priors ----------------------------------------------------------------

class NonPositiveTau(JointLgmError):
    pass


class UnknownHyperparameter(JointLgmError):
    pass


# --- model assembly --------------------------------------------------------

class OrphanSurvivalRow(JointLgmError):
    """A longitudinal subject has no survival row."""


class DuplicateSurvivalRow(JointLgmError):
    pass


class TimeOutsideKnotRange(JointLgmError):
    pass


class WrongNuArity(JointLgmError):
    pass


# --- inference -------------------------------------------------------------

class NewtonDiverged(JointLgmError):
    pass


class MaxIterations(JointLgmError):
    pass


class OptimizerFailed(JointLgmError):
    pass


class SingularHessian(JointLgmError):
    pass


class EmptyGrid(JointLgmError):
    pass


# --- simulation ------------------------------------------------------------

class BisectionFailed(JointLgmError):
    """Cumulative hazard never reaches the drawn level inside the bracket."""


# --- prediction ------------------------------------------------------------

class EmptyData(JointLgmError):
    pass


class UnknownSubject(JointLgmError):
    pass


# --- MCMC oracle -----------------------------------------------------------

class DimensionTooLarge(JointLgmError):
    pass


class DegenerateTarget(JointLgmError):
    pass


# --- file formats ------------------------------------------------------------

class DataFormatError(JointLgmError):
    """Malformed input file; message carries the offending row number."""
