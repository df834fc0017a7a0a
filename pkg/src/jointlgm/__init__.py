"""Approximate Bayesian inference for partially linear joint models of
longitudinal and right-censored time-to-event data, treated as latent
Gaussian models: sparse precision builders, Laplace-approximation posterior
computation, an MCMC validation sampler, a simulator and prediction tools.
"""

from .gmrf import IntSlopeSpec, Rw2Spec, SparseSymMatrix, cholesky, intslope_precision, \
    rw2_precision, scale_rw2
from .inference import FitResult, GaussianApprox, ThetaGrid, fit, gaussian_approximation, \
    log_theta_posterior, marginals, optimize_theta
from .likelihoods import LongObs, SurvObs, gaussian_loglik, loglik_grad_hess, weibull_loglik
from .mcmc import McmcConfig, run_mcmc
from .model import (
    AssociationStructure,
    GridConfig,
    HyperParams,
    JointData,
    LatentLayout,
    LongRow,
    ModelConfig,
    SplineConfig,
    StackedDesign,
    SurvRow,
    association_weights,
    build_mapping,
    joint_logdensity_parts,
    stack,
)
from .predict import SurvivalCurve, kaplan_meier, mean_survival, subject_survival, trajectory
from .priors import HyperTransform, PcPrecisionPrior, gaussian_logprior, \
    pc_precision_logdensity, transform_registry
from .simulate import SimScenario, simulate_joint

__version__ = "0.1.0"
