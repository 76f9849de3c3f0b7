"""Latent class models for longitudinal counts with INAR(1) negative binomial classes."""
from .discrimination import apc, c_statistic, csi_estimate, eed_estimate, pdi
from .em import (
    FitReport,
    MixtureModel,
    align_labels,
    em_fit,
    initialize,
    mixture_loglik,
    posterior_weights,
    sandwich_covariance,
    stacked_g,
    weighted_bic,
)
from .estimating import ar1_inverse, ar1_inverse_deriv, poisson_irls, score_u, solve_weighted_ee
from .process import (
    ClassParams,
    ConstraintViolation,
    PanelData,
    SubjectRecord,
    betabin_logpmf,
    check_constraints,
    conditional_moments,
    nb_logpmf,
    panel_loglik,
    simulate_subject,
    subject_loglik,
    transition_logpmf,
)

__version__ = "0.1.0"
