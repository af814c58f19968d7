"""Multi-view clustering of multi-layer wireless fingerprints.

Library layout:
  expfamily   closed-form log-likelihood heads and their gradients
  nn          dense-network substrate and the ADAM optimizer
  model       the clustering model, encoders and losses
  simdata     synthetic two-layer fingerprint dataset pipeline
  training    trial runner with restarts and model selection
  evaluation  label matching, accuracy, sweeps, K-means baseline
  cli         experiment command line
"""

from .expfamily import (
    BernoulliParams,
    ExpFamilyDescriptor,
    GaussianDiagParams,
    GaussianFullParams,
    bernoulli_loglik,
    expfam_loglik,
    gaussian_diag_loglik,
    gaussian_full_loglik,
    get_family,
    loglik_grad,
)
from .model import (
    LoglikTable,
    Posterior,
    ViewSpec,
    WvaeModel,
    common_encoder,
    conditional_entropy,
    marginal_encoder,
    semisup_loss,
    supervised_loss,
    unsupervised_loss,
)

__all__ = [
    "BernoulliParams",
    "ExpFamilyDescriptor",
    "GaussianDiagParams",
    "GaussianFullParams",
    "LoglikTable",
    "Posterior",
    "ViewSpec",
    "WvaeModel",
    "bernoulli_loglik",
    "common_encoder",
    "conditional_entropy",
    "expfam_loglik",
    "gaussian_diag_loglik",
    "gaussian_full_loglik",
    "get_family",
    "loglik_grad",
    "marginal_encoder",
    "semisup_loss",
    "supervised_loss",
    "unsupervised_loss",
]
