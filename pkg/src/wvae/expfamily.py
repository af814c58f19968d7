"""Closed-form log-likelihoods for the distribution heads and their parameter gradients.

Every head treats coordinates as independent given the cluster, except the
full-covariance Gaussian. All functions are pure; parameter objects are not
mutated after construction and can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

_TWO_PI = 2.0 * np.pi


def softplus(x):
    """log(1 + e^x), evaluated in the overflow-safe branch form
    max(x, 0) + log(1 + e^{-|x|})."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return expit(np.asarray(x, dtype=float))


def inv_softplus(y):
    """Inverse of softplus for y > 0: log(e^y - 1)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("inv_softplus requires positive input")
    # For large y, log(expm1(y)) == y to double precision; branch avoids overflow.
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class GaussianDiagParams:
    """Mean and log-variance of an independent-coordinate Gaussian.

    The log-variance is clamped to [LOGVAR_MIN, LOGVAR_MAX] on construction so
    unsupervised training cannot collapse a coordinate to zero variance.
    """

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = _as_vector(self.mean, "mean")
        self.logvar = np.clip(_as_vector(self.logvar, "logvar"), LOGVAR_MIN, LOGVAR_MAX)
        if self.mean.shape != self.logvar.shape:
            raise ValueError("mean and logvar must have the same length")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class GaussianFullParams:
    """Mean and covariance of a full Gaussian, stored via an unconstrained factor.

    The realized lower-triangular square root G has softplus(raw diagonal) on
    its diagonal, so any real `factor_raw` maps to a valid SPD covariance
    G @ G.T.
    """

    mean: np.ndarray
    factor_raw: np.ndarray

    def __post_init__(self):
        self.mean = _as_vector(self.mean, "mean")
        raw = np.asarray(self.factor_raw, dtype=float)
        d = self.mean.shape[0]
        if raw.shape != (d, d):
            raise ValueError(f"factor_raw must be {d}x{d}, got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise ValueError("factor_raw contains non-finite entries")
        self.factor_raw = raw

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def factor(self) -> np.ndarray:
        """Realized lower-triangular factor G with strictly positive diagonal."""
        g = np.tril(self.factor_raw, k=-1)
        np.fill_diagonal(g, softplus(np.diag(self.factor_raw)))
        return g

    def covariance(self) -> np.ndarray:
        g = self.factor()
        return g @ g.T

    @classmethod
    def from_covariance(cls, mean, cov) -> "GaussianFullParams":
        cov = np.asarray(cov, dtype=float)
        g = np.linalg.cholesky(cov)
        raw = np.tril(g, k=-1)
        np.fill_diagonal(raw, inv_softplus(np.diag(g)))
        return cls(mean=mean, factor_raw=raw)


@dataclass
class BernoulliParams:
    """Per-coordinate logits of an independent Bernoulli vector."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = _as_vector(self.logits, "logits")

    @property
    def dim(self) -> int:
        return self.logits.shape[0]

    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass
class ExpFamilyDescriptor:
    """A named exponential-family member in log-density form.

    log p(x) = base_measure(x) + eta . sufficient_statistic(x) - log_partition(eta)

    per coordinate, with eta a vector of length natural_param_dim.
    `base_measure` returns the additive log-domain term (e.g. -log x! for the
    Poisson). All callables are vectorized over coordinates.
    """

    name: str
    natural_param_dim: int
    base_measure: Callable[[np.ndarray], np.ndarray]
    sufficient_statistic: Callable[[np.ndarray], np.ndarray]  # (d,) -> (d, k)
    log_partition: Callable[[np.ndarray], np.ndarray]  # (d, k) -> (d,)
    grad_log_partition: Callable[[np.ndarray], np.ndarray]  # (d, k) -> (d, k)
    in_domain: Callable[[np.ndarray], bool] = field(default=lambda eta: True)

    def check_domain(self, eta: np.ndarray) -> None:
        if not self.in_domain(eta):
            raise ValueError(f"natural parameters outside the {self.name} domain")


def gaussian_full_loglik(x, params: GaussianFullParams) -> float:
    """Log-density of a full-covariance Gaussian at x.

    The determinant and the quadratic form are both evaluated through the
    triangular factor; no matrix inverse is formed.
    """
    x = _as_vector(x, "x")
    if x.shape[0] != params.dim:
        raise ValueError(f"x has length {x.shape[0]}, expected {params.dim}")
    g = params.factor()
    u = solve_triangular(g, x - params.mean, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(g)))
    return float(-0.5 * (params.dim * np.log(_TWO_PI) + log_det) - 0.5 * (u @ u))


def gaussian_diag_loglik(x, params: GaussianDiagParams) -> float:
    """Log-density of an independent-coordinate Gaussian in log-variance form."""
    x = _as_vector(x, "x")
    if x.shape[0] != params.dim:
        raise ValueError(f"x has length {x.shape[0]}, expected {params.dim}")
    nu = params.logvar
    sq = (x - params.mean) ** 2 * np.exp(-nu)
    return float(-0.5 * params.dim * np.log(_TWO_PI) - 0.5 * np.sum(nu + sq))


def bernoulli_loglik(x, params: BernoulliParams) -> float:
    """Log-mass of an independent Bernoulli vector in logit form."""
    x = _as_vector(x, "x")
    if x.shape[0] != params.dim:
        raise ValueError(f"x has length {x.shape[0]}, expected {params.dim}")
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli observations must be 0/1 valued")
    xi = params.logits
    return float(np.sum(x * xi - softplus(xi)))


def expfam_loglik(x, natural_params, family: ExpFamilyDescriptor) -> float:
    """Generic exponential-family log-likelihood with per-coordinate natural params.

    `natural_params` has shape (d, k) where k = family.natural_param_dim.
    """
    x = _as_vector(x, "x")
    eta = np.asarray(natural_params, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    if eta.shape != (x.shape[0], family.natural_param_dim):
        raise ValueError(
            f"natural params must have shape ({x.shape[0]}, {family.natural_param_dim}),"
            f" got {eta.shape}"
        )
    family.check_domain(eta)
    t = family.sufficient_statistic(x)
    return float(
        np.sum(family.base_measure(x))
        + np.sum(eta * t)
        - np.sum(family.log_partition(eta))
    )


def _grads_like(cls, **fields):
    # Gradient holder with the same fields as the parameter type; skips
    # __post_init__ so logvar gradients are not clamped like logvars.
    out = cls.__new__(cls)
    for name, value in fields.items():
        setattr(out, name, np.asarray(value, dtype=float))
    return out


def _gaussian_diag_grad(x, params: GaussianDiagParams) -> GaussianDiagParams:
    x = _as_vector(x, "x")
    inv_var = np.exp(-params.logvar)
    r = x - params.mean
    return _grads_like(
        GaussianDiagParams,
        mean=r * inv_var,
        logvar=-0.5 * (1.0 - r**2 * inv_var),
    )


def _gaussian_full_grad(x, params: GaussianFullParams) -> GaussianFullParams:
    x = _as_vector(x, "x")
    g = params.factor()
    u = solve_triangular(g, x - params.mean, lower=True)
    w = solve_triangular(g.T, u, lower=False)  # = Sigma^{-1} (x - mean)
    dg = np.outer(w, u)
    dg -= np.diag(1.0 / np.diag(g))
    dg = np.tril(dg)
    # Chain through the softplus reparameterization of the diagonal.
    dg[np.diag_indices_from(dg)] *= sigmoid(np.diag(params.factor_raw))
    return _grads_like(GaussianFullParams, mean=w, factor_raw=dg)


def _bernoulli_grad(x, params: BernoulliParams) -> BernoulliParams:
    x = _as_vector(x, "x")
    return _grads_like(BernoulliParams, logits=x - sigmoid(params.logits))


def loglik_grad(kind: str, x, params, family: ExpFamilyDescriptor | None = None):
    """Analytic gradient of a head log-likelihood w.r.t. its parameterization.

    Returns an object shaped like `params`: the specialized heads return a
    params-like holder whose fields contain gradients; a registered family
    name with bare natural parameters returns an array of the same shape.
    """
    if kind == "gaussian-diag":
        return _gaussian_diag_grad(x, params)
    if kind == "gaussian-full":
        return _gaussian_full_grad(x, params)
    if kind == "bernoulli" and isinstance(params, BernoulliParams):
        return _bernoulli_grad(x, params)
    fam = family if family is not None else get_family(kind)
    x = _as_vector(x, "x")
    eta = np.asarray(params, dtype=float)
    squeeze = eta.ndim == 1
    if squeeze:
        eta = eta[:, None]
    fam.check_domain(eta)
    grad = fam.sufficient_statistic(x) - fam.grad_log_partition(eta)
    return grad[:, 0] if squeeze else grad


# --- registered family instances -------------------------------------------

def _gauss_nat_ok(eta) -> bool:
    return bool(np.all(eta[..., 1] < 0))


_GAUSSIAN = ExpFamilyDescriptor(
    name="gaussian",
    natural_param_dim=2,
    base_measure=lambda x: np.full_like(np.asarray(x, dtype=float), -0.5 * np.log(_TWO_PI)),
    sufficient_statistic=lambda x: np.stack([x, x**2], axis=-1),
    log_partition=lambda eta: -eta[..., 0] ** 2 / (4.0 * eta[..., 1])
    - 0.5 * np.log(-2.0 * eta[..., 1]),
    grad_log_partition=lambda eta: np.stack(
        [
            -eta[..., 0] / (2.0 * eta[..., 1]),
            eta[..., 0] ** 2 / (4.0 * eta[..., 1] ** 2) - 1.0 / (2.0 * eta[..., 1]),
        ],
        axis=-1,
    ),
    in_domain=_gauss_nat_ok,
)

_BERNOULLI = ExpFamilyDescriptor(
    name="bernoulli",
    natural_param_dim=1,
    base_measure=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    sufficient_statistic=lambda x: np.asarray(x, dtype=float)[..., None],
    log_partition=lambda eta: softplus(eta[..., 0]),
    grad_log_partition=lambda eta: sigmoid(eta),
)

_POISSON = ExpFamilyDescriptor(
    name="poisson",
    natural_param_dim=1,
    base_measure=lambda x: -gammaln(np.asarray(x, dtype=float) + 1.0),
    sufficient_statistic=lambda x: np.asarray(x, dtype=float)[..., None],
    log_partition=lambda eta: np.exp(eta[..., 0]),
    grad_log_partition=lambda eta: np.exp(eta),
)

_EXPONENTIAL = ExpFamilyDescriptor(
    name="exponential",
    natural_param_dim=1,
    base_measure=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    sufficient_statistic=lambda x: np.asarray(x, dtype=float)[..., None],
    log_partition=lambda eta: -np.log(-eta[..., 0]),
    grad_log_partition=lambda eta: -1.0 / eta,
    in_domain=lambda eta: bool(np.all(eta < 0)),
)

_REGISTRY = {
    fam.name: fam for fam in (_GAUSSIAN, _BERNOULLI, _POISSON, _EXPONENTIAL)
}


def get_family(name: str) -> ExpFamilyDescriptor:
    """Look up a registered exponential-family descriptor by name."""
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown family {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def gaussian_natural_params(params: GaussianDiagParams) -> np.ndarray:
    """Natural parameters (mu/sigma^2, -1/(2 sigma^2)) per coordinate."""
    inv_var = np.exp(-params.logvar)
    return np.stack([params.mean * inv_var, -0.5 * inv_var], axis=-1)
