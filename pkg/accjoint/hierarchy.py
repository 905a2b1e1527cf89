"""
Hierarchy - population model over log-scale random effects

alpha_s ~ MVN(mu, Sigma) across subjects, with
    mu          ~ MVN(0, I)
    Sigma | a   ~ IW(nu + D - 1, 2 nu diag(1/a))
    a_d         ~ InvGamma(1/2, 1/A_scale_d^2)
The inverse-Wishart mixture over a gives uniform marginal priors on every
correlation (nu = 2) and half-t priors on the standard deviations.

All conditional samplers take an explicit numpy Generator and are
bit-reproducible for a fixed seed.

Usage:
    from hierarchy import GroupState, sample_mu, sample_sigma, sample_a

    mu = sample_mu(alphas, gs.sigma, rng)
    sigma = sample_sigma(alphas, mu, gs.a, gs.nu, rng)
    a = sample_a(sigma, gs.nu, gs.A_scale, rng)
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import invgamma, invwishart

from errors import InvalidInputError, NumericalError

DEFAULT_NU = 2.0
DEFAULT_A_SCALE = 1.0
JITTER_ATTEMPTS = 3
_LOG_2PI = math.log(2.0 * math.pi)


# ==================== LINEAR ALGEBRA ====================

def cholesky_with_jitter(sigma: np.ndarray) -> np.ndarray:
    """
    Lower Cholesky factor, adding 1e-10 * trace / D to the diagonal at most
    three times when the plain factorization fails

    Raises:
        NumericalError: If the matrix is still not positive definite
    """
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise NumericalError("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass

    d = sigma.shape[0]
    step = 1e-10 * abs(np.trace(sigma)) / d
    jittered = sigma.copy()
    for _ in range(JITTER_ATTEMPTS):
        jittered = jittered + step * np.eye(d)
        try:
            return np.linalg.cholesky(jittered)
        except np.linalg.LinAlgError:
            continue
    smallest = float(np.linalg.eigvalsh((sigma + sigma.T) / 2.0)[0])
    raise NumericalError("covariance is not positive definite", smallest_eigenvalue=smallest)


def is_positive_definite(sigma: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(np.asarray(sigma, dtype=float))
        return True
    except np.linalg.LinAlgError:
        return False


def _inverse_from_cholesky(chol: np.ndarray) -> np.ndarray:
    inv_l = solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    return inv_l.T @ inv_l


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


# ==================== GROUP STATE ====================

@dataclass(frozen=True)
class GroupState:
    """Snapshot of the population-level parameters"""

    mu: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    nu: float = DEFAULT_NU
    A_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        a = np.asarray(self.a, dtype=float)
        d = mu.shape[0]
        a_scale = np.full(d, DEFAULT_A_SCALE) if self.A_scale is None else np.broadcast_to(
            np.asarray(self.A_scale, dtype=float), (d,)).copy()

        if sigma.shape != (d, d) or a.shape != (d,):
            raise InvalidInputError(f"inconsistent shapes: mu {mu.shape}, sigma {sigma.shape}, a {a.shape}")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(sigma).max())):
            raise InvalidInputError("sigma must be symmetric")
        if not is_positive_definite(sigma):
            raise InvalidInputError("sigma must be positive definite")
        if np.any(a <= 0):
            raise InvalidInputError("auxiliaries a must be positive")
        if self.nu < 2:
            raise InvalidInputError(f"nu must be at least 2: {self.nu}")
        if np.any(a_scale <= 0):
            raise InvalidInputError("A_scale must be positive")

        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "A_scale", a_scale)

    @property
    def dimension(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def initial(cls, dimension: int, nu: float = DEFAULT_NU, A_scale=None,
                mu: Optional[Sequence[float]] = None) -> "GroupState":
        """mu = 0 (unless given), Sigma = I, a = 1"""
        start = np.zeros(dimension) if mu is None else np.asarray(mu, dtype=float)
        return cls(mu=start, sigma=np.eye(dimension), a=np.ones(dimension), nu=nu, A_scale=A_scale)

    def replace(self, **changes) -> "GroupState":
        fields = dict(mu=self.mu, sigma=self.sigma, a=self.a, nu=self.nu, A_scale=self.A_scale)
        fields.update(changes)
        return GroupState(**fields)


# ==================== DENSITIES ====================

def mvn_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Row-wise MVN log-density of (R, D) points given a lower Cholesky factor"""
    d = chol.shape[0]
    diff = np.atleast_2d(x) - np.asarray(mean, dtype=float)
    z = solve_triangular(chol, diff.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * _LOG_2PI + log_det) - 0.5 * np.sum(z * z, axis=0)


def log_density_alpha(alpha: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> Union[float, np.ndarray]:
    """
    Exact MVN log-density via Cholesky; alpha may be (D,) or (R, D)

    Raises:
        NumericalError: If sigma is not positive definite
    """
    alpha = np.asarray(alpha, dtype=float)
    out = mvn_logpdf_chol(alpha, mu, cholesky_with_jitter(sigma))
    return float(out[0]) if alpha.ndim == 1 else out


def log_prior(gs: GroupState) -> float:
    """
    Joint log prior density of (mu, Sigma, a)

    log N(mu; 0, I) + log IW(Sigma; nu + D - 1, 2 nu diag(1/a))
        + sum_d log InvGamma(a_d; 1/2, 1/A_scale_d^2)

    Raises:
        InvalidInputError: If sigma is not positive definite
    """
    d = gs.dimension
    if not is_positive_definite(gs.sigma):
        raise InvalidInputError("sigma must be positive definite")

    log_mu = -0.5 * (d * _LOG_2PI + float(gs.mu @ gs.mu))
    sigma = gs.sigma if d > 1 else gs.sigma[0, 0]
    log_sigma = float(invwishart.logpdf(sigma, df=gs.nu + d - 1, scale=2.0 * gs.nu * np.diag(1.0 / gs.a)))
    log_a = float(np.sum(invgamma.logpdf(gs.a, 0.5, scale=1.0 / gs.A_scale ** 2)))
    return log_mu + log_sigma + log_a


# ==================== CONDITIONAL SAMPLERS ====================

def _stack(alphas) -> np.ndarray:
    if len(alphas) == 0:
        return np.empty((0, 0))
    rows = [getattr(x, "alpha", x) for x in alphas]
    return np.atleast_2d(np.asarray(rows, dtype=float))


def sample_mu(alphas, sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draw mu | alpha_1..S, Sigma

    Lambda = (I + S Sigma^-1)^-1, m = Lambda Sigma^-1 sum_s alpha_s.
    With no subjects this is the prior MVN(0, I).
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    stacked = _stack(alphas)
    n_subjects = stacked.shape[0]

    sigma_inv = _inverse_from_cholesky(cholesky_with_jitter(sigma))
    precision = np.eye(d) + n_subjects * sigma_inv
    cov = _symmetrize(_inverse_from_cholesky(cholesky_with_jitter(precision)))
    total = stacked.sum(axis=0) if n_subjects else np.zeros(d)
    mean = cov @ (sigma_inv @ total)
    return mean + cholesky_with_jitter(cov) @ rng.standard_normal(d)


def sigma_scale_matrix(alphas, mu: np.ndarray, a: np.ndarray, nu: float) -> Tuple[float, np.ndarray]:
    """Degrees of freedom and scale of the conditional IW for Sigma"""
    a = np.asarray(a, dtype=float)
    d = a.shape[0]
    stacked = _stack(alphas)
    scale = 2.0 * nu * np.diag(1.0 / a)
    n_subjects = stacked.shape[0]
    if n_subjects:
        dev = stacked - np.asarray(mu, dtype=float)
        scale = scale + dev.T @ dev
    return nu + d - 1 + n_subjects, _symmetrize(scale)


def sample_sigma(alphas, mu: np.ndarray, a: np.ndarray, nu: float, rng: np.random.Generator) -> np.ndarray:
    """
    Draw Sigma | alpha, mu, a ~ IW(nu + D - 1 + S, 2 nu diag(1/a) + sum_s (alpha_s - mu)(alpha_s - mu)^T)

    Raises:
        NumericalError: If the scale matrix is not positive definite
    """
    df, scale = sigma_scale_matrix(alphas, mu, a, nu)
    d = scale.shape[0]
    if not is_positive_definite(scale):
        raise NumericalError("inverse-Wishart scale matrix is not positive definite")
    draw = invwishart.rvs(df=df, scale=scale, random_state=rng)
    return _symmetrize(np.asarray(draw, dtype=float).reshape(d, d))


def sample_a(sigma: np.ndarray, nu: float, A_scale, rng: np.random.Generator) -> np.ndarray:
    """Draw a_d ~ InvGamma((nu + D)/2, nu (Sigma^-1)_dd + 1/A_scale_d^2), independently over d"""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    a_scale = np.broadcast_to(np.asarray(A_scale, dtype=float), (d,))
    sigma_inv = _inverse_from_cholesky(cholesky_with_jitter(sigma))
    rate = nu * np.diag(sigma_inv) + 1.0 / a_scale ** 2
    return np.asarray(invgamma.rvs((nu + d) / 2.0, scale=rate, size=d, random_state=rng), dtype=float)


def sample_group_prior(dimension: int, rng: np.random.Generator, nu: float = DEFAULT_NU,
                       A_scale=DEFAULT_A_SCALE) -> GroupState:
    """Ancestral draw a -> Sigma -> mu from the prior"""
    a_scale = np.broadcast_to(np.asarray(A_scale, dtype=float), (dimension,))
    a = np.asarray(invgamma.rvs(0.5, scale=1.0 / a_scale ** 2, size=dimension, random_state=rng), dtype=float)
    sigma = sample_sigma([], np.zeros(dimension), a, nu, rng)
    mu = rng.standard_normal(dimension)
    return GroupState(mu=mu, sigma=sigma, a=a, nu=nu, A_scale=a_scale)
