"""
LBA Core - Linear Ballistic Accumulator densities, race likelihood and simulation

Each accumulator starts at a uniform point in [0, A] and rises linearly at a
drift drawn from Normal(v, s) truncated to positive values until it reaches
the absolute threshold c = A + b_gap. The first accumulator to finish wins;
non-decision time tau is added to its finishing time.

The scalar API (node_pdf, node_cdf, defective_log_density, simulate_trial)
validates its inputs. The array API (race_log_likelihood, simulate_trials) is
the sampler's hot path and trusts its callers.

Usage:
    from lba import AccumulatorParams, node_pdf, simulate_trial

    p = AccumulatorParams(b_gap=0.6, A=0.7, v=3.1, tau=0.19)
    density = node_pdf(0.4, p)
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.special import erfcx, log_ndtr, logsumexp, ndtr
from scipy.stats import truncnorm

from errors import InvalidInputError


# ==================== CONSTANTS ====================

DRIFT_SD = 1.0  # scaling constraint, never estimated
ZERO_A = 1e-6  # below this the general formula is 0/0
MIN_DRIFT_Z = -8.0  # v/s must stay above this so Phi(v/s) is representable
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_HALF = math.log(0.5)
_SQRT_2 = math.sqrt(2.0)
_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
_G_SERIES_FROM = 100.0  # |z| where the asymptotic series for log g takes over

ArrayLike = Union[float, np.ndarray]


# ==================== DOMAIN TYPES ====================

@dataclass(frozen=True)
class AccumulatorParams:
    """Natural-scale parameters of one accumulator"""

    b_gap: float
    A: float
    v: float
    tau: float
    s: float = DRIFT_SD

    def __post_init__(self):
        values = (self.b_gap, self.A, self.v, self.tau, self.s)
        if not all(math.isfinite(x) for x in values):
            raise InvalidInputError("accumulator parameters must be finite", params=str(self))
        if self.b_gap <= 0:
            raise InvalidInputError(f"b_gap must be positive: {self.b_gap}")
        if self.A < 0:
            raise InvalidInputError(f"A cannot be negative: {self.A}")
        if self.tau < 0:
            raise InvalidInputError(f"tau cannot be negative: {self.tau}")
        if self.s <= 0:
            raise InvalidInputError(f"s must be positive: {self.s}")
        if self.v / self.s <= MIN_DRIFT_Z:
            raise InvalidInputError(
                f"drift too negative for a representable truncation normalizer: v/s = {self.v / self.s}"
            )

    @property
    def c(self) -> float:
        """Absolute threshold"""
        return self.A + self.b_gap


@dataclass(frozen=True)
class TrialRecord:
    """One observed decision"""

    subject_id: str
    task: str
    cell: str
    response: int
    rt: float

    def __post_init__(self):
        if not math.isfinite(self.rt) or self.rt <= 0:
            raise InvalidInputError(f"rt must be positive and finite: {self.rt}", subject=self.subject_id)
        if self.response < 0:
            raise InvalidInputError(f"response index cannot be negative: {self.response}")


# ==================== ARRAY KERNELS ====================

def _log_phi(x: np.ndarray) -> np.ndarray:
    return -0.5 * x * x - _LOG_SQRT_2PI


def _log_diff(la: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """log(exp(la) - exp(lb)); -inf unless la > lb"""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = la + np.log1p(-np.exp(lb - la))
    return np.where(la > lb, out, -np.inf)


def _log_ndtr_diff(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """log(Phi(hi) - Phi(lo)) for lo <= hi, taken from the upper tails when lo > 0"""
    upper = lo > 0
    la = np.where(upper, log_ndtr(-lo), log_ndtr(hi))
    lb = np.where(upper, log_ndtr(-hi), log_ndtr(lo))
    return _log_diff(la, lb)


def _log_g(z: np.ndarray) -> np.ndarray:
    """
    log(z Phi(z) + phi(z)), the antiderivative of Phi

    For z < 0 the two terms cancel; the scaled complementary error function
    keeps the ratio Phi(z) / phi(z) exact, and past -100 the asymptotic
    series phi(z) / z^2 (1 - 3/z^2 + 15/z^4 - 105/z^6) takes over.
    """
    z = np.asarray(z, dtype=float)
    pos = z >= 0
    mid = (z < 0) & (z >= -_G_SERIES_FROM)

    zp = np.where(pos, z, 0.0)
    zm = np.where(mid, z, -1.0)
    zf = np.where(pos | mid, -_G_SERIES_FROM, z)
    inv = 1.0 / (zf * zf)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_pos = np.log(zp * ndtr(zp) + np.exp(_log_phi(zp)))
        out_mid = _log_phi(zm) + np.log(1.0 + zm * _SQRT_HALF_PI * erfcx(-zm / _SQRT_2))
        out_far = _log_phi(zf) - 2.0 * np.log(-zf) + np.log1p(inv * (-3.0 + inv * (15.0 - 105.0 * inv)))
    return np.select([pos, mid], [out_pos, out_mid], out_far)


def _prepare(t, b_gap, A, v, s):
    t, b_gap, A, v, s = np.broadcast_arrays(
        np.asarray(t, dtype=float), b_gap, A, v, np.asarray(s, dtype=float)
    )
    positive = t > 0
    tt = np.where(positive, t, 1.0)
    small = A < ZERO_A
    a_safe = np.where(small, 1.0, A)
    return tt, b_gap, A + b_gap, v, s, positive, small, a_safe


def _log_pdf_array(t, b_gap, A, v, s=DRIFT_SD) -> np.ndarray:
    """
    Log finishing-time density, broadcasting over all arguments

    The general form v (Phi(z_hi) - Phi(z_lo)) + s (phi(z_lo) - phi(z_hi))
    is summed with signs in log space, so short decision times stay finite.
    """
    tt, b_gap, c, v, s, positive, small, a_safe = _prepare(t, b_gap, A, v, s)
    log_z = log_ndtr(v / s)
    ts = tt * s

    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        z_lo = (b_gap - tt * v) / ts
        z_hi = (c - tt * v) / ts
        log_s = np.log(s)
        terms = np.stack([np.log(np.abs(v)) + _log_ndtr_diff(z_lo, z_hi),
                          log_s + _log_phi(z_lo),
                          log_s + _log_phi(z_hi)], axis=-1)
        signs = np.stack([np.sign(v), np.ones_like(v), -np.ones_like(v)], axis=-1)
        log_sum, sign = logsumexp(terms, axis=-1, b=signs, return_sign=True)
        log_general = np.where(sign > 0, log_sum, -np.inf) - np.log(a_safe) - log_z

        # zero-A limit
        log_limit = np.log(c) - 2.0 * np.log(tt) - log_s - log_z + _log_phi((c / tt - v) / s)

    out = np.where(small, log_limit, log_general)
    return np.where(positive, out, -np.inf)


def _log_cdf_parts(t, b_gap, A, v, s=DRIFT_SD) -> Tuple[np.ndarray, np.ndarray]:
    """
    (log F, log(1 - F)) of the truncated finishing time, broadcasting

    With g the antiderivative of Phi, the untruncated CDF is
    ts/A (g(-z_lo) - g(-z_hi)) and the untruncated survival is
    ts/A (g(z_hi) - g(z_lo)); both are positive differences, so each side of
    the distribution keeps its relative accuracy.
    """
    tt, b_gap, c, v, s, positive, small, a_safe = _prepare(t, b_gap, A, v, s)
    log_z = log_ndtr(v / s)
    ts = tt * s

    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        z_lo = (b_gap - tt * v) / ts
        z_hi = (c - tt * v) / ts
        log_scale = np.log(ts) - np.log(a_safe)
        log_f_untrunc = log_scale + _log_diff(_log_g(-z_lo), _log_g(-z_hi))
        log_s_untrunc = log_scale + _log_diff(_log_g(z_hi), _log_g(z_lo))
        log_cdf = np.minimum(log_f_untrunc - log_z, 0.0)
        # survival = (S_untrunc - P(drift <= 0)) / Phi(v/s)
        log_surv_far = _log_diff(log_s_untrunc, log_ndtr(-v / s)) - log_z
        log_surv = np.where(log_cdf < _LOG_HALF, np.log1p(-np.exp(log_cdf)), log_surv_far)

        z_limit = (v - c / tt) / s
        log_cdf_limit = np.minimum(log_ndtr(z_limit) - log_z, 0.0)
        log_surv_limit = _log_ndtr_diff(z_limit, v / s) - log_z

    log_cdf = np.where(small, log_cdf_limit, log_cdf)
    log_surv = np.minimum(np.where(small, log_surv_limit, log_surv), 0.0)
    return np.where(positive, log_cdf, -np.inf), np.where(positive, log_surv, 0.0)


def _cdf_array(t, b_gap, A, v, s=DRIFT_SD) -> np.ndarray:
    """Finishing-time CDF, broadcasting over all arguments"""
    with np.errstate(under="ignore"):
        return np.exp(_log_cdf_parts(t, b_gap, A, v, s)[0])


def _log_survival_array(t, b_gap, A, v, s=DRIFT_SD) -> np.ndarray:
    return _log_cdf_parts(t, b_gap, A, v, s)[1]


# ==================== SCALAR API ====================

def _check_time(t: ArrayLike) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("decision time must be finite", t=str(t))
    return arr


def _as_output(arr: np.ndarray, t: ArrayLike) -> ArrayLike:
    return float(arr) if np.ndim(t) == 0 else arr


def node_pdf(t: ArrayLike, p: AccumulatorParams) -> ArrayLike:
    """
    Finishing-time density of one accumulator at decision time t

    Returns 0 for t <= 0; drifts are truncated positive and the result is
    normalised by Phi(v/s).

    Raises:
        InvalidInputError: If t is not finite
    """
    arr = _check_time(t)
    with np.errstate(under="ignore"):
        dens = np.exp(_log_pdf_array(arr, p.b_gap, p.A, p.v, p.s))
    return _as_output(dens, t)


def node_cdf(t: ArrayLike, p: AccumulatorParams) -> ArrayLike:
    """Probability that the accumulator has finished by decision time t"""
    arr = _check_time(t)
    return _as_output(_cdf_array(arr, p.b_gap, p.A, p.v, p.s), t)


def node_log_pdf(t: ArrayLike, p: AccumulatorParams) -> ArrayLike:
    """log node_pdf, finite for every t > 0 even where the density underflows"""
    arr = _check_time(t)
    return _as_output(_log_pdf_array(arr, p.b_gap, p.A, p.v, p.s), t)


def node_log_cdf(t: ArrayLike, p: AccumulatorParams) -> Tuple[ArrayLike, ArrayLike]:
    """(log F(t), log(1 - F(t))) with relative accuracy on both sides"""
    arr = _check_time(t)
    log_cdf, log_surv = _log_cdf_parts(arr, p.b_gap, p.A, p.v, p.s)
    return _as_output(log_cdf, t), _as_output(log_surv, t)


def _check_race(params: Sequence[AccumulatorParams]) -> float:
    if len(params) < 2:
        raise InvalidInputError(f"a race needs at least 2 accumulators, got {len(params)}")
    tau = params[0].tau
    if any(p.tau != tau for p in params):
        raise InvalidInputError("accumulators in one trial must share tau", taus=[p.tau for p in params])
    return tau


def defective_log_density(trial: TrialRecord, params: Sequence[AccumulatorParams]) -> float:
    """
    Log joint density of (response, rt) under the race

    log f_c(d) + sum over k != c of log(1 - F_k(d)), with d = rt - tau.
    Returns -inf when the response precedes the non-decision time.

    Raises:
        InvalidInputError: If the response index is outside the race or the
            accumulators disagree on tau
    """
    tau = _check_race(params)
    if trial.response >= len(params):
        raise InvalidInputError(
            f"response {trial.response} outside race of {len(params)} accumulators",
            subject=trial.subject_id,
            cell=trial.cell,
        )

    d = trial.rt - tau
    if d <= 0:
        return -math.inf

    chosen = params[trial.response]
    total = float(_log_pdf_array(d, chosen.b_gap, chosen.A, chosen.v, chosen.s))
    for k, p in enumerate(params):
        if k != trial.response:
            total += float(_log_survival_array(d, p.b_gap, p.A, p.v, p.s))
    return total


def defective_density(d: ArrayLike, params: Sequence[AccumulatorParams], response: int) -> ArrayLike:
    """Defective density at decision time d (no tau shift); used for quadrature"""
    arr = _check_time(d)
    chosen = params[response]
    log_dens = _log_pdf_array(arr, chosen.b_gap, chosen.A, chosen.v, chosen.s)
    for k, p in enumerate(params):
        if k != response:
            log_dens = log_dens + _log_survival_array(arr, p.b_gap, p.A, p.v, p.s)
    with np.errstate(under="ignore"):
        return _as_output(np.exp(log_dens), d)


def choice_probability(params: Sequence[AccumulatorParams], response: int) -> float:
    """Probability that `response` wins the race, by adaptive quadrature"""
    _check_race(params)
    total = 0.0
    # piecewise so quad does not miss the bulk of the mass
    for lo, hi in ((0.0, 0.5), (0.5, 2.0), (2.0, 10.0), (10.0, np.inf)):
        value, _ = integrate.quad(lambda d: defective_density(d, params, response), lo, hi, limit=200)
        total += value
    return total


# ==================== HOT PATH ====================

def race_log_likelihood(natural: np.ndarray, compiled) -> np.ndarray:
    """
    Summed trial log-likelihood for many parameter vectors at once

    Args:
        natural: (R, P) natural-scale parameter table; columns are indexed by
            the compiled trial arrays (exp(alpha) followed by fixed constants)
        compiled: CompiledTrials for one subject (see design_map)

    Returns:
        (R,) log-likelihoods; -inf where any trial has rt <= tau
    """
    natural = np.atleast_2d(natural)
    n_rows = natural.shape[0]
    if compiled.n_trials == 0:
        return np.zeros(n_rows)

    b = natural[:, compiled.b_idx]
    A = natural[:, compiled.A_idx]
    v = natural[:, compiled.v_idx]
    tau = natural[:, compiled.tau_idx]

    d = compiled.rt[None, :] - tau
    t = d[..., None]
    log_f = _log_pdf_array(t, b, A, v)
    log_s = _log_survival_array(t, b, A, v)

    chosen = compiled.chosen_mask[None]
    others = (compiled.mask & ~compiled.chosen_mask)[None]
    per_trial = np.where(chosen, log_f, 0.0).sum(axis=2) + np.where(others, log_s, 0.0).sum(axis=2)
    per_trial = np.where((d > 0) & ~np.isnan(per_trial), per_trial, -np.inf)
    return per_trial.sum(axis=1)


def subject_log_likelihood(trials: Sequence[TrialRecord], alpha, spec) -> float:
    """
    Sum of defective log densities of one subject's trials under exp(alpha)

    Raises:
        ConfigurationError: If a trial's cell is not mapped by spec
    """
    compiled = spec.compile_trials(trials)
    natural = spec.natural_table(getattr(alpha, "alpha", alpha))
    return float(race_log_likelihood(natural[None, :], compiled)[0])


# ==================== SIMULATION ====================

def draw_accumulators(v: np.ndarray, A: np.ndarray, rng: np.random.Generator,
                      s: float = DRIFT_SD) -> Tuple[np.ndarray, np.ndarray]:
    """Start points ~ Uniform(0, A) and drifts ~ Normal(v, s) truncated positive"""
    v = np.asarray(v, dtype=float)
    starts = rng.uniform(0.0, 1.0, size=v.shape) * np.asarray(A, dtype=float)
    drifts = truncnorm.rvs(a=-v / s, b=np.inf, loc=v, scale=s, size=v.shape, random_state=rng)
    return starts, np.asarray(drifts, dtype=float)


def simulate_trials(b_gap: np.ndarray, A: np.ndarray, v: np.ndarray, tau: np.ndarray,
                    rng: np.random.Generator, mask: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simulate many races at once

    Args:
        b_gap, A, v: (N, K) per-trial accumulator parameters
        tau: (N,) non-decision times
        rng: random stream
        mask: (N, K) accumulators that take part (padding is False)

    Returns:
        (responses, rts), each of shape (N,)
    """
    b_gap = np.asarray(b_gap, dtype=float)
    if mask is None:
        mask = np.ones(b_gap.shape, dtype=bool)
    starts, drifts = draw_accumulators(v, A, rng)
    times = np.where(mask, (np.asarray(A) + b_gap - starts) / drifts, np.inf)
    responses = times.argmin(axis=1)
    rts = times.min(axis=1) + np.asarray(tau, dtype=float)
    return responses, rts


def simulate_trial(params: Sequence[AccumulatorParams], rng: np.random.Generator) -> Tuple[int, float]:
    """Simulate one race; returns (response index, rt)"""
    if not params:
        raise InvalidInputError("simulate_trial needs at least one accumulator")
    tau = params[0].tau
    if any(p.tau != tau for p in params):
        raise InvalidInputError("accumulators in one trial must share tau")
    b = np.array([[p.b_gap for p in params]])
    A = np.array([[p.A for p in params]])
    v = np.array([[p.v for p in params]])
    responses, rts = simulate_trials(b, A, v, np.array([tau]), rng)
    return int(responses[0]), float(rts[0])
