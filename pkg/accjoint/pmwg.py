"""
PMwG Sampler - particle Metropolis-within-Gibbs for hierarchical LBA models

One sweep:
    1. mu    | alpha, Sigma          (conjugate normal)
    2. Sigma | alpha, mu, a          (conjugate inverse Wishart)
    3. a     | Sigma                 (inverse gamma auxiliaries)
    4. alpha_s | data_s, mu, Sigma   (conditional importance sampling with a
                                      retained particle, one subject at a time)

Three stages run back to back:
    burn_in     mixture proposal  w_prior MVN(mu, Sigma) + w_local MVN(alpha_s, eps^2 Sigma)
    adaptation  same proposal, every subject's draws are collected
    sampling    per-subject Gaussian fitted to the adaptation draws, mixed
                with the burn-in proposal; usually fewer particles

Randomness comes from counter-based streams keyed by (seed, iteration,
stream): stream 0 for the group update, and (1, digest of the subject id)
for each subject. Results do not depend on how subject updates are
scheduled, and listing the subjects in another order permutes the chain's
alpha rows without changing any draw.

Usage:
    from pmwg import SamplerConfig, run_chain

    chain = run_chain(trials, spec, SamplerConfig(seed=7))
    sigmas = chain.stack("sigma")
"""

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp
from tqdm import tqdm

from design_map import CompiledTrials, ModelSpec, SubjectEffects, validate_spec
from errors import ConfigurationError, InitializationError, InvalidInputError, NumericalError
from hierarchy import (
    DEFAULT_A_SCALE, DEFAULT_NU, GroupState, cholesky_with_jitter, is_positive_definite,
    log_density_alpha, mvn_logpdf_chol, sample_a, sample_mu, sample_sigma,
)
from lba import TrialRecord, race_log_likelihood

logger = logging.getLogger(__name__)

STAGES = ("burn_in", "adaptation", "sampling")
GROUP_STREAM = 0
SUBJECT_STREAM = 1
INIT_ITERATION = 0
INIT_VARIANCE = 0.1
INIT_ATTEMPTS = 1000
INIT_BATCH = 50


# ==================== CONFIGURATION ====================

class StageCounts(BaseModel):
    model_config = ConfigDict(extra="forbid")

    burn_in: int = Field(..., ge=1)
    adaptation: int = Field(..., ge=1)
    sampling: int = Field(..., ge=1)

    def of(self, stage: str) -> int:
        return getattr(self, stage)


class SamplerConfig(BaseModel):
    """Particle counts, stage lengths and proposal settings"""

    model_config = ConfigDict(extra="forbid")

    particles_per_stage: StageCounts = Field(
        default_factory=lambda: StageCounts(burn_in=100, adaptation=100, sampling=50))
    draws_per_stage: StageCounts = Field(
        default_factory=lambda: StageCounts(burn_in=500, adaptation=500, sampling=2000))
    mixture_weights: Tuple[float, float] = (0.5, 0.5)  # (w_prior, w_local)
    local_scale: float = Field(0.5, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    thin: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    start_mu: Optional[List[float]] = None
    efficient_weight: float = Field(0.9, ge=0, lt=1)
    min_unique: int = Field(20, ge=2)
    ridge: float = Field(1e-6, gt=0)
    progress: bool = False

    @model_validator(mode="after")
    def _check_weights(self):
        w_prior, w_local = self.mixture_weights
        if w_prior <= 0 or w_local <= 0:
            raise ValueError(f"mixture weights must be positive: {self.mixture_weights}")
        if abs(w_prior + w_local - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1: {self.mixture_weights}")
        return self


def _stream(seed: int, iteration: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, *keys])))


def subject_key(subject_id: str) -> int:
    """Stable 64-bit key for a subject's random stream"""
    return int.from_bytes(hashlib.sha256(subject_id.encode("utf-8")).digest()[:8], "big")


def _subject_stream(seed: int, iteration: int, subject_id: str) -> np.random.Generator:
    return _stream(seed, iteration, SUBJECT_STREAM, subject_key(subject_id))


# ==================== PROPOSALS ====================

@dataclass(frozen=True)
class ProposalMixture:
    """Weighted mixture of Gaussians, each stored by mean and lower Cholesky factor"""

    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self.means.shape[1]
        component = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, d))
        return self.means[component] + np.einsum("nij,nj->ni", self.chols[component], z)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        per_component = np.stack([
            np.log(w) + mvn_logpdf_chol(x, mean, chol)
            for w, mean, chol in zip(self.weights, self.means, self.chols)
        ])
        return logsumexp(per_component, axis=0)


def mixture_proposal(alpha_current: np.ndarray, gs: GroupState,
                     weights: Tuple[float, float] = (0.5, 0.5), local_scale: float = 0.5) -> ProposalMixture:
    """w_prior MVN(mu, Sigma) + w_local MVN(alpha_current, eps^2 Sigma)"""
    chol = cholesky_with_jitter(gs.sigma)
    return ProposalMixture(
        weights=np.asarray(weights, dtype=float),
        means=np.stack([gs.mu, np.asarray(alpha_current, dtype=float)]),
        chols=np.stack([chol, local_scale * chol]),
    )


@dataclass(frozen=True)
class SubjectFit:
    """Gaussian fitted to one subject's adaptation draws"""

    mean: np.ndarray
    chol: np.ndarray


def fit_subject_proposal(history: np.ndarray, min_unique: int = 20, ridge: float = 1e-6) -> Optional[SubjectFit]:
    """Empirical mean / covariance + ridge of the unique draws; None when there are too few"""
    unique = np.unique(np.asarray(history, dtype=float), axis=0)
    if unique.shape[0] < min_unique:
        return None
    cov = np.atleast_2d(np.cov(history, rowvar=False)) + ridge * np.eye(history.shape[1])
    try:
        chol = cholesky_with_jitter(cov)
    except NumericalError:
        return None
    return SubjectFit(mean=history.mean(axis=0), chol=chol)


def efficient_proposal(fit: SubjectFit, alpha_current: np.ndarray, gs: GroupState,
                       cfg: SamplerConfig) -> ProposalMixture:
    """Fitted subject Gaussian, with the burn-in mixture keeping the remaining weight"""
    base = mixture_proposal(alpha_current, gs, cfg.mixture_weights, cfg.local_scale)
    if cfg.efficient_weight == 0:
        return base
    rest = 1.0 - cfg.efficient_weight
    return ProposalMixture(
        weights=np.concatenate([[cfg.efficient_weight], rest * base.weights]),
        means=np.vstack([fit.mean[None, :], base.means]),
        chols=np.concatenate([fit.chol[None], base.chols]),
    )


# ==================== SUBJECT UPDATE ====================

class ParticleDraw(NamedTuple):
    effects: SubjectEffects
    degenerate: bool  # every weight was -inf, current value kept


def particle_step(trials: CompiledTrials, alpha_current: SubjectEffects, gs: GroupState,
                  proposal: ProposalMixture, R: int, rng: np.random.Generator) -> ParticleDraw:
    """particle_update_subject that also reports whether the particle set was degenerate"""
    if R < 1:
        raise InvalidInputError(f"particle count must be at least 1: {R}")
    if R == 1:
        return ParticleDraw(alpha_current, False)

    current = alpha_current.alpha
    particles = np.vstack([current[None, :], proposal.sample(R - 1, rng)])
    with np.errstate(over="ignore", invalid="ignore"):
        log_w = (
            race_log_likelihood(trials.natural(particles), trials)
            + log_density_alpha(particles, gs.mu, gs.sigma)
            - proposal.logpdf(particles)
        )
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)

    top = log_w.max()
    if not np.isfinite(top):
        return ParticleDraw(alpha_current, True)

    weights = np.exp(log_w - top)
    weights /= weights.sum()
    chosen = int(rng.choice(R, p=weights))
    return ParticleDraw(SubjectEffects(particles[chosen], alpha_current.subject_id), False)


def particle_update_subject(trials: CompiledTrials, alpha_current: SubjectEffects, gs: GroupState,
                            proposal: ProposalMixture, R: int, rng: np.random.Generator) -> SubjectEffects:
    """
    Conditional importance-sampling update of one subject's random effects

    Particle 1 is the current value; particles 2..R come from `proposal`.
    Each is weighted by likelihood x population density / proposal density and
    one is selected in proportion to its weight. When every weight is -inf
    the current value is returned unchanged.

    Raises:
        InvalidInputError: If R < 1
    """
    draw = particle_step(trials, alpha_current, gs, proposal, R, rng)
    if draw.degenerate:
        logger.debug("degenerate particle set for subject %s", alpha_current.subject_id)
    return draw.effects


# ==================== CHAIN ====================

@dataclass
class ChainRecord:
    iteration: int
    stage: str
    mu: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    alpha: np.ndarray  # (S, D), subject-major


@dataclass
class PosteriorChain:
    """Append-only store of posterior draws"""

    parameter_names: List[str]
    subject_ids: List[str]
    block_labels: List[str]
    draws: List[ChainRecord] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.draws)

    def append(self, record: ChainRecord) -> None:
        if self.draws and record.iteration <= self.draws[-1].iteration:
            raise InvalidInputError(
                f"iterations must increase: {record.iteration} after {self.draws[-1].iteration}")
        if record.stage not in STAGES:
            raise InvalidInputError(f"unknown stage '{record.stage}'")
        if not is_positive_definite(record.sigma):
            raise NumericalError(f"sigma at iteration {record.iteration} is not positive definite")
        self.draws.append(record)

    def stage_draws(self, stage: Optional[str] = "sampling") -> List[ChainRecord]:
        """Stored draws of one stage (all stages when stage is None)"""
        if stage is None:
            return list(self.draws)
        return [r for r in self.draws if r.stage == stage]

    def stack(self, name: str, stage: Optional[str] = "sampling") -> np.ndarray:
        """Stacked array of one field over the stage's draws, e.g. stack("sigma") -> (N, D, D)"""
        records = self.stage_draws(stage)
        if not records:
            raise InvalidInputError(f"chain has no '{stage}' draws")
        return np.stack([getattr(r, name) for r in records])

    def mu_draws(self, stage: Optional[str] = "sampling") -> np.ndarray:
        return self.stack("mu", stage)

    def sigma_draws(self, stage: Optional[str] = "sampling") -> np.ndarray:
        return self.stack("sigma", stage)

    def alpha_draws(self, stage: Optional[str] = "sampling") -> np.ndarray:
        """(N, S, D)"""
        return self.stack("alpha", stage)

    @property
    def dimension(self) -> int:
        return len(self.parameter_names)


# ==================== INITIALIZATION ====================

def group_by_subject(data: Sequence[TrialRecord]) -> "OrderedDict[str, List[TrialRecord]]":
    """Trials per subject, subjects in order of first appearance"""
    grouped: "OrderedDict[str, List[TrialRecord]]" = OrderedDict()
    for t in data:
        grouped.setdefault(t.subject_id, []).append(t)
    return grouped


def _start_vector(spec: ModelSpec, cfg: SamplerConfig) -> np.ndarray:
    if cfg.start_mu is None:
        return np.zeros(spec.dimension)
    start = np.asarray(cfg.start_mu, dtype=float)
    if start.shape != (spec.dimension,):
        raise ConfigurationError(f"start_mu has length {start.shape[0]}, spec needs {spec.dimension}")
    return start


def _initial_effects(compiled: CompiledTrials, start: np.ndarray, rng: np.random.Generator) -> SubjectEffects:
    d = start.shape[0]
    attempts = 0
    while attempts < INIT_ATTEMPTS:
        batch = min(INIT_BATCH, INIT_ATTEMPTS - attempts)
        candidates = start + np.sqrt(INIT_VARIANCE) * rng.standard_normal((batch, d))
        log_lik = race_log_likelihood(compiled.natural(candidates), compiled)
        finite = np.flatnonzero(np.isfinite(log_lik))
        if finite.size:
            first = int(finite[0])
            if attempts + first > 0:
                logger.debug("subject %s initialised after %d attempts", compiled.subject_id, attempts + first + 1)
            return SubjectEffects(candidates[first], compiled.subject_id)
        attempts += batch
    raise InitializationError(
        f"no finite-likelihood start for subject '{compiled.subject_id}' after {INIT_ATTEMPTS} attempts",
        subject=compiled.subject_id,
        min_rt=float(compiled.rt.min()) if compiled.n_trials else None,
    )


def init_chain(data: Sequence[TrialRecord], spec: ModelSpec, cfg: SamplerConfig,
               rng: Optional[np.random.Generator] = None, nu: float = DEFAULT_NU,
               A_scale=DEFAULT_A_SCALE) -> Tuple[GroupState, List[SubjectEffects]]:
    """
    Initial state: mu = start_mu (zeros by default), Sigma = I, a = 1, and
    alpha_s drawn from MVN(mu, 0.1 I) until the subject's likelihood is finite

    Without an explicit rng each subject gets its own stream keyed by its id.

    Raises:
        InitializationError: Naming the first subject with no finite start
    """
    start = _start_vector(spec, cfg)
    gs = GroupState.initial(spec.dimension, nu=nu, A_scale=A_scale, mu=start)
    effects = []
    for subject_id, trials in group_by_subject(data).items():
        stream = rng if rng is not None else _subject_stream(cfg.seed, INIT_ITERATION, subject_id)
        effects.append(_initial_effects(spec.compile_trials(trials), start, stream))
    return gs, effects


# ==================== RUN ====================

def _digest(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def trials_digest(data: Sequence[TrialRecord]) -> str:
    rows = "\n".join(f"{t.subject_id},{t.task},{t.cell},{t.response},{t.rt!r}" for t in data)
    return _digest(rows)


def run_chain(data: Sequence[TrialRecord], spec: ModelSpec, cfg: SamplerConfig,
              nu: float = DEFAULT_NU, A_scale=DEFAULT_A_SCALE) -> PosteriorChain:
    """
    Run all three stages and return the thinned chain

    Raises:
        ConfigurationError: If the spec does not cover the data
        InitializationError: If some subject has no finite-likelihood start
    """
    report = validate_spec(spec, data)
    if not report.ok:
        raise ConfigurationError(
            "model spec does not cover the data",
            unmapped_cells=report.unmapped_cells,
            bad_responses=report.bad_responses,
        )

    grouped = group_by_subject(data)
    subject_ids = list(grouped)
    compiled = [spec.compile_trials(trials) for trials in grouped.values()]
    if not compiled:
        raise InvalidInputError("no trials to fit")

    gs, effects = init_chain(data, spec, cfg, nu=nu, A_scale=A_scale)
    logger.info("✓ initialised %d subjects, D = %d", len(subject_ids), spec.dimension)

    chain = PosteriorChain(
        parameter_names=list(spec.vector_order),
        subject_ids=subject_ids,
        block_labels=list(spec.block_labels),
        metadata={
            "spec_hash": _digest(spec.model_dump_json()),
            "data_hash": trials_digest(data),
            "sampler": json.loads(cfg.model_dump_json()),
            "nu": nu,
            "A_scale": np.broadcast_to(np.asarray(A_scale, dtype=float), (spec.dimension,)).tolist(),
        },
    )

    degenerate = np.zeros(len(subject_ids), dtype=int)
    history: List[List[np.ndarray]] = [[] for _ in subject_ids]
    fits: List[Optional[SubjectFit]] = [None] * len(subject_ids)
    # group update sees subjects sorted by id so its sums ignore input order
    group_order = sorted(range(len(subject_ids)), key=subject_ids.__getitem__)
    total = sum(cfg.draws_per_stage.of(stage) * cfg.thin for stage in STAGES)
    iteration = INIT_ITERATION

    with Parallel(n_jobs=cfg.workers, prefer="threads") as parallel, \
            tqdm(total=total, disable=not cfg.progress, desc="pmwg") as bar:
        for stage in STAGES:
            n_particles = cfg.particles_per_stage.of(stage)
            n_sweeps = cfg.draws_per_stage.of(stage) * cfg.thin
            if stage == "sampling":
                fits = _fit_proposals(history, subject_ids, cfg)
            logger.info("stage %s: %d sweeps, %d particles", stage, n_sweeps, n_particles)

            for k in range(n_sweeps):
                iteration += 1
                group_rng = _stream(cfg.seed, iteration, GROUP_STREAM)
                alphas = np.stack([effects[s].alpha for s in group_order])
                mu = sample_mu(alphas, gs.sigma, group_rng)
                sigma = sample_sigma(alphas, mu, gs.a, gs.nu, group_rng)
                a = sample_a(sigma, gs.nu, gs.A_scale, group_rng)
                gs = gs.replace(mu=mu, sigma=sigma, a=a)

                jobs = []
                for s, current in enumerate(effects):
                    if fits[s] is not None:
                        proposal = efficient_proposal(fits[s], current.alpha, gs, cfg)
                    else:
                        proposal = mixture_proposal(current.alpha, gs, cfg.mixture_weights, cfg.local_scale)
                    rng = _subject_stream(cfg.seed, iteration, subject_ids[s])
                    jobs.append((compiled[s], current, gs, proposal, n_particles, rng))

                if cfg.workers == 1:
                    results = [particle_step(*job) for job in jobs]
                else:
                    results = parallel(delayed(particle_step)(*job) for job in jobs)

                effects = [r.effects for r in results]
                degenerate += [int(r.degenerate) for r in results]
                if stage == "adaptation":
                    for s, e in enumerate(effects):
                        history[s].append(e.alpha)

                if (k + 1) % cfg.thin == 0:
                    chain.append(ChainRecord(
                        iteration=iteration,
                        stage=stage,
                        mu=gs.mu.copy(),
                        sigma=gs.sigma.copy(),
                        a=gs.a.copy(),
                        alpha=np.stack([e.alpha for e in effects]),
                    ))
                bar.update(1)

    if degenerate.any():
        logger.warning("⚠ degenerate particle sets for %d subject updates", int(degenerate.sum()))
    chain.metadata["degenerate"] = dict(zip(subject_ids, degenerate.tolist()))
    chain.metadata["fitted_proposals"] = int(sum(f is not None for f in fits))
    logger.info("✓ chain complete: %d stored draws", len(chain))
    return chain


def _fit_proposals(history: List[List[np.ndarray]], subject_ids: List[str],
                   cfg: SamplerConfig) -> List[Optional[SubjectFit]]:
    fits: List[Optional[SubjectFit]] = []
    for subject_id, draws in zip(subject_ids, history):
        fit = fit_subject_proposal(np.stack(draws), cfg.min_unique, cfg.ridge) if draws else None
        if fit is None:
            logger.warning("⚠ proposal fit failed for subject %s, keeping mixture proposal", subject_id)
        fits.append(fit)
    return fits
