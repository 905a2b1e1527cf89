"""
Simulation Study - generate hierarchical data, refit, score recovery

Three generator versions differ only in the covariance used for generation:
    matched       base covariance unchanged
    zero_between  covariances between different task blocks set to zero
    uniform_r     every off-diagonal correlation set to target_r, variances kept

Reference values from both applications (group means and the posterior-mean
correlation matrices) are kept here as constants so the
generators can be rebuilt without a prior fit.

Usage:
    from simstudy import load_design, run_recovery

    design = load_design("simstudy.json")
    result = run_recovery(design)
    print(result.report)
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from design_map import ModelSpec, bundled_spec, load_model_spec, resolve
from errors import ConfigurationError, ConstructionError
from hierarchy import DEFAULT_A_SCALE, DEFAULT_NU, GroupState, is_positive_definite
from lba import TrialRecord, simulate_trials
from pmwg import PosteriorChain, SamplerConfig, run_chain

logger = logging.getLogger(__name__)

Version = Literal["matched", "zero_between", "uniform_r"]
VERSIONS: Tuple[str, ...] = ("matched", "zero_between", "uniform_r")


# ==================== REFERENCE VALUES ====================

SESSION_PARAMS = ("b_a", "b_n", "b_s", "A", "v_e", "v_c", "tau")

# natural-scale group means, two-session experiment
TWO_SESSION_MEANS: Dict[str, float] = {
    "out.b_a": 1.33, "out.b_n": 1.39, "out.b_s": 1.05, "out.A": 0.73,
    "out.v_e": 1.50, "out.v_c": 3.12, "out.tau": 0.19,
    "in.b_a": 1.63, "in.b_n": 1.80, "in.b_s": 1.25, "in.A": 0.92,
    "in.v_e": 1.69, "in.v_c": 3.24, "in.tau": 0.18,
}

# natural-scale group means, three-task experiment
THREE_TASK_MEANS: Dict[str, float] = {
    "match.b1": 2.15, "match.b2": 2.34, "match.b3": 2.42, "match.A": 1.34, "match.v_e": 0.86,
    "match.v1": 2.94, "match.v2": 3.19, "match.v3": 2.79, "match.tau": 0.17,
    "search.b_f": 1.71, "search.b4": 1.79, "search.b8": 1.95, "search.A": 0.89, "search.v_e": 1.19,
    "search.v_f": 3.82, "search.v4": 3.62, "search.v8": 3.42, "search.tau": 0.22,
    "stop.b_f": 2.74, "stop.b4": 2.87, "stop.b8": 3.04, "stop.A": 1.78, "stop.v_e": 0.77,
    "stop.v_f": 4.04, "stop.v4": 3.96, "stop.v8": 3.80, "stop.tau": 0.23,
}

# lower triangle of the posterior-mean correlation matrix, rows 2..14 in
# out.{b_a b_n b_s A v_e v_c tau}, in.{...} order
TWO_SESSION_CORR_LOWER: Tuple[Tuple[float, ...], ...] = (
    (.97,),
    (.94, .90),
    (.75, .74, .67),
    (.74, .71, .74, .32),
    (.64, .66, .59, .20, .66),
    (-.67, -.65, -.66, -.48, -.51, -.41),
    (.38, .33, .36, .59, .20, -.22, -.32),
    (.29, .28, .26, .59, .08, -.31, -.23, .92),
    (.35, .29, .38, .57, .17, -.28, -.32, .92, .87),
    (.39, .35, .37, .62, .17, -.22, -.34, .90, .87, .87),
    (.56, .53, .54, .47, .57, .15, -.41, .73, .65, .66, .63),
    (.59, .57, .54, .39, .55, .41, -.43, .46, .38, .38, .40, .63),
    (.24, .29, .16, -.03, .21, .61, -.12, -.49, -.48, -.55, -.39, -.26, .00),
)

TWO_SESSION_ORDER: Tuple[str, ...] = tuple(
    f"{session}.{p}" for session in ("out", "in") for p in SESSION_PARAMS)

# lower triangle of the posterior-mean correlation matrix, rows 2..27 in
# match.{b1 b2 b3 A v_e v1 v2 v3 tau}, search.{b_f b4 b8 A v_e v_f v4 v8 tau},
# stop.{...} order. Rounded to two places it is not PD (smallest eigenvalue
# about -0.004), so three_task_correlation repairs it.
THREE_TASK_CORR_LOWER: Tuple[Tuple[float, ...], ...] = (
    (.95,),
    (.90, .93),
    (.89, .87, .85),
    (-.03, -.09, -.20, -.21),
    (.16, .21, .19, .06, .14),
    (.08, .22, .19, .05, -.08, .57),
    (.13, .22, .33, .20, -.19, .27, .50),
    (-.39, -.32, -.23, -.16, -.32, -.06, .16, .38),
    (.48, .46, .42, .47, .18, .08, -.01, .09, -.13),
    (.53, .51, .47, .52, .17, .10, .01, .09, -.16, .99),
    (.52, .51, .47, .50, .16, .15, .07, .09, -.17, .97, .98),
    (.47, .40, .43, .42, .17, -.04, -.23, -.06, -.37, .61, .62, .62),
    (-.01, -.05, -.06, .11, .20, .02, -.04, .10, .20, .44, .40, .40, .19),
    (.13, .16, .19, .17, .04, .20, .28, .43, .21, .53, .50, .50, .13, .36),
    (.31, .34, .35, .35, .03, .24, .33, .44, .12, .60, .62, .62, .25, .31, .85),
    (.27, .32, .32, .30, .05, .34, .40, .37, .08, .60, .61, .68, .28, .36, .76, .87),
    (-.20, -.17, -.12, -.26, -.17, .02, .14, .05, .02, -.70, -.67, -.64, -.31, -.52, -.32, -.29, -.27),
    (.50, .51, .46, .29, .34, .48, .35, .27, -.38, .27, .30, .32, .31, -.02, .19, .26, .27, -.08),
    (.52, .53, .48, .31, .33, .48, .36, .27, -.38, .28, .31, .33, .32, -.01, .19, .26, .29, -.08, 1.00),
    (.53, .55, .50, .32, .32, .48, .36, .27, -.39, .27, .30, .33, .32, -.03, .18, .26, .28, -.07, .99, .99),
    (.38, .38, .34, .21, .32, .45, .33, .23, -.33, .14, .18, .20, .25, -.05, .13, .20, .21, .02, .92, .91, .91),
    (-.07, -.09, -.06, -.05, .02, -.23, -.24, -.14, .06, .13, .09, .11, .19, .29, -.04, -.05, .02, -.14, -.23,
     -.21, -.22, -.29),
    (.48, .50, .49, .27, .19, .40, .34, .31, -.36, .32, .32, .34, .29, -.07, .33, .31, .33, -.09, .79, .79, .78,
     .63, -.13),
    (.52, .55, .53, .30, .20, .43, .37, .31, -.37, .32, .33, .37, .30, -.05, .31, .31, .35, -.08, .81, .82, .81,
     .64, -.10, .96),
    (.53, .57, .57, .32, .19, .46, .43, .37, -.36, .28, .30, .33, .30, -.10, .28, .32, .35, .00, .85, .85, .86,
     .70, -.14, .94, .96),
    (-.16, -.15, -.10, -.11, -.14, .01, .05, .06, .11, -.28, -.27, -.27, -.15, -.21, -.04, -.06, -.06, .46, -.18,
     -.19, -.17, .00, -.30, -.09, -.13, -.08),
)

THREE_TASK_ORDER: Tuple[str, ...] = (
    tuple(f"match.{p}" for p in ("b1", "b2", "b3", "A", "v_e", "v1", "v2", "v3", "tau"))
    + tuple(f"{task}.{p}" for task in ("search", "stop")
            for p in ("b_f", "b4", "b8", "A", "v_e", "v_f", "v4", "v8", "tau"))
)

# log-scale population sd of the desk generator, per parameter kind
DESK_SD = {"b": 0.20, "v_c": 0.15, "tau": 0.15}
DEFAULT_REFERENCE_SD = 0.2


EIGEN_FLOOR = 1e-3


def _from_lower(lower: Sequence[Sequence[float]]) -> np.ndarray:
    d = len(lower) + 1
    corr = np.eye(d)
    for i, row in enumerate(lower, start=1):
        corr[i, :len(row)] = row
        corr[:len(row), i] = row
    return corr


def nearest_correlation(corr: np.ndarray, floor: float = EIGEN_FLOOR) -> np.ndarray:
    """
    Clip eigenvalues below floor, then rescale back to a unit diagonal

    A matrix whose eigenvalues are all >= floor comes back unchanged. Each
    entry moves by at most about twice the largest clipped gap.
    """
    corr = (np.asarray(corr, dtype=float) + np.asarray(corr, dtype=float).T) / 2.0
    values, vectors = np.linalg.eigh(corr)
    if values[0] >= floor:
        return corr
    repaired = (vectors * np.maximum(values, floor)) @ vectors.T
    scale = 1.0 / np.sqrt(np.diag(repaired))
    repaired = repaired * np.outer(scale, scale)
    np.fill_diagonal(repaired, 1.0)
    logger.debug("correlation repaired: smallest eigenvalue %.5f raised to %g", values[0], floor)
    return repaired


def two_session_correlation() -> np.ndarray:
    """Full 14 x 14 reference correlation matrix"""
    return _from_lower(TWO_SESSION_CORR_LOWER)


def three_task_correlation() -> np.ndarray:
    """Full 27 x 27 reference correlation matrix, repaired to be PD"""
    return nearest_correlation(_from_lower(THREE_TASK_CORR_LOWER))


def corr_to_cov(corr: np.ndarray, sd: np.ndarray) -> np.ndarray:
    sd = np.asarray(sd, dtype=float)
    return np.asarray(corr, dtype=float) * np.outer(sd, sd)


def _require_pd(sigma: np.ndarray, what: str) -> None:
    if not is_positive_definite(sigma):
        smallest = float(np.linalg.eigvalsh((sigma + sigma.T) / 2.0)[0])
        raise ConstructionError(f"{what} covariance is not positive definite", smallest_eigenvalue=smallest)


def reference_generator(spec: ModelSpec, sd: Union[float, Sequence[float]] = DEFAULT_REFERENCE_SD) -> GroupState:
    """
    Generator built from the reference tables for a bundled spec

    mu = log of the reference group means of every name in vector_order.
    Correlations come from the two-session or the three-task matrix for every
    pair of names one of them covers (the desk spec maps out.b / in.b onto
    b_a); other pairs are 0.

    Raises:
        ConfigurationError: If some parameter has no reference mean
        ConstructionError: If the resulting covariance is not PD
    """
    means = {**TWO_SESSION_MEANS, **THREE_TASK_MEANS}
    aliases = {"out.b": "out.b_a", "in.b": "in.b_a"}
    names = [aliases.get(n, n) for n in spec.vector_order]
    missing = [n for n in names if n not in means]
    if missing:
        raise ConfigurationError("no reference mean for parameters", parameters=missing)

    references = [(two_session_correlation(), {n: i for i, n in enumerate(TWO_SESSION_ORDER)}),
                  (three_task_correlation(), {n: i for i, n in enumerate(THREE_TASK_ORDER)})]
    d = len(names)
    corr = np.eye(d)
    for i in range(d):
        for j in range(i):
            for ref_corr, ref_index in references:
                if names[i] in ref_index and names[j] in ref_index:
                    corr[i, j] = corr[j, i] = ref_corr[ref_index[names[i]], ref_index[names[j]]]
                    break

    sd_vec = np.broadcast_to(np.asarray(sd, dtype=float), (d,))
    sigma = corr_to_cov(corr, sd_vec)
    _require_pd(sigma, "reference")
    return GroupState(mu=np.log([means[n] for n in names]), sigma=sigma, a=np.ones(d))


def desk_generator(spec: ModelSpec) -> GroupState:
    """Reference generator with desk-scale sds (b 0.20, v_c 0.15, tau 0.15)"""
    sd = [DESK_SD[name.split(".", 1)[1]] for name in spec.vector_order]
    return reference_generator(spec, sd)


# ==================== DESIGN ====================

class GeneratorDoc(BaseModel):
    """Explicit generator: log-scale mu, log-scale sd and a correlation matrix"""

    model_config = ConfigDict(extra="forbid")

    mu: List[float]
    sd: List[float]
    corr: List[List[float]]

    def to_state(self) -> GroupState:
        sd = np.asarray(self.sd, dtype=float)
        sigma = corr_to_cov(np.asarray(self.corr, dtype=float), sd)
        _require_pd(sigma, "generator")
        return GroupState(mu=np.asarray(self.mu, dtype=float), sigma=sigma, a=np.ones(len(self.mu)))


class SimDesign(BaseModel):
    """simstudy.json"""

    model_config = ConfigDict(extra="forbid")

    model: str = "desk"  # bundled spec name or path to a model.json
    subjects: int = Field(40, ge=2)
    trials_per_task: int = Field(250, ge=1)
    version: Version = "matched"
    target_r: float = Field(0.8, gt=-1.0, lt=1.0)
    seed: int = Field(0, ge=0)
    generator: Optional[GeneratorDoc] = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    nu: float = Field(DEFAULT_NU, ge=2.0)
    A_scale: Union[float, List[float]] = DEFAULT_A_SCALE

    @field_validator("model")
    @classmethod
    def _model_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("model must name a bundled spec or a file")
        return v

    def load_spec(self, base_dir: Optional[Path] = None) -> ModelSpec:
        candidate = Path(self.model)
        if base_dir is not None and not candidate.is_absolute():
            candidate = base_dir / candidate
        if candidate.suffix == ".json":
            return load_model_spec(candidate)
        return bundled_spec(self.model)

    def base_state(self, spec: ModelSpec) -> GroupState:
        if self.generator is not None:
            state = self.generator.to_state()
            if state.dimension != spec.dimension:
                raise ConfigurationError(
                    f"generator has dimension {state.dimension}, spec needs {spec.dimension}")
            return state
        if self.model == "desk":
            return desk_generator(spec)
        return reference_generator(spec)


def load_design(path: Union[str, Path]) -> SimDesign:
    """
    Raises:
        ConfigurationError: If the file is missing or invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"design file not found: {path}", path=str(path))
    try:
        return SimDesign.model_validate(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"design file is not valid JSON: {e}", path=str(path)) from e
    except ValidationError as e:
        raise ConfigurationError(f"invalid design: {e.errors()[0]['msg']}", errors=str(e)) from e


def full_scale(design: SimDesign) -> SimDesign:
    """S = 100, n = 1000 per session, two-session D = 14 reference generator"""
    sampler = design.sampler.model_copy(update={"start_mu": None})
    return design.model_copy(update={"model": "two_session", "subjects": 100, "trials_per_task": 1000,
                                     "generator": None, "sampler": sampler})


# ==================== GENERATION ====================

def build_generator(version: str, base: GroupState, target_r: float = 0.8,
                    block_labels: Optional[Sequence[str]] = None) -> GroupState:
    """
    Covariance regime for one study version

    Raises:
        ConfigurationError: For an unknown version or missing block labels
        ConstructionError: If the modified covariance is not PD
    """
    sigma = base.sigma.copy()
    if version == "matched":
        return base
    if version == "zero_between":
        if block_labels is None or len(block_labels) != base.dimension:
            raise ConfigurationError("zero_between needs one block label per coordinate")
        labels = np.asarray(block_labels)
        sigma = np.where(labels[:, None] == labels[None, :], sigma, 0.0)
    elif version == "uniform_r":
        sd = np.sqrt(np.diag(sigma))
        corr = np.full_like(sigma, target_r)
        np.fill_diagonal(corr, 1.0)
        sigma = corr_to_cov(corr, sd)
    else:
        raise ConfigurationError(f"unknown version '{version}'", versions=list(VERSIONS))

    _require_pd(sigma, version)
    return base.replace(sigma=sigma)


def cell_plan(spec: ModelSpec, trials_per_task: int) -> Dict[Tuple[str, str], int]:
    """Spread n trials per task evenly over its cells; earlier cells take the remainder"""
    plan: Dict[Tuple[str, str], int] = {}
    for task in spec.tasks:
        cells = list(task.cells)
        share, extra = divmod(trials_per_task, len(cells))
        for i, cell in enumerate(cells):
            plan[(task.name, cell)] = share + (1 if i < extra else 0)
    return plan


def subject_id(index: int) -> str:
    return f"s{index + 1:03d}"


def simulate_subject(spec: ModelSpec, alpha: np.ndarray, plan: Dict[Tuple[str, str], int],
                     rng: np.random.Generator, sid: str) -> List[TrialRecord]:
    trials: List[TrialRecord] = []
    for (task, cell), n in plan.items():
        if n <= 0:
            continue
        params = resolve(spec, task, cell, alpha)
        b = np.tile([p.b_gap for p in params], (n, 1))
        A = np.tile([p.A for p in params], (n, 1))
        v = np.tile([p.v for p in params], (n, 1))
        tau = np.full(n, params[0].tau)
        responses, rts = simulate_trials(b, A, v, tau, rng)
        trials.extend(TrialRecord(sid, task, cell, int(r), float(t)) for r, t in zip(responses, rts))
    return trials


def generate_dataset(design: SimDesign, spec: ModelSpec,
                     plan: Optional[Dict[Tuple[str, str], int]] = None,
                     generator: Optional[GroupState] = None) -> Tuple[List[TrialRecord], np.ndarray]:
    """
    alpha_s ~ MVN(mu, Sigma) i.i.d., then the planned trials per subject

    The alpha draws use the first child of SeedSequence(design.seed); subject
    s simulates from child s + 1.

    Returns:
        (trials, true_alphas) with true_alphas of shape (S, D)
    """
    if generator is None:
        generator = build_generator(design.version, design.base_state(spec), design.target_r, spec.block_labels)
    if plan is None:
        plan = cell_plan(spec, design.trials_per_task)

    children = np.random.SeedSequence(design.seed).spawn(design.subjects + 1)
    alpha_rng = np.random.default_rng(children[0])
    z = alpha_rng.standard_normal((design.subjects, generator.dimension))
    true_alphas = generator.mu + z @ np.linalg.cholesky(generator.sigma).T

    data: List[TrialRecord] = []
    for s in range(design.subjects):
        rng = np.random.default_rng(children[s + 1])
        data.extend(simulate_subject(spec, true_alphas[s], plan, rng, subject_id(s)))
    logger.info("✓ generated %d trials for %d subjects (%s)", len(data), design.subjects, design.version)
    return data, true_alphas


# ==================== SCORING ====================

def score_recovery(chain: PosteriorChain, generator: GroupState, level: float = 0.95) -> pd.DataFrame:
    """
    One row per lower-triangle covariance element (diagonal included)

    Columns: element, param_i, param_j, between, generating, posterior_mean,
    lo95, hi95, covers, excludes_zero. Intervals are equal-tailed quantiles.
    """
    sigmas = chain.sigma_draws()
    names = chain.parameter_names
    blocks = chain.block_labels
    lo_q, hi_q = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    lo = np.quantile(sigmas, lo_q, axis=0)
    hi = np.quantile(sigmas, hi_q, axis=0)
    mean = sigmas.mean(axis=0)

    rows = []
    for i in range(len(names)):
        for j in range(i + 1):
            truth = float(generator.sigma[i, j])
            rows.append({
                "element": f"{names[i]}|{names[j]}",
                "param_i": names[i],
                "param_j": names[j],
                "between": blocks[i] != blocks[j],
                "generating": truth,
                "posterior_mean": float(mean[i, j]),
                "lo95": float(lo[i, j]),
                "hi95": float(hi[i, j]),
                "covers": bool(lo[i, j] <= truth <= hi[i, j]),
                "excludes_zero": bool(lo[i, j] > 0 or hi[i, j] < 0),
            })
    return pd.DataFrame(rows)


def recovery_rates(report: pd.DataFrame) -> Dict[str, float]:
    """Coverage of all elements and zero inclusion / exclusion of between-block elements"""
    between = report[report["between"]]
    rates = {"coverage": float(report["covers"].mean()), "n_elements": int(len(report)),
             "n_between": int(len(between))}
    if len(between):
        rates["between_contains_zero"] = float((~between["excludes_zero"]).mean())
        rates["between_excludes_zero"] = float(between["excludes_zero"].mean())
    return rates


@dataclass
class RecoveryResult:
    design: SimDesign
    generator: GroupState
    data: List[TrialRecord]
    true_alphas: np.ndarray
    chain: PosteriorChain
    report: pd.DataFrame


def run_recovery(design: SimDesign, spec: Optional[ModelSpec] = None,
                 base_dir: Optional[Path] = None) -> RecoveryResult:
    """Simulate, fit with the design's sampler settings (started at the generator mean unless start_mu is set), score"""
    if spec is None:
        spec = design.load_spec(base_dir)
    generator = build_generator(design.version, design.base_state(spec), design.target_r, spec.block_labels)
    data, true_alphas = generate_dataset(design, spec, generator=generator)
    sampler = design.sampler
    if sampler.start_mu is None:
        sampler = sampler.model_copy(update={"start_mu": generator.mu.tolist()})
    chain = run_chain(data, spec, sampler, nu=design.nu, A_scale=design.A_scale)
    report = score_recovery(chain, generator)
    rates = recovery_rates(report)
    logger.info("✓ %s recovery: coverage %.2f over %d elements", design.version, rates["coverage"], rates["n_elements"])
    return RecoveryResult(design, generator, data, true_alphas, chain, report)
