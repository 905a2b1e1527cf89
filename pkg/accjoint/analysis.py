"""
Analysis - post-processing of posterior chains

Correlation matrices with the +/-3 SD reliability rule, natural-scale group
means, per-subject point estimates, joint vs independent precision,
posterior predictive simulation and descriptive cross-task statistics.
Every tabular result is a pandas DataFrame ready for CSV export.

Usage:
    from analysis import correlation_summary, group_mean_table

    summary = correlation_summary(chain)
    table = group_mean_table(chain)
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtri

from design_map import ModelSpec, compile_trials
from errors import InvalidInputError
from lba import TrialRecord, simulate_trials
from pmwg import PosteriorChain, group_by_subject

logger = logging.getLogger(__name__)

RELIABILITY_SDS = 3.0

DesignCounts = Dict[Tuple[str, str, str], int]


# ==================== CORRELATIONS ====================

def cov_to_corr(sigma: np.ndarray) -> np.ndarray:
    """
    corr_ij = sigma_ij / sqrt(sigma_ii sigma_jj); works on (D, D) or stacked (N, D, D)

    Raises:
        InvalidInputError: If a diagonal entry is not positive
    """
    sigma = np.asarray(sigma, dtype=float)
    diag = np.diagonal(sigma, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise InvalidInputError("covariance has a non-positive diagonal entry")
    sd = np.sqrt(diag)
    corr = sigma / (sd[..., :, None] * sd[..., None, :])
    corr = np.clip(corr, -1.0, 1.0)
    idx = np.arange(sigma.shape[-1])
    corr[..., idx, idx] = 1.0
    return corr


def reliability_flags(mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """
    |mean| >= 3 sd, element-wise over the whole matrix

    The diagonal (mean 1, sd 0) is always flagged, and so is any element whose
    draws are all identical. Callers that count pairs use the upper triangle.
    """
    return np.abs(np.asarray(mean, dtype=float)) >= RELIABILITY_SDS * np.asarray(sd, dtype=float)


@dataclass(frozen=True)
class CorrelationSummary:
    parameter_names: List[str]
    block_labels: List[str]
    mean: np.ndarray
    sd: np.ndarray
    reliable: np.ndarray
    n_draws: int

    @property
    def dimension(self) -> int:
        return len(self.parameter_names)

    def block_indices(self, label: str) -> List[int]:
        return [i for i, b in enumerate(self.block_labels) if b == label]


def summarize_sigma_draws(sigmas: np.ndarray, parameter_names: Sequence[str],
                          block_labels: Sequence[str]) -> CorrelationSummary:
    """Draw-wise correlation, then element-wise mean and sd (ddof = 0) over draws"""
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.ndim != 3 or sigmas.shape[0] == 0:
        raise InvalidInputError(f"expected (N, D, D) covariance draws, got shape {sigmas.shape}")
    corr = cov_to_corr(sigmas)
    mean = corr.mean(axis=0)
    mean = (mean + mean.T) / 2.0
    np.fill_diagonal(mean, 1.0)
    sd = corr.std(axis=0)
    np.fill_diagonal(sd, 0.0)
    return CorrelationSummary(
        parameter_names=list(parameter_names),
        block_labels=list(block_labels),
        mean=mean,
        sd=sd,
        reliable=reliability_flags(mean, sd),
        n_draws=int(sigmas.shape[0]),
    )


def correlation_summary(chain: PosteriorChain, stage: Optional[str] = "sampling") -> CorrelationSummary:
    """Posterior mean, sd and reliability of every correlation"""
    sigmas = chain.sigma_draws(stage)
    if sigmas.shape[0] < 2:
        logger.warning("⚠ correlation summary from %d draw, all sd are 0", sigmas.shape[0])
    return summarize_sigma_draws(sigmas, chain.parameter_names, chain.block_labels)


def correlation_table(summary: CorrelationSummary) -> pd.DataFrame:
    """Long form, one row per pair i < j"""
    rows = []
    for i, j in combinations(range(summary.dimension), 2):
        rows.append({
            "param_i": summary.parameter_names[i],
            "param_j": summary.parameter_names[j],
            "block_i": summary.block_labels[i],
            "block_j": summary.block_labels[j],
            "between": summary.block_labels[i] != summary.block_labels[j],
            "mean": summary.mean[i, j],
            "sd": summary.sd[i, j],
            "reliable": bool(summary.reliable[i, j]),
        })
    return pd.DataFrame(rows, columns=["param_i", "param_j", "block_i", "block_j",
                                       "between", "mean", "sd", "reliable"])


# ==================== POINT SUMMARIES ====================

def group_mean_table(chain: PosteriorChain, spec: Optional[ModelSpec] = None,
                     stage: Optional[str] = "sampling") -> pd.DataFrame:
    """Mean and sd over draws of exp(mu_d), with the log-scale mean alongside"""
    mu = chain.mu_draws(stage)
    names = list(spec.vector_order) if spec is not None else chain.parameter_names
    if len(names) != mu.shape[1]:
        raise InvalidInputError(f"spec has {len(names)} parameters, chain has {mu.shape[1]}")
    natural = np.exp(mu)
    return pd.DataFrame({
        "parameter": names,
        "block": chain.block_labels,
        "mean": natural.mean(axis=0),
        "sd": natural.std(axis=0),
        "log_mean": mu.mean(axis=0),
    })


def subject_effect_points(chain: PosteriorChain, stage: Optional[str] = "sampling") -> pd.DataFrame:
    """Posterior means of alpha and of exp(alpha), one row per (subject, parameter)"""
    alpha = chain.alpha_draws(stage)
    log_mean = alpha.mean(axis=0)
    natural_mean = np.exp(alpha).mean(axis=0)
    n_subjects, d = log_mean.shape
    return pd.DataFrame({
        "subject": np.repeat(chain.subject_ids, d),
        "parameter": np.tile(chain.parameter_names, n_subjects),
        "block": np.tile(chain.block_labels, n_subjects),
        "log_mean": log_mean.ravel(),
        "natural_mean": natural_mean.ravel(),
    })


# ==================== PRECISION ====================

@dataclass(frozen=True)
class PrecisionComparison:
    points: pd.DataFrame   # subject, parameter, block, sd_joint, sd_independent, pct_change
    medians: pd.DataFrame  # block, median_pct_change, share_below_identity, n


def precision_compare(joint_chain: PosteriorChain,
                      independent_chains: Sequence[PosteriorChain]) -> PrecisionComparison:
    """
    Posterior sd of every random effect in the joint fit against the same
    effect in separate fits; parameters are matched by name

    Raises:
        InvalidInputError: If subject sets differ or a joint parameter has no
            independent counterpart
    """
    joint_sd = joint_chain.alpha_draws().std(axis=0)
    joint_subjects = list(joint_chain.subject_ids)

    independent_sd: Dict[str, np.ndarray] = {}
    for chain in independent_chains:
        if set(chain.subject_ids) != set(joint_subjects):
            raise InvalidInputError(
                "subject sets differ between joint and independent chains",
                missing=sorted(set(joint_subjects) - set(chain.subject_ids)),
                extra=sorted(set(chain.subject_ids) - set(joint_subjects)),
            )
        order = [chain.subject_ids.index(s) for s in joint_subjects]
        sd = chain.alpha_draws().std(axis=0)[order]
        for d, name in enumerate(chain.parameter_names):
            independent_sd[name] = sd[:, d]

    missing = [name for name in joint_chain.parameter_names if name not in independent_sd]
    if missing:
        raise InvalidInputError("parameters missing from independent chains", parameters=missing)

    rows = []
    for d, name in enumerate(joint_chain.parameter_names):
        for s, subject in enumerate(joint_subjects):
            sd_j = float(joint_sd[s, d])
            sd_i = float(independent_sd[name][s])
            rows.append({
                "subject": subject,
                "parameter": name,
                "block": joint_chain.block_labels[d],
                "sd_joint": sd_j,
                "sd_independent": sd_i,
                "pct_change": 100.0 * (sd_j - sd_i) / sd_i if sd_i > 0 else np.nan,
            })
    points = pd.DataFrame(rows)
    medians = (
        points.assign(below=points["sd_joint"] < points["sd_independent"])
        .groupby("block", sort=False)
        .agg(median_pct_change=("pct_change", "median"),
             share_below_identity=("below", "mean"),
             n=("pct_change", "size"))
        .reset_index()
    )
    return PrecisionComparison(points=points, medians=medians)


# ==================== POSTERIOR PREDICTIVE ====================

def design_counts(data: Sequence[TrialRecord]) -> DesignCounts:
    """Trial counts per (subject, task, cell)"""
    counts: DesignCounts = {}
    for t in data:
        key = (t.subject_id, t.task, t.cell)
        counts[key] = counts.get(key, 0) + 1
    return counts


def _template_trials(counts: DesignCounts) -> Dict[str, List[TrialRecord]]:
    # placeholder rt/response; only the cell layout is used
    grouped: Dict[str, List[TrialRecord]] = {}
    for (subject, task, cell), n in counts.items():
        grouped.setdefault(subject, []).extend(TrialRecord(subject, task, cell, 0, 1.0) for _ in range(n))
    return grouped


def posterior_predictive(chain: PosteriorChain, spec: ModelSpec, design: DesignCounts, draws: int,
                         rng: np.random.Generator, stage: Optional[str] = "sampling") -> pd.DataFrame:
    """
    Simulate the full design under `draws` posterior draws spread evenly over the chain

    Returns:
        DataFrame with draw, subject, task, cell, response, rt, correct
    """
    columns = ["draw", "subject", "task", "cell", "response", "rt", "correct"]
    if draws <= 0:
        return pd.DataFrame(columns=columns)
    alpha = chain.alpha_draws(stage)
    picks = np.linspace(0, alpha.shape[0] - 1, draws).round().astype(int)
    position = {s: i for i, s in enumerate(chain.subject_ids)}

    templates = {}
    for subject, trials in _template_trials(design).items():
        if subject not in position:
            raise InvalidInputError(f"subject '{subject}' is not in the chain", subject=subject)
        templates[subject] = compile_trials(spec, trials)
    correct_of = {(task, cell): spec.correct_response(task, cell) for task, cell in spec.cells()}

    frames = []
    for k, pick in enumerate(picks):
        for subject, compiled in templates.items():
            natural = compiled.natural(alpha[pick, position[subject]])[0]
            responses, rts = simulate_trials(
                natural[compiled.b_idx], natural[compiled.A_idx], natural[compiled.v_idx],
                natural[compiled.tau_idx], rng, mask=compiled.mask)
            target = np.array([correct_of[(t, c)] for t, c in zip(compiled.tasks, compiled.cells)])
            frames.append(pd.DataFrame({
                "draw": k,
                "subject": subject,
                "task": compiled.tasks,
                "cell": compiled.cells,
                "response": responses,
                "rt": rts,
                "correct": np.where(target >= 0, responses == target, np.nan),
            }))
    return pd.concat(frames, ignore_index=True)[columns]


def _cell_statistics(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    return frame.groupby(keys, sort=True).agg(accuracy=("correct", "mean"), median_rt=("rt", "median"))


def predictive_summary(predictive: pd.DataFrame, data: Sequence[TrialRecord], spec: ModelSpec,
                       level: float = 0.95) -> pd.DataFrame:
    """
    Per (task, cell): observed accuracy and median RT against the central
    predictive interval of the same statistic across draws
    """
    observed = pd.DataFrame([
        {"task": t.task, "cell": t.cell, "rt": t.rt,
         "correct": float(t.response == spec.correct_response(t.task, t.cell))
         if spec.correct_response(t.task, t.cell) >= 0 else np.nan}
        for t in data
    ])
    obs = _cell_statistics(observed, ["task", "cell"])
    per_draw = _cell_statistics(predictive, ["draw", "task", "cell"])

    lo_q, hi_q = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    grouped = per_draw.groupby(level=["task", "cell"])
    table = pd.DataFrame({
        "accuracy_lo": grouped["accuracy"].quantile(lo_q),
        "accuracy_hi": grouped["accuracy"].quantile(hi_q),
        "median_rt_lo": grouped["median_rt"].quantile(lo_q),
        "median_rt_hi": grouped["median_rt"].quantile(hi_q),
    })
    table = obs.join(table, how="left")
    table["accuracy_covered"] = (table["accuracy"] >= table["accuracy_lo"]) & (table["accuracy"] <= table["accuracy_hi"])
    table["median_rt_covered"] = (table["median_rt"] >= table["median_rt_lo"]) & (table["median_rt"] <= table["median_rt_hi"])
    return table.reset_index()


# ==================== DESCRIPTIVES ====================

@dataclass(frozen=True)
class DescriptiveSummary:
    per_subject: pd.DataFrame   # subject, task, n, mean_rt, accuracy, probit
    correlations: pd.DataFrame  # task_a, task_b, measure, n_subjects, r, defined


def clamped_probit(accuracy: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Phi^-1 of accuracy clamped to [1/(2n), 1 - 1/(2n)]"""
    n = np.asarray(n, dtype=float)
    lo = 1.0 / (2.0 * n)
    return ndtri(np.clip(np.asarray(accuracy, dtype=float), lo, 1.0 - lo))


def pearson_or_nan(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson r; NaN with fewer than 3 pairs or zero variance"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def descriptive_cross_task(data: Sequence[TrialRecord], spec: ModelSpec) -> DescriptiveSummary:
    """
    Per-subject mean RT and probit accuracy per task, and Pearson r between
    every pair of tasks over the subjects present in both

    Accuracy counts only trials in cells with a correct-tagged accumulator.
    """
    rows = []
    for subject, trials in group_by_subject(data).items():
        by_task: Dict[str, List[TrialRecord]] = {}
        for t in trials:
            by_task.setdefault(t.task, []).append(t)
        for task, task_trials in by_task.items():
            scored = [(t.response == spec.correct_response(t.task, t.cell)) for t in task_trials
                      if spec.correct_response(t.task, t.cell) >= 0]
            n_scored = len(scored)
            accuracy = float(np.mean(scored)) if n_scored else np.nan
            rows.append({
                "subject": subject,
                "task": task,
                "n": len(task_trials),
                "mean_rt": float(np.mean([t.rt for t in task_trials])),
                "accuracy": accuracy,
                "probit": float(clamped_probit(accuracy, n_scored)) if n_scored else np.nan,
            })
    per_subject = pd.DataFrame(rows, columns=["subject", "task", "n", "mean_rt", "accuracy", "probit"])

    correlations = []
    tasks = list(dict.fromkeys(per_subject["task"]))
    for measure in ("mean_rt", "probit"):
        wide = per_subject.pivot(index="subject", columns="task", values=measure)
        for task_a, task_b in combinations(tasks, 2):
            pair = wide[[task_a, task_b]].dropna()
            r = pearson_or_nan(pair[task_a].to_numpy(), pair[task_b].to_numpy())
            correlations.append({
                "task_a": task_a,
                "task_b": task_b,
                "measure": measure,
                "n_subjects": len(pair),
                "r": r,
                "defined": not np.isnan(r),
            })
    return DescriptiveSummary(
        per_subject=per_subject,
        correlations=pd.DataFrame(correlations,
                                  columns=["task_a", "task_b", "measure", "n_subjects", "r", "defined"]),
    )
