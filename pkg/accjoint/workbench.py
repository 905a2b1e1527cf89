#!/usr/bin/env python3
"""
Workbench - command line for fitting, simulating and summarizing

Usage:
    python workbench.py fit --config fit.json [--data trials.csv] [--model model.json] [--out dir/] [--seed N] [--workers K]
    python workbench.py validate --data trials.csv --model model.json
    python workbench.py simulate --design simstudy.json --out dir/ [--version zero_between] [--full-scale]
    python workbench.py recover --design simstudy.json --version uniform_r --out dir/ [--full-scale]
    python workbench.py summarize --chain dir/chain.ndjson --out dir/ [--heatmap/--no-heatmap] [--blocks in out]
    python workbench.py predict --chain dir/chain.ndjson --draws 100 --out dir/ [--seed N]

Errors are written to stderr as one JSON line {"code", "message", "details"};
exit status 2 for bad input or configuration, 3 for numerical or
construction failures, 1 for anything unexpected.
"""

import json
import logging
from functools import wraps
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd

from analysis import (
    correlation_summary, correlation_table, descriptive_cross_task, design_counts, group_mean_table,
    posterior_predictive, precision_compare, predictive_summary, subject_effect_points,
)
from config import FitConfig, load_fit_config, env_seed_override
from design_map import ModelSpec, load_model_spec, validate_spec
from errors import AccJointError
from figures import block_pair, emit_heatmap, emit_recovery_plot, write_svg
from pmwg import PosteriorChain, run_chain
from simstudy import (
    VERSIONS, SimDesign, build_generator, full_scale, generate_dataset, load_design, recovery_rates,
    run_recovery,
)
from storage import (
    chain_meta, design_from_meta, file_sha256, read_chain, spec_from_meta, write_chain, write_json,
    write_table, write_trials_csv, load_trials_csv,
)

logger = logging.getLogger(__name__)

CHAIN_NAME = "chain.ndjson"


# ==================== OUTPUT HELPERS ====================

def print_banner(title: str):
    click.echo(f"\n{'=' * 60}")
    click.echo(title)
    click.echo("=" * 60)


def print_success(message: str):
    click.echo(f"✓ {message}")


def print_warning(message: str):
    click.echo(f"⚠ {message}")


def print_info(message: str):
    click.echo(f"  {message}")


def configure_logging(level: str = "INFO"):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def handle_errors(func: Callable[..., int]) -> Callable[..., int]:
    """Turn raised errors into a JSON line on stderr and the mapped exit status"""
    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except AccJointError as e:
            click.echo(json.dumps(e.to_dict()), err=True)
            return e.exit_status
        except Exception as e:
            logger.exception("unexpected failure")
            payload = {"code": "E_INTERNAL", "message": str(e) or type(e).__name__,
                       "details": {"type": type(e).__name__}}
            click.echo(json.dumps(payload), err=True)
            return 1
    return wrapper


def _written(path: Path) -> Path:
    print_success(f"wrote {path}")
    return path


# ==================== SUMMARY TABLES ====================

def write_summaries(chain: PosteriorChain, spec: ModelSpec, out: Path, heatmap: bool = True,
                    blocks: Optional[Tuple[str, str]] = None) -> List[Path]:
    """group_means.csv, correlations.csv, subject_effects.csv and heatmap.svg"""
    written = [
        _written(write_table(group_mean_table(chain, spec), out / "group_means.csv")),
        _written(write_table(subject_effect_points(chain), out / "subject_effects.csv")),
    ]
    summary = correlation_summary(chain)
    written.append(_written(write_table(correlation_table(summary), out / "correlations.csv")))
    if heatmap:
        path = out / "heatmap.svg"
        write_svg(emit_heatmap(summary, blocks), path)
        written.append(_written(path))
    n_reliable = int(np.triu(summary.reliable, k=1).sum())
    print_info(f"{n_reliable} reliable correlations out of {summary.dimension * (summary.dimension - 1) // 2}")
    return written


# ==================== COMMAND BODIES ====================

@handle_errors
def cmd_fit(config_path: Optional[Path], data: Optional[Path] = None, model: Optional[Path] = None,
            out: Optional[Path] = None, seed: Optional[int] = None, workers: Optional[int] = None) -> int:
    """Fit, then write chain, meta.json, summary tables and figures"""
    cfg = load_fit_config(config_path, check_paths=False) if config_path else FitConfig()
    cfg = cfg.with_overrides(seed=seed, workers=workers, data=data, model=model, out=out)
    cfg.validate_paths()
    configure_logging(cfg.log_level)

    print_banner("FIT")
    trials = load_trials_csv(cfg.data)
    spec = load_model_spec(cfg.model)
    report = validate_spec(spec, trials)
    click.echo(report.summary())

    chain = run_chain(trials, spec, cfg.sampler, nu=cfg.hierarchy.nu, A_scale=cfg.hierarchy.A_scale)
    print_success(f"sampled {len(chain)} stored draws for {len(chain.subject_ids)} subjects")

    out_dir = cfg.out
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {"data": file_sha256(cfg.data), "spec": file_sha256(cfg.model)}
    if config_path:
        hashes["config"] = file_sha256(config_path)
    counts = design_counts(trials)
    _written(write_chain(chain, out_dir / CHAIN_NAME, chain_meta(chain, spec, counts, hashes)))

    blocks = cfg.analysis.heatmap_blocks or block_pair(chain.block_labels)
    write_summaries(chain, spec, out_dir, heatmap=cfg.analysis.heatmap, blocks=blocks)

    descriptives = descriptive_cross_task(trials, spec)
    _written(write_table(descriptives.per_subject, out_dir / "descriptives.csv"))
    _written(write_table(descriptives.correlations, out_dir / "descriptive_correlations.csv"))

    if cfg.analysis.predictive_draws:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.sampler.seed, 1]))
        predictive = posterior_predictive(chain, spec, counts, cfg.analysis.predictive_draws, rng)
        _written(write_table(predictive, out_dir / "predictive.csv"))
        _written(write_table(predictive_summary(predictive, trials, spec), out_dir / "predictive_summary.csv"))

    if cfg.analysis.reference_chains:
        references = [read_chain(path)[0] for path in cfg.analysis.reference_chains]
        comparison = precision_compare(chain, references)
        _written(write_table(comparison.points, out_dir / "precision_points.csv"))
        _written(write_table(comparison.medians, out_dir / "precision_medians.csv"))

    degenerate = sum(chain.metadata.get("degenerate", {}).values())
    if degenerate:
        print_warning(f"{degenerate} degenerate subject updates (current value kept)")
    print_success("fit complete")
    return 0


@handle_errors
def cmd_validate(data: Path, model: Path) -> int:
    report = validate_spec(load_model_spec(model), load_trials_csv(data))
    click.echo(report.summary())
    for cell, n in sorted(report.cell_counts.items()):
        print_info(f"{cell}: {n} trials")
    return 0 if report.ok else 2


def _design_with_flags(design_path: Path, version: Optional[str], full: bool,
                       seed: Optional[int] = None) -> SimDesign:
    design = load_design(design_path)
    if full:
        design = full_scale(design)
    update = {}
    if version:
        update["version"] = version
    env_seed = env_seed_override()
    if env_seed is not None:
        update["seed"] = env_seed
    if seed is not None:
        update["seed"] = seed
    return design.model_copy(update=update) if update else design


def _alpha_table(true_alphas: np.ndarray, spec: ModelSpec, subject_ids: Sequence[str]) -> pd.DataFrame:
    n_subjects, d = true_alphas.shape
    return pd.DataFrame({
        "subject": np.repeat(list(subject_ids), d),
        "parameter": np.tile(spec.vector_order, n_subjects),
        "alpha": true_alphas.ravel(),
        "natural": np.exp(true_alphas).ravel(),
    })


@handle_errors
def cmd_simulate(design_path: Path, out: Path, version: Optional[str] = None, full: bool = False,
                 seed: Optional[int] = None) -> int:
    """Generate one data set with its ground truth"""
    configure_logging()
    design = _design_with_flags(design_path, version, full, seed)
    spec = design.load_spec(design_path.resolve().parent)
    print_banner(f"SIMULATE ({design.version}, S={design.subjects}, n={design.trials_per_task})")

    generator = build_generator(design.version, design.base_state(spec), design.target_r, spec.block_labels)
    trials, true_alphas = generate_dataset(design, spec, generator=generator)
    subject_ids = list(dict.fromkeys(t.subject_id for t in trials))

    out.mkdir(parents=True, exist_ok=True)
    _written(write_trials_csv(trials, out / "trials.csv"))
    _written(write_table(_alpha_table(true_alphas, spec, subject_ids), out / "true_alphas.csv"))
    _written(write_json(spec.model_dump(mode="json"), out / "model.json"))
    _written(write_json({
        "version": design.version,
        "parameter_names": list(spec.vector_order),
        "block_labels": list(spec.block_labels),
        "mu": generator.mu.tolist(),
        "sigma": generator.sigma.tolist(),
    }, out / "generator.json"))
    return 0


@handle_errors
def cmd_recover(design_path: Path, out: Path, version: Optional[str] = None, full: bool = False,
                seed: Optional[int] = None) -> int:
    """Simulate, fit, score; writes recovery_report.csv and recovery_plot.svg"""
    configure_logging()
    design = _design_with_flags(design_path, version, full, seed)
    spec = design.load_spec(design_path.resolve().parent)
    print_banner(f"RECOVER ({design.version}, S={design.subjects}, n={design.trials_per_task})")

    result = run_recovery(design, spec)
    out.mkdir(parents=True, exist_ok=True)
    trials_path = _written(write_trials_csv(result.data, out / "trials.csv"))
    hashes = {"design": file_sha256(design_path), "data": file_sha256(trials_path)}
    _written(write_chain(result.chain, out / CHAIN_NAME,
                         chain_meta(result.chain, spec, design_counts(result.data), hashes)))
    _written(write_table(result.report, out / "recovery_report.csv"))
    path = out / "recovery_plot.svg"
    write_svg(emit_recovery_plot(result.report, title=design.version), path)
    _written(path)

    rates = recovery_rates(result.report)
    print_info(f"coverage: {rates['coverage']:.2f} over {rates['n_elements']} elements")
    if rates["n_between"]:
        print_info(f"between-block intervals containing 0: {rates['between_contains_zero']:.2f} "
                   f"(excluding 0: {rates['between_excludes_zero']:.2f}) over {rates['n_between']}")
    return 0


@handle_errors
def cmd_summarize(chain_path: Path, out: Path, heatmap: bool = True,
                  blocks: Optional[Tuple[str, str]] = None) -> int:
    configure_logging()
    chain, meta = read_chain(chain_path)
    spec = spec_from_meta(meta)
    print_banner(f"SUMMARIZE ({len(chain.stage_draws())} sampling draws)")
    out.mkdir(parents=True, exist_ok=True)
    write_summaries(chain, spec, out, heatmap=heatmap, blocks=blocks or block_pair(chain.block_labels))
    return 0


@handle_errors
def cmd_predict(chain_path: Path, draws: int, out: Path, seed: Optional[int] = None) -> int:
    configure_logging()
    chain, meta = read_chain(chain_path)
    spec = spec_from_meta(meta)
    design = design_from_meta(meta)
    if seed is None:
        seed = env_seed_override() or 0
    print_banner(f"PREDICT ({draws} draws)")
    predictive = posterior_predictive(chain, spec, design, draws, np.random.default_rng(seed))
    out.mkdir(parents=True, exist_ok=True)
    _written(write_table(predictive, out / "predictive.csv"))
    return 0


# ==================== CLI ====================

_file = click.Path(exists=False, dir_okay=False, path_type=Path)
_directory = click.Path(file_okay=False, path_type=Path)


@click.group()
def cli():
    """Hierarchical LBA fitting with cross-task covariance"""


@cli.command()
@click.option("--config", "config_path", type=_file, default=None, help="fit.json")
@click.option("--data", type=_file, default=None, help="Trial CSV (overrides config)")
@click.option("--model", type=_file, default=None, help="Model spec JSON (overrides config)")
@click.option("--out", type=_directory, default=None, help="Output directory (overrides config)")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.pass_context
def fit(ctx, config_path, data, model, out, seed, workers):
    """Fit the hierarchical model and write chain + summaries"""
    ctx.exit(cmd_fit(config_path, data=data, model=model, out=out, seed=seed, workers=workers))


@cli.command()
@click.option("--data", type=_file, required=True)
@click.option("--model", type=_file, required=True)
@click.pass_context
def validate(ctx, data, model):
    """Check that a model spec covers every cell and response in the data"""
    ctx.exit(cmd_validate(data, model))


@cli.command()
@click.option("--design", "design_path", type=_file, required=True)
@click.option("--out", type=_directory, required=True)
@click.option("--version", type=click.Choice(VERSIONS), default=None)
@click.option("--full-scale", "full", is_flag=True, help="S=100, n=1000, two-session D=14")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def simulate(ctx, design_path, out, version, full, seed):
    """Generate a data set from the simulation design"""
    ctx.exit(cmd_simulate(design_path, out, version=version, full=full, seed=seed))


@cli.command()
@click.option("--design", "design_path", type=_file, required=True)
@click.option("--version", type=click.Choice(VERSIONS), default=None)
@click.option("--out", type=_directory, required=True)
@click.option("--full-scale", "full", is_flag=True, help="S=100, n=1000, two-session D=14")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def recover(ctx, design_path, version, out, full, seed):
    """Simulate, refit and score covariance recovery"""
    ctx.exit(cmd_recover(design_path, out, version=version, full=full, seed=seed))


@cli.command()
@click.option("--chain", "chain_path", type=_file, required=True)
@click.option("--out", type=_directory, required=True)
@click.option("--heatmap/--no-heatmap", default=True)
@click.option("--blocks", nargs=2, type=str, default=None, help="Row and column block of the heatmap")
@click.pass_context
def summarize(ctx, chain_path, out, heatmap, blocks):
    """Group means, correlations and heatmap from a stored chain"""
    ctx.exit(cmd_summarize(chain_path, out, heatmap=heatmap, blocks=tuple(blocks) if blocks else None))


@cli.command()
@click.option("--chain", "chain_path", type=_file, required=True)
@click.option("--draws", type=click.IntRange(min=0), required=True)
@click.option("--out", type=_directory, required=True)
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def predict(ctx, chain_path, draws, out, seed):
    """Posterior predictive data sets tagged by draw"""
    ctx.exit(cmd_predict(chain_path, draws, out, seed=seed))


if __name__ == "__main__":
    cli()
