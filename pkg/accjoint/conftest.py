"""Shared fixtures: bundled specs, the tiny trial table and a short fitted chain"""

import numpy as np
import pytest

from design_map import FIXTURES_DIR, bundled_spec
from lba import AccumulatorParams
from pmwg import ChainRecord, PosteriorChain, SamplerConfig, StageCounts, run_chain
from storage import load_trials_csv

TINY_START = [0.0, 1.0986, 0.1823, -1.6094]  # log of (1.0, 3.0, 1.2, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tiny_spec():
    return bundled_spec("tiny")


@pytest.fixture(scope="session")
def desk_spec():
    return bundled_spec("desk")


@pytest.fixture(scope="session")
def tiny_trials():
    return load_trials_csv(FIXTURES_DIR / "tiny_trials.csv")


def quick_sampler(seed: int = 3, **overrides) -> SamplerConfig:
    settings = dict(
        particles_per_stage=StageCounts(burn_in=10, adaptation=10, sampling=8),
        draws_per_stage=StageCounts(burn_in=5, adaptation=25, sampling=10),
        seed=seed,
        start_mu=TINY_START,
        min_unique=5,
    )
    settings.update(overrides)
    return SamplerConfig(**settings)


def constant_chain(spec, sigma, n=5):
    """Sampling-stage chain whose every draw has covariance `sigma`"""
    chain = PosteriorChain(parameter_names=list(spec.vector_order), subject_ids=["s001"],
                           block_labels=list(spec.block_labels))
    d = spec.dimension
    for k in range(n):
        chain.append(ChainRecord(iteration=k + 1, stage="sampling", mu=np.zeros(d), sigma=sigma.copy(),
                                 a=np.ones(d), alpha=np.zeros((1, d))))
    return chain


@pytest.fixture(scope="session")
def tiny_chain(tiny_spec, tiny_trials):
    return run_chain(tiny_trials, tiny_spec, quick_sampler())


@pytest.fixture
def race_params():
    """Correct accumulator with a faster drift than the error accumulator"""
    return [
        AccumulatorParams(b_gap=0.6, A=0.7, v=3.1, tau=0.19),
        AccumulatorParams(b_gap=0.6, A=0.7, v=1.5, tau=0.19),
    ]
