"""Shared desk-scale runs for the slow acceptance tests.

Each distinct (seed, overrides) run is trained once per session.
"""

from __future__ import annotations

from collections.abc import Callable
from functools import cache

import pytest

from ssrl.config import RunConfig, apply_overrides
from ssrl.pipeline import RunResult, run_training
from ssrl.synth import Corpus, generate_corpus


@pytest.fixture(scope="session")
def default_corpus() -> Corpus:
    return generate_corpus(RunConfig().corpus)


@pytest.fixture(scope="session")
def desk_run(default_corpus) -> Callable[..., RunResult]:
    """``desk_run(seed, variant=..., queue_length=...)`` on the default corpus."""

    @cache
    def run(seed: int, **overrides) -> RunResult:
        config = apply_overrides(RunConfig(seed=seed), overrides)
        return run_training(config, corpus=default_corpus)

    return run
