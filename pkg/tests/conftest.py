"""Pytest configuration and fixtures."""

from __future__ import annotations

import pytest

from ssrl.config import CorpusSpec, RunConfig
from ssrl.synth import Corpus, generate_corpus


@pytest.fixture
def tiny_spec() -> CorpusSpec:
    """Four speakers, ten training utterances each, six dimensions."""
    return CorpusSpec(
        num_speakers=4,
        utts_per_speaker=10,
        dim=6,
        sigma_within=0.5,
        sigma_between=5.0,
        trial_utts_per_speaker=3,
        num_trials=40,
        seed=7,
    )


@pytest.fixture
def tiny_corpus(tiny_spec: CorpusSpec) -> Corpus:
    return generate_corpus(tiny_spec)


@pytest.fixture
def tiny_config(tiny_spec: CorpusSpec) -> RunConfig:
    """A run small enough for unit tests: 4 steps per epoch, a handful of epochs."""
    return RunConfig(
        corpus=tiny_spec,
        k_init=6,
        warmup_epochs=2,
        ssrl_epochs=3,
        batch_size=10,
        encoder_widths=(8, 8),
        sinkhorn_batches=2,
        checkpoint_every=2,
        seed=3,
    ).validate()
