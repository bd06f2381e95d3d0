"""Tests for run configuration loading, validation and overrides."""

from __future__ import annotations

import json

import pytest

from ssrl.config import (
    DEFAULT_CONFIG,
    VARIANTS,
    CorpusSpec,
    RunConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    load_corpus_spec,
    parse_override,
    save_config,
)
from ssrl.logging import ConfigError


def test_defaults_validate():
    config = RunConfig().validate()
    assert config.corpus == CorpusSpec()
    assert config.effective_queue_length == 5


def test_default_dict_round_trips():
    assert config_from_dict(json.loads(json.dumps(DEFAULT_CONFIG))) == RunConfig()


def test_save_then_load(tmp_path, tiny_config):
    path = tmp_path / "sub" / "config.json"
    save_config(tiny_config, path)
    assert load_config(path) == tiny_config
    assert not list(path.parent.glob(".config_*"))


def test_missing_keys_take_defaults():
    config = config_from_dict({"k_init": 12, "corpus": {"num_speakers": 3}})
    assert config.k_init == 12
    assert config.corpus.num_speakers == 3
    assert config.corpus.dim == CorpusSpec().dim
    assert config.ssrl_epochs == RunConfig().ssrl_epochs


@pytest.mark.parametrize(
    ("data", "message"),
    [
        ({"bogus": 1}, "Unknown config keys: bogus"),
        ({"corpus": {"speakers": 3}}, "Unknown corpus keys: speakers"),
        ({"k_init": "many"}, "requires int"),
        ({"k_init": 2.5}, "requires int"),
        ({"use_ema": 1}, "requires bool"),
        ({"lr_max": "fast"}, "requires float"),
        ({"clustering": "spectral"}, "must be one of"),
        ({"encoder_widths": [8, "x"]}, "list of ints"),
        ({"corpus_path": 3}, "string or null"),
        ({"k_init": 1}, "k_init"),
        ({"dropout": 1.0}, "dropout"),
        ({"ema_end": 1.0}, "ema_end"),
        ({"aam_margin": 2.0}, "aam_margin"),
        ({"corpus": {"sigma_within": 0.0}}, "sigma_within"),
        ({"corpus": {"trial_utts_per_speaker": 1}}, "trial_utts_per_speaker"),
    ],
)
def test_rejects_bad_values(data, message):
    with pytest.raises(ConfigError, match=message):
        config_from_dict(data)


def test_sinkhorn_buffer_must_exceed_k():
    with pytest.raises(ConfigError, match="must exceed k_init"):
        RunConfig(clustering="sinkhorn", k_init=80, sinkhorn_batches=1, batch_size=50).validate()


def test_float_fields_accept_ints():
    assert config_from_dict({"lr_max": 1}).lr_max == 1.0


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="Invalid JSON"):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_corpus_spec(bad)


class TestOverrides:
    def test_scalar_types(self):
        assert parse_override("use_ema", "false") is False
        assert parse_override("queue_length", "10") == 10
        assert parse_override("sinkhorn_lambda", "50") == 50.0
        assert parse_override("clustering", "sinkhorn") == "sinkhorn"
        assert parse_override("encoder_widths", "[16, 4]") == (16, 4)

    def test_corpus_field(self, tiny_config):
        config = apply_overrides(tiny_config, {"corpus.seed": parse_override("corpus.seed", "11")})
        assert config.corpus.seed == 11
        assert config.corpus.num_speakers == tiny_config.corpus.num_speakers

    def test_unknown(self):
        with pytest.raises(ConfigError, match="Unknown config key"):
            parse_override("nope", "1")
        with pytest.raises(ConfigError, match="Unknown corpus key"):
            parse_override("corpus.nope", "1")
        with pytest.raises(ConfigError, match="Unknown variant"):
            parse_override("variant", "half")

    def test_mistyped(self):
        with pytest.raises(ConfigError, match="requires int"):
            parse_override("queue_length", "five")

    @pytest.mark.parametrize("name", list(VARIANTS))
    def test_variants(self, tiny_config, name):
        config = apply_overrides(tiny_config, {"variant": name})
        for key, value in VARIANTS[name].items():
            assert getattr(config, key) == value

    def test_naive_starts_untrained(self, tiny_config):
        config = apply_overrides(tiny_config, {"variant": "naive"})
        assert config.warmup_epochs == 0
        assert config.predictor_init == "random"
        assert not (config.use_ema or config.use_queue or config.use_gmm)

    def test_no_queue_means_length_one(self, tiny_config):
        config = apply_overrides(tiny_config, {"variant": "no_queue"})
        assert config.effective_queue_length == 1

    def test_result_is_validated(self, tiny_config):
        with pytest.raises(ConfigError, match="queue_length"):
            apply_overrides(tiny_config, {"queue_length": 0})
