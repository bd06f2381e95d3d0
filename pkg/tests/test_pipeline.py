"""Tests for the warm-up and reflective training loop on a tiny corpus."""

from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np
import pytest
import torch

from ssrl import pipeline
from ssrl.clustering import argmax_assign, kmeans
from ssrl.config import CorpusSpec, apply_overrides
from ssrl.encoder import copy_params, encode, load_checkpoint, logits, predict
from ssrl.logging import NumericalError
from ssrl.metrics import hungarian_accuracy, mean_max_purity, nmi
from ssrl.pipeline import (
    ABLATION_COLUMNS,
    METRICS_COLUMNS,
    NOISE_COLUMNS,
    ablation_matrix,
    evaluate,
    read_epoch_log,
    run_training,
    ssrl_run,
    warmup,
)
from ssrl.synth import generate_corpus


def _state_equal(a, b) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


class TestWarmup:
    def test_no_warmup_epochs_copies_student(self, tiny_config, tiny_corpus):
        config = tiny_config.replace(warmup_epochs=0)
        warm = warmup(config, tiny_corpus)
        assert _state_equal(warm.teacher, warm.student)
        assert warm.teacher is not warm.student
        expected = kmeans(tiny_corpus.train_features, config.k_init, seed=config.seed)
        assert np.array_equal(warm.labels, expected.assignment)
        assert warm.record.epoch == 0
        assert warm.record.mean_loss is None

    def test_warmup_trains_and_keeps_labels(self, tiny_config, tiny_corpus):
        warm = warmup(tiny_config, tiny_corpus)
        assert _state_equal(warm.teacher, warm.student)
        assert np.array_equal(warm.labels, warm.clusters.assignment)
        assert warm.record.mean_loss is not None and np.isfinite(warm.record.mean_loss)
        assert warm.record.phase == "warmup"

    def test_encoder_space_kmeans(self, tiny_config, tiny_corpus):
        warm = warmup(tiny_config.replace(kmeans_space="encoder", predictor_init="random"), tiny_corpus)
        assert warm.labels.shape == (tiny_corpus.num_train,)


def test_evaluate_is_pure(tiny_config, tiny_corpus):
    warm = warmup(tiny_config, tiny_corpus)
    teacher, student = copy_params(warm.teacher), copy_params(warm.student)
    labels = warm.labels.copy()
    first = evaluate(warm.teacher, warm.student, tiny_corpus, warm.labels)
    second = evaluate(warm.teacher, warm.student, tiny_corpus, warm.labels)
    assert first == second
    assert _state_equal(teacher, warm.teacher) and _state_equal(student, warm.student)
    assert np.array_equal(labels, warm.labels)


@pytest.mark.parametrize("clustering", ["argmax", "sinkhorn"])
def test_clustering_metrics_score_pseudo_labels(tiny_config, tiny_corpus, clustering):
    result = run_training(tiny_config.replace(clustering=clustering), corpus=tiny_corpus)
    truth = tiny_corpus.train_speakers
    final = result.final
    assert final.accuracy_pct == hungarian_accuracy(result.labels, truth)
    assert final.nmi == nmi(result.labels, truth)
    assert final.purity_pct == mean_max_purity(result.labels, truth)

    warm = result.records[0]
    initial = kmeans(tiny_corpus.train_features, tiny_config.k_init, seed=tiny_config.seed)
    assert warm.accuracy_pct == hungarian_accuracy(initial.assignment, truth)


def test_teacher_accuracy_scores_argmax(tiny_config, tiny_corpus):
    warm = warmup(tiny_config, tiny_corpus)
    shuffled = np.random.default_rng(0).permutation(warm.labels)
    metrics = evaluate(warm.teacher, warm.student, tiny_corpus, shuffled)
    with torch.no_grad():
        posteriors = predict(warm.teacher, encode(warm.teacher, tiny_corpus.train_features))
    predicted = argmax_assign(posteriors.numpy())
    assert metrics.teacher_accuracy_pct == hungarian_accuracy(predicted, tiny_corpus.train_speakers)
    assert metrics.accuracy_pct == hungarian_accuracy(shuffled, tiny_corpus.train_speakers)


class TestSSRLRun:
    def test_records_and_files(self, tiny_config, tmp_path):
        result = run_training(tiny_config, tmp_path)
        assert [r.epoch for r in result.records] == [0, 1, 2, 3]
        assert [r.phase for r in result.records] == ["warmup", "ssrl", "ssrl", "ssrl"]
        assert len(result.noise_models) == 3
        for name in ("config.json", "epochs.jsonl", "metrics.csv", "noise_model.csv", "assignments.txt"):
            assert (tmp_path / name).exists(), name
        # checkpoint_every=2: epoch 2 plus the final epoch.
        for epoch in (2, 3):
            for role in ("teacher", "student"):
                assert (tmp_path / f"checkpoint_{role}_e{epoch:03d}.bin").exists()
        assert not (tmp_path / "checkpoint_teacher_e001.bin").exists()

        with (tmp_path / "metrics.csv").open() as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == METRICS_COLUMNS
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3]
        with (tmp_path / "noise_model.csv").open() as f:
            assert next(csv.reader(f)) == NOISE_COLUMNS

        logged = read_epoch_log(tmp_path / "epochs.jsonl")
        assert logged == [dataclasses.asdict(r) for r in result.records]
        assignments = np.loadtxt(tmp_path / "assignments.txt", delimiter=",", dtype=np.int64)
        assert np.array_equal(assignments[:, 1], result.labels)

    def test_final_checkpoint_is_teacher(self, tiny_config, tmp_path):
        result = run_training(tiny_config, tmp_path)
        loaded = load_checkpoint(tmp_path / "checkpoint_teacher_e003.bin")
        for a, b in zip(loaded.state_dict().values(), result.teacher.state_dict().values()):
            assert torch.equal(a, b.to(torch.float32).to(torch.float64))

    def test_labels_stay_in_range(self, tiny_config):
        result = run_training(tiny_config)
        assert result.labels.min() >= 0 and result.labels.max() < tiny_config.k_init
        for record in result.records:
            assert 1 <= record.active_clusters <= tiny_config.k_init
            assert 0.0 <= record.mean_p_clean <= 1.0

    def test_gmm_off_keeps_full_weights(self, tiny_config, tmp_path):
        result = run_training(tiny_config.replace(use_gmm=False), tmp_path)
        assert all(r.mean_p_clean == 1.0 for r in result.records)
        assert result.noise_models == []
        assert not (tmp_path / "noise_model.csv").exists()

    def test_ema_trajectory(self, tiny_config, tiny_corpus):
        warm = warmup(tiny_config, tiny_corpus)
        previous = [p.detach().clone() for p in warm.teacher.parameters()]
        momenta = []

        def check(step, student, teacher, momentum):
            momenta.append(momentum)
            for i, (p_t, p_s) in enumerate(zip(teacher.parameters(), student.parameters())):
                assert torch.equal(p_t, torch.lerp(previous[i], p_s, 1.0 - momentum))
                previous[i] = p_t.detach().clone()

        ssrl_run(tiny_config, tiny_corpus, warm, on_step=check)
        assert len(momenta) == 12
        assert momenta[0] == pytest.approx(tiny_config.ema_start)
        assert momenta[-1] == pytest.approx(tiny_config.ema_end)
        assert all(b >= a for a, b in zip(momenta, momenta[1:]))

    def test_without_ema_teacher_equals_student(self, tiny_config, tiny_corpus):
        config = tiny_config.replace(use_ema=False)
        warm = warmup(config, tiny_corpus)
        seen = []

        def check(step, student, teacher, momentum):
            seen.append(momentum)
            assert _state_equal(teacher, student)

        ssrl_run(config, tiny_corpus, warm, on_step=check)
        assert set(seen) == {0.0}

    @pytest.mark.parametrize(
        "overrides",
        [
            {"clustering": "sinkhorn"},
            {"clustering": "sinkhorn", "sinkhorn_batches": 3},
            {"clustering": "naive"},
            {"loss": "aam", "aam_from_epoch": 2},
            {"loss": "aam", "aam_in_warmup": True},
            {"use_queue": False},
            {"predictor_init": "random", "normalize_centroids": False},
        ],
    )
    def test_modes_run(self, tiny_config, overrides):
        result = run_training(tiny_config.replace(**overrides))
        assert len(result.records) == 1 + tiny_config.ssrl_epochs
        assert all(np.isfinite(r.eer_pct) for r in result.records)

    def test_naive_trains_on_its_own_forward(self, tiny_config, tiny_corpus, monkeypatch):
        config = apply_overrides(tiny_config.replace(dropout=0.3), {"variant": "naive"})
        real_step = pipeline.backward_and_step
        seen = []

        def step(params, batch, labels, clean_probs, optimizer, aam=None, generator=None):
            state = generator.get_state()
            with torch.no_grad():
                out = logits(params, encode(params, batch, generator=generator))
            generator.set_state(state)
            assert np.array_equal(np.asarray(labels), out.argmax(dim=1).numpy())
            seen.append(len(labels))
            return real_step(
                params, batch, labels, clean_probs, optimizer, aam=aam, generator=generator
            )

        monkeypatch.setattr(pipeline, "backward_and_step", step)
        result = run_training(config, corpus=tiny_corpus)
        assert sum(seen) == config.ssrl_epochs * tiny_corpus.num_train
        assert result.records[0].mean_loss is None

    def test_loss_histograms(self, tiny_config, tmp_path):
        run_training(tiny_config.replace(loss_histograms=True), tmp_path)
        for epoch in (1, 2, 3):
            with (tmp_path / f"loss_histogram_e{epoch:03d}.csv").open() as f:
                rows = list(csv.DictReader(f))
            assert sum(int(r["correct"]) + int(r["incorrect"]) for r in rows) == 40

    def test_numerical_abort(self, tiny_config, tiny_corpus, monkeypatch):
        warm = warmup(tiny_config, tiny_corpus)

        def explode(*args, **kwargs):
            raise NumericalError("loss is not finite")

        monkeypatch.setattr(pipeline, "backward_and_step", explode)
        with pytest.raises(NumericalError, match="not finite"):
            ssrl_run(tiny_config, tiny_corpus, warm)


class TestReproducibility:
    def test_same_seed_same_bytes(self, tiny_config, tmp_path):
        run_training(tiny_config, tmp_path / "a")
        run_training(tiny_config, tmp_path / "b")
        for name in ("checkpoint_teacher_e003.bin", "checkpoint_student_e003.bin", "epochs.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_training_never_reads_speaker_ids(self, tiny_config, tiny_corpus, tmp_path):
        n = tiny_corpus.num_train
        shuffled = tiny_corpus.speakers.copy()
        shuffled[:n] = np.random.default_rng(0).permutation(shuffled[:n])
        audit = dataclasses.replace(tiny_corpus, speakers=shuffled)

        run_training(tiny_config, tmp_path / "real", corpus=tiny_corpus)
        run_training(tiny_config, tmp_path / "audit", corpus=audit)
        for name in ("checkpoint_teacher_e003.bin", "assignments.txt"):
            assert (tmp_path / "real" / name).read_bytes() == (tmp_path / "audit" / name).read_bytes()


def test_tight_speakers_are_solved(tiny_config):
    spec = CorpusSpec(
        num_speakers=4, utts_per_speaker=10, dim=6, sigma_within=1e-3,
        sigma_between=5.0, trial_utts_per_speaker=3, num_trials=40, seed=2,
    )
    config = tiny_config.replace(
        corpus=spec, k_init=4, aug_strength=0.0, mask_fraction=0.0, dropout=0.0
    )
    result = run_training(config)
    assert result.final.eer_pct == 0.0
    assert result.final.nmi == pytest.approx(1.0)
    assert result.final.accuracy_pct == 100.0


class TestAblation:
    def test_grid(self, tiny_config, tmp_path):
        base = tiny_config.replace(ssrl_epochs=1)
        rows = ablation_matrix(
            base, {"variant": ["full", "no_gmm"], "queue_length": ["1", "3"]}, tmp_path
        )
        assert [r.variant for r in rows] == [
            "variant=full,queue_length=1",
            "variant=full,queue_length=3",
            "variant=no_gmm,queue_length=1",
            "variant=no_gmm,queue_length=3",
        ]
        with (tmp_path / "ablation.csv").open() as f:
            table = list(csv.DictReader(f))
        assert list(table[0]) == ABLATION_COLUMNS
        assert len(table) == 4
        assert (tmp_path / "variant-no_gmm_queue_length-3" / "epochs.jsonl").exists()
        config = json.loads((tmp_path / "variant-no_gmm_queue_length-3" / "config.json").read_text())
        assert config["use_gmm"] is False and config["queue_length"] == 3

    def test_matches_single_run(self, tiny_config):
        base = tiny_config.replace(ssrl_epochs=1)
        [row] = ablation_matrix(base, {"use_ema": ["false"]})
        final = run_training(base.replace(use_ema=False)).final
        assert row.eer_pct == final.eer_pct
        assert row.converged_k == final.active_clusters

    def test_corpus_axis_regenerates(self, tiny_config):
        base = tiny_config.replace(ssrl_epochs=1)
        rows = ablation_matrix(base, {"corpus.seed": ["7", "8"]})
        assert [r.variant for r in rows] == ["corpus.seed=7", "corpus.seed=8"]
        other = base.replace(corpus=dataclasses.replace(base.corpus, seed=8))
        final = run_training(other, corpus=generate_corpus(other.corpus)).final
        assert rows[1].eer_pct == final.eer_pct
        assert rows[1].nmi == final.nmi
