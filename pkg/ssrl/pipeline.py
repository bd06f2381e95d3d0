"""Training pipeline: k-means initial labels, warm-up on frozen labels, then
the reflective loop where an EMA teacher keeps relabeling the corpus for
the student.

Run outputs (all optional, only when an output directory is given):

    config.json                     resolved RunConfig
    epochs.jsonl                    one EpochRecord per line, epoch 0 = warm-up
    metrics.csv                     epoch,nmi,accuracy_pct,purity_pct,active_clusters,eer_pct,min_dcf
    noise_model.csv                 epoch,pi,mu1,sigma1,mu2,sigma2,mean_p_clean
    checkpoint_{teacher,student}_eXXX.bin
    assignments.txt                 final pseudo label per training sample
    loss_histogram_eXXX.csv         when loss_histograms is on
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .clustering import (
    ClusterModel,
    PosteriorBuffer,
    active_cluster_count,
    cluster_sizes,
    argmax_assign,
    kmeans,
    sinkhorn_assign,
    write_assignments,
)
from .config import RunConfig, apply_overrides, parse_override, save_config
from .encoder import (
    AAMSettings,
    SpeakerNet,
    StudentOptimizer,
    backward_and_step,
    copy_params,
    ema_update,
    encode,
    init_params,
    init_predictor_from_centroids,
    logits,
    momentum_schedule,
    predict,
    save_checkpoint,
)
from .labeling import (
    LabelQueue,
    NoiseModel,
    TeacherLossTable,
    fit_noise_gmm,
    loss_histogram,
    noise_log_row,
    teacher_loss,
)
from .logging import ConfigError, NumericalError, get_logger
from .metrics import (
    cosine_scores,
    eer,
    hungarian_accuracy,
    hungarian_mapping,
    mean_max_purity,
    min_dcf,
    nmi,
)
from .synth import Corpus, generate_corpus, read_corpus, student_batch, teacher_batch

logger = get_logger(__name__)

METRICS_COLUMNS = [
    "epoch", "nmi", "accuracy_pct", "purity_pct", "active_clusters", "eer_pct", "min_dcf",
]
NOISE_COLUMNS = ["epoch", "pi", "mu1", "sigma1", "mu2", "sigma2", "mean_p_clean"]
ABLATION_COLUMNS = ["variant", "eer_pct", "nmi", "accuracy_pct", "purity_pct", "converged_k"]

# Called after every SSRL step with (step, student, teacher, momentum).
StepHook = Callable[[int, SpeakerNet, SpeakerNet, float], None]


@dataclass
class MetricSet:
    nmi: float
    accuracy_pct: float
    purity_pct: float
    active_clusters: int
    eer_pct: float
    min_dcf: float
    student_eer_pct: float
    # Agreement of the teacher's argmax with the current pseudo labels.
    pseudo_label_accuracy_pct: float
    # Hungarian accuracy of the teacher's argmax on clean features.
    teacher_accuracy_pct: float


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    # None for epoch 0 when there were no warm-up epochs.
    mean_loss: float | None
    active_clusters: int
    nmi: float
    accuracy_pct: float
    purity_pct: float
    eer_pct: float
    min_dcf: float
    mean_p_clean: float
    ema_momentum: float
    student_eer_pct: float
    pseudo_label_accuracy_pct: float
    teacher_accuracy_pct: float

    @classmethod
    def from_metrics(
        cls,
        epoch: int,
        phase: str,
        mean_loss: float | None,
        metrics: MetricSet,
        mean_p_clean: float,
        ema_momentum: float,
    ) -> EpochRecord:
        values = dataclasses.asdict(metrics)
        return cls(
            epoch=epoch,
            phase=phase,
            mean_loss=mean_loss,
            mean_p_clean=mean_p_clean,
            ema_momentum=ema_momentum,
            **values,
        )


@dataclass
class WarmState:
    student: SpeakerNet
    teacher: SpeakerNet
    labels: np.ndarray
    clusters: ClusterModel
    record: EpochRecord


@dataclass
class RunResult:
    config: RunConfig
    teacher: SpeakerNet
    student: SpeakerNet
    labels: np.ndarray
    records: list[EpochRecord]
    noise_models: list[NoiseModel] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


class RunWriter:
    """Per-run output files; every method is a no-op without a directory."""

    def __init__(self, out_dir: Path | None):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.last_checkpoint: Path | None = None

    def start(self, config: RunConfig) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, self.out_dir / "config.json")
        (self.out_dir / "epochs.jsonl").write_text("")
        self._write_header("metrics.csv", METRICS_COLUMNS)
        if config.use_gmm:
            self._write_header("noise_model.csv", NOISE_COLUMNS)

    def _write_header(self, name: str, columns: list[str]) -> None:
        with (self.out_dir / name).open("w", newline="") as f:
            csv.writer(f).writerow(columns)

    def _append_row(self, name: str, columns: list[str], row: dict[str, Any]) -> None:
        with (self.out_dir / name).open("a", newline="") as f:
            csv.DictWriter(f, fieldnames=columns, extrasaction="ignore").writerow(row)

    def epoch(self, record: EpochRecord) -> None:
        if self.out_dir is None:
            return
        with (self.out_dir / "epochs.jsonl").open("a") as f:
            f.write(json.dumps(dataclasses.asdict(record)) + "\n")
        self._append_row("metrics.csv", METRICS_COLUMNS, dataclasses.asdict(record))

    def noise(self, row: dict[str, Any]) -> None:
        if self.out_dir is not None:
            self._append_row("noise_model.csv", NOISE_COLUMNS, row)

    def checkpoint(self, epoch: int, teacher: SpeakerNet, student: SpeakerNet) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / f"checkpoint_teacher_e{epoch:03d}.bin"
        save_checkpoint(teacher, path)
        save_checkpoint(student, self.out_dir / f"checkpoint_student_e{epoch:03d}.bin")
        self.last_checkpoint = path
        logger.info("checkpoint written", epoch=epoch, path=str(path))

    def assignments(self, labels: np.ndarray) -> None:
        if self.out_dir is not None:
            write_assignments(self.out_dir / "assignments.txt", np.arange(len(labels)), labels)

    def loss_histogram(self, epoch: int, rows: list[dict[str, Any]]) -> None:
        if self.out_dir is None or not rows:
            return
        with (self.out_dir / f"loss_histogram_e{epoch:03d}.csv").open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def load_corpus(config: RunConfig) -> Corpus:
    if config.corpus_path:
        return read_corpus(Path(config.corpus_path))
    return generate_corpus(config.corpus)


def _batches(num_samples: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = np.random.default_rng((seed, epoch)).permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        yield order[start : start + batch_size]


def _aam(config: RunConfig, ssrl_epoch: int | None) -> AAMSettings | None:
    if config.loss != "aam":
        return None
    if ssrl_epoch is None:
        enabled = config.aam_in_warmup
    else:
        enabled = ssrl_epoch >= config.aam_from_epoch
    return AAMSettings(config.aam_margin, config.aam_scale) if enabled else None


def _student_views(config: RunConfig, corpus: Corpus, indices: np.ndarray, epoch: int) -> np.ndarray:
    return student_batch(
        corpus.train_features,
        indices,
        epoch=epoch,
        seed=config.seed,
        aug_strength=config.aug_strength,
        sigma_within=corpus.spec.sigma_within,
        augment_prob=config.augment_prob,
        mask_fraction=config.mask_fraction,
    )


@torch.no_grad()
def _posteriors(params: SpeakerNet, features: np.ndarray) -> np.ndarray:
    return predict(params, encode(params, features)).numpy()


@torch.no_grad()
def _own_labels(student: SpeakerNet, x: np.ndarray, generator: torch.Generator) -> np.ndarray:
    """Argmax of the student's training forward; the generator is rewound so
    the step that follows draws the same dropout mask.
    """
    state = generator.get_state()
    out = logits(student, encode(student, x, generator=generator))
    generator.set_state(state)
    return argmax_assign(out.numpy())


@torch.no_grad()
def _cluster_centroids(params: SpeakerNet, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-cluster mean of encoder embeddings; empty clusters stay at zero."""
    z = encode(params, features).numpy()
    sums = np.zeros((params.num_clusters, z.shape[1]))
    np.add.at(sums, labels, z)
    counts = np.bincount(labels, minlength=params.num_clusters)
    return np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], 0.0)


def evaluate(
    teacher: SpeakerNet,
    student: SpeakerNet,
    corpus: Corpus,
    labels: np.ndarray,
) -> MetricSet:
    """Clustering and verification metrics for a snapshot of both models.

    Clustering metrics score the pseudo labels against ground truth;
    verification uses cosine scores of encoder embeddings on the held-out
    trials. The teacher's argmax on clean features is scored separately.
    """
    with torch.no_grad():
        z_teacher = encode(teacher, corpus.features)
        z_student = encode(student, corpus.features)
        predicted = argmax_assign(predict(teacher, z_teacher[: corpus.num_train]).numpy())
    truth = corpus.train_speakers
    trials = corpus.trials
    teacher_scores = cosine_scores(z_teacher.numpy(), trials.pairs)
    student_scores = cosine_scores(z_student.numpy(), trials.pairs)
    return MetricSet(
        nmi=nmi(labels, truth),
        accuracy_pct=hungarian_accuracy(labels, truth),
        purity_pct=mean_max_purity(labels, truth),
        active_clusters=active_cluster_count(labels),
        eer_pct=eer(teacher_scores, trials.is_target),
        min_dcf=min_dcf(teacher_scores, trials.is_target),
        student_eer_pct=eer(student_scores, trials.is_target),
        pseudo_label_accuracy_pct=100.0 * float(np.mean(predicted == labels)),
        teacher_accuracy_pct=hungarian_accuracy(predicted, truth),
    )


def warmup(config: RunConfig, corpus: Corpus, writer: RunWriter | None = None) -> WarmState:
    """k-means pseudo labels, E1 epochs of student training on them, teacher <- student."""
    writer = writer or RunWriter(None)
    features = corpus.train_features
    student = init_params(
        corpus.spec.dim,
        config.encoder_widths,
        config.k_init,
        seed=config.seed,
        dropout=config.dropout,
        cosine_scale=config.aam_scale if config.loss == "aam" else None,
    )

    if config.kmeans_space == "encoder":
        with torch.no_grad():
            space = encode(student, features).numpy()
    else:
        space = features
    clusters = kmeans(space, config.k_init, max_iters=config.kmeans_iters, seed=config.seed)
    labels = clusters.assignment.copy()
    logger.info(
        "Initial clustering",
        k=config.k_init,
        space=config.kmeans_space,
        inertia=clusters.inertia,
    )

    if config.predictor_init == "centroid":
        centroids = _cluster_centroids(student, features, labels)
        init_predictor_from_centroids(student, centroids, normalize=config.normalize_centroids)

    steps_per_epoch = math.ceil(corpus.num_train / config.batch_size)
    optimizer = StudentOptimizer(
        student, config.lr_max, config.lr_min, config.warmup_epochs * steps_per_epoch
    )
    dropout_gen = torch.Generator().manual_seed(config.seed)
    weights = np.ones(corpus.num_train)
    aam = _aam(config, None)
    mean_loss: float | None = None
    for epoch in range(1, config.warmup_epochs + 1):
        losses = []
        for idx in _batches(corpus.num_train, config.batch_size, config.seed, epoch):
            x_s = _student_views(config, corpus, idx, epoch)
            losses.append(
                backward_and_step(
                    student, x_s, labels[idx], weights[idx], optimizer,
                    aam=aam, generator=dropout_gen,
                )
            )
        mean_loss = float(np.mean(losses))
        logger.info("warmup epoch", epoch=epoch, loss=mean_loss, lr=optimizer.lr)

    teacher = copy_params(student)
    metrics = evaluate(teacher, student, corpus, labels)
    record = EpochRecord.from_metrics(
        0, "warmup", mean_loss, metrics, mean_p_clean=1.0, ema_momentum=0.0
    )
    writer.epoch(record)
    logger.info("warmup done", **dataclasses.asdict(metrics))
    return WarmState(
        student=student, teacher=teacher, labels=labels, clusters=clusters, record=record
    )


def ssrl_run(
    config: RunConfig,
    corpus: Corpus,
    warm: WarmState,
    writer: RunWriter | None = None,
    on_step: StepHook | None = None,
) -> RunResult:
    """The reflective loop.

    Per batch: the student takes a p_clean-weighted step on its noisy view
    against the current pseudo labels; the teacher relabels the batch from
    its clean view (argmax or buffered Sinkhorn; in naive mode the argmax of
    the student's own training forward), the queue mode-corrects, and the
    teacher loss is recorded; then the teacher tracks the student by EMA.
    Per epoch: the GMM is refit on all teacher losses and the new p_clean
    applies from the next epoch on.
    """
    writer = writer or RunWriter(None)
    student, teacher = warm.student, warm.teacher
    features = corpus.train_features
    n = corpus.num_train
    labels = warm.labels.copy()
    queue = LabelQueue(n, config.effective_queue_length)
    table = TeacherLossTable(n)
    posteriors = np.zeros((n, config.k_init))
    buffer = (
        PosteriorBuffer(config.k_init, config.sinkhorn_batches, config.batch_size)
        if config.clustering == "sinkhorn"
        else None
    )

    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.ssrl_epochs * steps_per_epoch
    optimizer = StudentOptimizer(student, config.lr_max, config.lr_min, total_steps)
    dropout_gen = torch.Generator().manual_seed(config.seed + 1)
    records = [warm.record]
    noise_models: list[NoiseModel] = []
    step = 0

    def relabel(ids: np.ndarray, raw: np.ndarray) -> None:
        corrected = queue.enqueue_batch(ids, raw)
        labels[ids] = corrected
        table.record(ids, teacher_loss(posteriors[ids], corrected))

    def flush() -> None:
        ids, raw = sinkhorn_assign(
            buffer,
            lambda_ot=config.sinkhorn_lambda,
            max_iters=config.sinkhorn_iters,
            tol=config.sinkhorn_tol,
        )
        relabel(ids, raw)

    for epoch in range(1, config.ssrl_epochs + 1):
        global_epoch = config.warmup_epochs + epoch
        aam = _aam(config, epoch)
        losses = []
        momentum = 0.0
        try:
            for idx in _batches(n, config.batch_size, config.seed, global_epoch):
                x_s = _student_views(config, corpus, idx, global_epoch)
                weights = table.weights(idx) if config.use_gmm else np.ones(len(idx))
                student_labels = labels[idx].copy()

                posteriors[idx] = _posteriors(teacher, teacher_batch(features, idx))
                if config.clustering == "naive":
                    relabel(idx, _own_labels(student, x_s, dropout_gen))
                    student_labels = labels[idx].copy()
                elif buffer is not None:
                    if buffer.accumulate(posteriors[idx], idx):
                        flush()
                else:
                    relabel(idx, argmax_assign(posteriors[idx]))

                losses.append(
                    backward_and_step(
                        student, x_s, student_labels, weights, optimizer,
                        aam=aam, generator=dropout_gen,
                    )
                )
                momentum = (
                    momentum_schedule(step, total_steps - 1, config.ema_start, config.ema_end)
                    if config.use_ema
                    else 0.0
                )
                ema_update(teacher, student, momentum)
                if on_step is not None:
                    on_step(step, student, teacher, momentum)
                step += 1
        except NumericalError as e:
            logger.error(
                "numerical abort",
                epoch=epoch,
                step=step,
                error=str(e),
                last_checkpoint=str(writer.last_checkpoint) if writer.last_checkpoint else None,
            )
            raise

        if buffer is not None and len(buffer):
            if buffer.width > config.k_init:
                flush()
            else:
                # Too few samples to balance; they keep their queue labels.
                ids = buffer.sample_indices
                table.record(ids, teacher_loss(posteriors[ids], labels[ids]))
                buffer.clear()

        if config.use_gmm:
            model = fit_noise_gmm(table.losses)
            table.refresh(model)
            noise_models.append(model)
            writer.noise(noise_log_row(epoch, model, table.p_clean))

        metrics = evaluate(teacher, student, corpus, labels)
        record = EpochRecord.from_metrics(
            epoch,
            "ssrl",
            float(np.mean(losses)),
            metrics,
            mean_p_clean=float(table.p_clean.mean()),
            ema_momentum=momentum,
        )
        records.append(record)
        writer.epoch(record)
        logger.info(
            "ssrl epoch",
            epoch=epoch,
            loss=record.mean_loss,
            active_clusters=record.active_clusters,
            largest_cluster=int(cluster_sizes(labels, config.k_init).max()),
            accuracy_pct=record.accuracy_pct,
            nmi=record.nmi,
            eer_pct=record.eer_pct,
            mean_p_clean=record.mean_p_clean,
        )
        if config.loss_histograms:
            mapping = hungarian_mapping(labels, corpus.train_speakers)
            mapped = np.array([mapping.get(int(y), -1) for y in labels])
            hist = loss_histogram(table.losses, mapped == corpus.train_speakers)
            writer.loss_histogram(epoch, hist.rows())
        if epoch % config.checkpoint_every == 0 and epoch != config.ssrl_epochs:
            writer.checkpoint(epoch, teacher, student)

    writer.checkpoint(config.ssrl_epochs, teacher, student)
    writer.assignments(labels)
    return RunResult(
        config=config,
        teacher=teacher,
        student=student,
        labels=labels,
        records=records,
        noise_models=noise_models,
    )


def run_training(
    config: RunConfig,
    out_dir: Path | None = None,
    corpus: Corpus | None = None,
    on_step: StepHook | None = None,
) -> RunResult:
    """Warm-up followed by SSRL, writing run outputs under ``out_dir``."""
    config.validate()
    # Single-threaded reductions keep reruns byte-identical.
    torch.set_num_threads(1)
    corpus = corpus if corpus is not None else load_corpus(config)
    writer = RunWriter(out_dir)
    writer.start(config)
    logger.info(
        "Starting run",
        clustering=config.clustering,
        k_init=config.k_init,
        samples=corpus.num_train,
        ema=config.use_ema,
        queue=config.use_queue,
        gmm=config.use_gmm,
    )
    warm = warmup(config, corpus, writer)
    return ssrl_run(config, corpus, warm, writer, on_step=on_step)


@dataclass
class AblationRow:
    variant: str
    eer_pct: float
    nmi: float
    accuracy_pct: float
    purity_pct: float
    converged_k: int


def variant_name(overrides: dict[str, str]) -> str:
    if not overrides:
        return "base"
    return ",".join(f"{name}={value}" for name, value in overrides.items())


def ablation_matrix(
    base: RunConfig,
    axes: dict[str, list[str]],
    out_dir: Path | None = None,
) -> list[AblationRow]:
    """Run every combination of axis values on top of ``base``.

    Axis values are raw strings parsed like command-line overrides; the
    pseudo-axis ``variant`` selects a component preset.
    """
    names = list(axes)
    parsed = {name: [parse_override(name, raw) for raw in axes[name]] for name in names}
    corpus = load_corpus(base)
    rows: list[AblationRow] = []
    for combo in itertools.product(*(range(len(axes[name])) for name in names)):
        raw = {name: axes[name][i] for name, i in zip(names, combo)}
        overrides = {name: parsed[name][i] for name, i in zip(names, combo)}
        config = apply_overrides(base, overrides)
        variant = variant_name(raw)
        run_corpus = corpus if config.corpus == base.corpus else None
        run_dir = out_dir / _safe_dirname(variant) if out_dir is not None else None
        logger.info("Ablation variant", variant=variant)
        result = run_training(config, run_dir, corpus=run_corpus)
        final = result.final
        rows.append(
            AblationRow(
                variant=variant,
                eer_pct=final.eer_pct,
                nmi=final.nmi,
                accuracy_pct=final.accuracy_pct,
                purity_pct=final.purity_pct,
                converged_k=final.active_clusters,
            )
        )
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def _safe_dirname(variant: str) -> str:
    return variant.replace("=", "-").replace(",", "_").replace("/", "_")


def write_ablation_csv(rows: list[AblationRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(dataclasses.asdict(row) for row in rows)


def read_epoch_log(path: Path) -> list[dict[str, Any]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"Cannot read epoch log {path}: {e}")
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed epoch log {path}: {e}")
