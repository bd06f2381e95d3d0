"""Seeded synthetic speaker corpus.

Each speaker is a mean vector on the sphere of radius sigma_between;
utterances scatter around it with isotropic noise sigma_within. The
teacher sees stored features as they are; the student sees a noised,
partially masked copy of two thirds of them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import CorpusSpec, corpus_spec_from_dict
from .logging import ConfigError, get_logger

logger = get_logger(__name__)

AUGMENT_PROB = 2.0 / 3.0
MASK_FRACTION = 0.1

CORPUS_FILE = "corpus.csv"
TRIALS_FILE = "trials.csv"
CORPUS_HEADER_TAG = "ssrl-corpus"
TRIALS_HEADER = "idx_a,idx_b,is_target"


@dataclass(frozen=True)
class SampleRecord:
    index: int
    features: np.ndarray
    # Evaluation only; training code never reads it.
    speaker: int


@dataclass
class TrialList:
    pairs: np.ndarray
    is_target: np.ndarray

    def __len__(self) -> int:
        return len(self.is_target)

    def validate(self, num_samples: int) -> TrialList:
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2:
            raise ConfigError("Trial pairs must be a T x 2 index matrix")
        if self.pairs.shape[0] != self.is_target.shape[0]:
            raise ConfigError("Trial pairs and target flags differ in length")
        if self.pairs.size and (self.pairs.min() < 0 or self.pairs.max() >= num_samples):
            raise ConfigError(f"Trial index outside [0, {num_samples})")
        if self.is_target.all() or not self.is_target.any():
            raise ConfigError("Trials need at least one target and one non-target pair")
        return self


@dataclass
class Corpus:
    """All utterances, training block first, then held-out trial utterances."""

    spec: CorpusSpec
    features: np.ndarray
    speakers: np.ndarray
    trials: TrialList

    @property
    def num_train(self) -> int:
        return self.spec.num_train

    @property
    def train_features(self) -> np.ndarray:
        return self.features[: self.num_train]

    @property
    def train_speakers(self) -> np.ndarray:
        return self.speakers[: self.num_train]

    def record(self, index: int) -> SampleRecord:
        return SampleRecord(
            index=index, features=self.features[index], speaker=int(self.speakers[index])
        )


def speaker_seeds(spec: CorpusSpec) -> list[np.random.SeedSequence]:
    """One independent stream per speaker, plus a final one for the trial list."""
    return np.random.SeedSequence(spec.seed).spawn(spec.num_speakers + 1)


def speaker_block(
    seed: np.random.SeedSequence, spec: CorpusSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Training and held-out utterances of one speaker."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(spec.dim)
    mean = spec.sigma_between * direction / np.linalg.norm(direction)
    train = mean + spec.sigma_within * rng.standard_normal((spec.utts_per_speaker, spec.dim))
    held_out = mean + spec.sigma_within * rng.standard_normal(
        (spec.trial_utts_per_speaker, spec.dim)
    )
    return train, held_out


def _make_trials(
    spec: CorpusSpec, rng: np.random.Generator, first_index: int
) -> TrialList:
    per_speaker = spec.trial_utts_per_speaker
    num_target = spec.num_trials // 2
    num_nontarget = spec.num_trials - num_target

    spk = rng.integers(spec.num_speakers, size=num_target)
    a = rng.integers(per_speaker, size=num_target)
    # Offset in [1, per_speaker) keeps the two utterances distinct.
    b = (a + rng.integers(1, per_speaker, size=num_target)) % per_speaker
    target_pairs = np.column_stack([spk * per_speaker + a, spk * per_speaker + b])

    spk_a = rng.integers(spec.num_speakers, size=num_nontarget)
    spk_b = (spk_a + rng.integers(1, spec.num_speakers, size=num_nontarget)) % spec.num_speakers
    nontarget_pairs = np.column_stack(
        [
            spk_a * per_speaker + rng.integers(per_speaker, size=num_nontarget),
            spk_b * per_speaker + rng.integers(per_speaker, size=num_nontarget),
        ]
    )
    pairs = np.concatenate([target_pairs, nontarget_pairs]) + first_index
    is_target = np.concatenate(
        [np.ones(num_target, dtype=bool), np.zeros(num_nontarget, dtype=bool)]
    )
    order = rng.permutation(len(is_target))
    return TrialList(pairs=pairs[order].astype(np.int64), is_target=is_target[order])


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Draw a corpus fully determined by ``spec`` (including its seed)."""
    spec.validate()
    seeds = speaker_seeds(spec)
    blocks = [speaker_block(seed, spec) for seed in seeds[:-1]]
    speaker_ids = np.arange(spec.num_speakers)
    features = np.concatenate([b[0] for b in blocks] + [b[1] for b in blocks])
    speakers = np.concatenate(
        [
            np.repeat(speaker_ids, spec.utts_per_speaker),
            np.repeat(speaker_ids, spec.trial_utts_per_speaker),
        ]
    )
    trials = _make_trials(spec, np.random.default_rng(seeds[-1]), spec.num_train)
    logger.debug(
        "Generated corpus",
        speakers=spec.num_speakers,
        train=spec.num_train,
        held_out=len(features) - spec.num_train,
        trials=len(trials),
    )
    return Corpus(spec=spec, features=features, speakers=speakers, trials=trials)


def teacher_view(record: SampleRecord | np.ndarray) -> np.ndarray:
    """The stored features, unaltered."""
    if isinstance(record, SampleRecord):
        return record.features
    return np.asarray(record)


def teacher_batch(features: np.ndarray, indices) -> np.ndarray:
    """Teacher views of a batch."""
    return np.stack([teacher_view(features[i]) for i in indices])


def student_view(
    record: SampleRecord | np.ndarray,
    aug_strength: float,
    rng: np.random.Generator,
    sigma_within: float = 1.0,
    augment_prob: float = AUGMENT_PROB,
    mask_fraction: float = MASK_FRACTION,
) -> np.ndarray:
    """Noised copy of the features for ``augment_prob`` of draws, else a plain copy.

    Augmentation adds N(0, (aug_strength * sigma_within)^2) noise and zeroes
    a random ``mask_fraction`` of the coordinates.
    """
    if aug_strength < 0:
        raise ConfigError(f"aug_strength must be >= 0, got {aug_strength}")
    x = np.array(teacher_view(record), dtype=np.float64)
    if rng.random() >= augment_prob:
        return x
    x += rng.normal(0.0, aug_strength * sigma_within, size=x.shape)
    num_masked = int(round(mask_fraction * x.size))
    if num_masked:
        x[rng.choice(x.size, size=num_masked, replace=False)] = 0.0
    return x


def student_batch(
    features: np.ndarray,
    indices,
    epoch: int,
    seed: int,
    aug_strength: float,
    sigma_within: float,
    augment_prob: float = AUGMENT_PROB,
    mask_fraction: float = MASK_FRACTION,
) -> np.ndarray:
    """Student views of a batch; each sample's noise depends only on (seed, epoch, index)."""
    return np.stack(
        [
            student_view(
                features[i],
                aug_strength,
                np.random.default_rng((seed, epoch, int(i))),
                sigma_within=sigma_within,
                augment_prob=augment_prob,
                mask_fraction=mask_fraction,
            )
            for i in indices
        ]
    )


def write_corpus(corpus: Corpus, directory: Path) -> None:
    """Write ``corpus.csv`` (spec header + ``index,speaker_id,f1..fD``) and ``trials.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, dim = corpus.features.shape
    rows = np.column_stack([np.arange(n), corpus.speakers, corpus.features])
    header = f"{CORPUS_HEADER_TAG} {json.dumps(asdict(corpus.spec), sort_keys=True)}"
    np.savetxt(
        directory / CORPUS_FILE,
        rows,
        fmt=["%d", "%d"] + ["%.17g"] * dim,
        delimiter=",",
        header=header,
        comments="# ",
    )
    write_trials(corpus.trials, directory / TRIALS_FILE)
    logger.info("Wrote corpus", path=str(directory), samples=n, trials=len(corpus.trials))


def write_trials(trials: TrialList, path: Path) -> None:
    rows = np.column_stack([trials.pairs, trials.is_target.astype(np.int64)])
    np.savetxt(path, rows, fmt="%d", delimiter=",", header=TRIALS_HEADER, comments="")


def read_trials(path: Path, num_samples: int) -> TrialList:
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read trial list {path}: {e}")
    if rows.shape[1] != 3:
        raise ConfigError(f"Trial list {path} must have columns {TRIALS_HEADER}")
    trials = TrialList(pairs=rows[:, :2], is_target=rows[:, 2].astype(bool))
    return trials.validate(num_samples)


def read_corpus(directory: Path) -> Corpus:
    """Load a corpus written by `write_corpus`."""
    path = Path(directory) / CORPUS_FILE
    try:
        with path.open() as f:
            first = f.readline()
    except OSError as e:
        raise ConfigError(f"Cannot read corpus {path}: {e}")
    tag = f"# {CORPUS_HEADER_TAG} "
    if not first.startswith(tag):
        raise ConfigError(f"{path} is missing the '{CORPUS_HEADER_TAG}' header")
    try:
        spec = corpus_spec_from_dict(json.loads(first.removeprefix(tag)))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed corpus header in {path}: {e}")

    try:
        rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as e:
        raise ConfigError(f"Malformed corpus rows in {path}: {e}")
    expected = spec.num_train + spec.num_speakers * spec.trial_utts_per_speaker
    if rows.shape != (expected, spec.dim + 2):
        raise ConfigError(
            f"{path} has shape {rows.shape}, header implies {(expected, spec.dim + 2)}"
        )
    if not np.array_equal(rows[:, 0], np.arange(expected)):
        raise ConfigError(f"{path} rows must be indexed 0..{expected - 1} in order")
    trials = read_trials(Path(directory) / TRIALS_FILE, expected)
    return Corpus(
        spec=spec,
        features=np.ascontiguousarray(rows[:, 2:]),
        speakers=rows[:, 1].astype(np.int64),
        trials=trials,
    )
