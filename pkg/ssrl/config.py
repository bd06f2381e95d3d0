"""Run configuration for ssrl-desk.

Config files are JSON objects whose keys mirror the `RunConfig` fields
(and `CorpusSpec` fields under ``"corpus"``). Missing keys take the
defaults below; unknown keys and mistyped values are errors.
"""

from __future__ import annotations

import dataclasses
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, get_args

from .logging import ConfigError, get_logger

logger = get_logger(__name__)

ClusteringMode = Literal["argmax", "sinkhorn", "naive"]
LossKind = Literal["ce", "aam"]
PredictorInit = Literal["centroid", "random"]
KMeansSpace = Literal["raw", "encoder"]


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic speaker corpus parameters.

    Speaker means sit on a sphere of radius ``sigma_between``; utterances
    add isotropic noise of scale ``sigma_within``.
    """

    num_speakers: int = 50
    utts_per_speaker: int = 40
    dim: int = 32
    sigma_within: float = 1.0
    sigma_between: float = 5.0
    # Held-out utterances per speaker, used only for verification trials.
    trial_utts_per_speaker: int = 4
    num_trials: int = 2000
    seed: int = 0

    def validate(self) -> CorpusSpec:
        if self.num_speakers < 2:
            raise ConfigError(f"num_speakers must be >= 2, got {self.num_speakers}")
        if self.utts_per_speaker < 2:
            raise ConfigError(
                f"utts_per_speaker must be >= 2, got {self.utts_per_speaker}"
            )
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not self.sigma_within > 0:
            raise ConfigError(f"sigma_within must be > 0, got {self.sigma_within}")
        if not self.sigma_between > self.sigma_within:
            raise ConfigError(
                "sigma_between must exceed sigma_within "
                f"({self.sigma_between} <= {self.sigma_within})"
            )
        if self.trial_utts_per_speaker < 2:
            raise ConfigError(
                "trial_utts_per_speaker must be >= 2 to form target trials, "
                f"got {self.trial_utts_per_speaker}"
            )
        if self.num_trials < 2:
            raise ConfigError(f"num_trials must be >= 2, got {self.num_trials}")
        return self

    @property
    def num_train(self) -> int:
        return self.num_speakers * self.utts_per_speaker


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a warm-up + SSRL run.

    Defaults are the desk-scale regime: 50 speakers, K_init=80, 20 warm-up
    epochs on frozen k-means labels, then 60 SSRL epochs.
    """

    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    # Directory written by `gen-data`; overrides `corpus` when set.
    corpus_path: str | None = None

    k_init: int = 80
    warmup_epochs: int = 20
    ssrl_epochs: int = 60
    batch_size: int = 100

    # Encoder: output width of every layer, the last one is the embedding size.
    encoder_widths: tuple[int, ...] = (64, 64)
    dropout: float = 0.1
    predictor_init: PredictorInit = "centroid"
    normalize_centroids: bool = True
    kmeans_space: KMeansSpace = "raw"
    kmeans_iters: int = 100

    clustering: ClusteringMode = "argmax"
    sinkhorn_batches: int = 4
    sinkhorn_lambda: float = 25.0
    sinkhorn_tol: float = 1e-6
    sinkhorn_iters: int = 300

    use_ema: bool = True
    use_queue: bool = True
    use_gmm: bool = True
    queue_length: int = 5
    # Per-step momentum. The teacher's time constant is kept near one epoch
    # at 20 steps per epoch; see DESIGN.md.
    ema_start: float = 0.95
    ema_end: float = 0.995

    lr_max: float = 1e-3
    lr_min: float = 1e-4

    loss: LossKind = "ce"
    aam_margin: float = 0.2
    aam_scale: float = 32.0
    # SSRL epoch (1-based) from which the margin applies; 1 means throughout.
    aam_from_epoch: int = 1
    aam_in_warmup: bool = False

    aug_strength: float = 1.0
    augment_prob: float = 2.0 / 3.0
    mask_fraction: float = 0.1

    checkpoint_every: int = 10
    # Per-epoch histogram of log teacher losses split by label correctness.
    loss_histograms: bool = False
    seed: int = 0

    def validate(self) -> RunConfig:
        self.corpus.validate()
        if self.warmup_epochs < 0 or self.ssrl_epochs < 0:
            raise ConfigError("warmup_epochs and ssrl_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k_init < 2:
            raise ConfigError(f"k_init must be >= 2, got {self.k_init}")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigError(
                f"encoder_widths must be positive, got {list(self.encoder_widths)}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.clustering == "sinkhorn":
            if self.sinkhorn_batches < 1:
                raise ConfigError("sinkhorn_batches must be >= 1")
            if self.sinkhorn_batches * self.batch_size <= self.k_init:
                raise ConfigError(
                    "sinkhorn_batches * batch_size must exceed k_init "
                    f"({self.sinkhorn_batches} * {self.batch_size} <= {self.k_init})"
                )
        if not self.sinkhorn_lambda > 0:
            raise ConfigError(f"sinkhorn_lambda must be > 0, got {self.sinkhorn_lambda}")
        if self.queue_length < 1:
            raise ConfigError(f"queue_length must be >= 1, got {self.queue_length}")
        for name in ("ema_start", "ema_end"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {value}")
        if self.lr_max < 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.aam_margin < math.pi / 2:
            raise ConfigError(f"aam_margin must be in [0, pi/2), got {self.aam_margin}")
        if not self.aam_scale > 0:
            raise ConfigError(f"aam_scale must be > 0, got {self.aam_scale}")
        if self.aug_strength < 0:
            raise ConfigError(f"aug_strength must be >= 0, got {self.aug_strength}")
        if not 0 <= self.augment_prob <= 1:
            raise ConfigError(f"augment_prob must be in [0, 1], got {self.augment_prob}")
        if not 0 <= self.mask_fraction < 1:
            raise ConfigError(f"mask_fraction must be in [0, 1), got {self.mask_fraction}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        return self

    @property
    def effective_queue_length(self) -> int:
        return self.queue_length if self.use_queue else 1

    def replace(self, **overrides: Any) -> RunConfig:
        """Return a validated copy with fields replaced."""
        return dataclasses.replace(self, **overrides).validate()

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["encoder_widths"] = list(self.encoder_widths)
        return data


DEFAULT_CONFIG = RunConfig().to_dict()

# Presets for the component ablation: which of EMA / queue / noise model stay on.
# The naive baseline trains on its own predictions from an untrained network.
VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no_ema": {"use_ema": False},
    "no_queue": {"use_queue": False},
    "no_gmm": {"use_gmm": False},
    "none": {"use_ema": False, "use_queue": False, "use_gmm": False},
    "naive": {
        "use_ema": False,
        "use_queue": False,
        "use_gmm": False,
        "clustering": "naive",
        "warmup_epochs": 0,
        "predictor_init": "random",
    },
}


def _fields_by_name(cls: type) -> dict[str, Any]:
    # Defaults carry the concrete types; annotations are strings under
    # `from __future__ import annotations`.
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(cls_name: str, name: str, value: Any, default: Any, annotation: str) -> Any:
    """Check a JSON value against the field's default type."""
    literal_choices = _LITERALS.get(annotation)
    if literal_choices is not None:
        if value not in literal_choices:
            raise ConfigError(
                f"{cls_name}.{name} must be one of {list(literal_choices)}, got {value!r}"
            )
        return value
    if annotation == "str | None":
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{cls_name}.{name} must be a string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(
                f"{cls_name}.{name} requires bool, got {type(value).__name__}"
            )
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(
                f"{cls_name}.{name} requires int, got {type(value).__name__}"
            )
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(
                f"{cls_name}.{name} requires float, got {type(value).__name__}"
            )
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{cls_name}.{name} requires a list of ints")
        return tuple(value)
    raise ConfigError(f"{cls_name}.{name} has unsupported value {value!r}")


_LITERALS: dict[str, tuple[str, ...]] = {
    "ClusteringMode": get_args(ClusteringMode),
    "LossKind": get_args(LossKind),
    "PredictorInit": get_args(PredictorInit),
    "KMeansSpace": get_args(KMeansSpace),
}


def corpus_spec_from_dict(data: dict[str, Any]) -> CorpusSpec:
    """Build a CorpusSpec from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("corpus spec must be a JSON object")
    fields = _fields_by_name(CorpusSpec)
    defaults = CorpusSpec()
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"Unknown corpus keys: {', '.join(unknown)}")
    values = {
        name: _coerce("corpus", name, value, getattr(defaults, name), fields[name].type)
        for name, value in data.items()
    }
    return CorpusSpec(**values).validate()


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    fields = _fields_by_name(RunConfig)
    defaults = RunConfig()
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for name, value in data.items():
        if name == "corpus":
            values[name] = corpus_spec_from_dict(value)
        else:
            values[name] = _coerce(
                "config", name, value, getattr(defaults, name), fields[name].type
            )
    return RunConfig(**values).validate()


def load_json(path: Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")


def load_config(path: Path) -> RunConfig:
    config = config_from_dict(load_json(path))
    logger.debug("Loaded config", path=str(path))
    return config


def load_corpus_spec(path: Path) -> CorpusSpec:
    return corpus_spec_from_dict(load_json(path))


def write_json_atomic(path: Path, data: dict[str, Any]) -> None:
    """Write JSON through a temp file in the target directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            mode="w", dir=path.parent, prefix=".config_", suffix=".tmp", delete=False
        ) as f:
            json.dump(data, f, indent=2)
            f.write("\n")
            tmp_path = Path(f.name)
        tmp_path.replace(path)
    except OSError as e:
        raise ConfigError(f"Cannot write {path}: {e}")


def save_config(config: RunConfig, path: Path) -> None:
    write_json_atomic(path, config.to_dict())


def parse_override(name: str, raw: str) -> Any:
    """Parse a command-line ``name=value`` override using the field's type.

    Variant names map to toggle presets (see VARIANTS) under the pseudo-field
    ``variant``; corpus fields are addressed as ``corpus.<field>``.
    """
    if name == "variant":
        if raw not in VARIANTS:
            raise ConfigError(
                f"Unknown variant {raw!r}; choose from {', '.join(VARIANTS)}"
            )
        return raw
    if name.startswith("corpus."):
        sub = name.removeprefix("corpus.")
        fields = _fields_by_name(CorpusSpec)
        if sub not in fields:
            raise ConfigError(f"Unknown corpus key: {sub}")
        return _coerce("corpus", sub, _parse_scalar(raw), getattr(CorpusSpec(), sub), fields[sub].type)
    fields = _fields_by_name(RunConfig)
    if name not in fields or name == "corpus":
        raise ConfigError(f"Unknown config key: {name}")
    return _coerce("config", name, _parse_scalar(raw), getattr(RunConfig(), name), fields[name].type)


def _parse_scalar(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply parsed overrides (including ``variant`` and ``corpus.*``)."""
    updates: dict[str, Any] = {}
    corpus_updates: dict[str, Any] = {}
    for name, value in overrides.items():
        if name == "variant":
            updates.update(VARIANTS[value])
        elif name.startswith("corpus."):
            corpus_updates[name.removeprefix("corpus.")] = value
        else:
            updates[name] = value
    if corpus_updates:
        updates["corpus"] = dataclasses.replace(config.corpus, **corpus_updates)
    return config.replace(**updates)
