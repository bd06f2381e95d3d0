"""Student/teacher encoder with a K-way predictor, losses, optimizer and EMA.

The same `SpeakerNet` class serves as student and teacher. All tensors are
float64 so gradient checks and EMA identities hold to tight tolerances;
checkpoints are stored as little-endian float32.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.optim.lr_scheduler import CosineAnnealingLR

from .logging import ConfigError, NumericalError, get_logger

logger = get_logger(__name__)

DTYPE = torch.float64
# Floor for probabilities inside log(); keeps cross entropy finite.
LOG_EPS = 1e-12
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EMA_START = 0.999
EMA_END = 0.9999

CHECKPOINT_MAGIC = "ssrl-checkpoint"
CHECKPOINT_VERSION = "v1"


@dataclass(frozen=True)
class AAMSettings:
    """Additive angular margin: label logit becomes s*cos(theta + m)."""

    margin: float = 0.2
    scale: float = 32.0


@dataclass
class LossReport:
    per_sample_loss: np.ndarray
    weighted_mean: float


class SpeakerNet(nn.Module):
    """Encoder (MLP with ReLU between layers) followed by a linear predictor.

    ``cosine_scale`` switches the predictor to scaled cosine logits, which
    is how an AAM-trained model scores clusters.
    """

    def __init__(
        self,
        input_dim: int,
        widths: tuple[int, ...] | list[int],
        num_clusters: int,
        dropout: float = 0.0,
        cosine_scale: float | None = None,
    ):
        super().__init__()
        dims = [input_dim, *widths]
        self.layers = nn.ModuleList(
            nn.Linear(d_in, d_out, dtype=DTYPE) for d_in, d_out in zip(dims, dims[1:])
        )
        self.predictor = nn.Linear(dims[-1], num_clusters, dtype=DTYPE)
        self.dropout = dropout
        self.cosine_scale = cosine_scale

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_features

    @property
    def num_clusters(self) -> int:
        return self.predictor.out_features

    @property
    def widths(self) -> list[int]:
        return [layer.out_features for layer in self.layers]

    def forward(
        self,
        x: torch.Tensor,
        labels: torch.Tensor | None = None,
        aam: AAMSettings | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Logits for a batch; with ``aam`` and ``labels`` the margin is applied."""
        z = encode(self, x, generator=generator)
        if aam is not None:
            if labels is None:
                raise ConfigError("AAM logits need labels")
            return aam_logits(z, self, labels, aam.margin, aam.scale)
        return logits(self, z)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def init_params(
    input_dim: int,
    widths: tuple[int, ...] | list[int],
    num_clusters: int,
    seed: int,
    dropout: float = 0.0,
    cosine_scale: float | None = None,
) -> SpeakerNet:
    """Build a network with weights uniform in +-1/sqrt(fan_in) from a seeded generator."""
    net = SpeakerNet(input_dim, widths, num_clusters, dropout, cosine_scale)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in [*net.layers, net.predictor]:
            bound = 1.0 / math.sqrt(layer.in_features)
            for tensor in (layer.weight, layer.bias):
                sample = torch.rand(tensor.shape, generator=gen, dtype=DTYPE)
                tensor.copy_(sample * 2 * bound - bound)
    return net


def copy_params(params: SpeakerNet) -> SpeakerNet:
    """Independent copy; the teacher starts as one of the student."""
    return copy.deepcopy(params)


def _dropout(h: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    keep = torch.bernoulli(torch.full_like(h, 1.0 - rate), generator=generator)
    return h * keep / (1.0 - rate)


def encode(
    params: SpeakerNet, x, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Embedding z = Phi(x) for one sample or a batch.

    Dropout is applied only when a generator is passed (the student's
    training forward); the teacher never receives one.
    """
    h = as_tensor(x)
    if h.shape[-1] != params.input_dim:
        raise ConfigError(
            f"Feature dimension {h.shape[-1]} does not match encoder input {params.input_dim}"
        )
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = layer(h)
        if i < last:
            h = torch.relu(h)
            if generator is not None and params.dropout > 0:
                h = _dropout(h, params.dropout, generator)
    return h


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalError(f"Zero-norm {what} cannot be normalized")
    return x / norms


def logits(params: SpeakerNet, z: torch.Tensor) -> torch.Tensor:
    """Predictor output h(z): affine, or scaled cosine for AAM-trained models."""
    z = as_tensor(z)
    if z.shape[-1] != params.embed_dim:
        raise ConfigError(
            f"Embedding dimension {z.shape[-1]} does not match predictor input {params.embed_dim}"
        )
    if params.cosine_scale is None:
        return params.predictor(z)
    weight = _unit_rows(params.predictor.weight, "predictor row")
    return params.cosine_scale * (_unit_rows(z, "embedding") @ weight.T)


def softmax(values: torch.Tensor) -> torch.Tensor:
    """Stable softmax over the last axis; rejects non-finite logits."""
    values = as_tensor(values)
    if not bool(torch.isfinite(values).all()):
        raise NumericalError("Non-finite logits")
    return torch.softmax(values, dim=-1)


def predict(params: SpeakerNet, z) -> torch.Tensor:
    """Posterior over the K clusters, softmax(h(z))."""
    return softmax(logits(params, z))


def _check_labels(labels: torch.Tensor, num_classes: int, batch: int) -> None:
    if labels.shape != (batch,):
        raise ConfigError(f"Expected {batch} labels, got shape {tuple(labels.shape)}")
    if batch and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ConfigError(f"Labels must lie in [0, {num_classes})")


def weighted_nll(
    log_probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Per-sample p_clean * -log p(y), with log p clamped at log(LOG_EPS)."""
    picked = log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return weights * -torch.clamp(picked, min=math.log(LOG_EPS))


def weighted_cross_entropy(probs, labels, clean_probs) -> LossReport:
    """Cross entropy against pseudo labels, weighted by clean-label probability."""
    probs = as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    weights = as_tensor(clean_probs)
    batch = probs.shape[0]
    _check_labels(labels, probs.shape[-1], batch)
    if weights.shape != (batch,):
        raise ConfigError(f"Expected {batch} clean probabilities, got {tuple(weights.shape)}")
    log_probs = torch.log(torch.clamp(probs, min=LOG_EPS))
    picked = -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    losses = weighted_nll(log_probs, labels, weights)
    return LossReport(
        per_sample_loss=picked.detach().numpy(),
        weighted_mean=float(losses.mean()),
    )


def aam_logits(z, params: SpeakerNet, label, margin: float, scale: float) -> torch.Tensor:
    """Scaled cosine logits with an additive angular margin at the label.

    Accepts one embedding with one label or a batch with a label vector.
    """
    if not 0 <= margin < math.pi / 2:
        raise ConfigError(f"AAM margin must be in [0, pi/2), got {margin}")
    if not scale > 0:
        raise ConfigError(f"AAM scale must be > 0, got {scale}")
    z = as_tensor(z)
    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    _check_labels(labels, params.num_clusters, z.shape[0])

    weight = _unit_rows(params.predictor.weight, "predictor row")
    cosine = _unit_rows(z, "embedding") @ weight.T
    cos_label = cosine.gather(1, labels.unsqueeze(1))
    # cos(theta + m) expanded so the gradient stays finite away from |cos| = 1.
    sin_label = torch.sqrt(torch.clamp(1.0 - cos_label**2, min=0.0))
    shifted = cos_label * math.cos(margin) - sin_label * math.sin(margin)
    out = scale * cosine.scatter(1, labels.unsqueeze(1), shifted)
    return out.squeeze(0) if single else out


def student_loss(
    params: SpeakerNet,
    x,
    labels,
    clean_probs,
    aam: AAMSettings | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean over the batch of p_clean * CE, with plain or AAM logits."""
    x = as_tensor(x)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    weights = as_tensor(clean_probs)
    _check_labels(labels, params.num_clusters, x.shape[0])
    out = params(x, labels=labels, aam=aam, generator=generator)
    if not bool(torch.isfinite(out).all()):
        raise NumericalError("Non-finite logits in student forward pass")
    return weighted_nll(torch.log_softmax(out, dim=-1), labels, weights).mean()


class StudentOptimizer:
    """Adam with a cosine-annealed learning rate over a fixed number of steps."""

    def __init__(
        self, params: SpeakerNet, lr_max: float, lr_min: float, total_steps: int
    ):
        self.optimizer = torch.optim.Adam(
            params.parameters(), lr=lr_max, betas=ADAM_BETAS, eps=ADAM_EPS
        )
        self.scheduler = CosineAnnealingLR(
            self.optimizer, T_max=max(total_steps, 1), eta_min=lr_min
        )

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def backward_and_step(
    params: SpeakerNet,
    batch,
    labels,
    clean_probs,
    optimizer: StudentOptimizer,
    aam: AAMSettings | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """One gradient step on the student; returns the batch loss."""
    optimizer.optimizer.zero_grad(set_to_none=True)
    loss = student_loss(params, batch, labels, clean_probs, aam=aam, generator=generator)
    if not bool(torch.isfinite(loss)):
        raise NumericalError(f"Non-finite student loss: {float(loss)}")
    loss.backward()
    for name, tensor in params.named_parameters():
        if tensor.grad is not None and not bool(torch.isfinite(tensor.grad).all()):
            raise NumericalError(f"Non-finite gradient in {name}")
    optimizer.optimizer.step()
    optimizer.scheduler.step()
    return float(loss.detach())


def _check_same_shapes(a: SpeakerNet, b: SpeakerNet) -> None:
    shapes_a = [tuple(p.shape) for p in a.parameters()]
    shapes_b = [tuple(p.shape) for p in b.parameters()]
    if shapes_a != shapes_b:
        raise ConfigError(f"Parameter shapes differ: {shapes_a} vs {shapes_b}")


@torch.no_grad()
def ema_update(teacher: SpeakerNet, student: SpeakerNet, momentum: float) -> SpeakerNet:
    """teacher <- momentum * teacher + (1 - momentum) * student, encoder and predictor.

    lerp keeps the two exact cases exact: momentum 0 copies the student and
    identical arguments leave the teacher untouched.
    """
    if not 0 <= momentum < 1:
        raise ConfigError(f"EMA momentum must be in [0, 1), got {momentum}")
    _check_same_shapes(teacher, student)
    for param_t, param_s in zip(teacher.parameters(), student.parameters()):
        param_t.lerp_(param_s, 1.0 - momentum)
    return teacher


def momentum_schedule(
    step: int, total_steps: int, start: float = EMA_START, end: float = EMA_END
) -> float:
    """Momentum rising linearly from ``start`` at step 0 to ``end`` at the last step."""
    if total_steps <= 0:
        return start
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return start + (end - start) * step / total_steps


@torch.no_grad()
def init_predictor_from_centroids(
    params: SpeakerNet, centroids: np.ndarray, normalize: bool = True
) -> SpeakerNet:
    """Predictor rows <- cluster centres in embedding space, biases <- 0."""
    centres = as_tensor(centroids)
    expected = (params.num_clusters, params.embed_dim)
    if tuple(centres.shape) != expected:
        raise ConfigError(f"Centroids have shape {tuple(centres.shape)}, expected {expected}")
    if normalize:
        norms = torch.linalg.vector_norm(centres, dim=1, keepdim=True)
        centres = torch.where(norms > 0, centres / torch.clamp(norms, min=LOG_EPS), centres)
    params.predictor.weight.copy_(centres)
    params.predictor.bias.zero_()
    return params


def _head_spec(params: SpeakerNet) -> str:
    if params.cosine_scale is None:
        return "linear"
    return f"cosine:{params.cosine_scale!r}"


def save_checkpoint(params: SpeakerNet, path: Path) -> None:
    """Header line with tensor shapes, then little-endian float32 payload."""
    state = params.state_dict()
    shapes = ";".join(
        f"{name}={'x'.join(str(d) for d in tensor.shape)}" for name, tensor in state.items()
    )
    header = (
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} head={_head_spec(params)} "
        f"dropout={params.dropout!r} {shapes}\n"
    )
    payload = b"".join(
        np.ascontiguousarray(tensor.detach().numpy(), dtype="<f4").tobytes()
        for tensor in state.values()
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode("ascii") + payload)


def load_checkpoint(path: Path) -> SpeakerNet:
    """Rebuild a network from a checkpoint written by `save_checkpoint`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"Cannot read checkpoint {path}: {e}")
    newline = raw.find(b"\n")
    if newline < 0:
        raise ConfigError(f"Checkpoint {path} has no header line")
    parts = raw[:newline].decode("ascii").split(" ")
    if len(parts) != 5 or parts[0] != CHECKPOINT_MAGIC or parts[1] != CHECKPOINT_VERSION:
        raise ConfigError(f"Not an {CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} file: {path}")
    head = parts[2].removeprefix("head=")
    dropout = float(parts[3].removeprefix("dropout="))
    shapes: dict[str, tuple[int, ...]] = {}
    for item in parts[4].split(";"):
        name, _, dims = item.partition("=")
        shapes[name] = tuple(int(d) for d in dims.split("x"))

    num_layers = sum(1 for name in shapes if name.startswith("layers.") and name.endswith(".weight"))
    if num_layers == 0 or "predictor.weight" not in shapes:
        raise ConfigError(f"Checkpoint {path} lacks encoder or predictor tensors")
    input_dim = shapes["layers.0.weight"][1]
    widths = [shapes[f"layers.{i}.weight"][0] for i in range(num_layers)]
    num_clusters = shapes["predictor.weight"][0]
    cosine_scale = None if head == "linear" else float(head.removeprefix("cosine:"))
    net = SpeakerNet(input_dim, widths, num_clusters, dropout, cosine_scale)

    state = net.state_dict()
    if list(state) != list(shapes) or any(
        tuple(state[name].shape) != shape for name, shape in shapes.items()
    ):
        raise ConfigError(f"Checkpoint {path} shapes do not describe a supported network")
    payload = raw[newline + 1 :]
    expected = 4 * sum(math.prod(shape) for shape in shapes.values())
    if len(payload) != expected:
        raise ConfigError(
            f"Checkpoint {path} payload has {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4")
    offset = 0
    loaded = {}
    for name, shape in shapes.items():
        size = math.prod(shape)
        loaded[name] = torch.as_tensor(
            values[offset : offset + size].astype(np.float64).reshape(shape)
        )
        offset += size
    net.load_state_dict(loaded)
    return net
