"""Dominant-pattern search.

A dominant pattern is a perturbation ``delta`` with ``max|delta| <= xi`` such
that the model's logits on ``delta + x`` stay close to its logits on ``delta``
alone, whatever the natural image ``x``. :func:`find_pattern` looks for one by
descending a logit dissimilarity (cosine by default) with Adam, clamping back
into the l-infinity ball after every step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from ._binio import FormatError, Reader, pack_header, pack_json
from .data import BatchIterator, Dataset
from .nn import Model, forward, model_fingerprint
from .optim import AdamState, adam_step, project_linf
from .tensor import Tensor

PATTERN_MAGIC = b"DPAT"
PATTERN_VERSION = 1
COS_EPS = 1e-12
LOSS_KINDS = ("cos", "ed", "kld")


class FeasibilityError(AssertionError):
    """The pattern left the l-infinity ball; indicates a bug, never expected."""


class FingerprintWarning(UserWarning):
    """A pattern is being evaluated on a model other than the one it was found on."""


# ---------------------------------------------------------------- losses

def _pair(a, b) -> tuple[Tensor, Tensor, int | None]:
    a, b = T._as_tensor(a), T._as_tensor(b)
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise T.ShapeError(f"loss operands must be equal-shape vectors or row batches, "
                           f"got {a.shape} and {b.shape}")
    return a, b, (None if a.ndim == 1 else 1)


def cos_loss(a, b) -> Tensor:
    """``1 - a·b / (|a| |b|)``; row-wise for 2-D inputs.

    Each norm gets ``COS_EPS`` added, so an all-zero input yields loss 1 rather
    than an exception.
    """
    a, b, axis = _pair(a, b)
    num = T.sum(T.mul(a, b), axis)
    den = T.mul(T.add(T.l2norm(a, axis), COS_EPS), T.add(T.l2norm(b, axis), COS_EPS))
    return T.sub(1.0, T.div(num, den))


def ed_loss(a, b) -> Tensor:
    """Euclidean distance ``|a - b|``; row-wise for 2-D inputs."""
    a, b, axis = _pair(a, b)
    return T.l2norm(T.sub(a, b), axis)


def kld_loss(a, b) -> Tensor:
    """``KL(softmax(a) || softmax(b))``, with ``a`` (the pattern's logits) as target."""
    a, b, axis = _pair(a, b)
    ax = -1 if axis is None else axis
    lp, lq = T.log_softmax(a, ax), T.log_softmax(b, ax)
    return T.sum(T.mul(T.exp(lp), T.sub(lp, lq)), axis)


LOSSES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "cos": cos_loss, "ed": ed_loss, "kld": kld_loss,
}


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class FindConfig:
    loss_kind: str = "cos"
    xi: float = 10.0
    batch_size: int = 32
    epochs: int = 10
    lr: float = 0.01
    seed: int = 0
    clamp_sum: bool = False
    # lr is given per unit pixel range; Adam steps in raw units are lr * pixel_range
    pixel_range: float = 255.0

    def __post_init__(self):
        if not self.pixel_range > 0:
            raise ValueError("pixel_range must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class DominantPattern:
    delta: np.ndarray
    xi: float
    model_fingerprint: str
    train_config: dict
    dominant_class: int
    confidence: float
    loss_history: list[float] = field(default_factory=list)
    norm_order: str = "inf"

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.delta.ndim != 3:
            raise ValueError(f"delta must be C×H×W, got {self.delta.shape}")
        if np.abs(self.delta).max(initial=0) > self.xi:
            raise FeasibilityError(f"max |delta| exceeds xi={self.xi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.delta.shape)

    def retarget(self, model: Model) -> DominantPattern:
        """Copy with dominant class and confidence recomputed on another model."""
        cls, conf = pattern_predict(model, self)
        return dataclasses.replace(self, dominant_class=cls, confidence=conf,
                                   loss_history=list(self.loss_history))


# ---------------------------------------------------------------- search

def pattern_predict(model: Model, pattern: DominantPattern | np.ndarray) -> tuple[int, float]:
    """Class and softmax confidence of the model on the bare pattern (lowest index wins ties)."""
    delta = pattern.delta if isinstance(pattern, DominantPattern) else np.asarray(pattern)
    with T.no_grad():
        logits = forward(model, delta[None].astype(np.float32))[0]
        probs = T.softmax(logits).data[0]
    cls = int(np.argmax(logits.data[0]))
    return cls, float(probs[cls])


def batch_objective(model: Model, delta: Tensor, images: np.ndarray, kind: str,
                    clamp_sum: bool = False) -> Tensor:
    """Mean over the batch of ``loss(f(delta), f(delta + x))``.

    ``f(delta)`` is computed once and shared by every sample; gradients reach
    ``delta`` through both arguments.
    """
    n = images.shape[0]
    f_delta = model(T.reshape(delta, (1,) + delta.shape))
    target = T.expand(T.reshape(f_delta, (f_delta.shape[1],)), n)
    perturbed = T.add(T.expand(delta, n), Tensor._wrap(images.astype(delta.dtype, copy=False)))
    if clamp_sum:
        perturbed = T.clamp(perturbed, 0.0, 255.0)
    return T.mean(LOSSES[kind](target, model(perturbed)))


def find_pattern(model: Model, data: Dataset, cfg: FindConfig = FindConfig(),
                 on_batch: Callable[[int, int, np.ndarray, float], None] | None = None
                 ) -> DominantPattern:
    """Search for a dominant pattern of ``model`` using (unlabeled) ``data``.

    Args:
        model: target network; its parameters are not touched.
        data: images in raw pixel units; labels, if any, are ignored.
        cfg: loss, bound, batch size, epochs, Adam learning rate and seed.
            The learning rate is relative to ``cfg.pixel_range``, so the
            default 0.01 moves each pixel by up to about 2.55 raw units.
        on_batch: optional hook called as ``(epoch, batch_index, delta, loss)``
            after every projected update.
    """
    shape = model.spec.input_shape
    if data.sample_shape != shape:
        raise T.ShapeError(f"data samples {data.sample_shape} do not match model input {shape}")
    net = model.detached()
    delta = np.zeros(shape, dtype=np.float32)
    state = AdamState.fresh(shape, cfg.lr * cfg.pixel_range)
    it = BatchIterator(data, cfg.batch_size, cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for bi, batch in enumerate(it):
            d = Tensor._wrap(delta.copy(), requires_grad=True)
            loss = batch_objective(net, d, batch.images, cfg.loss_kind, cfg.clamp_sum)
            T.backward(loss)
            delta = project_linf(delta + adam_step(state, d.grad).data, cfg.xi).data
            if np.abs(delta).max() > cfg.xi:
                raise FeasibilityError(f"epoch {epoch} batch {bi}: |delta| > {cfg.xi}")
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {bi}")
            total += value * len(batch.indices)
            count += len(batch.indices)
            if on_batch is not None:
                on_batch(epoch, bi, delta, value)
        history.append(total / max(count, 1))
    cls, conf = pattern_predict(net, delta)
    return DominantPattern(delta, cfg.xi, model_fingerprint(model), dataclasses.asdict(cfg),
                           cls, conf, history)


def random_pattern(model: Model, xi: float = 10.0, seed: int = 0) -> DominantPattern:
    """Uniform noise in the ball, rescaled so its largest entry is exactly ``xi``."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-1.0, 1.0, size=model.spec.input_shape)
    delta = (delta * (xi / np.abs(delta).max())).astype(np.float32)
    delta = np.clip(delta, -np.float32(xi), np.float32(xi))
    cls, conf = pattern_predict(model, delta)
    return DominantPattern(delta, xi, model_fingerprint(model),
                           {"kind": "random_uniform", "seed": seed, "xi": xi}, cls, conf, [])


def zero_pattern(model: Model, xi: float = 10.0) -> DominantPattern:
    delta = np.zeros(model.spec.input_shape, dtype=np.float32)
    cls, conf = pattern_predict(model, delta)
    return DominantPattern(delta, xi, model_fingerprint(model), {"kind": "zero"}, cls, conf, [])


# ---------------------------------------------------------------- persistence

def pattern_bytes(pattern: DominantPattern) -> bytes:
    meta = {
        "confidence": pattern.confidence,
        "dominant_class": pattern.dominant_class,
        "loss_history": [float(v) for v in pattern.loss_history],
        "model_fingerprint": pattern.model_fingerprint,
        "norm_order": pattern.norm_order,
        "shape": list(pattern.shape),
        "train_config": pattern.train_config,
        "xi": pattern.xi,
    }
    return (pack_header(PATTERN_MAGIC, PATTERN_VERSION) + pack_json(meta)
            + np.ascontiguousarray(pattern.delta, dtype="<f4").tobytes())


def save_pattern(pattern: DominantPattern, path: str | Path) -> None:
    Path(path).write_bytes(pattern_bytes(pattern))


def pattern_from_bytes(buf: bytes) -> DominantPattern:
    r = Reader(buf)
    r.header(PATTERN_MAGIC, PATTERN_VERSION)
    meta = r.json_blob("metadata")
    try:
        shape = tuple(int(s) for s in meta["shape"])
        n = int(np.prod(shape))
        delta = np.frombuffer(r.take(4 * n, "delta"), dtype="<f4").astype(np.float32)
        if not r.exhausted:
            raise FormatError("trailing bytes after delta")
        return DominantPattern(delta.reshape(shape), float(meta["xi"]), meta["model_fingerprint"],
                               meta["train_config"], int(meta["dominant_class"]),
                               float(meta["confidence"]), list(meta["loss_history"]),
                               meta.get("norm_order", "inf"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt pattern metadata: {exc}") from None


def load_pattern(path: str | Path) -> DominantPattern:
    return pattern_from_bytes(Path(path).read_bytes())


def pattern_digest(pattern: DominantPattern) -> str:
    return hashlib.sha256(pattern_bytes(pattern)).hexdigest()


def check_fingerprint(pattern: DominantPattern, model: Model) -> bool:
    """Warn (without failing) when the pattern was found on a different model."""
    fp = model_fingerprint(model)
    if fp != pattern.model_fingerprint:
        warnings.warn(f"pattern was found on model {pattern.model_fingerprint[:12]}, "
                      f"evaluating on {fp[:12]}", FingerprintWarning, stacklevel=2)
        return False
    return True


# ---------------------------------------------------------------- image export

def pattern_to_uint8(pattern: DominantPattern) -> np.ndarray:
    """Map [-xi, xi] affinely onto [0, 255], rounding halves up; returns H×W or H×W×3."""
    c = pattern.shape[0]
    if c not in (1, 3):
        raise ValueError(f"PNG export needs 1 or 3 channels, got {c}")
    scaled = (pattern.delta.astype(np.float64) + pattern.xi) / (2 * pattern.xi) * 255.0
    pix = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    return pix[0] if c == 1 else np.ascontiguousarray(pix.transpose(1, 2, 0))


def export_png(pattern: DominantPattern, path: str | Path) -> None:
    from PIL import Image

    pix = pattern_to_uint8(pattern)
    Image.fromarray(pix, mode="L" if pix.ndim == 2 else "RGB").save(path, format="PNG")
