"""Classifier training and frozen-backbone head fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BatchIterator, Dataset
from .nn import (LayerSpec, Model, ModelSpec, build_model, forward, freeze_backbone,
                 init_layer_params, predict)
from .optim import ModelOptimizer
from .tensor import Tensor


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


FINE_TUNE_DEFAULTS = TrainConfig(epochs=5, batch_size=32, lr=1e-3, optimizer="adam", seed=0)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = T._as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return T.neg(T.mean(T.pick(T.log_softmax(logits, 1), labels)))


def accuracy(model: Model, test: Dataset) -> float:
    if test.labels is None:
        raise ValueError("accuracy needs a labeled dataset")
    if len(test) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, test.images) == test.labels))


def fit(model: Model, data: Dataset, cfg: TrainConfig) -> list[float]:
    """Train ``model`` in place on labeled ``data``; returns the per-epoch mean loss.

    Frozen parameters are excluded from the tape entirely, so they stay
    bit-identical.
    """
    if data.labels is None:
        raise ValueError("training needs a labeled dataset")
    if data.sample_shape != model.spec.input_shape:
        raise T.ShapeError(f"data samples {data.sample_shape} do not match "
                           f"model input {model.spec.input_shape}")
    for name, p in model.params.items():
        p.requires_grad = name not in model.frozen
    opt = ModelOptimizer(model, cfg.optimizer, cfg.lr)
    it = BatchIterator(data, cfg.batch_size, cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for batch in it:
            opt.zero_grad()
            loss = cross_entropy(forward(model, batch.images)[0], batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss in epoch {epoch}")
            T.backward(loss)
            opt.step()
            total += value * len(batch.indices)
            count += len(batch.indices)
        history.append(total / count)
    opt.zero_grad()
    return history


def train_classifier(spec: ModelSpec, data: Dataset, cfg: TrainConfig = TrainConfig()) -> Model:
    if data.labels is None:
        raise ValueError("training needs a labeled dataset")
    model = build_model(spec, cfg.seed)
    fit(model, data, cfg)
    return model


def with_new_head(model: Model, class_count: int, seed: int) -> Model:
    """Copy of ``model`` whose final linear layer is re-initialized for ``class_count`` outputs."""
    spec = model.spec
    last = len(spec.layers) - 1
    old = spec.layers[last]
    if old.kind != "linear":
        raise ValueError("the final layer must be linear to replace the head")
    layers = list(spec.layers)
    layers[last] = LayerSpec.linear(old.in_features, class_count)
    new_spec = ModelSpec(tuple(layers), spec.backbone_end, spec.input_shape, class_count)
    new_spec.shapes()
    tuned = model.copy()
    tuned.spec = new_spec
    tuned.params.update(init_layer_params(new_spec, last, seed))
    return tuned


def fine_tune_head(model: Model, new_data: Dataset, cfg: TrainConfig = FINE_TUNE_DEFAULTS) -> Model:
    """Freeze the backbone, swap in a fresh final layer, train the head on ``new_data``."""
    if new_data.sample_shape != model.spec.input_shape:
        raise T.ShapeError(f"new data samples {new_data.sample_shape} do not match "
                           f"backbone input {model.spec.input_shape}")
    if new_data.labels is None:
        raise ValueError("fine-tuning needs a labeled dataset")
    k = new_data.class_count or int(new_data.labels.max()) + 1
    tuned = freeze_backbone(with_new_head(model, k, cfg.seed))
    fit(tuned, new_data, cfg)
    return tuned
