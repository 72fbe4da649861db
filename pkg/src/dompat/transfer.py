"""Attacking a head-fine-tuned model with a pattern found on its frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .evaluation import (DEFAULT_KS, EvalReport, _check, _clamp_flag, fooling_cap_from_preds,
                         perturb, report_from_preds)
from .nn import Model, backbone_features, backbone_hash, predict
from .pattern import DominantPattern, cos_loss, pattern_predict


class BackboneMismatchError(ValueError):
    """The tuned model does not share the original model's backbone."""


@dataclass
class TransferReport(EvalReport):
    backbone_cos_loss: float = 0.0
    theoretical_fooling_cap: float = 1.0
    new_task_accuracy: float | None = None

    @property
    def within_cap(self) -> bool:
        """True when the measured fooling rate respects the cap.

        Holds whenever every changed prediction lands on the dominant class;
        a pattern that scatters samples over other classes can exceed it.
        """
        return self.fooling_rate <= self.theoretical_fooling_cap

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["backbone_cos_loss"] = self.backbone_cos_loss
        d["theoretical_fooling_cap"] = self.theoretical_fooling_cap
        d["new_task_accuracy"] = self.new_task_accuracy
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TransferReport:
        base = EvalReport.from_dict(d)
        return cls(**vars(base), backbone_cos_loss=d["backbone_cos_loss"],
                   theoretical_fooling_cap=d["theoretical_fooling_cap"],
                   new_task_accuracy=d.get("new_task_accuracy"))


def check_backbones(tuned: Model, original: Model) -> None:
    if (tuned.spec.input_shape != original.spec.input_shape
            or tuned.spec.backbone_end != original.spec.backbone_end
            or tuned.spec.layers[:tuned.spec.backbone_end] != original.spec.layers[:original.spec.backbone_end]
            or backbone_hash(tuned) != backbone_hash(original)):
        raise BackboneMismatchError("backbone mismatch between tuned and original model")


def backbone_cos_loss(model: Model, delta: np.ndarray, images: np.ndarray,
                      clamp: bool = False, batch_size: int = 256) -> float:
    """Mean over ``images`` of ``cos_loss(backbone(delta), backbone(delta + x))``."""
    if len(images) == 0:
        raise ValueError("backbone loss of an empty dataset is undefined")
    net = model.detached()
    total = 0.0
    with T.no_grad():
        ref = backbone_features(net, delta[None].astype(np.float32)).data[0].ravel()
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            feats = backbone_features(net, perturb(chunk, delta, clamp)).data
            feats = feats.reshape(len(chunk), -1).astype(np.float64)
            target = np.broadcast_to(ref.astype(np.float64), feats.shape)
            total += float(cos_loss(target, feats).data.sum())
    return total / len(images)


def evaluate_transfer(pattern: DominantPattern, tuned_model: Model, original_model: Model,
                      new_test: Dataset, ks=DEFAULT_KS, clamp: bool | None = None,
                      workers: int = 1) -> TransferReport:
    """Evaluate ``pattern`` (found on ``original_model``) against ``tuned_model``.

    The dominant class is recomputed as the tuned model's prediction on the
    bare pattern, since the original class index means nothing under a new head.

    Raises:
        BackboneMismatchError: the two models do not share backbone parameters.
    """
    check_backbones(tuned_model, original_model)
    _check(tuned_model, pattern, new_test)
    flag = _clamp_flag(pattern, clamp)
    cls, conf = pattern_predict(tuned_model, pattern)
    clean = predict(tuned_model, new_test.images, workers=workers)
    pert = predict(tuned_model, perturb(new_test.images, pattern.delta, flag), workers=workers)
    base = report_from_preds(clean, pert, cls, conf, tuned_model.spec.class_count, ks)
    acc = None if new_test.labels is None else float(np.mean(clean == new_test.labels))
    return TransferReport(**vars(base),
                          backbone_cos_loss=backbone_cos_loss(tuned_model, pattern.delta,
                                                              new_test.images, flag),
                          theoretical_fooling_cap=fooling_cap_from_preds(clean, cls),
                          new_task_accuracy=acc)
