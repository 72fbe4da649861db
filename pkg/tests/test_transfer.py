import numpy as np
import pytest

from dompat.data import Dataset
from dompat.evaluation import fooling_cap_from_preds
from dompat.nn import build_model, predict
from dompat.pattern import DominantPattern, FindConfig, find_pattern, pattern_predict
from dompat.train import TrainConfig, fine_tune_head
from dompat.transfer import (BackboneMismatchError, TransferReport, backbone_cos_loss,
                             evaluate_transfer)
from helpers import random_images, tiny_spec


@pytest.fixture
def pair():
    original = build_model(tiny_spec(), 5)
    rng = np.random.default_rng(0)
    new = Dataset(random_images(60, (1, 8, 8), seed=9), rng.integers(0, 4, 60), "new", 4)
    tuned = fine_tune_head(original, new, TrainConfig(epochs=1, seed=0))
    pattern = find_pattern(original, Dataset(random_images(40, (1, 8, 8), seed=2)),
                           FindConfig(epochs=1, batch_size=8))
    return original, tuned, pattern, new


def test_report_fields_and_cap(pair):
    original, tuned, pattern, new = pair
    rep = evaluate_transfer(pattern, tuned, original, new)
    cls, _ = pattern_predict(tuned, pattern)
    clean = predict(tuned, new.images)
    assert rep.dominant_class == cls
    assert rep.theoretical_fooling_cap == fooling_cap_from_preds(clean, cls)
    assert rep.new_task_accuracy == np.mean(clean == new.labels)
    assert set(rep.clean_class_histogram) == {0, 1, 2, 3}
    d = rep.to_dict()
    assert {"backbone_cos_loss", "theoretical_fooling_cap", "new_task_accuracy"} <= set(d)
    assert TransferReport.from_dict(d) == rep


def test_backbone_loss_same_on_both_models(pair):
    original, tuned, pattern, new = pair
    a = backbone_cos_loss(tuned, pattern.delta, new.images)
    b = backbone_cos_loss(original, pattern.delta, new.images)
    assert abs(a - b) <= 1e-6


def test_backbone_loss_zero_for_zero_images(pair):
    original, _, pattern, _ = pair
    zeros = np.zeros((3, 1, 8, 8), np.float32)
    assert backbone_cos_loss(original, pattern.delta, zeros) == pytest.approx(0, abs=1e-6)


def test_mismatched_backbone_rejected(pair):
    original, tuned, pattern, new = pair
    other = build_model(tiny_spec(), 6)
    with pytest.raises(BackboneMismatchError, match="backbone mismatch"):
        evaluate_transfer(pattern, tuned, other, new)


def test_cap_with_ten_percent_share():
    clean = np.repeat(np.arange(10), 10)
    rep = TransferReport(0.9, 1.0, {1: 1.0}, 3, 1.0, {k: 10 for k in range(10)}, {3: 100}, 100,
                         backbone_cos_loss=0.0,
                         theoretical_fooling_cap=fooling_cap_from_preds(clean, 3))
    assert rep.theoretical_fooling_cap == pytest.approx(0.9)
    assert rep.within_cap


def test_fooling_within_cap_when_all_go_to_dominant(pair):
    original, tuned, _, new = pair
    # a saturated pattern makes every sample the dominant class
    delta = np.full((1, 8, 8), 1e4, np.float32)
    p = DominantPattern(delta, 1e4, "", {}, 0, 1.0)
    rep = evaluate_transfer(p, tuned, original, new)
    assert rep.dominance_ratio == 1.0
    assert rep.fooling_rate == rep.theoretical_fooling_cap and rep.within_cap
