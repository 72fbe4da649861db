import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dompat import tensor as T
from dompat.data import Dataset
from dompat.evaluation import (EvalReport, LayerTrace, aggregate_trace, dominance_from_preds,
                               dominant_fooling_from_preds,
                               dominance_ratio, emit_report, evaluate, feature_map,
                               fooling_cap_from_preds, fooling_rate, fooling_rate_from_preds,
                               layer_trace, report_from_preds, spearman, ssim, to_json,
                               topk_from_preds, topk_ratio)
from dompat.nn import build_model, predict
from dompat.pattern import DominantPattern, FingerprintWarning, find_pattern, FindConfig, zero_pattern
from helpers import random_images
from oracles import ssim_loops, topk_brute


# ---------------------------------------------------------------- counting examples

def test_fooling_example():
    assert fooling_rate_from_preds([1, 2, 3], [1, 5, 5]) == pytest.approx(2 / 3)
    assert fooling_rate_from_preds([1, 2], [1, 2]) == 0
    assert fooling_rate_from_preds([1, 2], [2, 1]) == 1.0


def test_dominance_example():
    assert dominance_from_preds([4, 4, 2, 4], 4) == 0.75


def test_topk_example():
    pert = [0] * 50 + [1] * 30 + [2] * 20
    got = topk_from_preds(pert, [1, 3])
    assert got == {1: 0.5, 3: 1.0}
    assert topk_from_preds(pert, [7]) == {7: 1.0}


def test_empty_is_an_error():
    for fn in (lambda: fooling_rate_from_preds([], []), lambda: dominance_from_preds([], 0),
               lambda: topk_from_preds([], [1])):
        with pytest.raises(ValueError):
            fn()


preds = st.lists(st.integers(0, 4), min_size=1, max_size=20)


@given(st.data())
@settings(max_examples=300, deadline=None)
def test_metric_identities_brute_force(data):
    clean = data.draw(preds)
    pert = data.draw(st.lists(st.integers(0, 4), min_size=len(clean), max_size=len(clean)))
    dom = data.draw(st.integers(0, 4))
    fool = fooling_rate_from_preds(clean, pert)
    d = dominance_from_preds(pert, dom)
    share = sum(c == dom for c in clean) / len(clean)
    topk = topk_from_preds(pert, [1, 2, 3, 4, 5])
    for k in range(1, 6):
        assert topk[k] == pytest.approx(topk_brute(pert, k))
    assert all(topk[k] <= topk[k + 1] for k in range(1, 5))
    assert topk[1] >= d
    assert fool >= d - share - 1e-12
    cap = fooling_cap_from_preds(clean, dom)
    assert dominant_fooling_from_preds(clean, pert, dom) <= cap
    # every perturbed image at the dominant class: fooling equals the cap exactly
    assert fooling_rate_from_preds(clean, [dom] * len(clean)) == cap
    # predictions that either stay put or move to the dominant class respect the cap
    moved_to_dom = [p if p == dom else c for c, p in zip(clean, pert)]
    assert fooling_rate_from_preds(clean, moved_to_dom) <= cap


def test_plain_fooling_can_exceed_cap():
    # scattering to a non-dominant class is fooling without dominance
    assert fooling_rate_from_preds([0, 0], [1, 1]) == 1.0
    assert fooling_cap_from_preds([0, 0], 0) == 0.0


def test_ten_percent_share_gives_point_nine_cap():
    clean = list(range(10)) * 10
    assert fooling_cap_from_preds(clean, 3) == pytest.approx(0.9)


def test_report_invariants_enforced():
    good = report_from_preds(np.array([0, 1, 1]), np.array([1, 1, 1]), 1, 0.9, 3)
    assert good.topk == {1: 1.0, 3: 1.0, 5: 1.0}
    with pytest.raises(ValueError):
        EvalReport(0.1, 0.5, {1: 0.4}, 0, 1.0, {0: 1}, {0: 1}, 1)
    with pytest.raises(ValueError):
        EvalReport(0.1, 0.1, {1: 0.5, 3: 0.4}, 0, 1.0, {0: 1}, {0: 1}, 1)


# ---------------------------------------------------------------- model wrappers

@pytest.fixture
def model_and_data(small_ref_model):
    return small_ref_model, Dataset(random_images(30, (3, 16, 16), seed=2))


def test_zero_pattern_degenerate_contracts(model_and_data):
    model, test = model_and_data
    p = zero_pattern(model)
    assert fooling_rate(model, p, test) == 0
    clean = predict(model, test.images)
    assert dominance_ratio(model, p, test) == np.mean(clean == p.dominant_class)


def test_evaluate_report(model_and_data):
    model, test = model_and_data
    delta = np.random.default_rng(0).uniform(-10, 10, (3, 16, 16)).astype(np.float32)
    p = DominantPattern(delta, 10.0, "", {}, 0, 0.5)
    with pytest.warns(FingerprintWarning):
        rep = evaluate(model, p, test)
    assert sorted(rep.topk) == [1, 3, 5]
    assert rep.sample_count == 30
    assert sum(rep.perturbed_class_histogram.values()) == 30
    assert rep.topk == topk_ratio(model, p, test)
    assert rep.fooling_rate == fooling_rate(model, p, test)


def test_clamp_option_changes_inputs(model_and_data):
    model, test = model_and_data
    p = DominantPattern(np.full((3, 16, 16), 10.0, np.float32), 10.0, "", {}, 0, 0.5)
    a = predict(model, test.images + 10.0)
    b = predict(model, np.clip(test.images + 10.0, 0, 255))
    clean = predict(model, test.images)
    assert fooling_rate(model, p, test, clamp=False) == np.mean(a != clean)
    assert fooling_rate(model, p, test, clamp=True) == np.mean(b != clean)


# ---------------------------------------------------------------- ssim

def test_ssim_identity():
    x = np.random.default_rng(0).random((9, 9))
    assert ssim(x, x) == pytest.approx(1.0)


def test_ssim_constants_closed_form():
    a, b, L = 0.2, 0.7, 1.0
    c1 = (0.01 * L) ** 2
    got = ssim(np.full((8, 8), a), np.full((8, 8), b))
    assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1))


def test_ssim_negation_is_low():
    x = np.random.default_rng(1).random((16, 16))
    assert ssim(x, 1.0 - x) < 0.5


@pytest.mark.parametrize("window", [3, 5, 7])
def test_ssim_matches_loop_oracle(window):
    rng = np.random.default_rng(window)
    a, b = rng.random((10, 12)), rng.random((10, 12))
    assert ssim(a, b, window) == pytest.approx(ssim_loops(a, b, window), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(T.ShapeError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)), window=7)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), window=4)


def test_feature_map_scaling():
    act = np.arange(8.0).reshape(2, 2, 2)
    m = feature_map(act)
    assert m.shape == (2, 2) and m.min() == 0 and m.max() == 1
    assert feature_map(np.array([1.0, 2.0, 3.0])).shape == (1, 3)
    assert not feature_map(np.ones((2, 3, 3))).any()


# ---------------------------------------------------------------- traces

def test_layer_trace_self_pattern(small_ref_model):
    delta = np.random.default_rng(3).uniform(0, 10, (3, 16, 16)).astype(np.float32)
    p = DominantPattern(delta, 10.0, "", {}, 0, 0.5)
    tr = layer_trace(small_ref_model, p, delta)
    assert tr.layer_indices == [2, 5, 8, 11]
    np.testing.assert_allclose(tr.ssim_vs_pattern, tr.ssim_vs_clean)


def test_aggregate_single_sample_has_zero_std(small_ref_model):
    p = zero_pattern(small_ref_model)
    tr = aggregate_trace(small_ref_model, p, Dataset(random_images(1, (3, 16, 16))))
    assert tr.ssim_vs_pattern_std == [0.0] * 4 and tr.ssim_vs_clean_std == [0.0] * 4


def test_aggregate_matches_per_sample(model_and_data):
    model, test = model_and_data
    delta = np.random.default_rng(4).uniform(-10, 10, (3, 16, 16)).astype(np.float32)
    p = DominantPattern(delta, 10.0, "", {}, 0, 0.5)
    agg = aggregate_trace(model, p, test, batch_size=7)
    per = np.array([layer_trace(model, p, x).ssim_vs_pattern for x in test.images])
    np.testing.assert_allclose(agg.ssim_vs_pattern_mean, per.mean(0), atol=1e-12)
    assert all(-1 <= v <= 1 for v in agg.ssim_vs_pattern_mean + agg.ssim_vs_clean_mean)


def test_spearman():
    assert spearman([0, 1, 2, 3], [0.1, 0.2, 0.5, 0.9]) == pytest.approx(1.0)
    assert spearman([0, 1, 2], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([0, 1, 2], [1, 1, 1]) == 0.0


# ---------------------------------------------------------------- emission

def test_json_round_trip(tmp_path):
    rep = report_from_preds(np.array([0, 1, 2, 2]), np.array([2, 2, 2, 1]), 2, 0.875, 3)
    emit_report(rep, tmp_path / "r.json", "json", {"version": "x", "config": {"xi": 10.0}})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert list(doc)[0] == "meta"
    back = EvalReport.from_dict(doc)
    assert back == rep
    text = (tmp_path / "r.json").read_text()
    assert '"fooling_rate": 0.750000' in text
    assert '"dominance_ratio": 0.750000' in text  # fractions, not percentages


def test_to_json_fixed_decimals():
    assert to_json({"a": 1 / 3, "b": 2, "c": [0.5]}) == '{\n  "a": 0.333333,\n  "b": 2,\n  "c": [0.500000]\n}\n'
    with pytest.raises(ValueError):
        to_json({"a": float("nan")})


def test_trace_csv_rows(tmp_path):
    tr = LayerTrace([2, 5, 8], [0.1, 0.2, 0.3], [0, 0, 0], [0.9, 0.8, 0.7], [0, 0, 0], 4)
    emit_report(tr, tmp_path / "t.csv", "csv")
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert len(rows) == 3 + 1
    assert rows[0][0] == "layer_index" and rows[1] == ["2", "0.100000", "0.000000", "0.900000", "0.000000"]


def test_report_csv_is_field_value(tmp_path):
    rep = report_from_preds(np.array([0, 1]), np.array([1, 1]), 1, 0.5, 2, ks=(1,))
    emit_report(rep, tmp_path / "r.csv", "csv")
    rows = dict(csv.reader((tmp_path / "r.csv").open()))
    assert rows["fooling_rate"] == "0.500000" and rows["topk.1"] == "1.000000"


def test_bad_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report({}, tmp_path / "x", "xml")
