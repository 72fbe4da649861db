import math

import numpy as np
import pytest
from PIL import Image

from dompat import tensor as T
from dompat._binio import BadMagicError, TruncatedError, UnsupportedVersionError
from dompat.data import Dataset
from dompat.nn import build_model, forward
from dompat.pattern import (DominantPattern, FeasibilityError, FindConfig, FingerprintWarning,
                            check_fingerprint, cos_loss, ed_loss, export_png, find_pattern,
                            kld_loss, load_pattern, pattern_bytes, pattern_from_bytes,
                            pattern_predict, pattern_to_uint8, random_pattern, save_pattern,
                            zero_pattern)
from helpers import random_images, tiny_spec


def val(t):
    return t.item()


# ---------------------------------------------------------------- losses

def test_cos_examples():
    a = np.array([0.3, -1.2, 2.0])
    assert val(cos_loss(a, a)) == pytest.approx(0, abs=1e-6)
    assert val(cos_loss([1.0, 0.0], [0.0, 1.0])) == pytest.approx(1)
    with T.precision("float64"):
        assert val(cos_loss(np.array([1.0, 2, 2]), np.array([2.0, 1, 2]))) == pytest.approx(1 - 8 / 9, abs=1e-9)


def test_cos_zero_input_is_guarded():
    assert val(cos_loss([0.0, 0.0], [1.0, 2.0])) == pytest.approx(1.0)


def test_ed_examples():
    assert val(ed_loss([1.0, 2.0], [1.0, 2.0])) == 0
    assert val(ed_loss([0.0, 0.0], [3.0, 4.0])) == pytest.approx(5, abs=1e-9)
    u = np.array([0.6, 0.8])
    assert val(ed_loss(u, 2 * u)) == pytest.approx(1, abs=1e-6)


def test_kld_identical_is_zero():
    z = np.array([0.1, 2.0, -1.0])
    with T.precision("float64"):
        assert abs(val(kld_loss(z, z))) <= 1e-9


def test_kld_uniform_target_value():
    # p uniform, q = [0.9, 0.1]: KL(p||q) = 0.5 log(0.5/0.9) + 0.5 log(0.5/0.1)
    want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    with T.precision("float64"):
        got = val(kld_loss(np.array([0.0, 0.0]), np.log([0.9, 0.1])))
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.5108, abs=1e-4)


def test_kld_nonnegative_and_asymmetric():
    rng = np.random.default_rng(0)
    with T.precision("float64"):
        a, b = rng.normal(0, 3, size=(1000, 10)), rng.normal(0, 3, size=(1000, 10))
        assert np.all(kld_loss(a, b).data >= 0)
        x, y = np.array([0.0, 0.0]), np.log([0.9, 0.1])
        assert val(kld_loss(x, y)) != pytest.approx(val(kld_loss(y, x)))


def test_symmetry_and_scale_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=10), rng.normal(size=10)
    assert val(cos_loss(a, b)) == pytest.approx(val(cos_loss(b, a)), abs=1e-6)
    assert val(ed_loss(a, b)) == pytest.approx(val(ed_loss(b, a)), abs=1e-6)
    assert val(cos_loss(a, 7.5 * b)) == pytest.approx(val(cos_loss(a, b)), abs=1e-6)


def test_row_wise_losses():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    for fn in (cos_loss, ed_loss, kld_loss):
        rows = fn(a, b).data
        assert rows.shape == (4,)
        np.testing.assert_allclose(rows, [val(fn(a[i], b[i])) for i in range(4)], rtol=1e-5)


def test_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        cos_loss([1.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------- search

@pytest.fixture
def setup():
    model = build_model(tiny_spec(), 3)
    data = Dataset(random_images(50, (1, 8, 8), seed=1))
    return model, data


def test_find_is_deterministic(setup):
    model, data = setup
    cfg = FindConfig(epochs=2, batch_size=8, seed=4)
    a, b = find_pattern(model, data, cfg), find_pattern(model, data, cfg)
    assert a.delta.tobytes() == b.delta.tobytes()
    assert pattern_bytes(a) == pattern_bytes(b)


@pytest.mark.parametrize("kind", ["cos", "ed", "kld"])
def test_feasible_after_every_batch(setup, kind):
    model, data = setup
    seen = []
    find_pattern(model, data, FindConfig(loss_kind=kind, xi=2.0, epochs=2, batch_size=8, lr=0.5),
                 on_batch=lambda e, b, d, l: seen.append(np.abs(d).max()))
    assert len(seen) == 2 * 7
    assert max(seen) <= 2.0
    assert max(seen) == pytest.approx(2.0)


def test_zero_epochs_gives_zero_pattern(setup):
    model, data = setup
    p = find_pattern(model, data, FindConfig(epochs=0))
    assert not p.delta.any() and p.loss_history == []
    assert p.dominant_class == int(np.argmax(model(np.zeros((1, 1, 8, 8))).data[0]))


def test_loss_history_decreases_on_tiny_model(setup):
    model, data = setup
    p = find_pattern(model, data, FindConfig(epochs=4, batch_size=10))
    assert p.loss_history[-1] < p.loss_history[0]


def test_shape_mismatch(setup):
    model, _ = setup
    with pytest.raises(T.ShapeError):
        find_pattern(model, Dataset(random_images(4, (1, 6, 6))), FindConfig(epochs=1))


def test_labels_are_ignored(setup):
    model, data = setup
    labeled = Dataset(data.images, np.arange(50) % 3)
    cfg = FindConfig(epochs=1, batch_size=8)
    assert find_pattern(model, labeled, cfg).delta.tobytes() == find_pattern(model, data, cfg).delta.tobytes()


def test_config_validation():
    for bad in ({"loss_kind": "l1"}, {"xi": 0}, {"batch_size": 0}, {"epochs": -1}, {"lr": 0}):
        with pytest.raises(ValueError):
            FindConfig(**bad)


def test_config_defaults():
    cfg = FindConfig()
    assert (cfg.loss_kind, cfg.xi, cfg.batch_size, cfg.epochs, cfg.lr) == ("cos", 10.0, 32, 10, 0.01)


def test_infeasible_pattern_rejected():
    with pytest.raises(FeasibilityError):
        DominantPattern(np.full((1, 2, 2), 11.0), 10.0, "", {}, 0, 1.0)


def test_pattern_predict_zero_model_ties_to_class_zero():
    model = build_model(tiny_spec(), 0)
    for p in model.params.values():
        p.data[...] = 0
    cls, conf = pattern_predict(model, np.zeros((1, 8, 8), np.float32))
    assert cls == 0 and conf == pytest.approx(1 / 3)


def test_pattern_predict_is_argmax(setup):
    model, _ = setup
    delta = np.random.default_rng(0).uniform(-10, 10, (1, 8, 8)).astype(np.float32)
    logits = forward(model, delta[None])[0].data[0]
    assert pattern_predict(model, delta)[0] == int(np.argmax(logits))


def test_random_pattern_hits_bound(setup):
    model, _ = setup
    p = random_pattern(model, 10, seed=2)
    assert np.abs(p.delta).max() == pytest.approx(10)
    assert random_pattern(model, 10, seed=2).delta.tobytes() == p.delta.tobytes()


# ---------------------------------------------------------------- persistence

def test_round_trip(tmp_path, setup):
    model, data = setup
    p = find_pattern(model, data, FindConfig(epochs=1, batch_size=16))
    save_pattern(p, tmp_path / "p.dpat")
    q = load_pattern(tmp_path / "p.dpat")
    assert q.delta.tobytes() == p.delta.tobytes()
    assert (q.dominant_class, q.confidence, q.xi) == (p.dominant_class, p.confidence, p.xi)
    assert q.loss_history == p.loss_history and q.train_config == p.train_config
    assert (tmp_path / "p.dpat").read_bytes()[:4] == b"DPAT"


def test_pattern_load_errors(setup):
    model, _ = setup
    buf = pattern_bytes(zero_pattern(model))
    with pytest.raises(BadMagicError):
        pattern_from_bytes(b"DPFM" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        pattern_from_bytes(buf[:4] + b"\x09\0\0\0" + buf[8:])
    with pytest.raises(TruncatedError):
        pattern_from_bytes(buf[:-2])


def test_fingerprint_mismatch_warns(setup):
    model, _ = setup
    p = zero_pattern(model)
    other = build_model(tiny_spec(), 99)
    assert check_fingerprint(p, model)
    with pytest.warns(FingerprintWarning):
        assert not check_fingerprint(p, other)


# ---------------------------------------------------------------- png

def test_png_mapping_endpoints_and_midpoint():
    d = np.array([[[-10.0, 0.0, 10.0]]], np.float32)
    pix = pattern_to_uint8(DominantPattern(d, 10.0, "", {}, 0, 1.0))
    assert pix.tolist() == [[0, 128, 255]]


def test_png_zero_pattern_is_mid_gray(tmp_path):
    p = DominantPattern(np.zeros((3, 5, 4)), 10.0, "", {}, 0, 1.0)
    export_png(p, tmp_path / "z.png")
    img = Image.open(tmp_path / "z.png")
    assert img.mode == "RGB" and img.size == (4, 5)
    assert np.all(np.asarray(img) == 128)


def test_png_rejects_two_channels(tmp_path):
    with pytest.raises(ValueError):
        export_png(DominantPattern(np.zeros((2, 3, 3)), 10.0, "", {}, 0, 1.0), tmp_path / "x.png")
