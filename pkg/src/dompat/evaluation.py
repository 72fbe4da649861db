"""Metrics for patterns: fooling rate, dominance, top-k ratios, layer-wise SSIM.

The counting metrics come in two layers: pure functions over prediction
arrays (``*_from_preds``), and wrappers that run a model on clean and
perturbed images first.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import spearmanr

from . import tensor as T
from .data import Dataset
from .nn import Model, forward, predict
from .pattern import DominantPattern, check_fingerprint

DEFAULT_KS = (1, 3, 5)


# ---------------------------------------------------------------- counting

def _nonempty(preds: np.ndarray) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("metric of an empty dataset is undefined")
    return preds


def fooling_rate_from_preds(clean, perturbed) -> float:
    clean, perturbed = _nonempty(clean), _nonempty(perturbed)
    return float(np.mean(clean != perturbed))


def dominance_from_preds(perturbed, dominant_class: int) -> float:
    return float(np.mean(_nonempty(perturbed) == dominant_class))


def class_share_from_preds(preds, cls: int) -> float:
    return float(np.mean(_nonempty(preds) == cls))


def fooling_cap_from_preds(clean, dominant_class: int) -> float:
    """Fooling rate reached when every perturbed image goes to ``dominant_class``.

    Computed as a count ratio so it compares exactly with
    :func:`fooling_rate_from_preds`.
    """
    clean = _nonempty(clean)
    return float(np.count_nonzero(clean != dominant_class) / clean.size)


def dominant_fooling_from_preds(clean, perturbed, dominant_class: int) -> float:
    """Share of samples moved into ``dominant_class`` from some other class.

    Never exceeds :func:`fooling_cap_from_preds`. The plain fooling rate can,
    when the pattern sends samples to classes other than the dominant one.
    """
    clean, perturbed = _nonempty(clean), _nonempty(perturbed)
    moved = (clean != dominant_class) & (perturbed == dominant_class)
    return float(np.count_nonzero(moved) / clean.size)


def topk_from_preds(perturbed, ks: Sequence[int]) -> dict[int, float]:
    """Share of the ``k`` most frequent predicted classes (ties: lower class first)."""
    perturbed = _nonempty(perturbed)
    if any(k < 1 for k in ks):
        raise ValueError("k must be positive")
    counts = np.bincount(perturbed)
    order = np.lexsort((np.arange(counts.size), -counts))
    cum = np.cumsum(counts[order])
    n = perturbed.size
    return {int(k): float(cum[min(k, cum.size) - 1] / n) for k in sorted(ks)}


def histogram(preds, class_count: int) -> dict[int, int]:
    counts = np.bincount(np.asarray(preds, dtype=np.int64), minlength=class_count)
    return {int(c): int(v) for c, v in enumerate(counts)}


# ---------------------------------------------------------------- model wrappers

def perturb(images: np.ndarray, delta: np.ndarray, clamp: bool = False) -> np.ndarray:
    out = images + delta[None].astype(images.dtype)
    return np.clip(out, 0, 255) if clamp else out


def _clamp_flag(pattern: DominantPattern, clamp: bool | None) -> bool:
    if clamp is not None:
        return clamp
    return bool(pattern.train_config.get("clamp_sum", False))


def _check(model: Model, pattern: DominantPattern, test: Dataset) -> None:
    if len(test) == 0:
        raise ValueError("metric of an empty dataset is undefined")
    if pattern.shape != model.spec.input_shape or test.sample_shape != model.spec.input_shape:
        raise T.ShapeError(f"pattern {pattern.shape} / data {test.sample_shape} do not match "
                           f"model input {model.spec.input_shape}")


def predictions(model: Model, pattern: DominantPattern, test: Dataset,
                clamp: bool | None = None, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Clean and perturbed argmax predictions over ``test``."""
    _check(model, pattern, test)
    clean = predict(model, test.images, workers=workers)
    pert = predict(model, perturb(test.images, pattern.delta, _clamp_flag(pattern, clamp)),
                   workers=workers)
    return clean, pert


def fooling_rate(model: Model, pattern: DominantPattern, test: Dataset, **kw) -> float:
    return fooling_rate_from_preds(*predictions(model, pattern, test, **kw))


def dominance_ratio(model: Model, pattern: DominantPattern, test: Dataset, **kw) -> float:
    return dominance_from_preds(predictions(model, pattern, test, **kw)[1], pattern.dominant_class)


def topk_ratio(model: Model, pattern: DominantPattern, test: Dataset,
               ks: Sequence[int] = DEFAULT_KS, **kw) -> dict[int, float]:
    return topk_from_preds(predictions(model, pattern, test, **kw)[1], ks)


@dataclass
class EvalReport:
    fooling_rate: float
    dominance_ratio: float
    topk: dict[int, float]
    dominant_class: int
    confidence: float
    clean_class_histogram: dict[int, int]
    perturbed_class_histogram: dict[int, int]
    sample_count: int

    def __post_init__(self):
        ks = sorted(self.topk)
        vals = [self.topk[k] for k in ks]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"top-k ratios not monotone in k: {self.topk}")
        if 1 in self.topk and self.topk[1] < self.dominance_ratio:
            raise ValueError("top-1 ratio below dominance ratio")
        for name in ("clean_class_histogram", "perturbed_class_histogram"):
            if sum(getattr(self, name).values()) != self.sample_count:
                raise ValueError(f"{name} does not sum to sample_count")

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "dominant_class": self.dominant_class,
            "confidence": self.confidence,
            "fooling_rate": self.fooling_rate,
            "dominance_ratio": self.dominance_ratio,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "clean_class_histogram": {str(k): v for k, v in sorted(self.clean_class_histogram.items())},
            "perturbed_class_histogram": {str(k): v for k, v in
                                          sorted(self.perturbed_class_histogram.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(fooling_rate=d["fooling_rate"], dominance_ratio=d["dominance_ratio"],
                   topk={int(k): v for k, v in d["topk"].items()},
                   dominant_class=d["dominant_class"], confidence=d["confidence"],
                   clean_class_histogram={int(k): v for k, v in d["clean_class_histogram"].items()},
                   perturbed_class_histogram={int(k): v for k, v in
                                              d["perturbed_class_histogram"].items()},
                   sample_count=d["sample_count"])


def report_from_preds(clean: np.ndarray, pert: np.ndarray, dominant_class: int,
                      confidence: float, class_count: int,
                      ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    return EvalReport(
        fooling_rate=fooling_rate_from_preds(clean, pert),
        dominance_ratio=dominance_from_preds(pert, dominant_class),
        topk=topk_from_preds(pert, ks),
        dominant_class=int(dominant_class),
        confidence=float(confidence),
        clean_class_histogram=histogram(clean, class_count),
        perturbed_class_histogram=histogram(pert, class_count),
        sample_count=int(len(clean)),
    )


def evaluate(model: Model, pattern: DominantPattern, test: Dataset,
             ks: Sequence[int] = DEFAULT_KS, clamp: bool | None = None,
             workers: int = 1) -> EvalReport:
    """Full report for ``pattern`` against ``model`` on ``test``.

    Emits a :class:`~dompat.pattern.FingerprintWarning` if the pattern was found
    on a different model.
    """
    check_fingerprint(pattern, model)
    clean, pert = predictions(model, pattern, test, clamp, workers)
    return report_from_preds(clean, pert, pattern.dominant_class, pattern.confidence,
                             model.spec.class_count, ks)


# ---------------------------------------------------------------- SSIM

def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, dynamic_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained uniform ``window``×``window`` patches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise T.ShapeError(f"ssim needs equal-shape 2-D images, got {a.shape} and {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-1, -2))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-1, -2))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def feature_map(act: np.ndarray, dynamic_range: float = 1.0) -> np.ndarray:
    """Collapse one sample's activation to a 2-D map scaled into [0, dynamic_range].

    C×H×W activations are averaged over channels; flat vectors become a 1×F row.
    A constant map becomes all zeros.
    """
    act = np.asarray(act, dtype=np.float64)
    if act.ndim == 3:
        m = act.mean(axis=0)
    elif act.ndim == 1:
        m = act[None, :]
    else:
        raise T.ShapeError(f"cannot map activation of shape {act.shape}")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo) * dynamic_range


def _window_for(shape: tuple[int, ...], window: int) -> int:
    small = min(shape)
    return min(window, small if small % 2 else small - 1)


class SampleTrace(NamedTuple):
    layer_indices: list[int]
    ssim_vs_pattern: np.ndarray
    ssim_vs_clean: np.ndarray


def _trace_batch(model: Model, delta: np.ndarray, images: np.ndarray, window: int,
                 dynamic_range: float, clamp: bool) -> SampleTrace:
    with T.no_grad():
        _, acts_d = forward(model, delta[None].astype(np.float32), taps="relu_all")
        _, acts_x = forward(model, images, taps="relu_all")
        _, acts_p = forward(model, perturb(images, delta, clamp), taps="relu_all")
    layers = list(acts_d)
    n = images.shape[0]
    vs_pat = np.empty((n, len(layers)))
    vs_clean = np.empty((n, len(layers)))
    for j, li in enumerate(layers):
        map_d = feature_map(acts_d[li].data[0], dynamic_range)
        w = _window_for(map_d.shape, window)
        for i in range(n):
            map_p = feature_map(acts_p[li].data[i], dynamic_range)
            map_x = feature_map(acts_x[li].data[i], dynamic_range)
            vs_pat[i, j] = ssim(map_p, map_d, w, dynamic_range)
            vs_clean[i, j] = ssim(map_p, map_x, w, dynamic_range)
    return SampleTrace(layers, vs_pat, vs_clean)


def layer_trace(model: Model, pattern: DominantPattern, x: np.ndarray, window: int = 7,
                dynamic_range: float = 1.0, clamp: bool | None = None) -> SampleTrace:
    """Per-ReLU SSIM of features(delta + x) against features(delta) and features(x).

    Layers whose maps are smaller than ``window`` use the largest odd window
    that fits; flat (fully-connected) activations are treated as 1×F maps.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != model.spec.input_shape or pattern.shape != model.spec.input_shape:
        raise T.ShapeError(f"image {x.shape} / pattern {pattern.shape} do not match "
                           f"model input {model.spec.input_shape}")
    tr = _trace_batch(model.detached(), pattern.delta, x[None], window, dynamic_range,
                      _clamp_flag(pattern, clamp))
    return SampleTrace(tr.layer_indices, tr.ssim_vs_pattern[0], tr.ssim_vs_clean[0])


@dataclass
class LayerTrace:
    layer_indices: list[int]
    ssim_vs_pattern_mean: list[float]
    ssim_vs_pattern_std: list[float]
    ssim_vs_clean_mean: list[float]
    ssim_vs_clean_std: list[float]
    sample_count: int = 0

    def __post_init__(self):
        self.layer_indices = [int(i) for i in self.layer_indices]
        for name in ("ssim_vs_pattern_mean", "ssim_vs_pattern_std",
                     "ssim_vs_clean_mean", "ssim_vs_clean_std"):
            setattr(self, name, [float(v) for v in getattr(self, name)])
        n = len(self.layer_indices)
        series = (self.ssim_vs_pattern_mean, self.ssim_vs_pattern_std,
                  self.ssim_vs_clean_mean, self.ssim_vs_clean_std)
        if any(len(s) != n for s in series):
            raise ValueError("trace series lengths differ")
        for s in (self.ssim_vs_pattern_mean, self.ssim_vs_clean_mean):
            if any(not -1 - 1e-9 <= v <= 1 + 1e-9 for v in s):
                raise ValueError("SSIM means must lie in [-1, 1]")

    def trend(self) -> float:
        """Spearman correlation of layer position against mean SSIM to the pattern."""
        return spearman(range(len(self.layer_indices)), self.ssim_vs_pattern_mean)

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "layer_indices": list(self.layer_indices),
            "ssim_vs_pattern_mean": list(self.ssim_vs_pattern_mean),
            "ssim_vs_pattern_std": list(self.ssim_vs_pattern_std),
            "ssim_vs_clean_mean": list(self.ssim_vs_clean_mean),
            "ssim_vs_clean_std": list(self.ssim_vs_clean_std),
        }

    def rows(self) -> list[list]:
        return [[li, pm, ps, cm, cs] for li, pm, ps, cm, cs in
                zip(self.layer_indices, self.ssim_vs_pattern_mean, self.ssim_vs_pattern_std,
                    self.ssim_vs_clean_mean, self.ssim_vs_clean_std)]


TRACE_COLUMNS = ["layer_index", "ssim_vs_pattern_mean", "ssim_vs_pattern_std",
                 "ssim_vs_clean_mean", "ssim_vs_clean_std"]


def spearman(x, y) -> float:
    x, y = np.asarray(list(x), float), np.asarray(list(y), float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(spearmanr(x, y).statistic)


def aggregate_trace(model: Model, pattern: DominantPattern, test: Dataset, window: int = 7,
                    dynamic_range: float = 1.0, clamp: bool | None = None,
                    batch_size: int = 128) -> LayerTrace:
    """Mean and (population) std of both SSIM series over every test image."""
    _check(model, pattern, test)
    net = model.detached()
    flag = _clamp_flag(pattern, clamp)
    parts = [_trace_batch(net, pattern.delta, test.images[s:s + batch_size], window,
                          dynamic_range, flag)
             for s in range(0, len(test), batch_size)]
    vp = np.concatenate([p.ssim_vs_pattern for p in parts])
    vc = np.concatenate([p.ssim_vs_clean for p in parts])
    return LayerTrace(parts[0].layer_indices, vp.mean(0).tolist(), vp.std(0).tolist(),
                      vc.mean(0).tolist(), vc.std(0).tolist(), len(test))


# ---------------------------------------------------------------- report emission

def _fmt(obj, level: int = 0) -> str:
    pad = "  " * (level + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fmt(v, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * level + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_fmt(v, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _fmt(v, level + 1) for v in obj) + "\n" + "  " * level + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError(f"cannot emit non-finite value {obj}")
        return f"{float(obj):.6f}"
    return json.dumps(str(obj))


def to_json(obj) -> str:
    """JSON text with keys in the given order and reals fixed at 6 decimals."""
    return _fmt(obj) + "\n"


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out.append((key, " ".join(_cell(x) for x in v)))
        else:
            out.append((key, v))
    return out


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def emit_report(obj, path: str | Path, fmt: str = "json", meta: dict | None = None) -> None:
    """Write a report or trace as JSON or CSV.

    JSON carries ``meta`` (tool version, effective config) ahead of the fields.
    CSV for a :class:`LayerTrace` has one row per layer under a header; other
    reports become ``field,value`` rows, with ``meta.*`` rows first.
    """
    if fmt not in ("json", "csv"):
        raise ValueError("format must be 'json' or 'csv'")
    body = obj.to_dict() if hasattr(obj, "to_dict") else dict(obj)
    path = Path(path)
    if fmt == "json":
        doc = {"meta": meta, **body} if meta is not None else body
        path.write_text(to_json(doc))
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(obj, LayerTrace):
            w.writerow(TRACE_COLUMNS)
            for row in obj.rows():
                w.writerow([_cell(v) for v in row])
        else:
            w.writerow(["field", "value"])
            doc = {"meta": meta, **body} if meta is not None else body
            for key, value in _flatten(doc):
                w.writerow([key, _cell(value)])
