"""Layer-stack models with activation taps and a backbone/head split.

A model is described by a :class:`ModelSpec` (pure data, JSON-serializable) and
materialized by :func:`build_model` into a :class:`Model` holding parameter
tensors. Images enter in raw pixel units; a leading ``normalize`` layer owns the
preprocessing so perturbations and images share one space.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from ._binio import Reader, FormatError, pack_header, pack_json
from .tensor import Tensor

MODEL_MAGIC = b"DPFM"
MODEL_VERSION = 1

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "linear", "normalize")
TAP_MODES = ("none", "relu_all", "backbone_out")


class SpecError(ValueError):
    """A model spec whose layer shapes do not compose."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        prefix = f"layer {index}: " if index is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    in_features: int | None = None
    out_features: int | None = None
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def conv(cls, in_channels: int, out_channels: int, kernel: int,
             stride: int = 1, pad: int = 0) -> LayerSpec:
        return cls("conv", in_channels=in_channels, out_channels=out_channels,
                   kernel=kernel, stride=stride, pad=pad)

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls("relu")

    @classmethod
    def maxpool(cls, kernel: int, stride: int | None = None) -> LayerSpec:
        return cls("maxpool", kernel=kernel, stride=kernel if stride is None else stride)

    @classmethod
    def flatten(cls) -> LayerSpec:
        return cls("flatten")

    @classmethod
    def linear(cls, in_features: int, out_features: int) -> LayerSpec:
        return cls("linear", in_features=in_features, out_features=out_features)

    @classmethod
    def normalize(cls, mean: Sequence[float], std: Sequence[float]) -> LayerSpec:
        return cls("normalize", mean=tuple(float(m) for m in mean),
                   std=tuple(float(s) for s in std))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        for key in ("mean", "std"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"bad layer record {d}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    backbone_end: int
    input_shape: tuple[int, int, int]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (sample axis omitted); raises SpecError."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be C×H×W positive, got {self.input_shape}")
        if self.class_count < 1:
            raise SpecError("class_count must be positive")
        if not 0 < self.backbone_end < len(self.layers):
            raise SpecError(f"backbone_end {self.backbone_end} outside (0, {len(self.layers)})")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output(i, layer, shape)
            out.append(shape)
        if shape != (self.class_count,):
            raise SpecError(f"final output shape {shape} != ({self.class_count},)",
                            len(self.layers) - 1)
        return out

    @property
    def relu_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "relu"]

    def to_dict(self) -> dict:
        return {
            "backbone_end": self.backbone_end,
            "class_count": self.class_count,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        try:
            return cls(layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                       backbone_end=int(d["backbone_end"]),
                       input_shape=tuple(d["input_shape"]),
                       class_count=int(d["class_count"]))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from None


def _layer_output(i: int, layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("normalize", "conv", "maxpool", "flatten") and len(shape) != 3:
        raise SpecError(f"{kind} needs a C×H×W input, got {shape}", i)
    if kind == "normalize":
        if layer.mean is None or layer.std is None:
            raise SpecError("normalize needs mean and std", i)
        if len(layer.mean) != shape[0] or len(layer.std) != shape[0]:
            raise SpecError(f"normalize has {len(layer.mean)} channels, input has {shape[0]}", i)
        if min(layer.std) <= 0:
            raise SpecError("normalize std must be positive", i)
        return shape
    if kind == "conv":
        c, h, w = shape
        if layer.in_channels != c:
            raise SpecError(f"conv in_channels {layer.in_channels} != input channels {c}", i)
        k, s, p = layer.kernel, layer.stride or 1, layer.pad or 0
        if not k or k < 1 or not layer.out_channels:
            raise SpecError("conv needs kernel and out_channels", i)
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if k > h + 2 * p or k > w + 2 * p or ho < 1 or wo < 1:
            raise SpecError(f"conv kernel {k} too large for {h}x{w} (pad {p})", i)
        return (layer.out_channels, ho, wo)
    if kind == "relu":
        return shape
    if kind == "maxpool":
        c, h, w = shape
        k, s = layer.kernel, layer.stride or layer.kernel
        if not k or k > h or k > w:
            raise SpecError(f"maxpool window {k} larger than {h}x{w}", i)
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1:
            raise SpecError(f"linear needs a flat input, got {shape}", i)
        if layer.in_features != shape[0]:
            raise SpecError(f"linear in_features {layer.in_features} != incoming {shape[0]}", i)
        if not layer.out_features:
            raise SpecError("linear needs out_features", i)
        return (layer.out_features,)
    raise SpecError(f"unknown kind {kind}", i)  # pragma: no cover


def reference_spec(input_shape: Sequence[int] = (3, 32, 32), class_count: int = 10,
                   widths: Sequence[int] = (16, 32, 32), hidden: int = 64,
                   mean: Sequence[float] | None = None,
                   std: Sequence[float] | None = None) -> ModelSpec:
    """The desk-scale reference CNN.

    normalize, three conv3x3+ReLU blocks with 2x2 max-pools after the first two,
    flatten, then linear-ReLU-linear. The backbone ends at the flatten layer, so
    there are four ReLU taps (three in the backbone, one in the head).
    """
    c, h, w = input_shape
    mean = mean if mean is not None else [127.5] * c
    std = std if std is not None else [64.0] * c
    w1, w2, w3 = widths
    layers = [
        LayerSpec.normalize(mean, std),
        LayerSpec.conv(c, w1, 3, pad=1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.conv(w1, w2, 3, pad=1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.conv(w2, w3, 3, pad=1), LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.linear(w3 * (h // 4) * (w // 4), hidden), LayerSpec.relu(),
        LayerSpec.linear(hidden, class_count),
    ]
    return ModelSpec(tuple(layers), backbone_end=9, input_shape=(c, h, w),
                     class_count=class_count)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)[0]

    @property
    def backbone_param_names(self) -> list[str]:
        return [n for n in self.params if int(n.split(".")[0]) < self.spec.backbone_end]

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Model:
        return Model(self.spec, {n: Tensor(p.data, requires_grad=p.requires_grad)
                                 for n, p in self.params.items()}, set(self.frozen))

    def detached(self) -> Model:
        """A view sharing parameter arrays but tracking no gradients."""
        return Model(self.spec, {n: Tensor._wrap(p.data) for n, p in self.params.items()},
                     set(self.frozen))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _init_layer(i: int, layer: LayerSpec, rng: np.random.Generator,
                dtype: np.dtype) -> dict[str, Tensor]:
    # He/Kaiming uniform on fan-in, zero biases
    if layer.kind == "conv":
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        bias = layer.out_channels
    elif layer.kind == "linear":
        fan_in = layer.in_features
        shape = (layer.out_features, layer.in_features)
        bias = layer.out_features
    else:
        return {}
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return {f"{i}.weight": Tensor._wrap(w, True),
            f"{i}.bias": Tensor._wrap(np.zeros(bias, dtype=dtype), True)}


def init_layer_params(spec: ModelSpec, index: int, seed: int) -> dict[str, Tensor]:
    """Fresh parameters for one layer, drawn from a stream keyed by (seed, index)."""
    rng = np.random.default_rng([seed, index])
    return _init_layer(index, spec.layers[index], rng, T.default_dtype())


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    spec.shapes()
    params: dict[str, Tensor] = {}
    for i in range(len(spec.layers)):
        params.update(init_layer_params(spec, i, seed))
    return Model(spec, params)


def _as_batch(batch) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    return Tensor(np.asarray(batch))


def _run_layer(model: Model, i: int, layer: LayerSpec, x: Tensor) -> Tensor:
    kind = layer.kind
    if kind == "normalize":
        std = np.asarray(layer.std, dtype=np.float64)
        mean = np.asarray(layer.mean, dtype=np.float64)
        return T.channel_affine(x, 1.0 / std, -mean / std)
    if kind == "conv":
        p = model.params
        return T.conv2d(x, p[f"{i}.weight"], p[f"{i}.bias"], layer.stride or 1, layer.pad or 0)
    if kind == "relu":
        return T.relu(x)
    if kind == "maxpool":
        return T.maxpool2d(x, layer.kernel, layer.stride or layer.kernel)
    if kind == "flatten":
        return T.flatten(x)
    if kind == "linear":
        p = model.params
        return T.bias_add(T.matmul(x, T.transpose(p[f"{i}.weight"])), p[f"{i}.bias"])
    raise SpecError(f"unknown kind {kind}", i)  # pragma: no cover


def _check_input(model: Model, x: Tensor) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise T.ShapeError(f"batch shape {x.shape} does not match model input "
                           f"N×{'×'.join(map(str, model.spec.input_shape))}")


def forward(model: Model, batch, taps: str = "none") -> tuple[Tensor, dict[int, Tensor]]:
    """Run the model on an N×C×H×W batch of raw-pixel images.

    Returns the pre-softmax logits and an ordered map from layer index to the
    activations requested by ``taps``: nothing, every ReLU output, or the last
    backbone layer's output.
    """
    if taps not in TAP_MODES:
        raise ValueError(f"taps must be one of {TAP_MODES}")
    x = _as_batch(batch)
    _check_input(model, x)
    acts: dict[int, Tensor] = {}
    last_backbone = model.spec.backbone_end - 1
    for i, layer in enumerate(model.spec.layers):
        x = _run_layer(model, i, layer, x)
        if taps == "relu_all" and layer.kind == "relu":
            acts[i] = x
        elif taps == "backbone_out" and i == last_backbone:
            acts[i] = x
    return x, acts


def backbone_features(model: Model, batch) -> Tensor:
    """Output of the last backbone layer, without running the head."""
    x = _as_batch(batch)
    _check_input(model, x)
    for i in range(model.spec.backbone_end):
        x = _run_layer(model, i, model.spec.layers[i], x)
    return x


def predict(model: Model, images, batch_size: int = 256, workers: int = 1) -> np.ndarray:
    """Argmax class per image (lowest index on ties), evaluated in chunks.

    With ``workers > 1`` chunks run on a thread pool; results are reassembled in
    input order, so the output does not depend on scheduling.
    """
    images = np.asarray(images, dtype=np.float32)
    net = model.detached()

    def run(start: int) -> np.ndarray:
        with T.no_grad():
            return np.argmax(forward(net, images[start:start + batch_size])[0].data, axis=1)

    starts = range(0, images.shape[0], batch_size)
    if workers > 1 and len(starts) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(run, starts))
    else:
        out = [run(s) for s in starts]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def freeze_backbone(model: Model) -> Model:
    model.frozen.update(model.backbone_param_names)
    return model


def backbone_hash(model: Model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.backbone_param_names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- persistence

def model_bytes(model: Model) -> bytes:
    head = {"frozen": sorted(model.frozen), "spec": model.spec.to_dict()}
    parts = [pack_header(MODEL_MAGIC, MODEL_VERSION), pack_json(head),
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def model_fingerprint(model: Model) -> str:
    """SHA-256 of the serialized model; equals the hash of its saved file."""
    return hashlib.sha256(model_bytes(model)).hexdigest()


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(model))


def model_from_bytes(buf: bytes) -> Model:
    r = Reader(buf)
    r.header(MODEL_MAGIC, MODEL_VERSION)
    head = r.json_blob("spec")
    try:
        spec = ModelSpec.from_dict(head["spec"])
        frozen = set(head.get("frozen", []))
        expected = build_model_shapes(spec)
    except (KeyError, TypeError, SpecError) as exc:
        raise FormatError(f"corrupt spec: {exc}") from None
    count = r.u32("parameter count")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u16("name length"), "parameter name").decode("utf-8")
        ndim = r.u8("rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4")
        params[name] = Tensor._wrap(data.astype(np.float32).reshape(shape), True)
    if not r.exhausted:
        raise FormatError("trailing bytes after parameter data")
    model = Model(spec, params, frozen)
    if expected != {n: p.shape for n, p in params.items()}:
        raise FormatError("parameter set does not match spec")
    return model


def build_model_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    spec.shapes()
    out = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            out[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            out[f"{i}.bias"] = (layer.out_channels,)
        elif layer.kind == "linear":
            out[f"{i}.weight"] = (layer.out_features, layer.in_features)
            out[f"{i}.bias"] = (layer.out_features,)
    return out


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def load_spec(path: str | Path) -> ModelSpec:
    """Read a model spec from JSON, or return the reference spec for ``"reference"``."""
    if str(path) == "reference":
        return reference_spec()
    return ModelSpec.from_dict(json.loads(Path(path).read_text()))
