"""Declarative layer stacks for the three classifiers, and their interpreter.

A :class:`NetworkSpec` is one or more parallel *paths* (each a tuple of
:class:`LayerSpec`) whose flattened outputs are concatenated and fed to a
shared *head*. Shapes are inferred and checked when the spec is built, so a
spec that exists always chains legally.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .errors import ShapeError, ValidationError
from .tensor import Tensor, as_tensor

N_CLASSES = 8
# fixed class order; ISIC 2019 columns MEL, NV, BCC, AK, BKL, DF, VASC, SCC
CLASS_NAMES = ("MLN", "MCN", "BCC", "AK", "BK", "DF", "VL", "SCC")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 3
    padding: str = "valid"
    key: str = ""
    name: str = ""
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            return {"w": (self.units, self.in_shape[0], self.kernel, self.kernel), "b": (self.units,)}
        if self.kind == "dense":
            return {"w": (self.units, self.in_shape[0]), "b": (self.units,)}
        return {}

    def fans(self) -> tuple[int, int]:
        if self.kind == "conv":
            k2 = self.kernel * self.kernel
            return self.in_shape[0] * k2, self.units * k2
        return self.in_shape[0], self.units


def conv(units: int, kernel: int = 3, padding: str = "valid") -> LayerSpec:
    return LayerSpec("conv", units=units, kernel=kernel, padding=padding)


def dense_layer(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


RELU = LayerSpec("relu")
POOL = LayerSpec("maxpool2")
FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")
SIGMOID = LayerSpec("sigmoid")
UPSAMPLE = LayerSpec("upsample2")


def save(key: str) -> LayerSpec:
    return LayerSpec("save", key=key)


def concat_saved(key: str) -> LayerSpec:
    return LayerSpec("concat_saved", key=key)


def _out_shape(layer: LayerSpec, shape: tuple[int, ...], saved: dict[str, tuple[int, ...]]):
    k = layer.kind
    if k == "conv":
        if len(shape) != 3:
            raise ShapeError(f"{layer.name} input", "[C,H,W]", shape)
        c, h, w = shape
        hh, ww = (h, w) if layer.padding == "same" else (h - layer.kernel + 1, w - layer.kernel + 1)
        if hh < 1 or ww < 1:
            raise ShapeError(f"{layer.name} spatial size", f">= {layer.kernel}", (h, w))
        return (layer.units, hh, ww)
    if k == "maxpool2":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"{layer.name} input", "[C,H>=2,W>=2]", shape)
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if k == "upsample2":
        return (shape[0], shape[1] * 2, shape[2] * 2)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{layer.name} input", "[N]", shape)
        return (layer.units,)
    if k in ("relu", "softmax", "sigmoid", "save"):
        return shape
    if k == "concat_saved":
        other = saved[layer.key]
        if other[1:] != shape[1:]:
            raise ShapeError(f"{layer.name} skip {layer.key!r} spatial dims", shape[1:], other[1:])
        return (shape[0] + other[0],) + shape[1:]
    raise ValidationError(f"unknown layer kind {k!r}")


_SHORT = {"maxpool2": "pool", "upsample2": "up", "concat_saved": "skipcat"}


def _resolve(layers: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> tuple[tuple[LayerSpec, ...], tuple[int, ...]]:
    counts: dict[str, int] = {}
    saved: dict[str, tuple[int, ...]] = {}
    out = []
    shape = tuple(in_shape)
    for layer in layers:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        name = layer.name or f"{_SHORT.get(layer.kind, layer.kind)}{counts[layer.kind]}"
        layer = replace(layer, name=name)
        new_shape = _out_shape(layer, shape, saved)
        if layer.kind == "save":
            saved[layer.key] = shape
        out.append(replace(layer, in_shape=shape, out_shape=new_shape))
        shape = new_shape
    return tuple(out), shape


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shapes: tuple[tuple[int, ...], ...]
    paths: tuple[tuple[LayerSpec, ...], ...]
    head: tuple[LayerSpec, ...] = ()
    task: str = "classify"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.head:
            return self.head[-1].out_shape
        return self.paths[0][-1].out_shape

    def blocks(self):
        """``(prefix, layers)`` pairs in evaluation order."""
        for i, path in enumerate(self.paths, 1):
            yield f"path{i}", path
        if self.head:
            yield "head", self.head

    def param_specs(self) -> dict[str, tuple[LayerSpec, str, tuple[int, ...]]]:
        out = {}
        for prefix, layers in self.blocks():
            for layer in layers:
                for pname, shape in layer.param_shapes().items():
                    out[f"{prefix}.{layer.name}.{pname}"] = (layer, pname, shape)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, _, s in self.param_specs().values())

    def layer(self, block: str, name: str) -> LayerSpec:
        for prefix, layers in self.blocks():
            if prefix == block:
                for layer in layers:
                    if layer.name == name:
                        return layer
        raise KeyError(f"{block}.{name}")

    def summary(self) -> str:
        """Human-readable layer table with output shapes and parameter counts."""
        lines = [f"{self.name}  inputs={' + '.join(str(s) for s in self.input_shapes)}",
                 f"{'layer':<22}{'kind':<14}{'output':<22}{'params':>12}"]
        for prefix, layers in self.blocks():
            if prefix == "head" and len(self.paths) > 1:
                width = sum(p[-1].out_shape[0] for p in self.paths)
                lines.append(f"{'join':<22}{'concat':<14}{str((width,)):<22}{0:>12}")
            for layer in layers:
                n = sum(int(np.prod(s)) for s in layer.param_shapes().values())
                lines.append(f"{prefix + '.' + layer.name:<22}{layer.kind:<14}{str(layer.out_shape):<22}{n:>12,}")
        lines.append(f"total parameters: {self.param_count():,}")
        return "\n".join(lines)


def build_network(name: str, input_shapes, paths, head=(), task: str = "classify", **meta) -> NetworkSpec:
    input_shapes = tuple(tuple(s) for s in input_shapes)
    if len(input_shapes) != len(paths):
        raise ValidationError(f"{len(paths)} paths need {len(paths)} input shapes, got {len(input_shapes)}")
    resolved = []
    ends = []
    for shape, layers in zip(input_shapes, paths):
        r, end = _resolve(layers, shape)
        resolved.append(r)
        ends.append(end)
    head_r: tuple[LayerSpec, ...] = ()
    if head:
        if len(paths) > 1 and any(len(e) != 1 for e in ends):
            raise ShapeError("path outputs before the join", "flat vectors", ends)
        head_r, _ = _resolve(head, (sum(e[0] for e in ends),) if len(paths) > 1 else ends[0])
    spec = NetworkSpec(name, input_shapes, tuple(resolved), head_r, task, dict(meta))
    if task == "classify":
        last = (head_r or resolved[0])[-2:]
        if len(last) != 2 or last[0].kind != "dense" or last[0].units != N_CLASSES or last[1].kind != "softmax":
            raise ValidationError(f"classifier must end in dense({N_CLASSES}) + softmax")
    return spec


# --- the three classifiers ---------------------------------------------------


def build_model1(input_size: int = 512, channels: int = 1) -> NetworkSpec:
    """Grayscale classifier: conv64, pool, conv32, pool, dense32, dense8."""
    path = (conv(64), RELU, POOL, conv(32), RELU, POOL, FLATTEN)
    head = (dense_layer(32), RELU, dense_layer(N_CLASSES), SOFTMAX)
    return build_network("model1", [(channels, input_size, input_size)], [path], head)


def _model2_path() -> tuple[LayerSpec, ...]:
    return (conv(32), RELU, conv(64), RELU, POOL, FLATTEN)


def _model2_head() -> tuple[LayerSpec, ...]:
    return (dense_layer(64), RELU, dense_layer(32), RELU, dense_layer(N_CLASSES), SOFTMAX)


def build_model2_onepath(input_size: int = 256) -> NetworkSpec:
    """Masked colour image in; conv32, conv64, pool, dense64, dense32, dense8."""
    return build_network("model2-onepath", [(3, input_size, input_size)], [_model2_path()], _model2_head())


def build_model2_dualpath(input_size: int = 256) -> NetworkSpec:
    """Original image and 3-channel mask through twin conv stacks, joined at the flatten."""
    shape = (3, input_size, input_size)
    return build_network("model2-dualpath", [shape, shape], [_model2_path(), _model2_path()], _model2_head())


MODEL_BUILDERS = {
    "m1": build_model1,
    "m2-one": build_model2_onepath,
    "m2-dual": build_model2_dualpath,
}
DEFAULT_INPUT_SIZE = {"m1": 512, "m2-one": 256, "m2-dual": 256}
DEFAULT_EPOCHS = {"m1": 20, "m2-one": 2, "m2-dual": 2}


def build_model(name: str, input_size: int | None = None) -> NetworkSpec:
    if name not in MODEL_BUILDERS:
        raise ValidationError(f"unknown model {name!r}; choose from {sorted(MODEL_BUILDERS)}")
    return MODEL_BUILDERS[name](input_size or DEFAULT_INPUT_SIZE[name])


# --- weights and evaluation --------------------------------------------------


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform kernels and zero biases, drawn in parameter order."""
    weights = {}
    for name, (layer, pname, shape) in spec.param_specs().items():
        if pname == "b":
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in, fan_out = layer.fans()
            weights[name] = ops.xavier_uniform_init(shape, fan_in, fan_out, rng).data
    return weights


def _apply(layer: LayerSpec, x: Tensor, params: Mapping[str, Tensor], prefix: str, saved: dict) -> Tensor:
    k = layer.kind
    if k == "conv":
        return ops.conv2d(x, params[f"{prefix}.{layer.name}.w"], params[f"{prefix}.{layer.name}.b"], layer.padding)
    if k == "dense":
        return ops.dense(x, params[f"{prefix}.{layer.name}.w"], params[f"{prefix}.{layer.name}.b"])
    if k == "relu":
        return ops.relu(x)
    if k == "maxpool2":
        return ops.maxpool2d(x)
    if k == "upsample2":
        return ops.upsample2x(x)
    if k == "flatten":
        return ops.flatten(x)
    if k == "softmax":
        return ops.softmax(x)
    if k == "sigmoid":
        return ops.sigmoid(x)
    if k == "save":
        saved[layer.key] = x
        return x
    if k == "concat_saved":
        return ops.channel_concat(x, saved[layer.key])
    raise ValidationError(f"unknown layer kind {k!r}")


def forward(spec: NetworkSpec, weights: Mapping, inputs) -> Tensor:
    """Run the network on one sample or a batch.

    ``inputs`` is a single array/tensor for one-path networks, or a sequence
    with one entry per path. Weights may be arrays or tensors (tensors with
    ``requires_grad`` make the result differentiable).
    """
    if isinstance(inputs, (list, tuple)):
        xs = [as_tensor(x) for x in inputs]
    else:
        xs = [as_tensor(inputs)]
    if len(xs) != len(spec.paths):
        raise ShapeError(f"{spec.name} inputs", len(spec.paths), len(xs))
    params = {k: as_tensor(v) for k, v in weights.items()}

    outs = []
    for i, (x, path, shape) in enumerate(zip(xs, spec.paths, spec.input_shapes), 1):
        got = x.shape[-len(shape):]
        if x.ndim not in (len(shape), len(shape) + 1) or got != shape:
            raise ShapeError(f"{spec.name} path{i} input", shape, x.shape)
        saved: dict = {}
        for layer in path:
            x = _apply(layer, x, params, f"path{i}", saved)
        outs.append(x)
    x = outs[0]
    for other in outs[1:]:
        x = ops.concat(x, other)
    saved = {}
    for layer in spec.head:
        x = _apply(layer, x, params, "head", saved)
    return x


def predict(probabilities) -> np.ndarray:
    """One-hot at the argmax of the last axis; ties go to the lowest index."""
    p = np.asarray(probabilities.data if isinstance(probabilities, Tensor) else probabilities)
    idx = np.argmax(p, axis=-1)
    return np.eye(p.shape[-1], dtype=np.float32)[idx]
