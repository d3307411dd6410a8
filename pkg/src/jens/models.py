"""Classifier architectures: a ReLU MLP and a LeNet-5 variant.

Parameters are kept as an ordered list of float64 arrays (weight, bias per
layer). :func:`forward_logits` evaluates a model either on its own arrays or
on caller-supplied graph leaves, which is how training differentiates through
the parameters.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes
from .autodiff import Tensor, ops

MAGIC = b"JENS"
FORMAT_VERSION = 1

# (filters, kernel) for the two convolution stages, then dense widths
LENET_CONV = ((6, 5), (16, 5))
LENET_DENSE = (120, 84)
POOL = 2


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    tag: str = "mlp"
    input_dim: int = 784
    class_count: int = 10
    hidden: tuple[int, ...] = (256, 128)
    image_shape: tuple[int, int, int] = (1, 28, 28)

    def __post_init__(self):
        if self.tag not in ("mlp", "lenet"):
            raise ValueError(f"unknown architecture {self.tag!r}")
        if self.input_dim < 1 or self.class_count < 2:
            raise ValueError("need input_dim >= 1 and class_count >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.tag == "lenet":
            c, h, w = self.image_shape
            if c * h * w != self.input_dim:
                raise ValueError(f"image_shape {self.image_shape} does not match input_dim {self.input_dim}")
            for _, k in LENET_CONV:
                h, w = h - k + 1, w - k + 1
                if h < 1 or w < 1 or h % POOL or w % POOL:
                    raise ValueError(f"image_shape {self.image_shape} too small for LeNet")
                h, w = h // POOL, w // POOL

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.tag == "mlp":
            widths = [self.input_dim, *self.hidden, self.class_count]
            shapes: list[tuple[int, ...]] = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                shapes += [(fan_in, fan_out), (fan_out,)]
            return shapes
        c, h, w = self.image_shape
        shapes = []
        for filters, k in LENET_CONV:
            shapes += [(filters, c, k, k), (filters,)]
            c, h, w = filters, (h - k + 1) // POOL, (w - k + 1) // POOL
        widths = [c * h * w, *LENET_DENSE, self.class_count]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))


def lenet(class_count: int = 10, image_shape=(1, 28, 28)) -> ArchSpec:
    return ArchSpec("lenet", int(np.prod(image_shape)), class_count, (), tuple(image_shape))


def mlp(input_dim: int = 784, hidden=(256, 128), class_count: int = 10) -> ArchSpec:
    return ArchSpec("mlp", input_dim, class_count, tuple(hidden))


@dataclass
class ModelParams:
    arch: ArchSpec
    params: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if len(shapes) != len(self.params):
            raise ValueError(f"expected {len(shapes)} parameter arrays, got {len(self.params)}")
        arrays = []
        for want, p in zip(shapes, self.params):
            p = np.asarray(p, dtype=np.float64)
            if p.shape != want:
                raise ValueError(f"parameter shape {p.shape} does not match {want}")
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite parameter")
            arrays.append(p)
        self.params = arrays

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def class_count(self) -> int:
        return self.arch.class_count

    def with_params(self, params: Sequence[np.ndarray]) -> ModelParams:
        return ModelParams(self.arch, [np.array(p, dtype=np.float64) for p in params])

    def copy(self) -> ModelParams:
        return self.with_params(self.params)

    def __call__(self, batch) -> Tensor:
        return forward_logits(self, batch)


def init_params(spec: ArchSpec, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
            continue
        if len(shape) == 4:
            out_c, in_c, kh, kw = shape
            fan_in, fan_out = in_c * kh * kw, out_c * kh * kw
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=shape))
    return ModelParams(spec, params)


def forward_logits(model: ModelParams, batch, params: Sequence[Tensor] | None = None) -> Tensor:
    """Logits of shape ``(B, C)`` for a ``(B, D)`` batch.

    ``params`` optionally replaces the model's own arrays (e.g. with graph
    leaves during training).
    """
    p = list(model.params) if params is None else list(params)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input_dim {model.input_dim}")
    arch = model.arch
    if arch.tag == "mlp":
        n_layers = len(p) // 2
        h = x
        for i in range(n_layers):
            h = ops.add(ops.matmul(h, p[2 * i]), p[2 * i + 1])
            if i < n_layers - 1:
                h = ops.relu(h)
        return h

    h = ops.reshape(x, (x.shape[0], *arch.image_shape))
    for i in range(len(LENET_CONV)):
        w, b = p[2 * i], p[2 * i + 1]
        n_filters = w.shape[0]
        h = ops.add(ops.conv2d(h, w), ops.reshape(b, (n_filters, 1, 1)))
        h = ops.avgpool2d(ops.relu(h), POOL)
    h = ops.flatten(h)
    dense = p[2 * len(LENET_CONV):]
    n_dense = len(dense) // 2
    for i in range(n_dense):
        h = ops.add(ops.matmul(h, dense[2 * i]), dense[2 * i + 1])
        if i < n_dense - 1:
            h = ops.relu(h)
    return h


def argmax_labels(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(np.atleast_2d(arr), axis=1)


def predict(model: ModelParams, batch, chunk: int = 1000) -> np.ndarray:
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    out = [argmax_labels(forward_logits(model, x[i:i + chunk])) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


# ---------------------------------------------------------------- persistence

def model_to_bytes(model: ModelParams) -> bytes:
    arch = model.arch
    tag = arch.tag.encode("ascii")
    head = [MAGIC, struct.pack("<HB", FORMAT_VERSION, len(tag)), tag]
    head.append(struct.pack("<II", arch.input_dim, arch.class_count))
    head.append(struct.pack("<B", len(arch.image_shape)))
    head.append(struct.pack(f"<{len(arch.image_shape)}I", *arch.image_shape))
    head.append(struct.pack("<H", len(arch.hidden)))
    head.append(struct.pack(f"<{len(arch.hidden)}I", *arch.hidden))
    head.append(struct.pack("<I", len(model.params)))
    for p in model.params:
        head.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
    body = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params]
    return b"".join(head + body)


def model_from_bytes(raw: bytes) -> ModelParams:
    if raw[:4] != MAGIC:
        raise ModelFormatError("bad magic bytes")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ModelFormatError("truncated model file")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, tag_len = take("<HB")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    tag = raw[pos:pos + tag_len].decode("ascii")
    pos += tag_len
    input_dim, class_count = take("<II")
    (n_img,) = take("<B")
    image_shape = take(f"<{n_img}I")
    (n_hidden,) = take("<H")
    hidden = take(f"<{n_hidden}I")
    (n_arrays,) = take("<I")
    shapes = []
    for _ in range(n_arrays):
        (ndim,) = take("<B")
        shapes.append(take(f"<{ndim}I"))
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        if pos + 8 * n > len(raw):
            raise ModelFormatError("truncated parameter payload")
        params.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(raw):
        raise ModelFormatError("trailing bytes after parameter payload")
    arch = ArchSpec(tag, input_dim, class_count, tuple(hidden), tuple(image_shape))
    return ModelParams(arch, params)


def save_model(path, model: ModelParams) -> Path:
    return atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
