"""Layer stacks, parameter initialization, and checkpoint persistence.

Two desk-scale architectures are provided: a one-hidden-layer MLP and a
LeNet-style CNN.  Checkpoints are a small binary container: magic ``ARLB``,
little-endian u32 version, u64 header length, UTF-8 JSON header, then the
raw float32 parameter blob in declaration order.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .kernels import DimensionError, conv_output_size

CHECKPOINT_MAGIC = b"ARLB"
CHECKPOINT_VERSION = 1


class ModelBuildError(ValueError):
    """Layer specs that do not chain shape-consistently."""


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | maxpool2d | flatten
    units: int = 0
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0

    _DEFAULTS = {"units": 0, "filters": 0, "kernel": 0, "stride": 1,
                 "padding": 0, "pool": 0}

    def to_dict(self):
        d = {"kind": self.kind}
        for key, default in self._DEFAULTS.items():
            v = getattr(self, key)
            if v != default:
                d[key] = v
        return d

    @staticmethod
    def from_dict(d):
        return LayerSpec(**d)


def mlp_spec(hidden=256):
    return [LayerSpec("flatten"),
            LayerSpec("dense", units=hidden),
            LayerSpec("relu"),
            LayerSpec("dense", units=0)]  # final units filled with class count


def lenet_spec():
    return [LayerSpec("conv2d", filters=32, kernel=5, stride=1, padding=2),
            LayerSpec("relu"),
            LayerSpec("maxpool2d", pool=2),
            LayerSpec("conv2d", filters=64, kernel=5, stride=1, padding=2),
            LayerSpec("relu"),
            LayerSpec("maxpool2d", pool=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=1024),
            LayerSpec("relu"),
            LayerSpec("dense", units=0)]


def architecture_spec(name):
    if name == "mlp":
        return mlp_spec()
    if name == "cnn":
        return lenet_spec()
    raise ValueError(f"unknown architecture {name!r} (expected 'mlp' or 'cnn')")


@dataclass
class Model:
    layers: list
    params: dict  # name -> np.ndarray (float32)
    input_shape: tuple
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def param_tensors(self, requires_grad=False, dtype=None):
        return {name: T.Tensor(arr, requires_grad=requires_grad, dtype=dtype)
                for name, arr in self.params.items()}


def _trace_shapes(layers, input_shape, n_classes):
    """Yield (index, layer, in_shape, out_shape); validates the chain."""
    shape = tuple(input_shape)
    resolved = []
    for i, layer in enumerate(layers):
        spec = layer
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ModelBuildError(
                    f"layer {i} (dense) follows output of shape {shape}; "
                    "flatten first")
            units = spec.units or n_classes
            spec = LayerSpec("dense", units=units)
            out = (units,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ModelBuildError(
                    f"layer {i} (conv2d) needs C,H,W input, got {shape}")
            c, h, w = shape
            if spec.kernel > h + 2 * spec.padding or spec.kernel > w + 2 * spec.padding:
                raise ModelBuildError(
                    f"layer {i} (conv2d) kernel {spec.kernel} exceeds padded input {shape}")
            out = (spec.filters,
                   conv_output_size(h, spec.kernel, spec.stride, spec.padding),
                   conv_output_size(w, spec.kernel, spec.stride, spec.padding))
        elif spec.kind == "relu":
            out = shape
        elif spec.kind == "maxpool2d":
            if len(shape) != 3 or shape[1] % spec.pool or shape[2] % spec.pool:
                raise ModelBuildError(
                    f"layer {i} (maxpool2d, pool={spec.pool}) cannot tile {shape}")
            out = (shape[0], shape[1] // spec.pool, shape[2] // spec.pool)
        elif spec.kind == "flatten":
            out = (int(np.prod(shape)),)
        else:
            raise ModelBuildError(f"layer {i}: unknown kind {spec.kind!r}")
        resolved.append((i, spec, shape, out))
        shape = out
    if shape != (n_classes,):
        raise ModelBuildError(
            f"final output shape {shape} does not match class count {n_classes}")
    return resolved


def init_params(layers, input_shape, n_classes, seed):
    """He-scaled weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    resolved = _trace_shapes(layers, input_shape, n_classes)
    params = {}
    final_layers = []
    for i, spec, in_shape, _ in resolved:
        final_layers.append(spec)
        if spec.kind == "dense":
            fan_in = in_shape[0]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(fan_in, spec.units)).astype(np.float32)
            params[f"{i:02d}_dense/W"] = w
            params[f"{i:02d}_dense/b"] = np.zeros(spec.units, dtype=np.float32)
        elif spec.kind == "conv2d":
            c = in_shape[0]
            fan_in = c * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(spec.filters, c, spec.kernel, spec.kernel))
            params[f"{i:02d}_conv2d/W"] = w.astype(np.float32)
            params[f"{i:02d}_conv2d/b"] = np.zeros(spec.filters, dtype=np.float32)
    return Model(final_layers, params, tuple(input_shape), n_classes)


def forward_logits(model, batch, param_tensors=None):
    """Forward pass to pre-softmax logits.

    ``batch`` may be an array or a Tensor (with ``requires_grad`` for input
    gradients).  ``param_tensors`` lets the trainer thread differentiable
    parameters through; by default parameters are constants.
    """
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"batch shape {x.shape} does not match model input {model.input_shape}")
    dtype = x.dtype
    if param_tensors is None:
        param_tensors = model.param_tensors(dtype=dtype)
    for i, spec in enumerate(model.layers):
        if spec.kind == "dense":
            w = param_tensors[f"{i:02d}_dense/W"]
            b = param_tensors[f"{i:02d}_dense/b"]
            x = T.add(T.matmul(x, w), b)
        elif spec.kind == "conv2d":
            w = param_tensors[f"{i:02d}_conv2d/W"]
            b = param_tensors[f"{i:02d}_conv2d/b"]
            x = T.conv2d(x, w, stride=spec.stride, pad=spec.padding)
            x = T.add(x, T.reshape(b, (1, -1, 1, 1)))
        elif spec.kind == "relu":
            x = T.relu(x)
        elif spec.kind == "maxpool2d":
            x = T.maxpool2d(x, spec.pool)
        elif spec.kind == "flatten":
            x = T.reshape(x, (x.shape[0], -1))
    return x


def predict(model, batch):
    return forward_logits(model, batch).data.argmax(axis=1)


def input_gradient(model, batch, labels, targeted=False):
    """Gradient of the summed cross-entropy w.r.t. the input batch.

    ``labels`` are true labels (loss maximized by attacks) or target labels
    when ``targeted``; the sign convention is left to the caller.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.n_classes:
        raise T.ContractError(
            f"label out of range for {model.n_classes} classes")
    x = T.Tensor(np.asarray(batch), requires_grad=True)
    logits = forward_logits(model, x)
    loss = T.tsum(T.sub(T.logsumexp(logits, axis=1),
                        T.gather_rows(logits, labels)))
    T.backward(loss)
    return x.grad


def save_checkpoint(model, metadata, path):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layers": [spec.to_dict() for spec in model.layers],
        "input_shape": list(model.input_shape),
        "classes": model.n_classes,
        "params": [{"name": n, "shape": list(a.shape)}
                   for n, a in model.params.items()],
        "metadata": dict(metadata),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r} in {path}")
    version, = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} in {path}")
    hlen, = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + hlen:
        raise CheckpointTruncatedError(f"truncated header in {path}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    blob = raw[16 + hlen:]
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(
                f"truncated blob in {path} at parameter {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", offset=offset,
                            count=int(np.prod(shape))).reshape(shape)
        params[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointTruncatedError(
            f"blob in {path} has {len(blob) - offset} trailing bytes")
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = Model(layers, params, tuple(header["input_shape"]),
                  header["classes"], metadata=dict(header["metadata"]))
    for i, spec, in_shape, _ in _trace_shapes(layers, model.input_shape,
                                              model.n_classes):
        if spec.kind == "dense":
            if params[f"{i:02d}_dense/W"].shape != (in_shape[0], spec.units or model.n_classes):
                raise CheckpointShapeError(
                    f"parameter {i:02d}_dense/W shape disagrees with layer spec")
        elif spec.kind == "conv2d":
            want = (spec.filters, in_shape[0], spec.kernel, spec.kernel)
            if params[f"{i:02d}_conv2d/W"].shape != want:
                raise CheckpointShapeError(
                    f"parameter {i:02d}_conv2d/W shape disagrees with layer spec")
    return model
