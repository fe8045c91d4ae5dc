"""Network representation and inference.

Layers are plain dataclasses holding float64 numpy arrays; a Network is an
ordered, immutable sequence of them. The forward pass runs in inference
semantics (BatchNorm uses running statistics, dropout is a no-op) and can
capture post-activation values at declared capture points. Models serialize
to a JSON manifest plus a little-endian float32 weight blob.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ShapeMismatch

MODEL_MAGIC = "SPNM1"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# layer types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray = None  # (out_features,) or None for a bias-free layer

    kind = "dense"


@dataclass(frozen=True)
class Conv2D:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0

    kind = "conv2d"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    kind = "batchnorm"


@dataclass(frozen=True)
class MaxPool2:
    """2x2 max pooling with stride 2 (the only pooling supported)."""

    kind = "maxpool2"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dropout:
    """Marker layer: Bernoulli masking during training, identity at inference."""

    rate: float = 0.5

    kind = "dropout"


@dataclass(frozen=True)
class ActivationBatch:
    """Post-activation values at one capture point, one variable per column.

    For conv captures each spatial position of each image is one row and the
    channels are the columns; for dense captures rows are plain samples.
    """

    layer: int
    samples: np.ndarray


def _f64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


def _normalized(layer):
    """Coerce array fields to contiguous float64 and sanity-check shapes."""
    if isinstance(layer, Dense):
        w = _f64(layer.weight)
        b = None if layer.bias is None else _f64(layer.bias)
        if w.ndim != 2 or (b is not None and b.shape != (w.shape[0],)):
            raise ShapeMismatch(f"dense weight {w.shape} / bias "
                                f"{None if b is None else b.shape}")
        return Dense(w, b)
    if isinstance(layer, Conv2D):
        w, b = _f64(layer.weight), _f64(layer.bias)
        if w.ndim != 4 or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv weight {w.shape} / bias {b.shape}")
        if layer.stride < 1 or layer.padding < 0:
            raise ValueError("bad stride/padding")
        return Conv2D(w, b, int(layer.stride), int(layer.padding))
    if isinstance(layer, BatchNorm):
        arrs = [_f64(getattr(layer, f)) for f in
                ("scale", "shift", "running_mean", "running_var")]
        c = arrs[0].shape
        if any(a.shape != c for a in arrs):
            raise ShapeMismatch("batchnorm parameter shapes disagree")
        if np.any(arrs[3] <= 0):
            raise ValueError("batchnorm running variance must be positive")
        return BatchNorm(*arrs, eps=float(layer.eps), momentum=float(layer.momentum))
    return layer


@dataclass(frozen=True)
class Network:
    """Immutable network: layers, input shape, and capture-point indices.

    Capture points must index ReLU layers (activations are captured
    immediately after the nonlinearity). Construction dry-runs the forward
    pass on a zero batch so shape errors surface early.
    """

    layers: tuple
    input_shape: tuple
    capture_points: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(_normalized(l) for l in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "capture_points", tuple(int(c) for c in self.capture_points))
        for cp in self.capture_points:
            if not (0 <= cp < len(self.layers)) or not isinstance(self.layers[cp], ReLU):
                raise ValueError(f"capture point {cp} does not follow an activation")
        forward(self, np.zeros((1,) + self.input_shape))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def conv2d_windows(x, kh, kw, stride, padding):
    """Strided view of all (kh, kw) patches: (n, c, oh, ow, kh, kw)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, stride * sh, stride * sw, sh, sw)
    return np.lib.stride_tricks.as_strided(x, shape, strides), (oh, ow)


def apply_layer(layer, x, index=None):
    """Inference-mode application of one layer to a batch."""
    if isinstance(layer, Dense):
        if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeMismatch(f"dense expects (n, {layer.weight.shape[1]}), got {x.shape}",
                                layer=index)
        out = x @ layer.weight.T
        return out if layer.bias is None else out + layer.bias
    if isinstance(layer, Conv2D):
        oc, ic, kh, kw = layer.weight.shape
        if x.ndim != 4 or x.shape[1] != ic:
            raise ShapeMismatch(f"conv expects (n, {ic}, h, w), got {x.shape}", layer=index)
        if x.shape[2] + 2 * layer.padding < kh or x.shape[3] + 2 * layer.padding < kw:
            raise ShapeMismatch(f"input {x.shape} smaller than kernel", layer=index)
        windows, _ = conv2d_windows(x, kh, kw, layer.stride, layer.padding)
        out = np.einsum("nihwkl,oikl->nohw", windows, layer.weight, optimize=True)
        return out + layer.bias[None, :, None, None]
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, BatchNorm):
        c = layer.scale.shape[0]
        if x.shape[1] != c:
            raise ShapeMismatch(f"batchnorm over {c} channels, got {x.shape}", layer=index)
        shape = (1, c) + (1,) * (x.ndim - 2)
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        return (x - layer.running_mean.reshape(shape)) * (layer.scale * inv).reshape(shape) \
            + layer.shift.reshape(shape)
    if isinstance(layer, MaxPool2):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"maxpool2 needs even spatial dims, got {x.shape}", layer=index)
        return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, Dropout):
        return x
    raise TypeError(f"unknown layer type {type(layer)!r}")


def capture_rows(x):
    """Flatten a captured activation tensor to (rows, variables).

    Conv maps each spatial position of each image to one row over channel
    columns; dense activations pass through unchanged.
    """
    if x.ndim == 2:
        return x
    if x.ndim == 4:
        n, c, h, w = x.shape
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    raise ShapeMismatch(f"cannot capture activations of shape {x.shape}")


def forward(net, batch, capture=()):
    """Run the network on a batch, returning (logits, captured activations).

    `capture` is an iterable of capture-point ids; captured activations are
    post-activation and are returned in network order.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape[1:]} != input shape {net.input_shape}")
    wanted = set(capture)
    captured = []
    for i, layer in enumerate(net.layers):
        x = apply_layer(layer, x, index=i)
        if i in wanted:
            captured.append(ActivationBatch(layer=i, samples=capture_rows(x)))
    return x, captured


def layer_widths(net):
    """Node count (dense width or conv channel count) at each capture point."""
    widths = {}
    for cp in net.capture_points:
        widths[cp] = _feeding_layer(net, cp)[1].weight.shape[0]
    return widths


def _feeding_layer(net, cp):
    """The Dense/Conv layer whose (normalized, activated) output is captured at cp."""
    for i in range(cp, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, (Dense, Conv2D)):
            return i, layer
        if not isinstance(layer, (ReLU, BatchNorm)):
            break
    raise ShapeMismatch(f"capture point {cp} has no feeding Dense/Conv layer")


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def count_params(net):
    """Exact element count of weights and biases (BatchNorm scale/shift included,
    running statistics excluded)."""
    total = 0
    for layer in net.layers:
        if isinstance(layer, (Dense, Conv2D)):
            total += layer.weight.size + (0 if layer.bias is None else layer.bias.size)
        elif isinstance(layer, BatchNorm):
            total += layer.scale.size + layer.shift.size
    return total


def count_flops(net):
    """Multiply-accumulate count of Dense/Conv forward passes for one sample."""
    shape = net.input_shape
    total = 0
    for layer in net.layers:
        if isinstance(layer, Dense):
            total += layer.weight.size
            shape = (layer.weight.shape[0],)
        elif isinstance(layer, Conv2D):
            oc, ic, kh, kw = layer.weight.shape
            oh = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
            ow = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
            total += oc * ic * kh * kw * oh * ow
            shape = (oc, oh, ow)
        elif isinstance(layer, MaxPool2):
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
    return total


# ---------------------------------------------------------------------------
# serialization: JSON manifest + little-endian float32 blob
# ---------------------------------------------------------------------------

_TENSOR_FIELDS = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm": ("scale", "shift", "running_mean", "running_var"),
}


def tensor_fields(layer):
    """Names of the layer's stored tensors (skips an absent dense bias)."""
    return tuple(n for n in _TENSOR_FIELDS.get(layer.kind, ())
                 if getattr(layer, n) is not None)


def _layer_manifest(layer):
    if isinstance(layer, Dense):
        return {"kind": "dense", "out_features": layer.weight.shape[0],
                "in_features": layer.weight.shape[1],
                "has_bias": layer.bias is not None}
    if isinstance(layer, Conv2D):
        oc, ic, kh, kw = layer.weight.shape
        return {"kind": "conv2d", "out_channels": oc, "in_channels": ic,
                "kernel": [kh, kw], "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, BatchNorm):
        return {"kind": "batchnorm", "channels": layer.scale.shape[0],
                "eps": layer.eps, "momentum": layer.momentum}
    if isinstance(layer, Dropout):
        return {"kind": "dropout", "rate": layer.rate}
    return {"kind": layer.kind}


def save_model(net, path):
    """Write model.json and weights.bin into the directory `path`."""
    os.makedirs(path, exist_ok=True)
    tensors, chunks = [], []
    for i, layer in enumerate(net.layers):
        for name in tensor_fields(layer):
            arr = getattr(layer, name)
            tensors.append({"layer": i, "name": name, "shape": list(arr.shape)})
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "magic": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "input_shape": list(net.input_shape),
        "capture_points": list(net.capture_points),
        "layers": [_layer_manifest(l) for l in net.layers],
        "tensors": tensors,
    }
    with open(os.path.join(path, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        fh.write(b"".join(chunks))


def _build_layer(spec, arrays):
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(arrays["weight"], arrays.get("bias"))
    if kind == "conv2d":
        return Conv2D(arrays["weight"], arrays["bias"],
                      stride=int(spec["stride"]), padding=int(spec["padding"]))
    if kind == "batchnorm":
        return BatchNorm(arrays["scale"], arrays["shift"],
                         arrays["running_mean"], arrays["running_var"],
                         eps=float(spec["eps"]), momentum=float(spec["momentum"]))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool2":
        return MaxPool2()
    if kind == "flatten":
        return Flatten()
    if kind == "dropout":
        return Dropout(rate=float(spec["rate"]))
    raise FormatError(f"unknown layer kind {kind!r}")


def load_model(path):
    """Load a model directory written by save_model."""
    try:
        with open(os.path.join(path, "model.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("magic") != MODEL_MAGIC:
        raise FormatError(f"bad magic {manifest.get('magic')!r}")
    if manifest.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported version {manifest.get('version')!r}")
    with open(os.path.join(path, "weights.bin"), "rb") as fh:
        blob = fh.read()
    expected = sum(int(np.prod(t["shape"])) for t in manifest["tensors"]) * 4
    if len(blob) != expected:
        raise FormatError(f"blob is {len(blob)} bytes, manifest implies {expected}")
    per_layer = {}
    offset = 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) * 4
        arr = np.frombuffer(blob[offset:offset + size], dtype="<f4").reshape(t["shape"])
        per_layer.setdefault(t["layer"], {})[t["name"]] = arr.astype(np.float64)
        offset += size
    layers = [_build_layer(spec, per_layer.get(i, {}))
              for i, spec in enumerate(manifest["layers"])]
    try:
        return Network(tuple(layers), tuple(manifest["input_shape"]),
                       tuple(manifest["capture_points"]))
    except (ShapeMismatch, ValueError, KeyError) as exc:
        raise FormatError(f"inconsistent model: {exc}") from exc


def with_layers(net, new_layers):
    """Copy of the network with the given layer list (revalidates shapes)."""
    return replace(net, layers=tuple(new_layers))
