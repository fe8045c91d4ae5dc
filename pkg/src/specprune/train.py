"""Minimal training engine: backprop for Dense/Conv2D/BatchNorm/ReLU/MaxPool2,
softmax cross-entropy, SGD and Adam, with layer freezing and seeded shuffling.

Training is single-threaded and reproducible: identical (net, data, cfg) give
identical final weights on one platform. Frozen layers keep their original
arrays (bit-identical) and run in inference mode during training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import net as nm
from .errors import Diverged, ShapeMismatch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 50
    epochs: int = 10
    freeze: frozenset = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad learning_rate/batch_size/epochs")
        object.__setattr__(self, "freeze", frozenset(int(i) for i in self.freeze))


_TRAINABLE = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm": ("scale", "shift"),
}
_BUFFERS = {"batchnorm": ("running_mean", "running_var")}


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    rows = np.arange(n)
    loss = float((logsum[rows, 0] - z[rows, labels]).mean())
    grad = np.exp(z - logsum)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# mutable parameter state
# ---------------------------------------------------------------------------

def _init_state(network, freeze):
    """Arrays for every layer; copies for trainable layers, references for frozen."""
    state = {}
    for i, layer in enumerate(network.layers):
        names = _TRAINABLE.get(layer.kind, ()) + _BUFFERS.get(layer.kind, ())
        names = tuple(n for n in names if getattr(layer, n, None) is not None)
        if not names:
            continue
        frozen = i in freeze
        state[i] = {name: (getattr(layer, name) if frozen else getattr(layer, name).copy())
                    for name in names}
    return state


def _rebuild(network, state):
    import dataclasses
    layers = []
    for i, layer in enumerate(network.layers):
        if i in state:
            layers.append(dataclasses.replace(layer, **state[i]))
        else:
            layers.append(layer)
    return nm.with_layers(network, layers)


# ---------------------------------------------------------------------------
# training-mode forward/backward
# ---------------------------------------------------------------------------

def _forward_train(network, state, x, rng, freeze, update_buffers=True):
    """Forward pass with per-layer caches for backprop.

    Frozen layers run in inference mode (BatchNorm uses running statistics,
    dropout is identity). rng=None disables dropout everywhere.
    """
    caches = []
    for i, layer in enumerate(network.layers):
        p = state.get(i, {})
        if isinstance(layer, nm.Dense):
            caches.append(("dense", i, x))
            x = x @ p["weight"].T
            if "bias" in p:
                x = x + p["bias"]
        elif isinstance(layer, nm.Conv2D):
            oc, ic, kh, kw = layer.weight.shape
            if x.shape[1] != ic:
                raise ShapeMismatch(f"conv expects {ic} channels, got {x.shape}", layer=i)
            windows, _ = nm.conv2d_windows(x, kh, kw, layer.stride, layer.padding)
            caches.append(("conv", i, (windows, x.shape)))
            x = np.einsum("nihwkl,oikl->nohw", windows, p["weight"], optimize=True) \
                + p["bias"][None, :, None, None]
        elif isinstance(layer, nm.ReLU):
            mask = x > 0
            caches.append(("relu", i, mask))
            x = np.where(mask, x, 0.0)
        elif isinstance(layer, nm.BatchNorm):
            c = layer.scale.shape[0]
            shape = (1, c) + (1,) * (x.ndim - 2)
            axes = (0,) if x.ndim == 2 else (0, 2, 3)
            if i in freeze:
                inv = 1.0 / np.sqrt(p["running_var"] + layer.eps)
                xhat = (x - p["running_mean"].reshape(shape)) * inv.reshape(shape)
                caches.append(("bn_frozen", i, (xhat, inv)))
            else:
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                inv = 1.0 / np.sqrt(var + layer.eps)
                xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
                if update_buffers:
                    mom = layer.momentum
                    p["running_mean"] *= 1.0 - mom
                    p["running_mean"] += mom * mu
                    p["running_var"] *= 1.0 - mom
                    p["running_var"] += mom * var
                caches.append(("bn", i, (xhat, inv)))
            x = xhat * p["scale"].reshape(shape) + p["shift"].reshape(shape)
        elif isinstance(layer, nm.MaxPool2):
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(n, c, h // 2, w // 2, 4)
            idx = win.argmax(axis=-1)
            caches.append(("pool", i, (idx, x.shape)))
            x = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, nm.Flatten):
            caches.append(("flatten", i, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, nm.Dropout):
            if rng is None or i in freeze or layer.rate <= 0.0:
                caches.append(("noop", i, None))
            else:
                keep = 1.0 - layer.rate
                mask = (rng.random(x.shape) < keep) / keep
                caches.append(("dropout", i, mask))
                x = x * mask
        else:
            raise TypeError(f"unknown layer type {type(layer)!r}")
    return x, caches


def _backward(network, state, caches, dout, freeze):
    """Backprop through cached layers; returns {(layer, name): grad} for
    trainable, unfrozen parameters."""
    grads = {}
    for kind, i, cache in reversed(caches):
        layer = network.layers[i]
        p = state.get(i, {})
        if kind == "dense":
            x = cache
            if i not in freeze:
                grads[(i, "weight")] = dout.T @ x
                if "bias" in p:
                    grads[(i, "bias")] = dout.sum(axis=0)
            dout = dout @ p["weight"]
        elif kind == "conv":
            windows, x_shape = cache
            oc, ic, kh, kw = layer.weight.shape
            if i not in freeze:
                grads[(i, "weight")] = np.einsum("nihwkl,nohw->oikl", windows, dout,
                                                 optimize=True)
                grads[(i, "bias")] = dout.sum(axis=(0, 2, 3))
            n, _, h, w = x_shape
            pad, s = layer.padding, layer.stride
            oh, ow = dout.shape[2], dout.shape[3]
            dxp = np.zeros((n, ic, h + 2 * pad, w + 2 * pad))
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += np.einsum(
                        "nohw,oi->nihw", dout, p["weight"][:, :, ki, kj], optimize=True)
            dout = dxp[:, :, pad:pad + h, pad:pad + w]
        elif kind == "relu":
            dout = np.where(cache, dout, 0.0)
        elif kind in ("bn", "bn_frozen"):
            xhat, inv = cache
            c = layer.scale.shape[0]
            shape = (1, c) + (1,) * (dout.ndim - 2)
            axes = (0,) if dout.ndim == 2 else (0, 2, 3)
            if i not in freeze:
                grads[(i, "scale")] = (dout * xhat).sum(axis=axes)
                grads[(i, "shift")] = dout.sum(axis=axes)
            dxhat = dout * p["scale"].reshape(shape)
            if kind == "bn_frozen":
                dout = dxhat * inv.reshape(shape)
            else:
                count = dout.size // c
                sum_d = dxhat.sum(axis=axes).reshape(shape)
                sum_dx = (dxhat * xhat).sum(axis=axes).reshape(shape)
                dout = (dxhat - sum_d / count - xhat * sum_dx / count) * inv.reshape(shape)
        elif kind == "pool":
            idx, x_shape = cache
            n, c, h, w = x_shape
            dwin = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
            dout = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(n, c, h, w)
        elif kind == "flatten":
            dout = dout.reshape(cache)
        elif kind == "dropout":
            dout = dout * cache
        # noop: fall through
    return grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class _Sgd:
    def __init__(self, lr, wd):
        self.lr, self.wd = lr, wd

    def step(self, state, grads):
        for (i, name), g in grads.items():
            w = state[i][name]
            w -= self.lr * (g + self.wd * w)


class _Adam:
    def __init__(self, lr, wd):
        self.lr, self.wd = lr, wd
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, state, grads):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for key, g in grads.items():
            i, name = key
            w = state[i][name]
            g = g + self.wd * w
            m = self.m.setdefault(key, np.zeros_like(w))
            v = self.v.setdefault(key, np.zeros_like(w))
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            w -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _stack(datasets):
    n_classes = {ds.n_classes for ds in datasets}
    if len(n_classes) != 1:
        raise ValueError("datasets disagree on class count")
    feats = np.concatenate([ds.features for ds in datasets], axis=0)
    labels = np.concatenate([ds.labels for ds in datasets], axis=0)
    return feats, labels


def train(network, data, cfg):
    """Train on the concatenated datasets; returns a new network.

    Layer indices in cfg.freeze are left bit-identical and run in inference
    mode. Raises Diverged when the loss becomes non-finite.
    """
    for i in cfg.freeze:
        if not 0 <= i < len(network.layers):
            raise ValueError(f"freeze index {i} out of range")
    feats, labels = _stack(list(data))
    state = _init_state(network, cfg.freeze)
    if cfg.epochs == 0:
        return _rebuild(network, state)
    rng = np.random.default_rng(cfg.seed)
    opt = (_Adam if cfg.optimizer == "adam" else _Sgd)(cfg.learning_rate, cfg.weight_decay)
    n = len(labels)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, caches = _forward_train(network, state, feats[idx], rng, cfg.freeze)
            loss, dlogits = softmax_cross_entropy(logits, labels[idx])
            if not math.isfinite(loss):
                raise Diverged(f"loss became {loss}")
            grads = _backward(network, state, caches, dlogits, cfg.freeze)
            opt.step(state, grads)
    return _rebuild(network, state)


def evaluate(network, ds, batch_size=512):
    """Fraction of argmax-correct predictions (argmax ties go to the lowest class)."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        logits, _ = nm.forward(network, ds.features[start:start + batch_size])
        correct += int((logits.argmax(axis=1) == ds.labels[start:start + batch_size]).sum())
    return correct / len(ds)


def dataset_loss(network, ds, batch_size=512):
    """Mean cross-entropy over a dataset (inference mode)."""
    total = 0.0
    for start in range(0, len(ds), batch_size):
        logits, _ = nm.forward(network, ds.features[start:start + batch_size])
        loss, _ = softmax_cross_entropy(logits, ds.labels[start:start + batch_size])
        total += loss * len(logits)
    return total / len(ds)


def gradients(network, feats, labels):
    """Analytic parameter gradients of the mean cross-entropy on one batch
    (dropout disabled, no buffer updates)."""
    state = _init_state(network, frozenset())
    logits, caches = _forward_train(network, state, feats, None, frozenset(),
                                    update_buffers=False)
    _, dlogits = softmax_cross_entropy(logits, labels)
    return _backward(network, state, caches, dlogits, frozenset())


def grad_check(network, feats, labels, epsilon=1e-3):
    """Max discrepancy between analytic and central-difference gradients,
    relative to the largest gradient magnitude.

    Runs with dropout disabled and BatchNorm in batch-statistics mode without
    buffer updates, so the loss is a deterministic function of the weights.
    Intended for small networks (< 5000 parameters).
    """
    state = _init_state(network, frozenset())
    n_params = sum(state[i][name].size
                   for i in state for name in _TRAINABLE.get(network.layers[i].kind, ())
                   if name in state[i])
    if n_params >= 5000:
        raise ValueError(f"grad_check is for small networks, got {n_params} params")

    def loss_fn():
        logits, caches = _forward_train(network, state, feats, None, frozenset(),
                                        update_buffers=False)
        return softmax_cross_entropy(logits, labels), caches

    (loss, dlogits), caches = loss_fn()
    grads = _backward(network, state, caches, dlogits, frozenset())

    worst = 0.0
    scale = max(max(float(np.max(np.abs(g))) for g in grads.values()), 1e-12)
    for (i, name), g in sorted(grads.items()):
        w = state[i][name]
        flat = w.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            (lp, _), _ = loss_fn()
            flat[k] = orig - epsilon
            (lm, _), _ = loss_fn()
            flat[k] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            worst = max(worst, abs(float(g.reshape(-1)[k]) - numeric) / scale)
    return worst
