"""Small differentiable networks with exact analytic gradients.

Parameters are stored as float32; every forward/backward pass promotes to
float64 internally so reductions accumulate at double precision. Layers hold
no per-call state, which keeps ``forward``/``grad_input`` safe to call from
several threads on one network.

Arrays follow the usual numpy convention: a single sample has shape
``net.input_shape``; a batch has a leading sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "avgpool")


class Layer:
    kind: str = ""

    def __init__(self, params=(), hyperparams=()):
        self.params = [np.ascontiguousarray(p, dtype=np.float32) for p in params]
        self.hyperparams = tuple(int(h) for h in hyperparams)

    def output_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Return ``(y, cache)`` for a float64 batch ``x``."""
        raise NotImplementedError

    def backward(self, grad_out, cache):
        """Return ``(grad_in, param_grads)``; param grads are summed over the batch."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}{self.hyperparams}"

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.hyperparams == other.hyperparams
            and len(self.params) == len(other.params)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                    for a, b in zip(self.params, other.params))
        )

    __hash__ = None


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, weight=None, bias=None):
        if weight is None:
            weight = np.zeros((out_features, in_features), np.float32)
        if bias is None:
            bias = np.zeros(out_features, np.float32)
        super().__init__([weight, bias], (in_features, out_features))
        if self.params[0].shape != (out_features, in_features) or self.params[1].shape != (out_features,):
            raise ShapeError(f"dense parameters do not match {in_features}->{out_features}")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.hyperparams[0],):
            raise ShapeError(f"dense expects ({self.hyperparams[0]},), got {tuple(in_shape)}")
        return (self.hyperparams[1],)

    def forward(self, x):
        w, b = (p.astype(np.float64) for p in self.params)
        return x @ w.T + b, (x, w)

    def backward(self, grad_out, cache):
        x, w = cache
        return grad_out @ w, [grad_out.T @ x, grad_out.sum(axis=0)]


class Conv2D(Layer):
    """Valid-padding 2-d convolution over ``(channels, height, width)`` inputs.

    Hyperparameters are ``(in_channels, in_height, in_width, out_channels,
    kernel, stride)``; recording the input size lets a serialized network
    recover its input shape.
    """

    kind = "conv2d"

    def __init__(self, in_channels, in_height, in_width, out_channels, kernel, stride=1,
                 weight=None, bias=None):
        if stride < 1:
            raise ShapeError("conv2d stride must be >= 1")
        if kernel < 1 or kernel > in_height or kernel > in_width:
            raise ShapeError(f"kernel {kernel} does not fit a {in_height}x{in_width} input")
        if weight is None:
            weight = np.zeros((out_channels, in_channels, kernel, kernel), np.float32)
        if bias is None:
            bias = np.zeros(out_channels, np.float32)
        super().__init__([weight, bias],
                         (in_channels, in_height, in_width, out_channels, kernel, stride))
        if self.params[0].shape != (out_channels, in_channels, kernel, kernel):
            raise ShapeError("conv2d weight shape mismatch")
        if self.params[1].shape != (out_channels,):
            raise ShapeError("conv2d bias shape mismatch")

    def _out_hw(self):
        _, h, w, _, k, s = self.hyperparams
        return (h - k) // s + 1, (w - k) // s + 1

    def output_shape(self, in_shape):
        c, h, w, o = self.hyperparams[:4]
        if tuple(in_shape) != (c, h, w):
            raise ShapeError(f"conv2d expects {(c, h, w)}, got {tuple(in_shape)}")
        return (o, *self._out_hw())

    def forward(self, x):
        k, s = self.hyperparams[4:]
        ho, wo = self._out_hw()
        w, b = (p.astype(np.float64) for p in self.params)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        # (N, Ho, Wo, O)
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, win, w)

    def backward(self, grad_out, cache):
        x_shape, win, w = cache
        k, s = self.hyperparams[4:]
        ho, wo = self._out_hw()
        gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad_out.sum(axis=(0, 2, 3))
        gx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                # (N, O, Ho, Wo) x (O, C) -> (N, Ho, Wo, C)
                contrib = np.tensordot(grad_out, w[:, :, i, j], axes=([1], [0]))
                gx[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        return gx, [gw, gb]


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad_out, cache):
        return np.where(cache, grad_out, 0.0), []


class Flatten(Layer):
    """Flattens a fixed input shape, which is kept as the hyperparameters."""

    kind = "flatten"

    def __init__(self, *in_shape):
        super().__init__((), in_shape)

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.hyperparams:
            raise ShapeError(f"flatten expects {self.hyperparams}, got {tuple(in_shape)}")
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache), []


class AvgPool(Layer):
    """Non-overlapping ``size x size`` mean pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "avgpool"

    def __init__(self, size):
        if size < 1:
            raise ShapeError("avgpool size must be >= 1")
        super().__init__((), (size,))

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("avgpool expects (channels, height, width)")
        c, h, w = in_shape
        s = self.hyperparams[0]
        if h < s or w < s:
            raise ShapeError(f"pool window {s} does not fit {h}x{w}")
        return (c, h // s, w // s)

    def forward(self, x):
        s = self.hyperparams[0]
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        y = x[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, grad_out, cache):
        s = self.hyperparams[0]
        n, c, h, w = cache
        ho, wo = grad_out.shape[2:]
        gx = np.zeros(cache)
        up = np.repeat(np.repeat(grad_out, s, axis=2), s, axis=3) / (s * s)
        gx[:, :, : ho * s, : wo * s] = up
        return gx, []


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, AvgPool)}


def make_layer(kind, hyperparams, params):
    """Rebuild a layer from its kind tag, hyperparameters and parameter tensors."""
    if kind not in LAYER_TYPES:
        raise ShapeError(f"unknown layer kind {kind!r}")
    hp = tuple(hyperparams)
    if kind == "dense":
        return Dense(*hp, weight=params[0], bias=params[1])
    if kind == "conv2d":
        return Conv2D(*hp, weight=params[0], bias=params[1])
    if kind == "flatten":
        return Flatten(*hp)
    if kind == "avgpool":
        return AvgPool(*hp)
    return ReLU()


@dataclass
class Network:
    layers: list
    input_shape: tuple
    num_classes: int
    arch: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network produces {shape}, expected ({self.num_classes},)")

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def copy(self):
        layers = [make_layer(l.kind, l.hyperparams, [p.copy() for p in l.params]) for l in self.layers]
        return Network(layers, self.input_shape, self.num_classes, self.arch)


def _as_batch(net, x):
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None].astype(np.float64), True
    if x.ndim == len(net.input_shape) + 1 and x.shape[1:] == net.input_shape:
        return x.astype(np.float64), False
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def _forward(net, xb):
    caches = []
    h = xb
    for layer in net.layers:
        h, cache = layer.forward(h)
        caches.append(cache)
    return h, caches


def _backward(net, grad, caches):
    param_grads = []
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        grad, pg = layer.backward(grad, cache)
        param_grads.append(pg)
    flat = [g for pg in reversed(param_grads) for g in pg]
    return grad, flat


def forward(net: Network, x) -> np.ndarray:
    """Logits (float64) for one sample, or a ``(N, num_classes)`` array for a batch."""
    xb, single = _as_batch(net, x)
    if not np.isfinite(xb).all():
        raise DomainError("input contains non-finite values")
    logits, _ = _forward(net, xb)
    return logits[0] if single else logits


def predict(net: Network, x) -> np.ndarray:
    """Argmax class; ties go to the lowest class index."""
    return np.argmax(forward(net, x), axis=-1)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DomainError("softmax of empty logits")
    if not np.isfinite(z).all():
        raise DomainError("softmax of non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= num_classes).any():
        raise DomainError(f"label(s) {labels} outside [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``; per-sample losses when ``logits`` is 2-d."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DomainError("cross entropy of empty logits")
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.broadcast_to(_check_labels(label, z2.shape[1]), (z2.shape[0],))
    loss = -_log_softmax(z2)[np.arange(z2.shape[0]), y]
    return float(loss[0]) if single else loss


def _loss_grad(logits, y):
    # d CE / d logits = softmax - onehot
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    return g


def grad_input(net: Network, x, label) -> np.ndarray:
    """Gradient of each sample's own cross-entropy loss with respect to its input."""
    xb, single = _as_batch(net, x)
    y = np.broadcast_to(_check_labels(label, net.num_classes), (xb.shape[0],))
    logits, caches = _forward(net, xb)
    gx, _ = _backward(net, _loss_grad(logits, y), caches)
    return gx[0] if single else gx


def loss_and_param_grads(net: Network, x, label):
    """Mean batch loss and its gradient for every tensor in ``net.parameters()``."""
    xb, _ = _as_batch(net, x)
    y = np.broadcast_to(_check_labels(label, net.num_classes), (xb.shape[0],))
    logits, caches = _forward(net, xb)
    n = xb.shape[0]
    loss = float(-_log_softmax(logits)[np.arange(n), y].mean())
    _, grads = _backward(net, _loss_grad(logits, y) / n, caches)
    return loss, grads


def grad_params(net: Network, x, label) -> list[np.ndarray]:
    """Gradient of the batch-mean loss, one array per parameter tensor."""
    return loss_and_param_grads(net, x, label)[1]
