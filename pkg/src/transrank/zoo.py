"""Architecture registry, seeded SGD training, and the ``TRNK`` weight file format.

Weight file layout (all integers little-endian)::

    b"TRNK"                      magic
    u32                          format version
    u16 + utf-8                  architecture name
    i64                          train seed
    f32                          clean test accuracy
    u32                          layer count
    per layer:
        u8                       kind tag
        u32 + u32 * n            hyperparameters
        u32                      parameter tensor count
        per tensor: u32 rank, u32 * rank dims, f32 * prod(dims) payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffnet
from .diffnet import AvgPool, Conv2D, Dense, Flatten, Network, ReLU
from .errors import (
    BadMagicError,
    ConfigError,
    PersistenceError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"TRNK"
FORMAT_VERSION = 1
KIND_TAGS = {"dense": 0, "conv2d": 1, "relu": 2, "flatten": 3, "avgpool": 4}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def _mlp(widths):
    def recipe(input_shape, num_classes):
        d = int(np.prod(input_shape))
        layers = [Flatten(*input_shape)]
        for w in widths:
            layers += [Dense(d, w), ReLU()]
            d = w
        layers.append(Dense(d, num_classes))
        return layers
    return recipe


def _image_shape(input_shape):
    if len(input_shape) != 3:
        raise ConfigError(f"convolutional architectures need (C, H, W) inputs, got {tuple(input_shape)}")
    return input_shape


def _cnn_small(input_shape, num_classes):
    c, h, w = _image_shape(input_shape)
    return [
        Conv2D(c, h, w, 8, 3),
        ReLU(),
        Flatten(8, h - 2, w - 2),
        Dense(8 * (h - 2) * (w - 2), num_classes),
    ]


def _cnn_pool(input_shape, num_classes):
    c, h, w = _image_shape(input_shape)
    ph, pw = (h - 2) // 2, (w - 2) // 2
    return [
        Conv2D(c, h, w, 6, 3),
        ReLU(),
        AvgPool(2),
        Flatten(6, ph, pw),
        Dense(6 * ph * pw, 32),
        ReLU(),
        Dense(32, num_classes),
    ]


ARCHITECTURES = {
    "mlp-narrow": _mlp([16]),
    "mlp-wide": _mlp([128]),
    "mlp-deep": _mlp([32, 32, 32]),
    "cnn-small": _cnn_small,
    "cnn-pool": _cnn_pool,
}


def build(arch, input_shape, num_classes, init_seed) -> Network:
    """Instantiate ``arch`` with weights drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    input_shape = tuple(int(d) for d in input_shape)
    layers = ARCHITECTURES[arch](input_shape, num_classes)
    rng = np.random.default_rng(init_seed)
    for layer in layers:
        if not layer.params:
            continue
        w = layer.params[0]
        bound = 1.0 / np.sqrt(np.prod(w.shape[1:]))
        layer.params = [rng.uniform(-bound, bound, size=p.shape).astype(np.float32)
                        for p in layer.params]
    return Network(layers, input_shape, num_classes, arch=arch)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def evaluate_accuracy(net: Network, inputs, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(diffnet.predict(net, inputs) == np.asarray(labels)))


def train(net: Network, dataset, cfg: TrainConfig):
    """Mini-batch SGD with momentum on a copy of ``net``.

    Returns ``(trained_net, history)`` where ``history`` holds the mean
    training loss of each epoch.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes:
        raise ConfigError("dataset labels exceed the network's class count")
    net = net.copy()
    params = [p.astype(np.float64) for p in net.parameters()]
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = diffnet.loss_and_param_grads(net, dataset.inputs[idx], dataset.labels[idx])
            total += loss * len(idx)
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * v
            _assign(net, params)
        history.append(total / n)
    return net, history


def _assign(net, params):
    it = iter(params)
    for layer in net.layers:
        layer.params = [next(it).astype(np.float32) for _ in layer.params]


@dataclass
class ModelBundle:
    arch: str
    net: Network
    train_seed: int
    clean_test_accuracy: float = field(default=0.0)

    def __post_init__(self):
        # the file stores f32; keep the in-memory value identical
        self.clean_test_accuracy = float(np.float32(self.clean_test_accuracy))
        if not 0.0 <= self.clean_test_accuracy <= 1.0:
            raise ConfigError("clean_test_accuracy must lie in [0, 1]")
        self.net.arch = self.arch


def to_bytes(bundle: ModelBundle) -> bytes:
    name = bundle.arch.encode("utf-8")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<H", len(name)), name,
           struct.pack("<q", bundle.train_seed), struct.pack("<f", bundle.clean_test_accuracy),
           struct.pack("<I", len(bundle.net.layers))]
    for layer in bundle.net.layers:
        hp = layer.hyperparams
        out.append(struct.pack(f"<BI{len(hp)}I", KIND_TAGS[layer.kind], len(hp), *hp))
        out.append(struct.pack("<I", len(layer.params)))
        for p in layer.params:
            out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            out.append(p.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> ModelBundle:
    r = _Reader(raw)
    if len(raw) < 4:
        raise TruncatedFileError("file shorter than magic")
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this reader supports {FORMAT_VERSION}")
    (name_len,) = r.unpack("<H")
    arch = r.take(name_len).decode("utf-8")
    (seed,) = r.unpack("<q")
    (acc,) = r.unpack("<f")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        tag, n_hp = r.unpack("<BI")
        if tag not in _TAG_KINDS:
            raise PersistenceError(f"unknown layer tag {tag}")
        hp = r.unpack(f"<{n_hp}I")
        (n_params,) = r.unpack("<I")
        params = []
        for _ in range(n_params):
            (rank,) = r.unpack("<I")
            dims = r.unpack(f"<{rank}I")
            count = int(np.prod(dims)) if rank else 1
            params.append(np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32))
        try:
            layers.append(diffnet.make_layer(_TAG_KINDS[tag], hp, params))
        except (ValueError, TypeError, IndexError) as exc:
            raise PersistenceError(f"inconsistent layer record: {exc}") from exc
    if r.pos != len(raw):
        raise PersistenceError(f"{len(raw) - r.pos} trailing bytes after last layer")
    if not layers:
        raise PersistenceError("network has no layers")
    try:
        net = Network(layers, _input_shape(layers[0]), _num_classes(layers), arch=arch)
    except ValueError as exc:
        raise PersistenceError(f"layers do not compose: {exc}") from exc
    return ModelBundle(arch, net, seed, acc)


def _input_shape(first):
    if first.kind == "flatten":
        return first.hyperparams
    if first.kind == "conv2d":
        return first.hyperparams[:3]
    if first.kind == "dense":
        return first.hyperparams[:1]
    raise PersistenceError(f"cannot infer input shape from a leading {first.kind} layer")


def _num_classes(layers):
    for layer in reversed(layers):
        if layer.kind == "dense":
            return layer.hyperparams[1]
    raise PersistenceError("network has no dense output layer")


def save(bundle: ModelBundle, path):
    Path(path).write_bytes(to_bytes(bundle))


def load(path) -> ModelBundle:
    return from_bytes(Path(path).read_bytes())
