"""Untargeted L-infinity attacks on a surrogate: FGSM, PGD and momentum PGD.

All three share one float32 update loop, so FGSM is bitwise identical to a
single PGD step of size epsilon without a random start. Inputs are clipped
to [0, 1] after every step.

Adversarial-set file layout (little-endian)::

    b"TADV", u32 version
    u8 kind tag, f64 epsilon, u32 steps, f64 step_size, u8 random_start,
    f64 mu, i64 seed, u32 example count
    per example: u32 sample_index, u16 label, u32 rank, u32 * rank dims,
                 f32 payload (the perturbation only)
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffnet
from .data import Dataset, EvalSet
from .errors import (
    BadMagicError,
    ConfigError,
    InvariantError,
    PersistenceError,
    TruncatedFileError,
    UsageError,
    VersionMismatchError,
)

KINDS = ("fgsm", "pgd", "momentum")
BALL_TOL = 1e-6
ADV_MAGIC = b"TADV"
ADV_VERSION = 1
CHUNK = 256


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters; ``step_size=None`` means epsilon/4 (epsilon for FGSM)."""

    kind: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    mu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.kind == "fgsm":
            if self.steps != 1 or self.random_start:
                raise ConfigError("fgsm takes exactly one step and no random start")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.step_size is None:
            default = self.epsilon if self.kind == "fgsm" else self.epsilon / 4
            object.__setattr__(self, "step_size", default)
        if not 0 < self.step_size <= self.epsilon:
            raise ConfigError("step_size must lie in (0, epsilon]")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def fgsm(cls, epsilon, seed=0):
        return cls("fgsm", epsilon, steps=1, step_size=epsilon, random_start=False, seed=seed)

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon, "steps": self.steps,
                "step_size": self.step_size, "random_start": self.random_start,
                "mu": self.mu, "seed": self.seed}


@dataclass(eq=False)
class AdversarialExample:
    sample_index: int
    clean: np.ndarray
    delta: np.ndarray
    label: int
    config: AttackConfig
    surrogate_fooled: bool | None = field(default=None)

    @property
    def adversarial(self) -> np.ndarray:
        return np.clip(self.clean + self.delta, 0.0, 1.0)


def stack(examples):
    """``(adversarial inputs, clean inputs, labels)`` arrays for a list of examples."""
    if not examples:
        raise UsageError("no adversarial examples")
    adv = np.stack([e.adversarial for e in examples])
    clean = np.stack([e.clean for e in examples])
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return adv, clean, labels


def _random_start(shape, eps, seeds):
    return np.stack([
        np.random.default_rng(s).uniform(-eps, eps, size=shape).astype(np.float32) for s in seeds
    ])


def _perturb(net, x, y, cfg, seeds, history=None):
    """Batched attack loop; ``x`` is float32 ``(N, *input_shape)``. Returns the perturbations."""
    eps = np.float32(cfg.epsilon)
    step = np.float32(cfg.step_size)
    if cfg.random_start:
        delta = _random_start(x.shape[1:], cfg.epsilon, seeds)
    else:
        delta = np.zeros_like(x)
    delta = np.clip(x + delta, 0, 1) - x
    accum = np.zeros(x.shape, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.steps):
        g = diffnet.grad_input(net, np.clip(x + delta, 0, 1), y)
        if cfg.kind == "momentum":
            l1 = np.abs(g).sum(axis=axes, keepdims=True)
            g = np.where(l1 >= 1e-12, g / np.where(l1 >= 1e-12, l1, 1.0), g)
            accum = cfg.mu * accum + g
            direction = np.sign(accum)
        else:
            direction = np.sign(g)
        delta = np.clip(delta + step * direction.astype(np.float32), -eps, eps)
        delta = np.clip(x + delta, 0, 1) - x
        if history is not None:
            history.append((delta.copy(), accum.copy()))
    return delta


def _check_ball(x, delta, eps):
    if np.abs(delta).max(initial=0.0) > eps + BALL_TOL:
        raise InvariantError(f"perturbation {np.abs(delta).max()} exceeds budget {eps}")
    adv = np.clip(x + delta, 0, 1)
    if adv.min(initial=0.0) < 0 or adv.max(initial=0.0) > 1:
        raise InvariantError("adversarial input left [0, 1]")


def _single(kind, net, x, y, cfg, sample_index=0, history=None):
    if cfg.kind != kind:
        raise ConfigError(f"{kind} called with a {cfg.kind} config")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != net.input_shape:
        raise diffnet.ShapeError(f"input shape {x.shape} does not match {net.input_shape}")
    delta = _perturb(net, x[None], np.array([y]), cfg, [cfg.seed], history)[0]
    _check_ball(x, delta, cfg.epsilon)
    adv = np.clip(x + delta, 0, 1)
    fooled = bool(diffnet.predict(net, adv) != y)
    return AdversarialExample(sample_index, x, delta, int(y), cfg, fooled)


def fgsm(net, x, y, cfg: AttackConfig) -> AdversarialExample:
    return _single("fgsm", net, x, y, cfg)


def pgd(net, x, y, cfg: AttackConfig) -> AdversarialExample:
    """PGD with an optional uniform random start seeded by ``cfg.seed``."""
    return _single("pgd", net, x, y, cfg)


def momentum_pgd(net, x, y, cfg: AttackConfig, history=None) -> AdversarialExample:
    """PGD driven by an L1-normalized gradient accumulator.

    If ``history`` is a list, ``(delta, accumulator)`` is appended after
    every step.
    """
    return _single("momentum", net, x, y, cfg, history=history)


def attack_batch(net, inputs, labels, cfg: AttackConfig, seeds):
    """Perturbations for a whole batch with one seed per row; checks the budget."""
    x = np.asarray(inputs, dtype=np.float32)
    delta = _perturb(net, x, np.asarray(labels), cfg, seeds)
    _check_ball(x, delta, cfg.epsilon)
    return delta


def attack_dataset(net, samples, cfg: AttackConfig, workers=1) -> list[AdversarialExample]:
    """Attack every sample; example ``i`` uses seed ``cfg.seed + i``.

    ``samples`` may be a :class:`Dataset` or an :class:`EvalSet`; for the
    latter, ``sample_index`` refers to the dataset the set was filtered from.
    Work is split into fixed-size chunks, so results do not depend on
    ``workers``.
    """
    if isinstance(samples, EvalSet):
        ds, source_idx = samples.base, samples.indices
    elif isinstance(samples, Dataset):
        ds, source_idx = samples, np.arange(len(samples))
    else:
        raise UsageError("attack_dataset expects a Dataset or EvalSet")
    n = len(ds)
    if n == 0:
        raise UsageError("nothing to attack")
    starts = list(range(0, n, CHUNK))

    def run(start):
        sl = slice(start, start + CHUNK)
        seeds = [cfg.seed + i for i in range(start, min(start + CHUNK, n))]
        return attack_batch(net, ds.inputs[sl], ds.labels[sl], cfg, seeds)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            deltas = list(pool.map(run, starts))
    else:
        deltas = [run(s) for s in starts]
    delta = np.concatenate(deltas)
    adv = np.clip(ds.inputs + delta, 0, 1)
    fooled = diffnet.predict(net, adv) != ds.labels
    return [
        AdversarialExample(int(source_idx[i]), ds.inputs[i], delta[i], int(ds.labels[i]), cfg, bool(fooled[i]))
        for i in range(n)
    ]


def fooling_rate(examples) -> float:
    return float(np.mean([e.surrogate_fooled for e in examples]))


def with_seed(cfg: AttackConfig, seed) -> AttackConfig:
    return replace(cfg, seed=seed)


def to_bytes(cfg: AttackConfig, examples) -> bytes:
    out = [ADV_MAGIC, struct.pack("<I", ADV_VERSION),
           struct.pack("<BdIdBdqI", KINDS.index(cfg.kind), cfg.epsilon, cfg.steps, cfg.step_size,
                       int(cfg.random_start), cfg.mu, cfg.seed, len(examples))]
    for e in examples:
        d = np.asarray(e.delta, dtype="<f4")
        out.append(struct.pack(f"<IHI{d.ndim}I", e.sample_index, e.label, d.ndim, *d.shape))
        out.append(d.tobytes())
    return b"".join(out)


def from_bytes(raw: bytes):
    """Parse an adversarial-set file into ``(config, [(sample_index, label, delta), ...])``."""
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedFileError(f"adversarial file truncated at offset {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    if len(raw) < 4:
        raise TruncatedFileError("file shorter than magic")
    if raw[:4] != ADV_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {ADV_MAGIC!r}")
    pos = 4
    (version,) = take("<I")
    if version != ADV_VERSION:
        raise VersionMismatchError(f"adversarial file version {version}, expected {ADV_VERSION}")
    tag, eps, steps, step_size, rs, mu, seed, count = take("<BdIdBdqI")
    if tag >= len(KINDS):
        raise PersistenceError(f"unknown attack tag {tag}")
    try:
        cfg = AttackConfig(KINDS[tag], eps, steps, step_size, bool(rs), mu, seed)
    except ConfigError as exc:
        raise PersistenceError(f"stored attack config is invalid: {exc}") from exc
    records = []
    for _ in range(count):
        idx, label, rank = take("<IHI")
        dims = take(f"<{rank}I")
        (payload,) = take(f"<{4 * int(np.prod(dims))}s")
        records.append((idx, label, np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)))
    if pos != len(raw):
        raise PersistenceError(f"{len(raw) - pos} trailing bytes")
    return cfg, records


def save(path, cfg: AttackConfig, examples):
    Path(path).write_bytes(to_bytes(cfg, examples))


def load(path, dataset: Dataset, surrogate=None):
    """Reload a saved set, resolving clean inputs from ``dataset`` by sample index.

    The surrogate, if given, is used to recompute ``surrogate_fooled``.
    """
    cfg, records = from_bytes(Path(path).read_bytes())
    examples = []
    for idx, label, delta in records:
        if idx >= len(dataset) or dataset.labels[idx] != label:
            raise PersistenceError(f"sample {idx} does not resolve against the given dataset")
        examples.append(AdversarialExample(idx, dataset.inputs[idx], delta, label, cfg))
    if surrogate is not None and examples:
        adv, _, labels = stack(examples)
        fooled = diffnet.predict(surrogate, adv) != labels
        for e, f in zip(examples, fooled):
            e.surrogate_fooled = bool(f)
    return cfg, examples
