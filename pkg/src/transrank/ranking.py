"""Transferability scores for adversarial examples and ranking by score.

Every strategy is oriented so that a higher score means the example is more
likely to transfer:

* ``aet``: fraction of the auxiliary ensemble that the example fools.
* ``het``: one minus the ensemble's mean ground-truth softmax confidence.
* ``softmax``: one minus the surrogate's ground-truth confidence on the clean input.
* ``softmax_noise``: mean drop in the surrogate's ground-truth confidence
  under Gaussian input noise, min-max normalized over the scored set.

None of these functions accept the victim model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffnet
from .attacks import stack
from .errors import ConfigError, UsageError

STRATEGIES = ("aet", "het", "softmax", "softmax_noise")
NOISE_STD = 16 / 255
NOISE_DRAWS = 10


@dataclass
class SurrogateEnsemble:
    members: list
    member_arch_names: list | None = None

    def __post_init__(self):
        if not self.members:
            raise ConfigError("surrogate ensemble is empty")
        if self.member_arch_names is None:
            self.member_arch_names = [m.arch for m in self.members]
        if len(self.member_arch_names) != len(self.members):
            raise ConfigError("one architecture name per member is required")

    def __len__(self):
        return len(self.members)

    def __contains__(self, net):
        return any(m is net for m in self.members)


@dataclass(frozen=True)
class RankingScore:
    example_index: int
    score: float
    strategy: str


@dataclass
class RankedSet:
    scores: list
    order: np.ndarray

    @property
    def strategy(self):
        return self.scores[0].strategy if self.scores else None


def truth_confidence(net, inputs, labels) -> np.ndarray:
    p = diffnet.softmax(diffnet.forward(net, inputs))
    return p[np.arange(len(labels)), labels]


def aet_scores(adv_inputs, labels, f0: SurrogateEnsemble) -> np.ndarray:
    labels = np.asarray(labels)
    fooled = [diffnet.predict(m, adv_inputs) != labels for m in f0.members]
    return np.mean(fooled, axis=0)


def het_scores(adv_inputs, labels, f0: SurrogateEnsemble) -> np.ndarray:
    labels = np.asarray(labels)
    conf = [truth_confidence(m, adv_inputs, labels) for m in f0.members]
    return 1.0 - np.mean(conf, axis=0)


def softmax_scores(clean_inputs, labels, surrogate) -> np.ndarray:
    return 1.0 - truth_confidence(surrogate, clean_inputs, np.asarray(labels))


def noise_sensitivity(clean_inputs, labels, surrogate, noise_std=NOISE_STD, n_draws=NOISE_DRAWS,
                      seed=0) -> np.ndarray:
    """Raw (unnormalized) mean positive confidence drop; row ``i`` draws from seed ``seed + i``."""
    if n_draws < 1:
        raise ConfigError("n_draws must be >= 1")
    x = np.asarray(clean_inputs, dtype=np.float32)
    labels = np.asarray(labels)
    base = truth_confidence(surrogate, x, labels)
    noise = np.stack([
        np.random.default_rng(seed + i).normal(0.0, noise_std, size=(n_draws, *x.shape[1:]))
        for i in range(len(x))
    ])
    noised = np.clip(x[:, None] + noise, 0.0, 1.0).astype(np.float32)
    flat = noised.reshape(len(x) * n_draws, *x.shape[1:])
    conf = truth_confidence(surrogate, flat, np.repeat(labels, n_draws)).reshape(len(x), n_draws)
    return np.maximum(0.0, base[:, None] - conf).mean(axis=1)


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(initial=np.inf), v.max(initial=-np.inf)
    if not hi > lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def noise_scores(clean_inputs, labels, surrogate, noise_std=NOISE_STD, n_draws=NOISE_DRAWS, seed=0):
    return minmax(noise_sensitivity(clean_inputs, labels, surrogate, noise_std, n_draws, seed))


def _wrap(values, strategy):
    return [RankingScore(i, float(v), strategy) for i, v in enumerate(values)]


def aet(ex, f0: SurrogateEnsemble) -> RankingScore:
    return RankingScore(0, float(aet_scores(ex.adversarial[None], [ex.label], f0)[0]), "aet")


def het(ex, f0: SurrogateEnsemble) -> RankingScore:
    return RankingScore(0, float(het_scores(ex.adversarial[None], [ex.label], f0)[0]), "het")


def softmax_baseline(clean_x, y, surrogate) -> RankingScore:
    diffnet._check_labels(y, surrogate.num_classes)
    return RankingScore(0, float(softmax_scores(np.asarray(clean_x)[None], [y], surrogate)[0]), "softmax")


def noise_baseline(clean_x, y, surrogate, noise_std=NOISE_STD, n_draws=NOISE_DRAWS, seed=0):
    """Scores for a set of clean inputs (min-max normalization needs the whole set)."""
    return _wrap(noise_scores(clean_x, y, surrogate, noise_std, n_draws, seed), "softmax_noise")


def score_examples(strategy, examples, *, f0=None, surrogate=None, noise_std=NOISE_STD,
                   n_draws=NOISE_DRAWS, seed=0) -> list[RankingScore]:
    """Score a list of adversarial examples with one strategy, indexed by list position."""
    adv, clean, labels = stack(examples)
    if strategy in ("aet", "het"):
        if f0 is None:
            raise ConfigError(f"{strategy} needs a surrogate ensemble")
        values = (aet_scores if strategy == "aet" else het_scores)(adv, labels, f0)
    elif strategy == "softmax":
        values = softmax_scores(clean, labels, _need(surrogate, strategy))
    elif strategy == "softmax_noise":
        values = noise_scores(clean, labels, _need(surrogate, strategy), noise_std, n_draws, seed)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; known: {STRATEGIES}")
    return _wrap(values, strategy)


def _need(surrogate, strategy):
    if surrogate is None:
        raise ConfigError(f"{strategy} needs the surrogate model")
    return surrogate


def rank(scores) -> RankedSet:
    """Sort descending by score; equal scores keep ascending example index."""
    scores = list(scores)
    if len({s.strategy for s in scores}) > 1:
        raise UsageError("cannot rank scores from different strategies together")
    idx = np.array([s.example_index for s in scores], dtype=np.int64)
    val = np.array([s.score for s in scores], dtype=np.float64)
    if len(np.unique(idx)) != len(idx):
        raise UsageError("duplicate example indices")
    order = idx[np.lexsort((idx, -val))]
    return RankedSet(scores, order)


def write_scores_csv(path, ranked_sets):
    """Dump ``example_index, strategy, score, rank_position`` for several ranked sets."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_index", "strategy", "score", "rank_position"])
        for rs in ranked_sets:
            pos = dict(zip(rs.order.tolist(), range(len(rs.order))))
            for s in sorted(rs.scores, key=lambda s: s.example_index):
                w.writerow([s.example_index, s.strategy, repr(s.score), pos[s.example_index]])
