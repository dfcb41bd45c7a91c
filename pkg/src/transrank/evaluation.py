"""Transferability at k, its bounds, and the sample- and perturbation-ranking experiments."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, diffnet, ranking
from .data import filter_correct
from .errors import ConfigError, UsageError
from .ranking import RankedSet, SurrogateEnsemble

ANCHORS = (0.05, 0.10, 0.20)
LOWER = "lower_bound"
UPPER = "upper_bound"


@dataclass(frozen=True)
class VictimOutcome:
    example_index: int
    transferred: bool
    victim_truth_confidence: float


@dataclass
class TatKCurve:
    strategy: str
    ks: list
    values: list

    def __post_init__(self):
        self.ks = [int(k) for k in self.ks]
        self.values = [float(v) for v in self.values]
        if len(self.ks) != len(self.values):
            raise UsageError("one value per k is required")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise UsageError("ks must be strictly increasing")

    def at(self, k):
        return self.values[self.ks.index(k)]


@dataclass
class EvaluationReport:
    experiment: str
    curves: dict
    lower_bound: TatKCurve
    upper_bound: TatKCurve
    manifest: dict = field(default_factory=dict)
    # in-memory extras for inspection; not serialized
    rankings: dict | None = field(default=None, repr=False, compare=False)
    examples: list | None = field(default=None, repr=False, compare=False)

    def all_curves(self):
        return [*self.curves.values(), self.lower_bound, self.upper_bound]

    def results_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "strategy", "k", "value"])
        for c in self.all_curves():
            for k, v in zip(c.ks, c.values):
                w.writerow([self.experiment, c.strategy, k, repr(v)])
        return buf.getvalue()

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem=None):
        """Write ``<stem>_results.csv`` and ``<stem>_manifest.json``; returns both paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.experiment
        csv_path, json_path = out / f"{stem}_results.csv", out / f"{stem}_manifest.json"
        csv_path.write_text(self.results_csv())
        json_path.write_text(self.manifest_json())
        return csv_path, json_path


def victim_outcomes(victim, examples) -> list[VictimOutcome]:
    adv, _, labels = attacks.stack(examples)
    conf = ranking.truth_confidence(victim, adv, labels)
    pred = np.argmax(diffnet.forward(victim, adv), axis=1)
    return [VictimOutcome(i, bool(p != y), float(c))
            for i, (p, y, c) in enumerate(zip(pred, labels, conf))]


def _transferred_by_index(outcomes):
    lookup = {o.example_index: o.transferred for o in outcomes}
    if len(lookup) != len(outcomes):
        raise UsageError("duplicate example indices in outcomes")
    return lookup


def _ordered_successes(order, outcomes):
    lookup = _transferred_by_index(outcomes)
    order = list(order)
    if sorted(order) != sorted(lookup):
        raise UsageError("ranking does not cover exactly the outcome indices")
    return np.array([lookup[i] for i in order], dtype=np.int64)


def transferability_at_k(ranked: RankedSet, outcomes, k) -> float:
    """Fraction of the top ``k`` ranked examples that fool the victim."""
    if not 1 <= k <= len(outcomes):
        raise UsageError(f"k={k} outside [1, {len(outcomes)}]")
    hits = _ordered_successes(ranked.order, outcomes)
    return int(hits[:k].sum()) / k


def curve_from_order(strategy, order, outcomes, ks) -> TatKCurve:
    hits = np.cumsum(_ordered_successes(order, outcomes))
    n = len(outcomes)
    for k in ks:
        if not 1 <= k <= n:
            raise UsageError(f"k={k} outside [1, {n}]")
    return TatKCurve(strategy, ks, [int(hits[k - 1]) / k for k in ks])


def lower_bound(outcomes) -> float:
    if not outcomes:
        raise UsageError("no outcomes")
    return sum(o.transferred for o in outcomes) / len(outcomes)


def oracle_order(outcomes) -> np.ndarray:
    """Successes first; within a group ascending victim confidence, then index."""
    return np.array([o.example_index for o in sorted(
        outcomes, key=lambda o: (not o.transferred, o.victim_truth_confidence, o.example_index))])


def upper_bound_curve(outcomes, ks) -> TatKCurve:
    if not outcomes:
        raise UsageError("no outcomes")
    return curve_from_order(UPPER, oracle_order(outcomes), outcomes, ks)


def k_grid(n, anchors=ANCHORS):
    """Powers of two up to ``n``, the fractional anchors, and ``n`` itself."""
    if n < 1:
        raise UsageError("empty evaluation set")
    ks = {n}
    k = 1
    while k < n:
        ks.add(k)
        k *= 2
    ks.update(anchor_k(n, a) for a in anchors)
    return sorted(ks)


def anchor_k(n, fraction):
    return min(n, max(1, int(round(fraction * n))))


def check_roles(victim, surrogate, f0: SurrogateEnsemble, allow_surrogate_in_f0=False):
    """Enforce that victim, surrogate and every ensemble member use distinct architectures."""
    if victim in f0:
        raise ConfigError("the victim network is a member of the scoring ensemble")
    names = [victim.arch, surrogate.arch, *f0.member_arch_names]
    if any(n is None for n in names):
        raise ConfigError("every network needs an architecture name")
    if victim.arch in names[1:]:
        raise ConfigError(f"victim architecture {victim.arch!r} is also used by the attacker")
    members = list(f0.member_arch_names)
    if len(set(members)) != len(members):
        raise ConfigError("ensemble architectures must be unique")
    if surrogate.arch in members or surrogate in f0:
        if not allow_surrogate_in_f0:
            raise ConfigError(f"surrogate architecture {surrogate.arch!r} is also in the ensemble")


def calibrate_epsilon(dataset, surrogate, victim, attack_cfg, grid, target=0.30, workers=1):
    """Budget from ``grid`` whose victim success rate on the filtered set is closest to ``target``.

    This is an experimenter-side step that fixes the difficulty of a run;
    it never feeds into any ranking. Ties go to the smaller budget.
    Step sizes scale with the budget. Returns ``(epsilon, {epsilon: rate})``.
    """
    evalset = filter_correct(dataset, victim)
    if len(evalset) == 0:
        raise ConfigError("the victim classifies no test sample correctly")
    rates = {}
    for eps in sorted(grid):
        # keep the step-to-budget ratio of the base config
        cfg = replace(attack_cfg, epsilon=eps, step_size=attack_cfg.step_size * eps / attack_cfg.epsilon)
        examples = attacks.attack_dataset(surrogate, evalset, cfg, workers=workers)
        rates[eps] = lower_bound(victim_outcomes(victim, examples))
    best = min(rates, key=lambda e: (abs(rates[e] - target), e))
    return best, rates


def _score(strategy, examples, f0, surrogate, noise_std, n_draws, noise_seed):
    return ranking.score_examples(strategy, examples, f0=f0, surrogate=surrogate,
                                  noise_std=noise_std, n_draws=n_draws, seed=noise_seed)


def _base_manifest(experiment, dataset, surrogate, f0, victim, attack_cfg, strategies, evalset):
    return {
        "experiment": experiment,
        "attack": attack_cfg.to_dict(),
        "strategies": list(strategies),
        "architectures": {"victim": victim.arch, "surrogate": surrogate.arch,
                          "f0": list(f0.member_arch_names)},
        "dataset_size": len(dataset),
        "retained": len(evalset),
        "retained_fraction": evalset.retained_fraction,
        "surrogate_clean_accuracy": float(np.mean(diffnet.predict(surrogate, dataset.inputs) == dataset.labels)),
    }


def run_e1(dataset, surrogate, f0: SurrogateEnsemble, victim, attack_cfg, strategies, ks=None, *,
           anchors=ANCHORS, noise_std=ranking.NOISE_STD, n_draws=ranking.NOISE_DRAWS, noise_seed=0,
           allow_surrogate_in_f0=False, workers=1) -> EvaluationReport:
    """Sample ranking: attack every victim-correct sample and rank them with each strategy."""
    check_roles(victim, surrogate, f0, allow_surrogate_in_f0)
    evalset = filter_correct(dataset, victim)
    if len(evalset) == 0:
        raise ConfigError("the victim classifies no test sample correctly")
    examples = attacks.attack_dataset(surrogate, evalset, attack_cfg, workers=workers)
    rankings = {s: ranking.rank(_score(s, examples, f0, surrogate, noise_std, n_draws, noise_seed))
                for s in strategies}
    # the victim is consulted only after scoring is complete
    outcomes = victim_outcomes(victim, examples)
    n = len(outcomes)
    ks = k_grid(n, anchors) if ks is None else sorted(set(int(k) for k in ks))
    curves = {s: curve_from_order(s, r.order, outcomes, ks) for s, r in rankings.items()}
    lb = lower_bound(outcomes)
    manifest = _base_manifest("e1", dataset, surrogate, f0, victim, attack_cfg, strategies, evalset)
    manifest.update({
        "n_examples": n,
        "ks": ks,
        "anchors": {str(a): anchor_k(n, a) for a in anchors},
        "surrogate_fooling_rate": attacks.fooling_rate(examples),
        "noise": {"std": noise_std, "draws": n_draws, "seed": noise_seed},
        "lower_bound": lb,
    })
    return EvaluationReport("e1", curves, TatKCurve(LOWER, ks, [lb] * len(ks)),
                            upper_bound_curve(outcomes, ks), manifest, rankings, examples)


def run_e2(dataset, surrogate, f0: SurrogateEnsemble, victim, attack_cfg, strategies,
           m_perturbations=20, n_trials=100, seed=0, *, noise_std=ranking.NOISE_STD,
           n_draws=ranking.NOISE_DRAWS, allow_surrogate_in_f0=False, workers=1) -> EvaluationReport:
    """Perturbation ranking: per trial, pick the top-1 of ``m`` random-start perturbations of one sample.

    Trial ``t``, candidate ``j`` is attacked with seed
    ``attack_cfg.seed + t * m + j``. Clean-input strategies give every
    candidate of a trial the same score, so their pick falls back to
    candidate 0.
    """
    check_roles(victim, surrogate, f0, allow_surrogate_in_f0)
    if not attack_cfg.random_start:
        raise ConfigError("perturbation ranking needs random starts")
    if m_perturbations < 1 or n_trials < 1:
        raise ConfigError("m_perturbations and n_trials must be positive")
    evalset = filter_correct(dataset, victim)
    if n_trials > len(evalset):
        raise ConfigError(f"{n_trials} trials but only {len(evalset)} victim-correct samples")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(evalset), size=n_trials, replace=False)
    m = m_perturbations
    ds = evalset.base
    x = np.repeat(ds.inputs[picks], m, axis=0)
    y = np.repeat(ds.labels[picks], m)
    seeds = [attack_cfg.seed + i for i in range(n_trials * m)]
    delta = np.concatenate([
        attacks.attack_batch(surrogate, x[s:s + attacks.CHUNK], y[s:s + attacks.CHUNK], attack_cfg,
                             seeds[s:s + attacks.CHUNK])
        for s in range(0, len(x), attacks.CHUNK)
    ])
    adv = np.clip(x + delta, 0, 1)

    clean_scores = {}
    if "softmax" in strategies:
        clean_scores["softmax"] = ranking.softmax_scores(ds.inputs[picks], ds.labels[picks], surrogate)
    if "softmax_noise" in strategies:
        # one sensitivity per clean sample, seeded by its position in the evaluation set
        clean_scores["softmax_noise"] = np.array([
            ranking.noise_sensitivity(ds.inputs[p:p + 1], ds.labels[p:p + 1], surrogate,
                                      noise_std, n_draws, seed + int(p))[0]
            for p in picks])

    candidate_scores = {}
    for s in strategies:
        if s == "aet":
            candidate_scores[s] = ranking.aet_scores(adv, y, f0).reshape(n_trials, m)
        elif s == "het":
            candidate_scores[s] = ranking.het_scores(adv, y, f0).reshape(n_trials, m)
        elif s == "softmax":
            candidate_scores[s] = np.repeat(clean_scores[s][:, None], m, axis=1)
        elif s == "softmax_noise":
            raw = np.repeat(clean_scores[s][:, None], m, axis=1)
            candidate_scores[s] = np.stack([ranking.minmax(r) for r in raw])
        else:
            raise ConfigError(f"unknown strategy {s!r}")

    selections = {}
    for s, sc in candidate_scores.items():
        selections[s] = [int(ranking.rank([ranking.RankingScore(j, float(v), s) for j, v in enumerate(row)]).order[0])
                         for row in sc]

    # victim consulted only after every selection is fixed
    success = (diffnet.predict(victim, adv) != y).reshape(n_trials, m)
    curves = {s: TatKCurve(s, [1], [float(np.mean(success[np.arange(n_trials), sel]))])
              for s, sel in selections.items()}
    lb = float(success.mean())
    ub = float(success.any(axis=1).mean())
    manifest = _base_manifest("e2", dataset, surrogate, f0, victim, attack_cfg, strategies, evalset)
    manifest.update({
        "m_perturbations": m,
        "n_trials": n_trials,
        "seed": seed,
        "trial_samples": [int(evalset.indices[p]) for p in picks],
        "selections": selections,
        "surrogate_fooling_rate": float(np.mean(diffnet.predict(surrogate, adv) != y)),
        "noise": {"std": noise_std, "draws": n_draws, "seed": seed},
        "lower_bound": lb,
        "upper_bound": ub,
    })
    return EvaluationReport("e2", curves, TatKCurve(LOWER, [1], [lb]), TatKCurve(UPPER, [1], [ub]), manifest)
