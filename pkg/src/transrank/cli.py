"""Command-line entry point: ``transrank {train,attack,rank,e1,e2,demo}``.

Output layout under ``--out``::

    models/<arch>.trnk, train_manifest.json
    attack/adversarial.tadv, attack/attack_manifest.json
    rank/scores.csv
    e1/e1_results.csv, e1/e1_manifest.json
    e2/e2_results.csv, e2/e2_manifest.json

Exit codes: 0 success, 2 config error, 3 data/parse error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import attacks, data, evaluation, ranking, zoo
from .config import RunConfig
from .errors import (
    ConfigError,
    DomainError,
    IDXError,
    InvariantError,
    PersistenceError,
    ShapeError,
    UsageError,
)

log = logging.getLogger("transrank")

EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 2, 3, 4


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _model_path(out, arch):
    return Path(out) / "models" / f"{arch}.trnk"


def cmd_train(cfg: RunConfig, out, workers=1):
    train_ds, test_ds = cfg.load_datasets()
    shape, classes = train_ds.sample_shape, train_ds.num_classes
    seeds = cfg.seeds()
    models = {}
    for arch in cfg.architectures():
        net = zoo.build(arch, shape, classes, seeds["init"][arch])
        trained, history = zoo.train(net, train_ds, cfg.train_config(arch))
        acc = zoo.evaluate_accuracy(trained, test_ds.inputs, test_ds.labels)
        bundle = zoo.ModelBundle(arch, trained, seeds["train"][arch], acc)
        path = _model_path(out, arch)
        path.parent.mkdir(parents=True, exist_ok=True)
        zoo.save(bundle, path)
        models[arch] = {"file": str(path.relative_to(out)), "init_seed": seeds["init"][arch],
                        "train_seed": bundle.train_seed,
                        "clean_test_accuracy": bundle.clean_test_accuracy,
                        "loss_history": history}
        log.info("trained %s: test accuracy %.4f", arch, bundle.clean_test_accuracy)
    _write_json(Path(out) / "train_manifest.json",
                {"config": cfg.materialized(), "train_size": len(train_ds),
                 "test_size": len(test_ds), "models": models})
    return models


def _load_models(cfg, out):
    nets = {}
    for arch in cfg.architectures():
        path = _model_path(out, arch)
        if not path.exists():
            raise PersistenceError(f"{path} missing; run `transrank train` first")
        nets[arch] = zoo.load(path).net
    return nets


def _roles(cfg, nets):
    z = cfg.raw["zoo"]
    f0 = ranking.SurrogateEnsemble([nets[a] for a in z["f0"]], list(z["f0"]))
    return nets[z["victim"]], nets[z["surrogate"]], f0


def cmd_attack(cfg: RunConfig, out, workers=1):
    _, test_ds = cfg.load_datasets()
    nets = _load_models(cfg, out)
    victim, surrogate, _ = _roles(cfg, nets)
    attack_cfg = cfg.attack_config()
    evalset = data.filter_correct(test_ds, victim)
    if len(evalset) == 0:
        raise ConfigError("the victim classifies no test sample correctly")
    examples = attacks.attack_dataset(surrogate, evalset, attack_cfg, workers=workers)
    path = Path(out) / "attack" / "adversarial.tadv"
    path.parent.mkdir(parents=True, exist_ok=True)
    attacks.save(path, attack_cfg, examples)
    manifest = {"config": cfg.materialized(), "file": str(path.relative_to(out)),
                "n_examples": len(examples), "test_size": len(test_ds),
                "victim_correct": len(evalset),
                "surrogate_fooling_rate": attacks.fooling_rate(examples)}
    _write_json(path.parent / "attack_manifest.json", manifest)
    return manifest


def cmd_rank(cfg: RunConfig, out, workers=1):
    _, test_ds = cfg.load_datasets()
    nets = _load_models(cfg, out)
    _, surrogate, f0 = _roles(cfg, nets)
    _, examples = attacks.load(Path(out) / "attack" / "adversarial.tadv", test_ds, surrogate)
    noise = cfg.raw["noise"]
    ranked = [ranking.rank(ranking.score_examples(s, examples, f0=f0, surrogate=surrogate,
                                                  noise_std=noise["std"], n_draws=noise["draws"],
                                                  seed=cfg.seeds()["noise"]))
              for s in cfg.raw["strategies"]]
    path = Path(out) / "rank" / "scores.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    ranking.write_scores_csv(path, ranked)
    return path


def cmd_e1(cfg: RunConfig, out, workers=1):
    _, test_ds = cfg.load_datasets()
    victim, surrogate, f0 = _roles(cfg, _load_models(cfg, out))
    noise = cfg.raw["noise"]
    report = evaluation.run_e1(
        test_ds, surrogate, f0, victim, cfg.attack_config(), cfg.raw["strategies"],
        anchors=tuple(cfg.raw["k_anchors"]), noise_std=noise["std"], n_draws=noise["draws"],
        noise_seed=cfg.seeds()["noise"], allow_surrogate_in_f0=cfg.raw["zoo"]["allow_surrogate_in_f0"],
        workers=workers)
    report.manifest["config"] = cfg.materialized()
    report.write(Path(out) / "e1")
    return report


def cmd_e2(cfg: RunConfig, out, workers=1):
    _, test_ds = cfg.load_datasets()
    victim, surrogate, f0 = _roles(cfg, _load_models(cfg, out))
    noise, e2 = cfg.raw["noise"], cfg.raw["e2"]
    report = evaluation.run_e2(
        test_ds, surrogate, f0, victim, cfg.attack_config("e2_attack"), cfg.raw["strategies"],
        e2["m_perturbations"], e2["n_trials"], cfg.seeds()["e2"], noise_std=noise["std"],
        n_draws=noise["draws"], allow_surrogate_in_f0=cfg.raw["zoo"]["allow_surrogate_in_f0"],
        workers=workers)
    report.manifest["config"] = cfg.materialized()
    report.write(Path(out) / "e2")
    return report


def cmd_demo(cfg: RunConfig, out, workers=1):
    cmd_train(cfg, out, workers)
    cmd_attack(cfg, out, workers)
    cmd_rank(cfg, out, workers)
    for report in (cmd_e1(cfg, out, workers), cmd_e2(cfg, out, workers)):
        for curve in report.all_curves():
            print(f"{report.experiment} {curve.strategy:14s} "
                  + " ".join(f"k={k}:{v:.3f}" for k, v in list(zip(curve.ks, curve.values))[:8]))


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "rank": cmd_rank,
            "e1": cmd_e1, "e2": cmd_e2, "demo": cmd_demo}


def demo_config_path():
    return resources.files("transrank") / "configs" / "demo.json"


def build_parser():
    p = argparse.ArgumentParser(prog="transrank", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config (default: bundled demo config)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", default="runs/demo", help="output directory")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="threads for sample-parallel stages (output does not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        source = args.config or demo_config_path()
        cfg = RunConfig.from_file(source, seed=args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.workers)
    except (ConfigError, UsageError, ShapeError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IDXError, PersistenceError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return 0


if __name__ == "__main__":
    sys.exit(main())
