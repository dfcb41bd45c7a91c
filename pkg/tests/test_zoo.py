import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from transrank import data, diffnet, zoo
from transrank.errors import (
    BadMagicError,
    ConfigError,
    PersistenceError,
    TruncatedFileError,
    VersionMismatchError,
)


def test_build_is_deterministic():
    a = zoo.build("cnn-pool", (1, 8, 8), 4, 7)
    b = zoo.build("cnn-pool", (1, 8, 8), 4, 7)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))


def test_build_seeds_differ():
    a = zoo.build("mlp-wide", (1, 8, 8), 4, 1)
    b = zoo.build("mlp-wide", (1, 8, 8), 4, 2)
    assert any(p.tobytes() != q.tobytes() for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("arch", list(zoo.ARCHITECTURES))
@pytest.mark.parametrize("shape", [(1, 8, 8), (1, 14, 14)])
def test_every_architecture_runs(arch, shape):
    net = zoo.build(arch, shape, 10, 0)
    x = np.random.default_rng(0).uniform(size=(3, *shape))
    logits = diffnet.forward(net, x)
    assert logits.shape == (3, 10) and np.isfinite(logits).all()
    assert net.arch == arch


def test_architectures_are_structurally_distinct():
    sigs = {a: tuple((l.kind, l.hyperparams) for l in zoo.build(a, (1, 8, 8), 4, 0).layers)
            for a in zoo.ARCHITECTURES}
    assert len(set(sigs.values())) == 5
    kinds = {a: tuple(k for k, _ in s) for a, s in sigs.items()}
    # three MLPs differ in depth or width, the CNNs in layer kinds
    assert kinds["cnn-small"] != kinds["cnn-pool"]


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        zoo.build("resnet", (1, 8, 8), 4, 0)


def test_cnn_needs_image_input():
    with pytest.raises(ConfigError):
        zoo.build("cnn-small", (16,), 4, 0)


def _two_blobs():
    ds = data.gen_blobs(400, 2, 2, 0.05, seed=11)
    return ds


def test_training_separable_blobs():
    ds = _two_blobs()
    oracle = LogisticRegression().fit(ds.inputs, ds.labels)
    assert oracle.score(ds.inputs, ds.labels) >= 0.99
    net = zoo.build("mlp-narrow", (2,), 2, 0)
    trained, history = zoo.train(net, ds, zoo.TrainConfig(epochs=30, seed=0))
    assert zoo.evaluate_accuracy(trained, ds.inputs, ds.labels) >= 0.99
    assert len(history) == 30 and history[-1] < history[0]


def test_zero_learning_rate_keeps_weights():
    ds = _two_blobs()
    net = zoo.build("mlp-deep", (2,), 2, 3)
    trained, _ = zoo.train(net, ds, zoo.TrainConfig(epochs=2, learning_rate=0.0))
    assert trained == net
    assert trained is not net


def test_training_is_deterministic():
    ds = _two_blobs()
    net = zoo.build("mlp-wide", (2,), 2, 3)
    cfg = zoo.TrainConfig(epochs=3, seed=5)
    a, ha = zoo.train(net, ds, cfg)
    b, hb = zoo.train(net, ds, cfg)
    assert ha == hb and a == b
    c, _ = zoo.train(net, ds, zoo.TrainConfig(epochs=3, seed=6))
    assert c != a


def test_train_empty_dataset():
    empty = data.Dataset(np.zeros((0, 2)), np.zeros(0, int), 2)
    with pytest.raises(ConfigError):
        zoo.train(zoo.build("mlp-narrow", (2,), 2, 0), empty, zoo.TrainConfig())


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"momentum": 1.0},
                                    {"learning_rate": -1.0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        zoo.TrainConfig(**kwargs)


@pytest.mark.parametrize("arch", list(zoo.ARCHITECTURES))
@pytest.mark.parametrize("seed", [0, 1, 2**40])
def test_persistence_round_trip(tmp_path, arch, seed):
    net = zoo.build(arch, (1, 8, 8), 4, seed % 1000)
    bundle = zoo.ModelBundle(arch, net, seed, 0.8125)
    path = tmp_path / "m.trnk"
    zoo.save(bundle, path)
    loaded = zoo.load(path)
    assert loaded == bundle
    assert loaded.net.input_shape == (1, 8, 8) and loaded.net.num_classes == 4
    zoo.save(loaded, tmp_path / "again.trnk")
    assert (tmp_path / "again.trnk").read_bytes() == path.read_bytes()


def test_header_layout():
    raw = zoo.to_bytes(zoo.ModelBundle("mlp-narrow", zoo.build("mlp-narrow", (3,), 2, 0), -5, 0.5))
    assert raw[:4] == b"TRNK"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    (n,) = struct.unpack("<H", raw[8:10])
    assert raw[10:10 + n] == b"mlp-narrow"
    seed, acc, layers = struct.unpack("<qfI", raw[10 + n:10 + n + 16])
    assert (seed, acc, layers) == (-5, 0.5, 4)


def test_corrupt_files_raise_distinct_errors(tmp_path):
    raw = zoo.to_bytes(zoo.ModelBundle("cnn-small", zoo.build("cnn-small", (1, 6, 6), 3, 0), 1, 0.9))
    with pytest.raises(BadMagicError):
        zoo.from_bytes(b"XRNK" + raw[4:])
    with pytest.raises(VersionMismatchError):
        zoo.from_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    for cut in (2, 9, 30, len(raw) - 1):
        with pytest.raises(TruncatedFileError):
            zoo.from_bytes(raw[:cut])
    with pytest.raises(PersistenceError):
        zoo.from_bytes(raw + b"\0")
    for exc in (BadMagicError, VersionMismatchError, TruncatedFileError):
        assert len({BadMagicError, VersionMismatchError, TruncatedFileError} - {exc}) == 2


def test_reload_reproduces_accuracy(tmp_path, desk_zoo, desk_data):
    _, test = desk_data
    for arch, net in desk_zoo.items():
        acc = zoo.evaluate_accuracy(net, test.inputs, test.labels)
        zoo.save(zoo.ModelBundle(arch, net, 0, acc), tmp_path / f"{arch}.trnk")
        loaded = zoo.load(tmp_path / f"{arch}.trnk")
        again = zoo.evaluate_accuracy(loaded.net, test.inputs, test.labels)
        assert np.float32(again) == loaded.clean_test_accuracy
