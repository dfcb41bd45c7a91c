import numpy as np
import pytest

from transrank import diffnet, zoo
from transrank.config import RunConfig
from transrank.diffnet import AvgPool, Conv2D, Dense, Flatten, Network, ReLU


def constant_net(probs, input_shape=(2,)):
    """A network whose softmax output is ``probs`` for every input."""
    probs = np.asarray(probs, dtype=np.float64)
    d = int(np.prod(input_shape))
    layers = [Flatten(*input_shape), Dense(d, len(probs), bias=np.log(probs))]
    return Network(layers, input_shape, len(probs))


def random_net(rng, kind):
    """Small random networks that together exercise every layer kind."""
    def u(*shape, scale=1.0):
        return rng.uniform(-scale, scale, size=shape)
    c = int(rng.integers(2, 5))
    if kind == "mlp":
        d, h = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        layers = [Dense(d, h, u(h, d), u(h)), ReLU(), Dense(h, c, u(c, h), u(c))]
        return Network(layers, (d,), c)
    if kind == "conv":
        ch, side, stride = int(rng.integers(1, 3)), int(rng.integers(5, 8)), int(rng.integers(1, 3))
        o, k = int(rng.integers(1, 4)), 3
        conv = Conv2D(ch, side, side, o, k, stride, u(o, ch, k, k, scale=0.6), u(o, scale=0.3))
        oh = (side - k) // stride + 1
        layers = [conv, ReLU(), Flatten(o, oh, oh), Dense(o * oh * oh, c, u(c, o * oh * oh, scale=0.5), u(c))]
        return Network(layers, (ch, side, side), c)
    # conv -> relu -> avgpool -> flatten -> dense -> relu -> dense
    ch, side = int(rng.integers(1, 3)), int(rng.integers(6, 10))
    o, k = int(rng.integers(1, 4)), 3
    conv = Conv2D(ch, side, side, o, k, 1, u(o, ch, k, k, scale=0.6), u(o, scale=0.3))
    ps = side - k + 1
    pool = AvgPool(2)
    q = ps // 2
    h = int(rng.integers(2, 6))
    layers = [conv, ReLU(), pool, Flatten(o, q, q), Dense(o * q * q, h, u(h, o * q * q), u(h)),
              ReLU(), Dense(h, c, u(c, h), u(c))]
    return Network(layers, (ch, side, side), c)


def _relu_masks(net, x):
    _, caches = diffnet._forward(net, np.asarray(x, dtype=np.float64)[None])
    return [c for l, c in zip(net.layers, caches) if l.kind == "relu"]


def _same_masks(a, b):
    return all(np.array_equal(m, n) for m, n in zip(a, b))


def loss64(net, x, y):
    return diffnet.cross_entropy(diffnet.forward(net, x), y)


def finite_difference_check(net, x, y, h=1e-3, rtol=1e-3, atol=1e-6):
    """Compare analytic input/parameter gradients with central differences.

    Coordinates whose +-h probe flips a ReLU are not differentiable across
    the probe and are skipped. Returns ``(worst_violation, n_checked, n_skipped)``
    where a violation > 1 means the tolerance was exceeded.
    """
    x = np.asarray(x, dtype=np.float64)
    base = _relu_masks(net, x)
    worst, checked, skipped = 0.0, 0, 0

    def compare(a, n):
        if abs(a) < atol:
            return abs(a - n) / atol
        return abs(a - n) / (rtol * max(abs(a), abs(n)))

    gx = diffnet.grad_input(net, x, y)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        if not (_same_masks(base, _relu_masks(net, xp)) and _same_masks(base, _relu_masks(net, xm))):
            skipped += 1
            continue
        num = (loss64(net, xp, y) - loss64(net, xm, y)) / (2 * h)
        worst = max(worst, compare(gx[i], num))
        checked += 1

    grads = diffnet.grad_params(net, x, y)
    for p, g in zip(net.parameters(), grads):
        for i in np.ndindex(p.shape):
            orig = p[i]
            plus, minus = np.float32(orig + h), np.float32(orig - h)
            p[i] = plus
            lp, mp = loss64(net, x, y), _relu_masks(net, x)
            p[i] = minus
            lm, mm = loss64(net, x, y), _relu_masks(net, x)
            p[i] = orig
            if not (_same_masks(base, mp) and _same_masks(base, mm)):
                skipped += 1
                continue
            num = (lp - lm) / (float(plus) - float(minus))
            worst = max(worst, compare(g[i], num))
            checked += 1
    return worst, checked, skipped


@pytest.fixture(scope="session")
def desk_config():
    return RunConfig.from_dict({})


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return desk_config.load_datasets()


@pytest.fixture(scope="session")
def desk_zoo(desk_config, desk_data):
    """All five architectures trained on the default blob task."""
    train_ds, _ = desk_data
    nets = {}
    for arch in zoo.ARCHITECTURES:
        net = zoo.build(arch, train_ds.sample_shape, train_ds.num_classes, desk_config.seeds()["init"][arch])
        nets[arch], _ = zoo.train(net, train_ds, desk_config.train_config(arch))
        nets[arch].arch = arch
    return nets


def rotation(victim):
    """Attacker roles for a victim: the next architecture is the surrogate, the other three score."""
    names = list(zoo.ARCHITECTURES)
    i = names.index(victim)
    others = names[i + 1:] + names[:i]
    return others[0], others[1:]


def roles_for(nets, victim):
    from transrank.ranking import SurrogateEnsemble
    surrogate, f0 = rotation(victim)
    return nets[victim], nets[surrogate], SurrogateEnsemble([nets[a] for a in f0], list(f0))


@pytest.fixture(scope="session")
def desk_e1(desk_config, desk_data, desk_zoo):
    """Default-config E1 run: victim mlp-narrow, surrogate mlp-wide, the other three score."""
    from transrank import evaluation
    _, test = desk_data
    victim, surrogate, f0 = roles_for(desk_zoo, "mlp-narrow")
    noise = desk_config.raw["noise"]
    return evaluation.run_e1(test, surrogate, f0, victim, desk_config.attack_config(),
                             desk_config.raw["strategies"], noise_std=noise["std"],
                             n_draws=noise["draws"], noise_seed=desk_config.seeds()["noise"])
