import numpy as np
import pytest

from ecgattr import engine
from ecgattr.engine import BatchNorm1d, Conv1d, Dense, GlobalAvgPool, Network, ReLU, Residual
from ecgattr.model import build_network, preset


def randomize_batchnorm(net, rng):
    """Non-trivial running statistics so folding and shifts are exercised."""
    for layer in net.walk():
        if isinstance(layer, BatchNorm1d):
            c = layer.channels
            layer.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.beta.data = rng.normal(0, 0.3, c).astype(np.float32)
            layer.running_mean.data = rng.normal(0, 0.3, c).astype(np.float32)
            layer.running_var.data = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return net


def random_desk_net(seed, length=257, dtype=np.float64):
    rng = np.random.default_rng(seed)
    net = build_network(preset("desk", input_length=length), seed)
    return randomize_batchnorm(net, rng).astype(dtype)


def kink_free_input(net, rng, margin, length=None, max_tries=200):
    """Draw inputs until every ReLU pre-activation is at least ``margin`` from zero."""
    length = length or net.input_shape[1]
    for _ in range(max_tries):
        x = rng.standard_normal(length)
        if np.min(np.abs(engine.relu_preactivations(net, x))) > margin:
            return x
    raise RuntimeError("could not find a kink-free input")


def toy_residual_net(rng, length=16, channels=3, dtype=np.float64, bias=True):
    def w(*shape):
        return rng.normal(0, 0.5, shape).astype(dtype)

    def b(n):
        return (rng.normal(0, 0.2, n) if bias else np.zeros(n)).astype(dtype)

    main = [Conv1d("r.conv1", channels, channels, 3, weight=w(channels, channels, 3), bias=b(channels)),
            ReLU("r.relu1"),
            Conv1d("r.conv2", channels, channels, 3, weight=w(channels, channels, 3), bias=b(channels))]
    layers = [Conv1d("stem", 1, channels, 3, weight=w(channels, 1, 3), bias=b(channels)), ReLU("stem.relu"),
              Residual("r", main, channels, channels), ReLU("r.out"), GlobalAvgPool("pool"),
              Dense("head", channels, 3, weight=w(3, channels), bias=b(3))]
    return Network(layers, (1, length), ["a", "b", "c"])


def linear_net(w, bias=None):
    w = np.asarray(w, dtype=np.float64)
    return Network([Dense("lin", w.size, 1, weight=w.reshape(1, -1),
                          bias=np.zeros(1) if bias is None else np.asarray([bias], dtype=np.float64))],
                   (1, w.size), ["y"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
