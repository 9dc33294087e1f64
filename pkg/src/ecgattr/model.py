"""1D residual beat classifier: construction, training, prediction, selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import engine
from .engine import BatchNorm1d, Conv1d, Dense, GlobalAvgPool, Network, ReLU, Residual, Softmax
from .errors import ConfigError, InputError, TrainingError
from .synth import CLASS_NAMES, SIGNAL_LENGTH, BeatClass


def standardize(signal):
    """Zero mean, unit (population) std; constant signals map to zeros."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot standardize an empty signal")
    centered = x - x.mean()
    std = np.sqrt(np.mean(centered ** 2))
    if std < 1e-12:
        return np.zeros(x.shape, dtype=np.float32)
    return (centered / std).astype(np.float32)


def model_inputs(examples):
    """Stack standardized signals into a ``(n, 1, length)`` float32 batch."""
    return np.stack([standardize(ex.signal) for ex in examples])[:, None, :]


def labels_of(examples):
    return np.array([int(ex.label) for ex in examples], dtype=np.int64)


@dataclass
class NetworkConfig:
    num_blocks: int = 8
    base_channels: int = 64
    kernel_length: int = 7
    num_classes: int = 3
    input_length: int = SIGNAL_LENGTH
    blocks_per_stage: int = 2
    downsample_first: bool = False

    def __post_init__(self):
        if self.kernel_length % 2 != 1:
            raise ConfigError("kernel_length must be odd")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.num_blocks, self.base_channels, self.input_length, self.blocks_per_stage) < 1:
            raise ConfigError("num_blocks, base_channels, input_length and blocks_per_stage must be positive")


PRESETS = {
    # stem conv + 8 blocks x 2 convs + dense head = 18 weighted layers
    "paper": NetworkConfig(num_blocks=8, base_channels=64, blocks_per_stage=2),
    # stem conv + 3 blocks x 2 convs + dense head = 8 weighted layers
    "desk": NetworkConfig(num_blocks=3, base_channels=8, blocks_per_stage=1, downsample_first=True),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}")
    return NetworkConfig(**{**asdict(PRESETS[name]), **overrides})


def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_network(cfg: NetworkConfig, seed=0) -> Network:
    rng = np.random.default_rng(seed)
    k = cfg.kernel_length

    def conv(name, cin, cout, stride=1):
        return Conv1d(name, cin, cout, k, stride, weight=_he_uniform(rng, (cout, cin, k), cin * k))

    c = cfg.base_channels
    layers = [conv("stem.conv", 1, c), BatchNorm1d("stem.bn", c), ReLU("stem.relu")]
    cin = c
    for i in range(cfg.num_blocks):
        stage = i // cfg.blocks_per_stage
        cout = c * 2 ** stage
        first_of_stage = i % cfg.blocks_per_stage == 0
        stride = 2 if first_of_stage and (stage > 0 or cfg.downsample_first) else 1
        name = f"block{i + 1}"
        main = [conv(f"{name}.conv1", cin, cout, stride), BatchNorm1d(f"{name}.bn1", cout), ReLU(f"{name}.relu1"),
                conv(f"{name}.conv2", cout, cout), BatchNorm1d(f"{name}.bn2", cout)]
        layers += [Residual(name, main, cin, cout, stride), ReLU(f"{name}.out")]
        cin = cout
    bound = 1.0 / math.sqrt(cin)
    head = Dense("head", cin, cfg.num_classes,
                 weight=rng.uniform(-bound, bound, (cfg.num_classes, cin)).astype(np.float32))
    layers += [GlobalAvgPool("pool"), head, Softmax("softmax")]
    names = list(CLASS_NAMES) if cfg.num_classes == 3 else [f"class{j}" for j in range(cfg.num_classes)]
    return Network(layers, (1, cfg.input_length), names, {"network": asdict(cfg), "seed": seed})


def last_conv_name(net):
    """Name of the last convolution in the final residual block."""
    blocks = [layer for layer in net.layers if isinstance(layer, Residual)]
    pool = blocks[-1].main if blocks else net.layers
    convs = [layer.name for layer in pool if isinstance(layer, Conv1d)]
    if not convs:
        raise ConfigError("network has no convolution for Grad-CAM")
    return convs[-1]


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 128
    weight_decay: float = 1e-7
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

    @classmethod
    def from_kv(cls, text, **overrides):
        """Parse a flat ``key=value`` file body (``#`` comments allowed)."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown training key {key!r}")
            typ = types[key]
            if typ in (bool, "bool"):
                values[key] = value.lower() in ("1", "true", "yes")
            elif typ in (int, "int"):
                values[key] = int(value)
            else:
                values[key] = float(value)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self, grads):
        cfg = self.cfg
        self.t += 1
        c1 = 1 - cfg.beta1 ** self.t
        c2 = 1 - cfg.beta2 ** self.t
        for k, t in self.params.items():
            g = grads[k] + cfg.weight_decay * t.data
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            update = cfg.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.adam_eps)
            t.data = (t.data - update).astype(t.data.dtype)


def cross_entropy(logits, labels):
    """Mean loss and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


def accuracy(net, x, y, batch=256):
    if len(y) == 0:
        return float("nan")
    probs = predict(net, x, batch=batch)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def _split_arrays(data):
    if data is None:
        return None, None
    if isinstance(data, tuple):
        return data
    return model_inputs(data), labels_of(data)


def train(net: Network, dataset, cfg: TrainConfig, log=None):
    """Train in place with Adam + cross-entropy; returns ``(net, history)``.

    ``dataset`` is a synth ``Dataset`` (test accuracy tracked per epoch), a list
    of examples, or an ``(inputs, labels)`` tuple.
    """
    train_data = getattr(dataset, "train", dataset)
    x, y = _split_arrays(train_data)
    xt, yt = _split_arrays(getattr(dataset, "test", None))
    if len(y) == 0:
        raise InputError("empty training set")
    missing = set(range(net.output_shape[0])) - set(np.unique(y).tolist())
    if missing:
        raise InputError(f"training set lacks classes {sorted(missing)}")
    rng = np.random.default_rng(cfg.seed)
    params = dict(net.named_params())
    opt = Adam(params, cfg)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, tape = engine.forward(net, x[idx], record=True, train=True)
            loss, dlogits = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            _, grads = engine.backward(tape, dlogits, param_grads=True)
            opt.step(grads)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
        history.train_loss.append(loss_sum / len(y))
        history.train_accuracy.append(correct / len(y))
        if epoch == cfg.epochs and cfg.recalibrate_bn:
            recalibrate_batchnorm(net, x, cfg.batch_size)
        history.test_accuracy.append(accuracy(net, xt, yt) if xt is not None else float("nan"))
        if log is not None:
            log({"event": "epoch", "epoch": epoch, "train_loss": history.train_loss[-1],
                 "train_accuracy": history.train_accuracy[-1], "test_accuracy": history.test_accuracy[-1]})
    return net, history


def recalibrate_batchnorm(net, x, batch_size):
    """Replace running statistics with averages of batch statistics over ``x``."""
    bns = [layer for layer in net.walk() if isinstance(layer, BatchNorm1d)]
    if not bns:
        return
    saved = [bn.momentum for bn in bns]
    for k, start in enumerate(range(0, len(x), batch_size)):
        for bn in bns:
            bn.momentum = 1.0 / (k + 1)
        engine.forward(net, x[start:start + batch_size], train=True)
    for bn, m in zip(bns, saved):
        bn.momentum = m


def predict(net: Network, signal, batch=256):
    """Class probabilities for one model-space signal or a batch of them."""
    x = np.asarray(signal)
    length = net.input_shape[1]
    if x.shape[-1] != length:
        raise InputError(f"signal length {x.shape[-1]} != network input length {length}")
    if x.ndim <= 2 and x.shape in ((length,), net.input_shape):
        return engine.softmax(net.forward(x))
    x = x.reshape(-1, 1, length)
    out = [engine.softmax(net.forward(x[i:i + batch])) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, net.output_shape[0]), np.float32)


def select_eval_examples(net, examples, threshold=0.9, probs=None):
    """Abnormal examples predicted correctly with probability strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    examples = list(examples)
    if not examples:
        return []
    if probs is None:
        probs = predict(net, model_inputs(examples))
    keep = []
    for ex, p in zip(examples, probs):
        true = int(ex.label)
        if ex.label == BeatClass.NORMAL:
            continue
        if int(np.argmax(p)) == true and p[true] > threshold:
            keep.append(ex)
    return keep
