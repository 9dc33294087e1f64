"""Layer-level reverse-mode differentiation for 1D residual classifiers.

The engine is deliberately small: a fixed set of layers (conv1d, batchnorm1d,
relu, residual add, global average pool, dense, softmax head), each with a
hand-written forward and backward. Backward passes accept a rule selector so
the same tape serves plain gradients and the modified propagation rules used
by Guided Backprop, DeepLIFT (rescale) and LRP (epsilon).

Activations are numpy arrays shaped ``(batch, channels, length)``; the
engine computes in the dtype of the network parameters.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LoadError, ManifestError, BlobError, UsageError

RULES = ("standard", "guided-relu", "deeplift-rescale", "lrp-epsilon")
LAYER_KINDS = ("conv1d", "batchnorm1d", "relu", "add-residual", "global-avg-pool", "dense", "softmax")
DEEPLIFT_DELTA_MIN = 1e-7


def _acc(dtype):
    """Accumulator dtype: float64, or wider when the data already is."""
    return np.promote_types(dtype, np.float64)


@dataclass
class Tensor:
    """Parameter storage with an optional gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grad is not None and np.shape(self.grad) != self.data.shape:
            raise ValueError("grad must match data shape")

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


@dataclass
class TapeNode:
    layer: "Layer"
    x: np.ndarray
    y: np.ndarray
    cache: dict = field(default_factory=dict)
    rule: str = "standard"


@dataclass
class Tape:
    nodes: list
    x: np.ndarray
    logits: np.ndarray
    batched: bool
    train: bool = False
    captured: dict = field(default_factory=dict)
    input_shape: tuple = None


@dataclass
class _BackwardCtx:
    rule: str
    epsilon: float
    param_grads: dict | None
    capture: frozenset
    captured: dict


def _stabilize(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


class Layer:
    kind = ""

    def __init__(self, name):
        self.name = name

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def hyperparams(self) -> dict:
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy, node, ctx, ref=None):
        raise NotImplementedError

    def weighted_layers(self) -> int:
        return 0

    def astype(self, dtype):
        new = copy.copy(self)
        for attr, t in {**self.params(), **self.buffers()}.items():
            setattr(new, attr, Tensor(t.data.astype(dtype)))
        return new

    def spec(self) -> dict:
        return {"name": self.name, "kind": self.kind, "hyperparams": self.hyperparams()}

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparams().items())
        return f"{type(self).__name__}({self.name!r}, {hp})"


class _Affine(Layer):
    """Layers whose output is a linear map of the input plus an optional bias."""

    def _linear_backward(self, dy, node):
        raise NotImplementedError

    def _param_grads(self, dy, node):
        return {}

    def backward(self, dy, node, ctx, ref=None):
        if ctx.rule == "lrp-epsilon":
            s = dy / _stabilize(node.y, ctx.epsilon)
            return node.x * self._linear_backward(s, node)
        if ctx.param_grads is not None:
            for pname, g in self._param_grads(dy, node).items():
                key = f"{self.name}.{pname}"
                ctx.param_grads[key] = ctx.param_grads.get(key, 0) + g
        return self._linear_backward(dy, node)


class Conv1d(_Affine):
    kind = "conv1d"

    def __init__(self, name, in_channels, out_channels, kernel_length=7, stride=1, padding=None,
                 weight=None, bias=None):
        super().__init__(name)
        if kernel_length % 2 != 1:
            raise ConfigError(f"{name}: kernel length must be odd, got {kernel_length}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_length = kernel_length
        self.stride = stride
        self.padding = kernel_length // 2 if padding is None else padding
        if weight is None:
            weight = np.zeros((out_channels, in_channels, kernel_length), np.float32)
        if bias is None:
            bias = np.zeros(out_channels, dtype=np.asarray(weight).dtype)
        self.weight = Tensor(weight)
        self.bias = Tensor(bias)
        if self.weight.shape != (out_channels, in_channels, kernel_length):
            raise ConfigError(f"{name}: weight shape {self.weight.shape} does not match hyperparameters")

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def hyperparams(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_length": self.kernel_length, "stride": self.stride, "padding": self.padding}

    def weighted_layers(self):
        return 1

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.in_channels:
            raise ConfigError(f"layer {self.name!r}: expected {self.in_channels} input channels, got {c}")
        out_len = (length + 2 * self.padding - self.kernel_length) // self.stride + 1
        if out_len < 1:
            raise ConfigError(f"layer {self.name!r}: input length {length} too short")
        return (self.out_channels, out_len)

    def forward(self, x, train=False):
        b, c, length = x.shape
        p, k, s = self.padding, self.kernel_length, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        win = sliding_window_view(xp, k, axis=2)[:, :, ::s, :]
        lout = win.shape[2]
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * lout, c * k)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        y = (cols @ wmat.T + self.bias.data).reshape(b, lout, self.out_channels).transpose(0, 2, 1)
        return np.ascontiguousarray(y), {"cols": cols}

    def _linear_backward(self, dy, node):
        b, c, length = node.x.shape
        p, k, s = self.padding, self.kernel_length, self.stride
        lout = dy.shape[2]
        dyt = dy.transpose(0, 2, 1).reshape(b * lout, self.out_channels)
        dcols = (dyt @ self.weight.data.reshape(self.out_channels, -1)).reshape(b, lout, c, k)
        dxp = np.zeros((b, c, length + 2 * p), dtype=dy.dtype)
        for j in range(k):
            dxp[:, :, j:j + s * (lout - 1) + 1:s] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dxp[:, :, p:p + length]

    def _param_grads(self, dy, node):
        lout = dy.shape[2]
        dyt = dy.transpose(0, 2, 1).reshape(-1, self.out_channels)
        dw = (dyt.T @ node.cache["cols"]).reshape(self.weight.shape)
        return {"weight": dw, "bias": dyt.sum(axis=0, dtype=_acc(dyt.dtype)).astype(dy.dtype)}


class BatchNorm1d(Layer):
    kind = "batchnorm1d"

    def __init__(self, name, channels, eps=1e-5, momentum=0.1, gamma=None, beta=None,
                 running_mean=None, running_var=None):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, np.float32) if gamma is None else gamma)
        self.beta = Tensor(np.zeros(channels, np.float32) if beta is None else beta)
        self.running_mean = Tensor(np.zeros(channels, np.float32) if running_mean is None else running_mean)
        self.running_var = Tensor(np.ones(channels, np.float32) if running_var is None else running_var)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def hyperparams(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ConfigError(f"layer {self.name!r}: expected {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def eval_affine(self):
        """Per-channel (scale, shift) equivalent to eval-mode normalization."""
        inv = 1.0 / np.sqrt(self.running_var.data.astype(_acc(self.running_var.data.dtype)) + self.eps)
        scale = self.gamma.data * inv
        shift = self.beta.data - self.running_mean.data * scale
        dtype = self.gamma.data.dtype
        return scale.astype(dtype), shift.astype(dtype)

    def forward(self, x, train=False):
        if not train:
            scale, shift = self.eval_affine()
            return x * scale[None, :, None] + shift[None, :, None], {"train": False, "scale": scale}
        mean = x.mean(axis=(0, 2), dtype=_acc(x.dtype))
        var = x.var(axis=(0, 2), dtype=_acc(x.dtype))
        n = x.shape[0] * x.shape[2]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((x - mean[None, :, None]) * inv[None, :, None]).astype(x.dtype)
        y = self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]
        m = self.momentum
        dtype = self.running_mean.data.dtype
        unbiased = var * n / max(n - 1, 1)
        self.running_mean.data = ((1 - m) * self.running_mean.data + m * mean).astype(dtype)
        self.running_var.data = ((1 - m) * self.running_var.data + m * unbiased).astype(dtype)
        return y, {"train": True, "xhat": xhat, "inv": inv.astype(x.dtype)}

    def backward(self, dy, node, ctx, ref=None):
        cache = node.cache
        if not cache["train"]:
            if ctx.rule == "lrp-epsilon":
                return node.x * cache["scale"][None, :, None] * dy / _stabilize(node.y, ctx.epsilon)
            if ctx.param_grads is not None:
                inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
                xhat = (node.x - self.running_mean.data[None, :, None]) * inv[None, :, None]
                self._accumulate(ctx, dy, xhat)
            return dy * cache["scale"][None, :, None]
        if ctx.rule != "standard":
            raise UsageError(f"rule {ctx.rule!r} is only defined for eval-mode normalization")
        xhat, inv = cache["xhat"], cache["inv"]
        if ctx.param_grads is not None:
            self._accumulate(ctx, dy, xhat)
        n = dy.shape[0] * dy.shape[2]
        dxhat = dy * self.gamma.data[None, :, None]
        s1 = dxhat.sum(axis=(0, 2), dtype=_acc(dxhat.dtype)).astype(dy.dtype)
        s2 = (dxhat * xhat).sum(axis=(0, 2), dtype=_acc(dxhat.dtype)).astype(dy.dtype)
        return (inv[None, :, None] / n) * (n * dxhat - s1[None, :, None] - xhat * s2[None, :, None])

    def _accumulate(self, ctx, dy, xhat):
        for pname, g in (("gamma", (dy * xhat).sum(axis=(0, 2), dtype=_acc(dy.dtype))),
                         ("beta", dy.sum(axis=(0, 2), dtype=_acc(dy.dtype)))):
            key = f"{self.name}.{pname}"
            ctx.param_grads[key] = ctx.param_grads.get(key, 0) + g.astype(dy.dtype)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        return np.maximum(x, 0), {}

    def backward(self, dy, node, ctx, ref=None):
        rule = ctx.rule
        if rule == "lrp-epsilon":
            return dy
        if rule == "guided-relu":
            return dy * ((node.x > 0) & (dy > 0))
        if rule == "deeplift-rescale":
            if ref is None:
                raise UsageError("deeplift-rescale backward needs a reference tape")
            dx = node.x - ref.x
            safe = np.abs(dx) > DEEPLIFT_DELTA_MIN
            mult = np.where(safe, (node.y - ref.y) / np.where(safe, dx, 1), node.x > 0)
            return dy * mult.astype(dy.dtype)
        return dy * (node.x > 0)


class Residual(Layer):
    """``main(x) + shortcut(x)``.

    The shortcut is parameter-free: it subsamples by ``stride`` and zero-pads
    extra output channels, so the block adds no weighted layers beyond the
    main branch.
    """

    kind = "add-residual"

    def __init__(self, name, main, in_channels, out_channels, stride=1):
        super().__init__(name)
        self.main = list(main)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        if out_channels < in_channels:
            raise ConfigError(f"{name}: shortcut cannot reduce channels")

    def params(self):
        return {}

    def hyperparams(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "stride": self.stride}

    def spec(self):
        d = super().spec()
        d["main"] = [layer.spec() for layer in self.main]
        return d

    def sublayers(self):
        return self.main

    def weighted_layers(self):
        return sum(layer.weighted_layers() for layer in self.main)

    def astype(self, dtype):
        new = copy.copy(self)
        new.main = [layer.astype(dtype) for layer in self.main]
        return new

    def out_shape(self, in_shape):
        shape = in_shape
        for layer in self.main:
            shape = layer.out_shape(shape)
        if in_shape[0] != self.in_channels:
            raise ConfigError(f"layer {self.name!r}: expected {self.in_channels} channels, got {in_shape[0]}")
        sc = (self.out_channels, -(-in_shape[1] // self.stride))
        if shape != sc:
            raise ConfigError(f"layer {self.name!r}: main branch shape {shape} != shortcut shape {sc}")
        return shape

    def _shortcut(self, x):
        xs = x[:, :, ::self.stride]
        extra = self.out_channels - self.in_channels
        if extra:
            xs = np.concatenate([xs, np.zeros((xs.shape[0], extra, xs.shape[2]), dtype=x.dtype)], axis=1)
        return xs

    def _shortcut_backward(self, dy, x_shape):
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, ::self.stride] = dy[:, :self.in_channels]
        return dx

    def forward(self, x, train=False):
        h, nodes = x, []
        for layer in self.main:
            out, cache = layer.forward(h, train)
            nodes.append(TapeNode(layer, h, out, cache))
            h = out
        sc = self._shortcut(x)
        return h + sc, {"nodes": nodes, "main": h, "shortcut": sc}

    def backward(self, dy, node, ctx, ref=None):
        if ctx.rule == "lrp-epsilon":
            z_main, z_sc = node.cache["main"], node.cache["shortcut"]
            denom = _stabilize(z_main + z_sc, ctx.epsilon)
            d_main = z_main / denom * dy
            d_sc = z_sc / denom * dy
            xs = z_sc[:, :self.in_channels]
            r_sc = d_sc[:, :self.in_channels] * (xs / _stabilize(xs, ctx.epsilon))
            dx_sc = self._shortcut_backward(r_sc, node.x.shape)
        else:
            d_main = dy
            dx_sc = self._shortcut_backward(dy, node.x.shape)
        ref_nodes = ref.cache["nodes"] if ref is not None else None
        dx_main = _backward_nodes(node.cache["nodes"], d_main, ctx, ref_nodes)
        return dx_main + dx_sc


class GlobalAvgPool(_Affine):
    kind = "global-avg-pool"

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False):
        return x.mean(axis=2, dtype=_acc(x.dtype)).astype(x.dtype), {}

    def _linear_backward(self, dy, node):
        length = node.x.shape[2]
        return np.broadcast_to(dy[:, :, None] / length, node.x.shape).astype(dy.dtype)


class Dense(_Affine):
    kind = "dense"

    def __init__(self, name, in_features, out_features, weight=None, bias=None):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        if weight is None:
            weight = np.zeros((out_features, in_features), np.float32)
        if bias is None:
            bias = np.zeros(out_features, dtype=np.asarray(weight).dtype)
        self.weight = Tensor(weight)
        self.bias = Tensor(bias)
        if self.weight.shape != (out_features, in_features):
            raise ConfigError(f"{name}: weight shape {self.weight.shape} does not match hyperparameters")

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def hyperparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def weighted_layers(self):
        return 1

    def out_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.in_features:
            raise ConfigError(f"layer {self.name!r}: expected {self.in_features} input features, got {n}")
        return (self.out_features,)

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.weight.data.T + self.bias.data, {}

    def _linear_backward(self, dy, node):
        return (dy @ self.weight.data).reshape(node.x.shape)

    def _param_grads(self, dy, node):
        flat = node.x.reshape(node.x.shape[0], -1)
        return {"weight": dy.T @ flat, "bias": dy.sum(axis=0, dtype=_acc(dy.dtype)).astype(dy.dtype)}


class Softmax(Layer):
    """Classifier head marker; logits stop before it, ``predict`` applies it."""

    kind = "softmax"

    def forward(self, x, train=False):
        return softmax(x), {}


def softmax(z, axis=-1):
    z = np.asarray(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return (e / e.sum(axis=axis, keepdims=True)).astype(z.dtype if z.dtype.kind == "f" else np.float64)


class Network:
    """Ordered layer graph with an optional softmax head."""

    def __init__(self, layers, input_shape, class_names=(), config=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.class_names = list(class_names)
        self.config = dict(config or {})
        self._check()

    def _check(self):
        heads = [i for i, layer in enumerate(self.layers) if layer.kind == "softmax"]
        if len(heads) > 1 or (heads and heads[0] != len(self.layers) - 1):
            raise ConfigError("network must have at most one softmax head, placed last")
        shape = self.input_shape
        for layer in self.body:
            shape = layer.out_shape(shape)
        self.output_shape = shape

    @property
    def body(self):
        return [layer for layer in self.layers if layer.kind != "softmax"]

    @property
    def dtype(self):
        for _, t in self.named_params():
            return t.data.dtype
        return np.dtype(np.float32)

    def walk(self):
        """Depth-first iteration over all layers, residual branches included."""
        for layer in self.layers:
            yield layer
            if isinstance(layer, Residual):
                yield from layer.main

    def layer(self, name):
        for layer in self.walk():
            if layer.name == name:
                return layer
        raise KeyError(name)

    def weighted_layers(self):
        return sum(layer.weighted_layers() for layer in self.layers)

    def named_params(self):
        for layer in self.walk():
            for pname, t in layer.params().items():
                yield f"{layer.name}.{pname}", t

    def named_buffers(self):
        for layer in self.walk():
            for bname, t in layer.buffers().items():
                yield f"{layer.name}.{bname}", t

    def state(self):
        return {**{k: t.data for k, t in self.named_params()}, **{k: t.data for k, t in self.named_buffers()}}

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        return Network([layer.astype(dtype) for layer in self.layers], self.input_shape,
                       self.class_names, self.config)

    def forward(self, x, train=False):
        logits, _ = forward(self, x, record=False, train=train)
        return logits


def _as_batch(net, x):
    x = np.asarray(x)
    c, length = net.input_shape
    if x.ndim == 1:
        x = x.reshape(1, 1, -1)
        batched = False
    elif x.ndim == 2 and x.shape == (c, length):
        x = x[None]
        batched = False
    elif x.ndim == 2 and c == 1:
        x = x[:, None, :]
        batched = True
    elif x.ndim == 3:
        batched = True
    else:
        raise ConfigError(f"cannot interpret input of shape {x.shape}")
    if x.shape[1:] != (c, length):
        first = net.body[0].name if net.body else "<input>"
        raise ConfigError(f"layer {first!r}: input shape {x.shape[1:]} does not match expected {(c, length)}")
    return x.astype(net.dtype, copy=False), batched


def forward(net: Network, x, record=False, train=False):
    """Run the network body; returns ``(logits, tape)`` (tape is None unless ``record``)."""
    xb, batched = _as_batch(net, x)
    h, nodes = xb, []
    for layer in net.body:
        out, cache = layer.forward(h, train)
        if record:
            nodes.append(TapeNode(layer, h, out, cache))
        h = out
    logits = h.reshape(h.shape[0], -1)
    if not batched:
        logits = logits[0]
    tape = Tape(nodes, xb, logits, batched, train, input_shape=np.shape(x)) if record else None
    return logits, tape


def _backward_nodes(nodes, dy, ctx, ref_nodes=None):
    for i in range(len(nodes) - 1, -1, -1):
        node = nodes[i]
        node.rule = ctx.rule
        if node.layer.name in ctx.capture:
            ctx.captured[node.layer.name] = (node.y, dy)
        ref = ref_nodes[i] if ref_nodes is not None else None
        dy = node.layer.backward(dy, node, ctx, ref)
    return dy


def backward(tape, d_logits, rule="standard", ref_tape=None, epsilon=1e-6, param_grads=False, capture=()):
    """Propagate ``d_logits`` back to the input.

    Returns ``(d_x, d_params)``; ``d_params`` maps ``layer.param`` names to
    gradients and is only filled when ``param_grads`` is set (standard rule).
    For layers named in ``capture``, ``tape.captured[name]`` holds the pair
    (layer output, gradient w.r.t. that output).
    """
    if tape is None:
        raise UsageError("backward needs a tape from forward(..., record=True)")
    if rule not in RULES:
        raise UsageError(f"unknown backward rule {rule!r}")
    if rule == "deeplift-rescale" and ref_tape is None:
        raise UsageError("deeplift-rescale needs ref_tape (forward pass on the baseline)")
    if param_grads and rule != "standard":
        raise UsageError("parameter gradients are only defined for the standard rule")
    d_logits = np.asarray(d_logits, dtype=tape.logits.dtype)
    if d_logits.shape != tape.logits.shape:
        raise UsageError(f"d_logits shape {d_logits.shape} != logits shape {tape.logits.shape}")
    dy = d_logits if tape.batched else d_logits[None]
    last = tape.nodes[-1].y.shape if tape.nodes else tape.x.shape
    dy = dy.reshape(last)
    ctx = _BackwardCtx(rule, epsilon, {} if param_grads else None, frozenset(capture), {})
    ref_nodes = ref_tape.nodes if ref_tape is not None else None
    dx = _backward_nodes(tape.nodes, dy, ctx, ref_nodes)
    tape.captured = ctx.captured
    if not tape.batched:
        dx = dx[0]
        tape.captured = {k: (a[0], g[0]) for k, (a, g) in ctx.captured.items()}
    if tape.input_shape is not None:
        dx = dx.reshape(tape.input_shape)
    return dx, (ctx.param_grads or {})


def input_gradient(net, x, target, rule="standard", **kw):
    """Gradient of logit ``target`` (int or per-row array) w.r.t. a batch of inputs."""
    logits, tape = forward(net, x, record=True)
    d = np.zeros_like(logits)
    if logits.ndim == 1:
        d[target] = 1
    else:
        d[np.arange(len(d)), target] = 1
    dx, _ = backward(tape, d, rule, **kw)
    return logits, dx, tape


def _central_differences(net, x0, idx, epsilon, target, batch):
    numeric = np.empty(len(idx), dtype=net.dtype)
    for start in range(0, len(idx), batch):
        chunk = idx[start:start + batch]
        pert = np.repeat(x0.reshape(1, -1), 2 * len(chunk), axis=0)
        rows = np.arange(len(chunk))
        pert[2 * rows, chunk] += epsilon
        pert[2 * rows + 1, chunk] -= epsilon
        out = net.forward(pert.reshape((-1,) + x0.shape))[:, target]
        numeric[start:start + len(chunk)] = (out[0::2] - out[1::2]) / (2 * epsilon)
    return numeric


def _rel_error(a, numeric):
    return np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)


def grad_check(net, x, epsilon=1e-6, target=None, coords=None, batch=512, refine_above=1e-4):
    """Max relative error between analytic and central-difference input gradients.

    The analytic side runs in float64. Differences are taken in float64 and any
    coordinate whose error exceeds ``refine_above`` is re-differenced in extended
    precision, since float64 roundoff alone reaches ~1e-10 absolute at
    epsilon=1e-6 and swamps near-zero gradients. ``target`` defaults to the
    argmax logit; ``coords`` restricts the check to a subset of flat indices.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    net64 = net.astype(np.float64)
    xb, _ = _as_batch(net64, x)
    x0 = xb[0]
    if target is None:
        target = int(np.argmax(net64.forward(x0)))
    _, dx, _ = input_gradient(net64, x0, target)
    idx = np.arange(x0.size) if coords is None else np.asarray(coords)
    a = dx.reshape(-1)[idx]
    numeric = _central_differences(net64, x0, idx, epsilon, target, batch).astype(np.float64)
    rough = np.flatnonzero(_rel_error(a, numeric) > refine_above)
    if rough.size and np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
        wide = np.longdouble
        numeric[rough] = _central_differences(net.astype(wide), x0.astype(wide), idx[rough], wide(epsilon),
                                              target, batch)
    return float(np.max(_rel_error(a, numeric)))


def relu_preactivations(net, x):
    """All ReLU inputs for one forward pass, flattened (for kink-distance checks)."""
    _, tape = forward(net, x, record=True)
    out = []

    def visit(nodes):
        for node in nodes:
            if node.layer.kind == "relu":
                out.append(node.x.ravel())
            if node.layer.kind == "add-residual":
                visit(node.cache["nodes"])

    visit(tape.nodes)
    return np.concatenate(out) if out else np.zeros(0)


def fold_batchnorm(net: Network) -> Network:
    """Return an equivalent eval-mode network with each conv->batchnorm pair merged."""

    def fold(layers):
        out = []
        for layer in layers:
            if isinstance(layer, Residual):
                new = copy.copy(layer)
                new.main = fold(layer.main)
                out.append(new)
            elif isinstance(layer, BatchNorm1d) and out and isinstance(out[-1], Conv1d):
                conv = out.pop()
                scale, shift = layer.eval_affine()
                w = conv.weight.data * scale[:, None, None]
                b = conv.bias.data * scale + shift
                out.append(Conv1d(conv.name, conv.in_channels, conv.out_channels, conv.kernel_length,
                                  conv.stride, conv.padding, weight=w, bias=b))
            else:
                out.append(copy.deepcopy(layer))
        return out

    return Network(fold(net.layers), net.input_shape, net.class_names, {**net.config, "folded": True})


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _layer_from_spec(spec):
    kind, name, hp = spec["kind"], spec["name"], dict(spec.get("hyperparams", {}))
    if kind == "conv1d":
        return Conv1d(name, **hp)
    if kind == "batchnorm1d":
        return BatchNorm1d(name, **hp)
    if kind == "relu":
        return ReLU(name)
    if kind == "add-residual":
        return Residual(name, [_layer_from_spec(s) for s in spec["main"]], **hp)
    if kind == "global-avg-pool":
        return GlobalAvgPool(name)
    if kind == "dense":
        return Dense(name, **hp)
    if kind == "softmax":
        return Softmax(name)
    raise ManifestError(f"unknown layer kind {kind!r} in checkpoint")


def save_checkpoint(net: Network, path):
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor."""
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for key, t in list(net.named_params()) + list(net.named_buffers()):
        fname = f"{key}.f32"
        np.ascontiguousarray(t.data, dtype="<f4").tofile(os.path.join(path, fname))
        tensors[key] = {"file": fname, "shape": list(t.shape)}
    manifest = {
        "format": "ecgattr-checkpoint",
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "class_names": net.class_names,
        "config": net.config,
        "layers": [layer.spec() for layer in net.layers],
        "tensors": tensors,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> Network:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"checkpoint manifest not found: {mpath}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed checkpoint manifest {mpath}: {exc}") from None
    try:
        if manifest.get("format") != "ecgattr-checkpoint":
            raise ManifestError(f"{mpath}: not a checkpoint manifest")
        layers = [_layer_from_spec(s) for s in manifest["layers"]]
        net = Network(layers, manifest["input_shape"], manifest["class_names"], manifest.get("config"))
        entries = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed checkpoint manifest {mpath}: missing {exc}") from None
    slots = dict(net.named_params())
    slots.update(net.named_buffers())
    for key, slot in slots.items():
        if key not in entries:
            raise ManifestError(f"{mpath}: no tensor entry for {key}")
        fpath = os.path.join(path, entries[key]["file"])
        shape = tuple(entries[key]["shape"])
        if shape != slot.shape:
            raise ManifestError(f"{mpath}: tensor {key} has shape {shape}, layer expects {slot.shape}")
        if not os.path.exists(fpath):
            raise BlobError(f"missing checkpoint blob: {entries[key]['file']}")
        data = np.fromfile(fpath, dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise BlobError(f"truncated checkpoint blob: {entries[key]['file']}")
        slot.data = data.astype(np.float32).reshape(shape)
    return net


__all__ = [
    "Tensor", "TapeNode", "Tape", "Layer", "Conv1d", "BatchNorm1d", "ReLU", "Residual", "GlobalAvgPool",
    "Dense", "Softmax", "Network", "forward", "backward", "input_gradient", "grad_check", "softmax",
    "fold_batchnorm", "relu_preactivations", "save_checkpoint", "load_checkpoint", "RULES", "LoadError",
]
