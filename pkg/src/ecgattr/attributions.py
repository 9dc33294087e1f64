"""Feature-attribution methods for single-lead signals.

All methods explain the logit of a target class for one model-space
(standardized) signal and return one value per input sample. Sign handling
(raw vs absolute) is applied last by :func:`attribute`.

Perturbation methods (LIME, KernelSHAP) accept either a :class:`Network` or a
plain callable mapping a ``(n, length)`` batch to ``n`` scores, which is what
the oracle tests use.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Network
from .errors import AttributionError, BlobError, InputError, ManifestError, UsageError
from .model import last_conv_name


class MethodId(str, enum.Enum):
    RANDOM = "Random"
    SALIENCY = "Saliency"
    INPUT_X_GRADIENT = "InputXGradient"
    GUIDED_BACKPROP = "GuidedBackprop"
    INTEGRATED_GRADIENTS = "IntegratedGradients"
    DEEPLIFT = "DeepLIFT"
    DEEPSHAP = "DeepSHAP"
    LRP = "LRP"
    LIME = "LIME"
    KERNELSHAP = "KernelSHAP"
    GRADCAM = "GradCAM"
    GUIDED_GRADCAM = "GuidedGradCAM"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").replace(" ", "").lower()
        for m in cls:
            if m.value.lower() == key or m.name.replace("_", "").lower() == key:
                return m
        raise UsageError(f"unknown attribution method {value!r}")


ALL_METHODS = tuple(MethodId)


class SignMode(str, enum.Enum):
    RAW = "raw"
    ABSOLUTE = "absolute"


@dataclass
class AttributionMap:
    values: np.ndarray
    method: MethodId
    sign_mode: SignMode
    target_class: int
    example_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.method = MethodId.parse(self.method)
        self.sign_mode = SignMode(self.sign_mode)


@dataclass
class MethodParams:
    ig_steps: int = 64
    baseline: str = "zeros"
    deepshap_backgrounds: int = 8
    lrp_epsilon: float = 1e-6
    n_segments: int = 64
    n_samples: int = 1000
    ridge: float = 1e-2
    lime_kernel_width: float = 0.25
    gradcam_layer: str | None = None
    seed: int = 0
    batch: int = 256

    def __post_init__(self):
        if self.ig_steps < 1:
            raise InputError("ig_steps must be >= 1")
        if self.lrp_epsilon <= 0:
            raise InputError("lrp_epsilon must be positive")
        if self.n_segments < 1 or self.n_samples < 1:
            raise InputError("n_segments and n_samples must be positive")
        if self.baseline != "zeros":
            raise InputError("only the all-zeros baseline is supported")


def _x1d(x):
    x = np.asarray(x)
    return x.reshape(-1)


def _batched_logit(net, xs, c, batch=256):
    xs = np.asarray(xs)
    out = [net.forward(xs[i:i + batch].reshape(-1, *net.input_shape))[:, c] for i in range(0, len(xs), batch)]
    return np.concatenate(out).astype(np.float64)


def _gradient(net, x, c, rule="standard"):
    _, dx, _ = engine.input_gradient(net, _x1d(x), c, rule)
    return dx.reshape(-1)


def saliency(net, x, c):
    """Plain input gradient of the target logit (signed)."""
    return _gradient(net, x, c)


def input_x_gradient(net, x, c):
    return _x1d(x) * _gradient(net, x, c)


def guided_backprop(net, x, c):
    return _gradient(net, x, c, rule="guided-relu")


def integrated_gradients(net, x, baseline, m_steps, c, batch=64):
    """Midpoint Riemann sum of gradients along the straight path from ``baseline``."""
    x = _x1d(x).astype(net.dtype)
    b = _x1d(baseline).astype(net.dtype)
    if b.shape != x.shape:
        raise InputError(f"baseline length {b.size} != input length {x.size}")
    if m_steps < 1:
        raise InputError("m_steps must be >= 1")
    alphas = (np.arange(1, m_steps + 1) - 0.5) / m_steps
    total = np.zeros(x.size, dtype=np.float64)
    for i in range(0, m_steps, batch):
        a = alphas[i:i + batch].astype(net.dtype)
        path = b[None] + a[:, None] * (x - b)[None]
        _, dx, _ = engine.input_gradient(net, path.reshape(len(a), *net.input_shape), np.full(len(a), c))
        total += dx.reshape(len(a), -1).sum(axis=0, dtype=np.float64)
    return (x - b) * total / m_steps


def _deeplift_batch(net, xs, refs, c):
    """Per-row DeepLIFT-rescale attributions for paired inputs and references."""
    shape = (len(xs), *net.input_shape)
    logits, tape = engine.forward(net, xs.reshape(shape), record=True)
    _, ref_tape = engine.forward(net, refs.reshape(shape), record=True)
    d = np.zeros_like(logits)
    d[:, c] = 1
    mult, _ = engine.backward(tape, d, "deeplift-rescale", ref_tape=ref_tape)
    return (xs - refs).reshape(len(xs), -1) * mult.reshape(len(xs), -1)


def deeplift_rescale(net, x, baseline, c):
    x = _x1d(x).astype(net.dtype)
    b = _x1d(baseline).astype(net.dtype)
    if b.shape != x.shape:
        raise InputError(f"baseline length {b.size} != input length {x.size}")
    return _deeplift_batch(net, x[None], b[None], c)[0]


def deepshap(net, x, backgrounds, c, batch=64):
    """Mean of DeepLIFT-rescale attributions over a set of reference signals."""
    x = _x1d(x).astype(net.dtype)
    bgs = np.asarray(backgrounds, dtype=net.dtype).reshape(-1, x.size)
    if len(bgs) == 0:
        raise InputError("deepshap needs at least one background")
    total = np.zeros(x.size, dtype=np.float64)
    for i in range(0, len(bgs), batch):
        refs = bgs[i:i + batch]
        total += _deeplift_batch(net, np.repeat(x[None], len(refs), axis=0), refs, c).sum(axis=0, dtype=np.float64)
    return total / len(bgs)


def lrp_epsilon(net, x, c, epsilon=1e-6):
    """Epsilon-rule relevance, seeded with the target logit at the head."""
    logits, tape = engine.forward(net, _x1d(x), record=True)
    r = np.zeros_like(logits)
    r[c] = logits[c]
    rel, _ = engine.backward(tape, r, "lrp-epsilon", epsilon=epsilon)
    return rel.reshape(-1)


def segment_bounds(length, n_segments):
    """Boundaries of contiguous near-equal segments; the last absorbs the remainder."""
    if not 1 <= n_segments <= length:
        raise InputError(f"need 1 <= n_segments <= length, got {n_segments} for length {length}")
    base = length // n_segments
    return np.array([i * base for i in range(n_segments)] + [length])


def segment_signal(length, n_segments):
    """Segment id for every sample."""
    bounds = segment_bounds(length, n_segments)
    return np.repeat(np.arange(n_segments), np.diff(bounds))


def _as_scorer(model, c, batch):
    if isinstance(model, Network):
        return lambda xs: _batched_logit(model, xs, c, batch)
    if callable(model):
        return lambda xs: np.asarray(model(xs), dtype=np.float64).reshape(-1)
    raise UsageError("model must be a Network or a callable")


def _masked_inputs(x, segments, masks):
    """Replace segments with mask 0 by their mean value."""
    n_seg = masks.shape[1]
    means = np.bincount(segments, weights=x, minlength=n_seg) / np.bincount(segments, minlength=n_seg)
    keep = masks[:, segments].astype(bool)
    return np.where(keep, x[None, :], means[segments][None, :])


def _evaluate_masks(score, x, segments, masks, batch):
    out = [score(_masked_inputs(x, segments, masks[i:i + batch])) for i in range(0, len(masks), batch)]
    return np.concatenate(out)


def _ridge(z, y, w, lam):
    design = np.hstack([np.ones((len(z), 1)), z])
    a = design.T @ (design * w[:, None])
    a[1:, 1:] += lam * np.eye(z.shape[1])
    coef = np.linalg.solve(a, design.T @ (w * y))
    if not np.all(np.isfinite(coef)):
        raise np.linalg.LinAlgError("non-finite surrogate coefficients")
    return coef


def lime_1d(model, x, c=0, params=None, rng=None):
    """Weighted ridge surrogate over random segment masks; coefficients broadcast per segment."""
    params = params or MethodParams()
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    x = _x1d(x).astype(np.float64)
    segments = segment_signal(x.size, params.n_segments)
    m = params.n_segments
    masks = (rng.random((params.n_samples, m)) < 0.5).astype(np.float64)
    y = _evaluate_masks(_as_scorer(model, c, params.batch), x, segments, masks, params.batch)
    d = 1.0 - masks.mean(axis=1)
    w = np.exp(-d ** 2 / params.lime_kernel_width ** 2)
    lam = params.ridge
    try:
        coef = _ridge(masks, y, w, lam)
    except np.linalg.LinAlgError:
        try:
            coef = _ridge(masks, y, w, max(lam, 1e-6) * 10)
        except np.linalg.LinAlgError as exc:
            raise AttributionError(f"LIME surrogate regression is singular: {exc}") from None
    return coef[1:][segments]


def shapley_kernel(m, s):
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _coalitions(m, n_samples, rng):
    """Coalition masks and regression weights (all-off/all-on handled as constraints)."""
    if 2 ** m - 2 <= n_samples:
        rows, weights = [], []
        for code in range(1, 2 ** m - 1):
            z = np.array([(code >> j) & 1 for j in range(m)], dtype=np.float64)
            rows.append(z)
            weights.append(shapley_kernel(m, int(z.sum())))
        return np.array(rows), np.array(weights)
    sizes = np.arange(1, m)
    size_mass = (m - 1) / (sizes * (m - sizes))
    drawn = rng.choice(sizes, size=n_samples, p=size_mass / size_mass.sum())
    masks = np.zeros((n_samples, m))
    for i, s in enumerate(drawn):
        masks[i, rng.permutation(m)[:s]] = 1
    # sampling already follows the kernel, so importance weights are uniform
    return masks, np.ones(n_samples)


def kernelshap_1d(model, x, c=0, params=None, rng=None):
    """Shapley-kernel weighted regression with the efficiency constraint enforced exactly."""
    params = params or MethodParams()
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    x = _x1d(x).astype(np.float64)
    m = params.n_segments
    segments = segment_signal(x.size, m)
    score = _as_scorer(model, c, params.batch)
    ends = _evaluate_masks(score, x, segments, np.array([np.zeros(m), np.ones(m)]), params.batch)
    f_off, f_on = ends
    if m == 1:
        return np.full(x.size, f_on - f_off)
    masks, w = _coalitions(m, params.n_samples, rng)
    y = _evaluate_masks(score, x, segments, masks, params.batch) - f_off
    delta = f_on - f_off
    # eliminate the last coefficient via sum(phi) = delta
    z = masks[:, :-1] - masks[:, -1:]
    target = y - masks[:, -1] * delta
    sw = np.sqrt(w)
    phi, *_ = np.linalg.lstsq(z * sw[:, None], target * sw, rcond=None)
    phi = np.append(phi, delta - phi.sum())
    return phi[segments]


def grad_cam(net, x, c, target_layer=None, length=None):
    """Channel-weighted activation map of ``target_layer``, rectified and resampled to the input."""
    target_layer = target_layer or last_conv_name(net)
    try:
        net.layer(target_layer)
    except KeyError:
        raise UsageError(f"no layer named {target_layer!r}") from None
    logits, tape = engine.forward(net, _x1d(x), record=True)
    d = np.zeros_like(logits)
    d[c] = 1
    engine.backward(tape, d, capture=(target_layer,))
    acts, grads = tape.captured[target_layer]
    return cam_from_activations(acts, grads, length or net.input_shape[1])


def cam_from_activations(acts, grads, length):
    """``ReLU(sum_k mean_t(grad_k) * A_k)`` linearly interpolated to ``length`` samples."""
    acts = np.asarray(acts, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    alpha = grads.mean(axis=1)
    cam = np.maximum(alpha @ acts, 0.0)
    n = cam.size
    if n == 1:
        return np.full(length, cam[0])
    return np.interp(np.linspace(0, n - 1, length), np.arange(n), cam)


def guided_grad_cam(net, x, c, target_layer=None):
    return guided_backprop(net, x, c) * grad_cam(net, x, c, target_layer)


def random_map(length, rng):
    return rng.random(length)


def prepare_network(net):
    """Fold batch normalization once so modified rules see plain affine layers."""
    if net.config.get("folded"):
        return net
    return engine.fold_batchnorm(net)


def method_rng(seed, example_id, method):
    return np.random.default_rng([int(seed), int(example_id), ALL_METHODS.index(MethodId.parse(method))])


def raw_attribution(net, x, method, params=None, target=None, example_id=0, backgrounds=None):
    """Signed attribution values for one method (no sign-mode processing)."""
    params = params or MethodParams()
    method = MethodId.parse(method)
    x = _x1d(x).astype(net.dtype)
    if x.size != net.input_shape[1]:
        raise InputError(f"signal length {x.size} != network input length {net.input_shape[1]}")
    if target is None:
        target = int(np.argmax(net.forward(x)))
    baseline = np.zeros_like(x)
    rng = method_rng(params.seed, example_id, method)
    if method is MethodId.RANDOM:
        values = random_map(x.size, rng)
    elif method is MethodId.SALIENCY:
        values = saliency(net, x, target)
    elif method is MethodId.INPUT_X_GRADIENT:
        values = input_x_gradient(net, x, target)
    elif method is MethodId.GUIDED_BACKPROP:
        values = guided_backprop(net, x, target)
    elif method is MethodId.INTEGRATED_GRADIENTS:
        values = integrated_gradients(net, x, baseline, params.ig_steps, target)
    elif method is MethodId.DEEPLIFT:
        values = deeplift_rescale(net, x, baseline, target)
    elif method is MethodId.DEEPSHAP:
        if backgrounds is None:
            raise UsageError("DeepSHAP needs background signals")
        values = deepshap(net, x, backgrounds, target)
    elif method is MethodId.LRP:
        values = lrp_epsilon(net, x, target, params.lrp_epsilon)
    elif method is MethodId.LIME:
        values = lime_1d(net, x, target, params, rng)
    elif method is MethodId.KERNELSHAP:
        values = kernelshap_1d(net, x, target, params, rng)
    elif method is MethodId.GRADCAM:
        values = grad_cam(net, x, target, params.gradcam_layer)
    elif method is MethodId.GUIDED_GRADCAM:
        values = guided_grad_cam(net, x, target, params.gradcam_layer)
    else:  # pragma: no cover
        raise UsageError(f"unhandled method {method}")
    return np.asarray(values, dtype=np.float64).reshape(-1), target


def apply_sign_mode(values, sign_mode):
    return np.abs(values) if SignMode(sign_mode) is SignMode.ABSOLUTE else np.asarray(values)


def attribute(net, x, method, params=None, sign_mode=SignMode.RAW, target=None, example_id=0, backgrounds=None):
    net = prepare_network(net)
    values, target = raw_attribution(net, x, method, params, target, example_id, backgrounds)
    return AttributionMap(apply_sign_mode(values, sign_mode), MethodId.parse(method), SignMode(sign_mode),
                          target, example_id)


# -- attribution dumps -------------------------------------------------------

DUMP_INDEX = "attributions.json"
DUMP_BLOB = "attributions.f32le"


def write_attributions(maps, path):
    """One float32 record per (example, method, sign mode) plus a JSON index."""
    os.makedirs(path, exist_ok=True)
    index, offset = [], 0
    with open(os.path.join(path, DUMP_BLOB), "wb") as fh:
        for amap in maps:
            data = np.ascontiguousarray(amap.values, dtype="<f4")
            fh.write(data.tobytes())
            index.append({"example_id": int(amap.example_id), "method": amap.method.value,
                          "sign_mode": amap.sign_mode.value, "target_class": int(amap.target_class),
                          "offset": offset, "length": int(data.size)})
            offset += int(data.size)
    with open(os.path.join(path, DUMP_INDEX), "w") as fh:
        json.dump({"format": "ecgattr-attributions", "version": 1, "blob": DUMP_BLOB, "records": index},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_attributions(path):
    ipath = os.path.join(path, DUMP_INDEX)
    try:
        with open(ipath) as fh:
            index = json.load(fh)
        records = index["records"]
        blob_name = index["blob"]
        if index.get("format") != "ecgattr-attributions":
            raise ManifestError(f"{ipath}: not an attribution index")
    except FileNotFoundError:
        raise ManifestError(f"attribution index not found: {ipath}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed attribution index {ipath}: {exc}") from None
    bpath = os.path.join(path, blob_name)
    if not os.path.exists(bpath):
        raise BlobError(f"attribution blob missing: {blob_name}")
    blob = np.fromfile(bpath, dtype="<f4")
    out = []
    for rec in records:
        try:
            off, n = int(rec["offset"]), int(rec["length"])
            meta = (rec["method"], rec["sign_mode"], int(rec["target_class"]), int(rec["example_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{ipath}: bad record: {exc}") from None
        if off + n > blob.size:
            raise BlobError(f"attribution blob {blob_name} truncated at record for example {meta[3]}")
        out.append(AttributionMap(blob[off:off + n].copy(), meta[0], meta[1], meta[2], meta[3]))
    return out
