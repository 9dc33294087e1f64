"""Localization score, pointing game and degradation score for 1D attributions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Network, softmax
from .errors import ConfigError, InputError
from .synth import BeatClass


class DegenerateExample(InputError):
    """Fully perturbed input scores the same as the original; curve undefined."""


@dataclass
class EvalConfig:
    window: int = 16
    threshold: float = 0.9
    repeats: int = 5
    seed: int = 0
    window_reduce: str = "sum"
    max_examples: int | None = None
    clip_degradation: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.window_reduce not in ("sum", "mean"):
            raise ConfigError("window_reduce must be 'sum' or 'mean'")


def ground_truth(example):
    """Sorted sample indices covered by abnormal beats."""
    parts = [np.arange(b.start, b.end) for b in example.beats if b.beat_class != BeatClass.NORMAL]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def _values(attr):
    return np.asarray(getattr(attr, "values", attr), dtype=np.float64).reshape(-1)


def top_n(values, n):
    """Indices of the ``n`` largest values, ties broken toward lower indices."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return order[:n]


def localization_score(attr, gt):
    """IoU between the top-|gt| attributed samples and the ground-truth samples."""
    values = _values(attr)
    gt = np.unique(np.asarray(gt, dtype=np.int64))
    n = gt.size
    if n == 0:
        raise InputError("ground-truth set is empty")
    if n > values.size or gt[-1] >= values.size or gt[0] < 0:
        raise InputError("ground-truth indices fall outside the signal")
    inter = np.intersect1d(top_n(values, n), gt, assume_unique=True).size
    return inter / (2 * n - inter)


def pointing_game_hit(attr, gt):
    """Whether the (first) maximum-attribution sample lies in the ground truth."""
    gt = np.asarray(gt)
    if gt.size == 0:
        raise InputError("ground-truth set is empty")
    return bool(np.isin(int(np.argmax(_values(attr))), gt))


def pointing_game_accuracy(hits):
    hits = list(hits)
    if not hits:
        raise InputError("no pointing-game outcomes to average")
    return sum(bool(h) for h in hits) / len(hits)


def window_partition(length, window):
    """Window boundaries; the final window holds any remainder."""
    if window < 1 or length < 1:
        raise InputError("length and window must be positive")
    return np.append(np.arange(0, length, window), length)


def window_relevance(values, bounds, reduce="sum"):
    sums = np.add.reduceat(np.asarray(values, dtype=np.float64), bounds[:-1])
    return sums / np.diff(bounds) if reduce == "mean" else sums


def window_ranking(relevance, order):
    """Window indices in removal order; ties go to the lower window index."""
    rel = np.asarray(relevance, dtype=np.float64)
    if order == "MoRF":
        return np.argsort(-rel, kind="stable")
    if order == "LeRF":
        return np.argsort(rel, kind="stable")
    raise InputError(f"order must be 'MoRF' or 'LeRF', got {order!r}")


@dataclass
class DegradationCurve:
    order: str
    y: np.ndarray
    p: np.ndarray
    ranking: np.ndarray

    @property
    def n_windows(self):
        return len(self.ranking)


def perturbation_path(x, bounds, ranking):
    """Signals after cumulatively mean-filling the first t ranked windows, t = 0..N."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = len(bounds) - 1
    means = np.add.reduceat(x, bounds[:-1]) / np.diff(bounds)
    out = np.empty((n + 1, x.size))
    cur = x.copy()
    out[0] = cur
    for t, w in enumerate(ranking, start=1):
        cur[bounds[w]:bounds[w + 1]] = means[w]
        out[t] = cur
    return out


def _prob_fn(model, target, batch=256):
    if isinstance(model, Network):
        def probs(xs):
            res = []
            for i in range(0, len(xs), batch):
                chunk = xs[i:i + batch].astype(model.dtype).reshape(-1, *model.input_shape)
                res.append(softmax(model.forward(chunk).astype(np.float64))[:, target])
            return np.concatenate(res)
        return probs
    return lambda xs: np.asarray(model(xs), dtype=np.float64).reshape(-1)


def _scale(p, order, ranking, tol=1e-6):
    p0, pn = p[0], p[-1]
    if abs(p0 - pn) < tol:
        raise DegenerateExample(f"p_0 = {p0:.6g} and p_N = {pn:.6g} are indistinguishable")
    y = (p - pn) / (p0 - pn)
    y[0], y[-1] = 1.0, 0.0
    return DegradationCurve(order, y, p, np.asarray(ranking))


def degradation_curve(model, x, attr, window, order, target, reduce="sum"):
    """Scaled true-class probability under cumulative mean perturbation.

    ``model`` is a Network (probability of ``target`` via softmax) or a
    callable mapping ``(n, length)`` signals to probabilities.
    """
    values = _values(attr)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if values.size != x.size:
        raise InputError("attribution and signal lengths differ")
    bounds = window_partition(x.size, window)
    ranking = window_ranking(window_relevance(values, bounds, reduce), order)
    p = _prob_fn(model, target)(perturbation_path(x, bounds, ranking))
    return _scale(p, order, ranking)


def degradation_curves(model, x, attr, window, target, reduce="sum"):
    """MoRF and LeRF curves sharing one batched evaluation."""
    values = _values(attr)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if values.size != x.size:
        raise InputError("attribution and signal lengths differ")
    bounds = window_partition(x.size, window)
    rel = window_relevance(values, bounds, reduce)
    rm, rl = window_ranking(rel, "MoRF"), window_ranking(rel, "LeRF")
    pm_path, pl_path = perturbation_path(x, bounds, rm), perturbation_path(x, bounds, rl)
    # both paths share the original and the fully perturbed signal
    probs = _prob_fn(model, target)(np.concatenate([pm_path, pl_path[1:-1]]))
    n = len(rm)
    pm = probs[:n + 1]
    pl = np.concatenate([pm[:1], probs[n + 1:], pm[-1:]])
    return _scale(pm, "MoRF", rm), _scale(pl, "LeRF", rl)


def degradation_score(morf, lerf, clip=True):
    """Trapezoidal area between the LeRF and MoRF curves on a [0, 1] step axis.

    Scaled curves may leave [0, 1] when p_0 and p_N are close, so the area is
    clipped to [-1, 1] unless ``clip`` is off. Clipping is odd-symmetric, so
    swapping the curves still negates the score exactly.
    """
    if len(morf.y) != len(lerf.y):
        raise InputError("curves have different window counts")
    diff = np.asarray(lerf.y, dtype=np.float64) - np.asarray(morf.y, dtype=np.float64)
    n = len(diff) - 1
    if n < 1:
        raise InputError("need at least one window")
    area = float((diff[:-1] + diff[1:]).sum() / (2 * n))
    return min(1.0, max(-1.0, area)) if clip else area


@dataclass
class MetricRecord:
    example_id: int
    method: str
    sign_mode: str
    loc: float
    hit: bool
    degradation: float
    skipped: bool = False
    repeat: int = 0

    CSV_FIELDS = ("repeat", "example_id", "method", "sign_mode", "loc", "hit", "degradation", "skipped")

    def as_row(self):
        return {"repeat": self.repeat, "example_id": self.example_id, "method": self.method,
                "sign_mode": self.sign_mode, "loc": repr(float(self.loc)), "hit": int(self.hit),
                "degradation": "" if self.skipped else repr(float(self.degradation)),
                "skipped": int(self.skipped)}

    @classmethod
    def from_row(cls, row):
        skipped = bool(int(row["skipped"]))
        return cls(int(row["example_id"]), row["method"], row["sign_mode"], float(row["loc"]),
                   bool(int(row["hit"])), float("nan") if skipped else float(row["degradation"]),
                   skipped, int(row.get("repeat", 0) or 0))


def evaluate_example(model, x, example, attr, cfg=None, method="", sign_mode="", target=None, repeat=0):
    """All three metrics for one (example, attribution) pair."""
    cfg = cfg or EvalConfig()
    gt = ground_truth(example)
    target = int(example.label) if target is None else target
    loc = localization_score(attr, gt)
    hit = pointing_game_hit(attr, gt)
    try:
        morf, lerf = degradation_curves(model, x, attr, cfg.window, target, cfg.window_reduce)
        deg, skipped = degradation_score(morf, lerf, cfg.clip_degradation), False
    except DegenerateExample:
        deg, skipped = float("nan"), True
    return MetricRecord(int(example.id), str(getattr(method, "value", method)),
                        str(getattr(sign_mode, "value", sign_mode)), loc, hit, deg, skipped, repeat)


@dataclass
class AggregateRow:
    method: str
    sign_mode: str
    loc: float
    pointing: float
    degradation: float
    n: int
    n_skipped: int
    average: float = field(init=False)

    def __post_init__(self):
        self.average = (self.loc + self.pointing + self.degradation) / 3


def _mean(xs):
    xs = [x for x in xs if not (isinstance(x, float) and math.isnan(x))]
    return math.fsum(xs) / len(xs) if xs else float("nan")


def aggregate_by_mode(records):
    """Per-(method, sign mode) means, in first-seen order."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.sign_mode), []).append(r)
    rows = {}
    for key, rs in groups.items():
        rows[key] = AggregateRow(key[0], key[1], _mean([r.loc for r in rs]), pointing_game_accuracy(r.hit for r in rs),
                                 _mean([r.degradation for r in rs if not r.skipped]), len(rs),
                                 sum(r.skipped for r in rs))
    return rows


def better_mode(rows):
    """Pick one row per method: the sign mode with the higher average (raw on ties or NaN)."""
    best = {}
    for (method, _), row in rows.items():
        cur = best.get(method)
        if cur is None or (not math.isnan(row.average) and (math.isnan(cur.average) or row.average > cur.average)):
            best[method] = row
    return best


def aggregate(records):
    """Per-method rows (better sign mode only) with the average column."""
    return better_mode(aggregate_by_mode(records))
