"""Synthetic beat-annotated ECG examples and the on-disk dataset format.

Each beat is a sum of Gaussian bumps (P, Q, R, S, T). Beats are placed on an
RR-interval schedule; premature beats shorten the preceding interval, PVCs
are followed by a compensatory pause. Beat boundaries are the floor midpoint
between adjacent R-peaks; the first beat starts at sample 0 and the last one
ends at the signal length.
"""

from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import AnnotationError, BlobError, InputError, ManifestError

DATASET_VERSION = 1
SIGNAL_LENGTH = 2049
SAMPLING_RATE = 250.0


class BeatClass(enum.IntEnum):
    NORMAL = 0
    PAC = 1
    PVC = 2

    @property
    def label(self):
        return CLASS_NAMES[self]

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        text = str(value).strip()
        if text.isdigit():
            return cls(int(text))
        for member in cls:
            if text.lower() in (member.name.lower(), CLASS_NAMES[member].lower(), CLASS_NAMES[member][0].lower()):
                return member
        raise InputError(f"unknown beat class {value!r}")


CLASS_NAMES = ("normal", "PAC", "PVC")


@dataclass(frozen=True)
class BeatAnnotation:
    r_peak: int
    start: int
    end: int
    beat_class: BeatClass

    def as_row(self):
        return [int(self.r_peak), int(self.start), int(self.end), int(self.beat_class)]


@dataclass
class Example:
    signal: np.ndarray
    beats: tuple
    label: BeatClass
    id: int = 0

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and tuple(self.beats) == tuple(other.beats)
                and self.signal.dtype == other.signal.dtype
                and self.signal.tobytes() == other.signal.tobytes())

    @property
    def abnormal_beats(self):
        return [b for b in self.beats if b.beat_class != BeatClass.NORMAL]


@dataclass(frozen=True)
class Wave:
    """One Gaussian bump: offset from the R-peak and width (sigma) in seconds."""

    offset: float
    width: float
    amplitude: float


def _default_morphology():
    normal = {
        "P": Wave(-0.17, 0.022, 0.15), "Q": Wave(-0.028, 0.008, -0.12), "R": Wave(0.0, 0.010, 1.0),
        "S": Wave(0.028, 0.009, -0.25), "T": Wave(0.26, 0.040, 0.30),
    }
    pac = dict(normal, P=Wave(-0.11, 0.020, -0.22))
    pvc = {
        "Q": Wave(-0.05, 0.018, -0.20), "R": Wave(0.0, 0.034, 1.50),
        "S": Wave(0.075, 0.030, -0.55), "T": Wave(0.32, 0.055, -0.40),
    }
    return {BeatClass.NORMAL: normal, BeatClass.PAC: pac, BeatClass.PVC: pvc}


@dataclass
class GeneratorParams:
    sampling_rate: float = SAMPLING_RATE
    length: int = SIGNAL_LENGTH
    mean_rr: float = 0.8
    rr_jitter: float = 0.05
    pac_prematurity: float = 0.58
    pvc_prematurity: float = 0.60
    min_abnormal: int = 1
    max_abnormal: int = 3
    noise: float = 0.03
    wander: float = 0.10
    amplitude_jitter: float = 0.10
    template_span: tuple = (-0.32, 0.50)
    morphology: dict = field(default_factory=_default_morphology)

    def __post_init__(self):
        if self.sampling_rate <= 0:
            raise InputError("sampling_rate must be positive")
        if not 0 <= self.rr_jitter < self.mean_rr:
            raise InputError("rr_jitter must lie in [0, mean_rr)")
        if not 1 <= self.min_abnormal <= self.max_abnormal:
            raise InputError("need 1 <= min_abnormal <= max_abnormal")

    def to_json(self):
        d = asdict(self)
        d["morphology"] = {CLASS_NAMES[k]: {w: list(asdict(v).values()) for w, v in waves.items()}
                           for k, waves in self.morphology.items()}
        d["template_span"] = list(self.template_span)
        return d


@dataclass
class BeatTemplate:
    waveform: np.ndarray
    r_offset: int
    rr_before: float
    compensatory_pause: bool
    beat_class: BeatClass


def gen_beat(beat_class, rr_before, params=None, amplitude_scale=1.0):
    """Waveform for one beat plus the index of its R-peak inside the waveform.

    ``rr_before`` is the nominal interval; premature classes report the
    shortened interval they actually follow.
    """
    if rr_before <= 0:
        raise InputError("rr_before must be positive")
    params = params or GeneratorParams()
    beat_class = BeatClass.parse(beat_class)
    fs = params.sampling_rate
    lo, hi = params.template_span
    r_offset = int(round(-lo * fs))
    t = (np.arange(int(round((hi - lo) * fs)) + 1) - r_offset) / fs
    wave = np.zeros_like(t)
    for w in params.morphology[beat_class].values():
        wave += amplitude_scale * w.amplitude * np.exp(-0.5 * ((t - w.offset) / w.width) ** 2)
    if beat_class == BeatClass.PAC:
        rr = rr_before * params.pac_prematurity
    elif beat_class == BeatClass.PVC:
        rr = rr_before * params.pvc_prematurity
    else:
        rr = rr_before
    return BeatTemplate(wave, r_offset, rr, beat_class == BeatClass.PVC, beat_class)


def derive_example_label(beats):
    """Example label from beat classes: normal iff every beat is normal."""
    classes = [BeatClass.parse(getattr(b, "beat_class", b)) for b in beats]
    if not classes:
        raise InputError("cannot label an example without beats")
    abnormal = {c for c in classes if c != BeatClass.NORMAL}
    if len(abnormal) > 1:
        raise InputError("example mixes PAC and PVC beats")
    return abnormal.pop() if abnormal else BeatClass.NORMAL


def tile_beats(r_peaks, classes, length):
    """Annotations from sorted R-peaks using the floor-midpoint boundary rule."""
    r = [int(v) for v in r_peaks]
    bounds = [0] + [(a + b) // 2 for a, b in zip(r, r[1:])] + [length]
    return tuple(BeatAnnotation(r[i], bounds[i], bounds[i + 1], BeatClass.parse(classes[i]))
                 for i in range(len(r)))


def validate_beats(beats, length, strict=True):
    """Raise AnnotationError (with the offending beat index) on any invariant violation."""
    if not beats:
        raise AnnotationError("example has no beats", None)
    for i, b in enumerate(beats):
        if not (0 <= b.start <= b.r_peak < b.end <= length):
            raise AnnotationError(f"beat {i}: need 0 <= start <= r_peak < end <= {length}, got "
                                  f"start={b.start} r_peak={b.r_peak} end={b.end}", i)
        if i and b.start < beats[i - 1].end:
            raise AnnotationError(f"beat {i} overlaps beat {i - 1} (start {b.start} < previous end "
                                  f"{beats[i - 1].end})", i)
        if strict and i and (b.start != beats[i - 1].end or b.start != (beats[i - 1].r_peak + b.r_peak) // 2):
            raise AnnotationError(f"beat {i}: boundary {b.start} breaks the midpoint tiling rule", i)
    if strict and (beats[0].start != 0 or beats[-1].end != length):
        idx = 0 if beats[0].start != 0 else len(beats) - 1
        raise AnnotationError("beats must cover the whole signal", idx)


def validate_example(example, length=SIGNAL_LENGTH, strict=True):
    if example.signal.shape != (length,):
        raise AnnotationError(f"example {example.id}: signal has shape {example.signal.shape}, expected ({length},)")
    validate_beats(example.beats, length, strict)
    try:
        label = derive_example_label(example.beats)
    except InputError as exc:
        raise AnnotationError(f"example {example.id}: {exc}") from None
    if label != example.label:
        raise AnnotationError(f"example {example.id}: label {example.label.label} disagrees with beats ({label.label})")


def _pick_abnormal(rng, n_abnormal, eligible):
    """Choose ``n_abnormal`` non-adjacent indices from ``eligible``."""
    for _ in range(100):
        picks = np.sort(rng.choice(eligible, size=n_abnormal, replace=False))
        if np.all(np.diff(picks) > 1):
            return set(int(p) for p in picks)
    raise InputError("cannot place that many non-adjacent abnormal beats; lower max_abnormal")


def gen_example(beat_class, params=None, rng=None, example_id=0):
    params = params or GeneratorParams()
    rng = rng if rng is not None else np.random.default_rng()
    beat_class = BeatClass.parse(beat_class)
    fs, length = params.sampling_rate, params.length
    duration = length / fs
    rr_max = params.mean_rr + params.rr_jitter

    first_r = rng.uniform(0.15, 0.15 + params.mean_rr)
    n_safe = int((duration - first_r - 0.45) // rr_max)
    if beat_class == BeatClass.NORMAL:
        abnormal = set()
    else:
        n_abnormal = int(rng.integers(params.min_abnormal, params.max_abnormal + 1))
        eligible = np.arange(1, n_safe + 1)
        abnormal = _pick_abnormal(rng, min(n_abnormal, (len(eligible) + 1) // 2), eligible)

    # beat -1 sits before the signal so the leading edge carries ECG content
    times, classes, pause = [first_r - params.mean_rr], [BeatClass.NORMAL], False
    i, t = 0, first_r
    templates = []
    while t < duration + 0.6:
        nominal = params.mean_rr + rng.uniform(-params.rr_jitter, params.rr_jitter)
        cls = beat_class if i in abnormal else BeatClass.NORMAL
        scale = 1.0 + rng.uniform(-params.amplitude_jitter, params.amplitude_jitter)
        tmpl = gen_beat(cls, nominal, params, scale)
        if i > 0:
            if pause:
                gap = 2 * params.mean_rr - (times[-1] - times[-2])
            else:
                gap = tmpl.rr_before
            t = times[-1] + gap
        pause = tmpl.compensatory_pause
        times.append(t)
        classes.append(cls)
        templates.append(tmpl)
        i += 1
    lead = gen_beat(BeatClass.NORMAL, params.mean_rr, params)
    templates.insert(0, lead)

    signal = np.zeros(length)
    r_peaks, beat_classes = [], []
    for tm, cls, tmpl in zip(times, classes, templates):
        r = int(round(tm * fs))
        lo = r - tmpl.r_offset
        a, b = max(lo, 0), min(lo + len(tmpl.waveform), length)
        if a < b:
            signal[a:b] += tmpl.waveform[a - lo:b - lo]
        if 0 <= r < length:
            r_peaks.append(r)
            beat_classes.append(cls)
    n = np.arange(length) / fs
    signal += params.wander * np.sin(2 * np.pi * rng.uniform(0.15, 0.4) * n + rng.uniform(0, 2 * np.pi))
    signal += params.noise * rng.standard_normal(length)

    beats = tile_beats(r_peaks, beat_classes, length)
    example = Example(signal.astype(np.float32), beats, derive_example_label(beats), example_id)
    if example.label != beat_class:
        raise AssertionError("generator dropped abnormal beats outside the signal")
    return example


@dataclass
class Dataset:
    train: list
    test: list
    params: GeneratorParams = field(default_factory=GeneratorParams)
    seed: int = 0

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.train == other.train and self.test == other.test
                and self.params.sampling_rate == other.params.sampling_rate)

    def split(self, name):
        if name not in ("train", "test"):
            raise KeyError(name)
        return getattr(self, name)


SPLITS = ("train", "test")


def example_rng(seed, split, index):
    return np.random.default_rng([int(seed), SPLITS.index(split), int(index)])


def gen_split(n_per_class, seed, split, params=None):
    params = params or GeneratorParams()
    out = []
    for j in range(3 * n_per_class):
        out.append(gen_example(BeatClass(j % 3), params, example_rng(seed, split, j), example_id=j))
    return out


def gen_dataset(n_per_class, seed, params=None):
    """Balanced train/test splits; split streams differ so the splits are disjoint."""
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    params = params or GeneratorParams()
    return Dataset(gen_split(n_per_class, seed, "train", params),
                   gen_split(n_per_class, seed, "test", params), params, seed)


# -- on-disk format ----------------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "signals.f32le"


def write_dataset(dataset, path):
    os.makedirs(path, exist_ok=True)
    records, offset = {}, 0
    with open(os.path.join(path, BLOB), "wb") as fh:
        for split in SPLITS:
            records[split] = []
            for ex in dataset.split(split):
                sig = np.ascontiguousarray(ex.signal, dtype="<f4")
                fh.write(sig.tobytes())
                records[split].append({
                    "id": int(ex.id), "offset": offset, "length": int(sig.size), "label": int(ex.label),
                    "beats": [b.as_row() for b in ex.beats],
                })
                offset += int(sig.size)
    manifest = {
        "format": "ecgattr-dataset",
        "version": DATASET_VERSION,
        "sampling_rate": dataset.params.sampling_rate,
        "class_names": list(CLASS_NAMES),
        "seed": dataset.seed,
        "counts": {s: len(records[s]) for s in SPLITS},
        "blob": BLOB,
        "splits": records,
    }
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_dataset(path, strict=True):
    mpath = os.path.join(path, MANIFEST)
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"dataset manifest not found: {mpath}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed dataset manifest {mpath}: {exc}") from None
    try:
        if manifest["format"] != "ecgattr-dataset":
            raise ManifestError(f"{mpath}: not a dataset manifest")
        if manifest["version"] != DATASET_VERSION:
            raise ManifestError(f"{mpath}: unsupported version {manifest['version']}")
        blob_name = manifest["blob"]
        splits = {s: manifest["splits"][s] for s in SPLITS}
        fs = float(manifest["sampling_rate"])
        for s in SPLITS:
            if manifest["counts"][s] != len(splits[s]):
                raise ManifestError(f"{mpath}: counts[{s}] disagrees with the record list")
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed dataset manifest {mpath}: missing or bad field {exc}") from None
    bpath = os.path.join(path, blob_name)
    if not os.path.exists(bpath):
        raise BlobError(f"dataset blob missing: {blob_name}")
    blob = np.fromfile(bpath, dtype="<f4")
    out = {}
    for s in SPLITS:
        out[s] = []
        for rec in splits[s]:
            try:
                off, n = int(rec["offset"]), int(rec["length"])
                beats = tuple(BeatAnnotation(int(r), int(a), int(b), BeatClass.parse(c)) for r, a, b, c in rec["beats"])
                label = BeatClass.parse(rec["label"])
                ex_id = int(rec["id"])
            except (KeyError, TypeError, ValueError, InputError) as exc:
                raise ManifestError(f"{mpath}: bad record in split {s}: {exc}") from None
            if off < 0 or off + n > blob.size:
                raise BlobError(f"dataset blob {blob_name} truncated: example {ex_id} needs samples "
                                f"[{off}, {off + n}) but blob has {blob.size}")
            ex = Example(blob[off:off + n].astype(np.float32), beats, label, ex_id)
            validate_example(ex, n, strict)
            out[s].append(ex)
    return Dataset(out["train"], out["test"], GeneratorParams(sampling_rate=fs), int(manifest.get("seed", 0)))


def import_csv(signal_csv, annotation_csv, example_id=0, length=SIGNAL_LENGTH):
    """Build an Example from a one-sample-per-row signal CSV and a beat CSV.

    The beat CSV has columns ``r_peak,start,end,class``. Beats must not overlap;
    the offending beat index is reported otherwise.
    """
    values = []
    with open(signal_csv, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if values:
                    raise InputError(f"{signal_csv}: non-numeric sample {row[0]!r}") from None
    if len(values) != length:
        raise InputError(f"{signal_csv}: expected {length} samples, got {len(values)}")
    beats = []
    with open(annotation_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"r_peak", "start", "end", "class"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{annotation_csv}: missing columns {sorted(missing)}")
        for row in reader:
            beats.append(BeatAnnotation(int(row["r_peak"]), int(row["start"]), int(row["end"]),
                                        BeatClass.parse(row["class"])))
    beats.sort(key=lambda b: b.start)
    validate_beats(beats, length, strict=False)
    label = derive_example_label(beats)
    return Example(np.asarray(values, dtype=np.float32), tuple(beats), label, example_id)


def export_csv(example, signal_csv, annotation_csv):
    np.savetxt(signal_csv, example.signal.astype(np.float64), fmt="%.9g")
    with open(annotation_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r_peak", "start", "end", "class"])
        for b in example.beats:
            w.writerow([b.r_peak, b.start, b.end, CLASS_NAMES[b.beat_class]])
