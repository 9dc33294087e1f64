"""Results tables (CSV + Markdown) and SVG signal/attribution overlays."""

from __future__ import annotations

import csv
import io
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .synth import BeatClass

MARKERS = {"raw": "•", "absolute": "◦"}
COLUMNS = ("method", "sign_mode", "marker", "localization", "pointing", "degradation", "average")


@dataclass
class TableRow:
    method: str
    sign_mode: str
    loc: float
    pointing: float
    degradation: float

    @property
    def average(self):
        return (self.loc + self.pointing + self.degradation) / 3


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    per_repeat: list = field(default_factory=list)

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def _fmt(v):
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _cells(row):
    return [row.method, row.sign_mode, MARKERS.get(row.sign_mode, "?"), _fmt(row.loc), _fmt(row.pointing),
            _fmt(row.degradation), _fmt(row.average)]


def report_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in table.rows:
        w.writerow(_cells(row))
    return buf.getvalue()


def report_markdown(table):
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for row in table.rows:
        lines.append("| " + " | ".join(_cells(row)) + " |")
    return "\n".join(lines) + "\n"


def render_report(table, out_dir, stem="results"):
    """Write ``<stem>.csv`` and ``<stem>.md``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = os.path.join(out_dir, f"{stem}.csv"), os.path.join(out_dir, f"{stem}.md")
    for path, text in zip(paths, (report_csv(table), report_markdown(table))):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return paths


def parse_markdown(text):
    """Rows of a rendered Markdown table as dicts keyed by column name."""
    lines = [ln for ln in text.splitlines() if ln.startswith("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    return [dict(zip(header, (c.strip() for c in ln.strip("|").split("|")))) for ln in lines[2:]]


# -- overlays ----------------------------------------------------------------

def _minmax(values):
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    return np.zeros_like(v) if span <= 0 else (v - v.min()) / span


def plot_overlay(example, attr, path, signal=None, width=1000, height=300, margin=10):
    """SVG with the signal (blue), min-max normalized attribution (green) and shaded abnormal beats."""
    signal = np.asarray(example.signal if signal is None else signal, dtype=np.float64)
    values = np.asarray(getattr(attr, "values", attr), dtype=np.float64)
    n = signal.size
    inner_w, inner_h = width - 2 * margin, height - 2 * margin
    sx = inner_w / max(n - 1, 1)

    def xs(i):
        return margin + i * sx

    def ys(v):
        return margin + (1.0 - v) * inner_h

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    for b in example.beats:
        if b.beat_class == BeatClass.NORMAL:
            continue
        ET.SubElement(svg, "rect", {
            "class": "abnormal", "x": f"{xs(b.start):.3f}", "y": str(margin),
            "width": f"{(b.end - b.start) * sx:.3f}", "height": str(inner_h),
            "fill": "#f4a582", "fill-opacity": "0.35",
            "data-start": str(b.start), "data-end": str(b.end), "data-class": b.beat_class.label,
        })
    for cls, series, colour in (("signal", _minmax(signal), "#1f77b4"), ("attribution", _minmax(values), "#2ca02c")):
        pts = " ".join(f"{xs(i):.3f},{ys(v):.3f}" for i, v in enumerate(series))
        ET.SubElement(svg, "polyline", {"class": cls, "points": pts, "fill": "none", "stroke": colour,
                                        "stroke-width": "1"})
    tree = ET.ElementTree(svg)
    with open(path, "wb") as fh:
        tree.write(fh, encoding="utf-8", xml_declaration=True)
    return path
