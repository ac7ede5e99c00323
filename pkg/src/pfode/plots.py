"""Plot data from a sweep CSV: (x, y, series) triples plus a bare SVG line chart per metric."""

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import FormatError
from .experiment import _write_text

__all__ = ["PLOT_METRICS", "REQUIRED_COLUMNS", "plot_series", "emit_plots", "svg_chart"]

PLOT_METRICS = ("E", "sw2_1step", "sw2_2step", "sw2_4step")
REQUIRED_COLUMNS = ("loss_kind", "solver", "N", "omega") + PLOT_METRICS


def _load(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = list(reader)
    if header is None:
        return []
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"{path}: missing columns {', '.join(missing)}")
    return [r for r in rows if r.get("status", "ok") == "ok"]


def _x_axis(rows):
    if len({r["N"] for r in rows}) > 1 or len({r["omega"] for r in rows}) < 2:
        return "N"
    return "omega"


def plot_series(rows, metric):
    """Seed-averaged ``{series: [(x, y), ...]}`` sorted by x, and the x-axis name."""
    if not rows:
        return "N", {}
    axis = _x_axis(rows)
    other = "omega" if axis == "N" else "N"
    vary_other = len({r[other] for r in rows}) > 1
    acc = {}
    for r in rows:
        name = f"{r['loss_kind']}/{r['solver']}"
        if vary_other:
            name += f" {other}={float(r[other]):g}"
        acc.setdefault(name, {}).setdefault(float(r[axis]), []).append(float(r[metric]))
    series = {name: sorted((x, float(np.mean(ys))) for x, ys in pts.items())
              for name, pts in sorted(acc.items())}
    return axis, series


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_chart(series, xlabel, ylabel, width=520, height=340):
    """A self-contained SVG: one polyline (with point markers) per series."""
    left, right, top, bottom = 60, 150, 20, 45
    pw, ph = width - left - right, height - top - bottom
    pts = [p for s in series.values() for p in s]
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(0.0, min(ys)), max(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>']
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{left - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in sorted({p[0] for p in pts}):
        out.append(f'<text x="{sx(v):.1f}" y="{top + ph + 14}" text-anchor="middle">{v:g}</text>')
    for i, (name, s) in enumerate(series.items()):
        colour = _COLOURS[i % len(_COLOURS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
        out.extend(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{colour}"/>' for x, y in s)
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 26}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(csv_path, out_dir=None):
    """Write ``<stem>_<metric>.csv`` and ``.svg`` for each metric; returns the paths."""
    csv_path = Path(csv_path)
    out_dir = Path(out_dir) if out_dir is not None else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _load(csv_path)
    written = []
    for metric in PLOT_METRICS:
        axis, series = plot_series(rows, metric)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("x", "y", "series"))
        for name, pts in series.items():
            w.writerows((repr(x), repr(y), name) for x, y in pts)
        data = out_dir / f"{csv_path.stem}_{metric}.csv"
        svg = out_dir / f"{csv_path.stem}_{metric}.svg"
        _write_text(data, buf.getvalue())
        _write_text(svg, svg_chart(series, axis, metric))
        written += [data, svg]
    return written
