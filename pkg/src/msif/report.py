"""CSV tables and SVG scatter plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .validation import pearson_r

INFLUENCE_COLUMNS = ("z_id", "x_id", "mode", "score", "cg_iters_1", "cg_iters_2", "converged",
                     "config_hash", "tool_version")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows):
    """RFC-4180 CSV with CRLF line endings; floats written round-trip exact."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def influence_rows(records, config_hash):
    for r in records:
        it1 = r.reports[0].iterations if r.reports else 0
        it2 = r.reports[1].iterations if len(r.reports) > 1 else 0
        yield {"z_id": r.z_id, "x_id": r.x_id, "mode": r.mode, "score": r.score,
               "cg_iters_1": it1, "cg_iters_2": it2, "converged": r.converged,
               "config_hash": config_hash, "tool_version": __version__}


def scatter_svg(xs, ys, title="", xlabel="predicted", ylabel="actual", width=480, height=400):
    """Scatter of (xs, ys) with least-squares line and Pearson r annotation (SVG 1.1)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    pad = 50
    lo = float(min(x.min(), y.min())) if x.size else 0.0
    hi = float(max(x.max(), y.max())) if x.size else 1.0
    xlo, xhi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    ylo, yhi = (float(y.min()), float(y.max())) if y.size else (0.0, 1.0)
    if xhi == xlo:
        xlo, xhi = xlo - 1.0, xhi + 1.0
    if yhi == ylo:
        ylo, yhi = ylo - 1.0, yhi + 1.0

    def px(v):
        return pad + (v - xlo) / (xhi - xlo) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - ylo) / (yhi - ylo) * (height - 2 * pad)

    try:
        r = pearson_r(x, y)
        r_text = f"r={r:.4f}"
    except ValueError:
        r = None
        r_text = "r=undefined"
    parts = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    # identity diagonal over the shared range, for reference
    d0, d1 = max(lo, xlo, ylo), min(hi, xhi, yhi)
    if d1 > d0:
        parts.append(f'<line class="diagonal" x1="{px(d0):.2f}" y1="{py(d0):.2f}" x2="{px(d1):.2f}" '
                     f'y2="{py(d1):.2f}" stroke="#bbbbbb" stroke-dasharray="4,3"/>')
    for a, b in zip(x, y):
        parts.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="2.5" fill="#1f77b4" fill-opacity="0.7"/>')
    if r is not None and x.size >= 2:
        slope, icept = np.polyfit(x, y, 1)
        parts.append(f'<line class="fit" x1="{px(xlo):.2f}" y1="{py(slope * xlo + icept):.2f}" '
                     f'x2="{px(xhi):.2f}" y2="{py(slope * xhi + icept):.2f}" stroke="#d62728"/>')
    parts += [
        f'<text x="{width - pad}" y="{pad - 10}" text-anchor="end" font-family="sans-serif" '
        f'font-size="14">{escape(r_text)}</text>',
        f'<text x="{pad}" y="{pad - 10}" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">{escape(ylabel)}</text>',
        f'<!-- msif {escape(__version__)} -->',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
