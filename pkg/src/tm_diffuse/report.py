"""Static report files: manifests, curve CSVs and a minimal SVG line chart."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def write_series_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "NA" if math.isnan(v) else repr(float(v))
    return str(v)


def svg_line_plot(path, y, title: str = "", xlabel: str = "", ylabel: str = "",
                  width: int = 640, height: int = 320) -> None:
    """Write a single-series line chart; NaN points break the line."""
    y = np.asarray(y, dtype=np.float64)
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    finite = y[np.isfinite(y)]
    lo = float(min(0.0, finite.min())) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    if hi <= lo:
        hi = lo + 1.0
    n = max(len(y) - 1, 1)

    def px(i):
        return pad_l + (width - pad_l - pad_r) * i / n

    def py(v):
        return pad_t + (height - pad_t - pad_b) * (1 - (v - lo) / (hi - lo))

    segments, cur = [], []
    for i, v in enumerate(y):
        if np.isfinite(v):
            cur.append(f"{px(i):.1f},{py(v):.1f}")
        elif cur:
            segments.append(cur)
            cur = []
    if cur:
        segments.append(cur)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">{ylabel}</text>',
        f'<text x="{pad_l - 4}" y="{py(hi) + 4:.1f}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{pad_l - 4}" y="{py(lo) + 4:.1f}" text-anchor="end" font-size="10">{lo:.3g}</text>',
    ]
    for seg in segments:
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
                     f'points="{" ".join(seg)}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
