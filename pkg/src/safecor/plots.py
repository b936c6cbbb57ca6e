"""Dependency-free SVG line charts for training metrics logs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence
from xml.sax.saxutils import escape

from .trainer import read_metrics_csv

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")

CHARTS = (
    ("reward_return", "avg_reward_return", "Reward return per episode"),
    ("cost_rate", "cost_rate", "Cost rate (average cost per step)"),
    ("total_cv", "total_cv", "Total constraint violations"),
)


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def line_chart(path, title: str, series: Mapping[str, Sequence[tuple[float, float]]],
               threshold: Optional[float] = None, x_label: str = "steps", y_label: str = "") -> Path:
    """Write one SVG chart: a ``polyline`` per series, optional dashed threshold line."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if threshold is not None:
        ys.append(threshold)
    x0, x1 = _nice_range(min(xs, default=0.0), max(xs, default=1.0))
    y0, y1 = _nice_range(min(ys, default=0.0), max(ys, default=1.0))
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<g class="axes" stroke="black">'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"] + ph}" x2="{MARGIN["left"] + pw}" y2="{MARGIN["top"] + ph}"/>'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"]}" x2="{MARGIN["left"]}" y2="{MARGIN["top"] + ph}"/></g>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(fx):.1f}" y="{MARGIN["top"] + ph + 18}" font-size="11" '
                   f'text-anchor="middle">{fx:.4g}</text>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(fy) + 4:.1f}" font-size="11" '
                   f'text-anchor="end">{fy:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" font-size="12" '
               f'text-anchor="middle">{escape(x_label)}</text>')
    if y_label:
        out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(y_label)}</text>')
    if threshold is not None:
        y = py(threshold)
        out.append(f'<line class="threshold" data-value="{threshold!r}" x1="{MARGIN["left"]}" y1="{y:.2f}" '
                   f'x2="{MARGIN["left"] + pw}" y2="{y:.2f}" stroke="gray" stroke-dasharray="6,4"/>')
    for k, (name, pts) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{coords}"/>')
        ly = MARGIN["top"] + 16 * k + 8
        out.append(f'<text x="{MARGIN["left"] + pw + 12}" y="{ly}" font-size="12" fill="{color}">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", newline="\n")
    return path


def _mean_curve(paths, column: str):
    logs = [read_metrics_csv(p) for p in paths]
    n = min((len(rows) for rows in logs), default=0)
    return [(sum(r[i]["steps"] for r in logs) / len(logs), sum(r[i][column] for r in logs) / len(logs))
            for i in range(n)]


def emit_plots(metrics: Mapping[str, Sequence], out_dir, threshold_d: float) -> list[Path]:
    """Reward, cost-rate and total-CV curves; one series per variant (mean over its logs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, column, title in CHARTS:
        series = {name: _mean_curve(paths if isinstance(paths, (list, tuple)) else [paths], column)
                  for name, paths in metrics.items()}
        thr = threshold_d if column == "cost_rate" else None
        written.append(line_chart(out_dir / f"{stem}.svg", title, series, thr, y_label=column))
    return written
