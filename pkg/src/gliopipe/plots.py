"""Deterministic SVG learning curves from metrics CSV rows."""
from __future__ import annotations

from xml.sax.saxutils import escape

from .metrics import read_metrics_csv

PANEL_W, PANEL_H = 480, 200
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 28, 30
SPLIT_STYLE = {"train": "#1f77b4", "val": "#d62728"}
METRIC_ORDER = ("loss", "focal", "jaccard", "dice", "iou", "mean_iou",
                "accuracy", "precision", "recall", "f1", "lr")


def _series(rows):
    """{metric: {split: [(epoch, value), ...]}} for metrics with any value."""
    out = {}
    for r in rows:
        for m in METRIC_ORDER:
            v = r.get(m)
            if v is None:
                continue
            out.setdefault(m, {}).setdefault(r["split"], []).append((r["epoch"], v))
    for by_split in out.values():
        for pts in by_split.values():
            pts.sort()
    return out


def _fmt(v):
    return f"{v:.2f}"


def render_svg(rows) -> str:
    series = _series(rows)
    if not series:
        raise ValueError("metrics contain no plottable values")
    metrics = [m for m in METRIC_ORDER if m in series]
    height = len(metrics) * PANEL_H
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" '
        f'viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif" font-size="11">',
    ]
    epochs = [e for m in metrics for pts in series[m].values() for e, _ in pts]
    e_lo, e_hi = min(epochs), max(epochs)
    if e_lo == e_hi:
        e_lo, e_hi = e_lo - 1, e_hi + 1
    plot_w = PANEL_W - PAD_L - PAD_R
    plot_h = PANEL_H - PAD_T - PAD_B
    for i, m in enumerate(metrics):
        top = i * PANEL_H
        vals = [v for pts in series[m].values() for _, v in pts]
        lo, hi = min(vals), max(vals)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        x0, y0 = PAD_L, top + PAD_T
        parts.append(f'<g data-metric="{escape(m)}">')
        parts.append(f'<text x="{x0}" y="{top + 16}" font-weight="bold">{escape(m)}</text>')
        parts.append(f'<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0 - 4}" y="{y0 + 4}" text-anchor="end">{hi:.4g}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{y0 + plot_h}" text-anchor="end">{lo:.4g}</text>')
        parts.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{top + PANEL_H - 8}" text-anchor="middle">epoch</text>')
        for split in sorted(series[m]):
            pts = series[m][split]
            coords = " ".join(
                _fmt(x0 + (e - e_lo) / (e_hi - e_lo) * plot_w) + "," + _fmt(y0 + (hi - v) / (hi - lo) * plot_h)
                for e, v in pts
            )
            colour = SPLIT_STYLE.get(split, "#333")
            parts.append(
                f'<polyline data-metric="{escape(m)}" data-split="{escape(split)}" fill="none" '
                f'stroke="{colour}" stroke-width="1.5" points="{coords}"/>'
            )
        parts.append("</g>")
    legend_y = 16
    for j, (split, colour) in enumerate(SPLIT_STYLE.items()):
        lx = PANEL_W - PAD_R - 110 + j * 55
        parts.append(f'<line x1="{lx}" y1="{legend_y - 4}" x2="{lx + 14}" y2="{legend_y - 4}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 18}" y="{legend_y}">{split}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_plots(csv_path, svg_path):
    with open(csv_path, encoding="utf-8") as fh:
        rows = read_metrics_csv(fh.read())
    svg = render_svg(rows)
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return svg
