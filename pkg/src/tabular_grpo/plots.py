"""Deterministic SVG line charts written without a plotting library.

Output depends only on the input numbers: fixed viewport, fixed number
formatting, and the plotted data embedded as a JSON comment for provenance.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

from .bounds import variance_factor_curve

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

PLOT_KINDS = ("reward_curve", "variance_factor", "staleness", "slack")
_METRIC_FOR_KIND = {"reward_curve": "mean_reward", "staleness": "staleness_tv", "slack": "bound_slack"}


class PlotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    log_y: bool = False,
    data_comment: dict | None = None,
) -> str:
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)]
    if not pts:
        raise PlotError("nothing to plot")
    if log_y and any(y <= 0 for _, y in pts):
        raise PlotError("log-scale axis needs positive values")
    tf = (lambda y: math.log10(y)) if log_y else (lambda y: y)
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(tf(p[1]) for p in pts), max(tf(p[1]) for p in pts)
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return MARGIN_T + (1.0 - (tf(y) - ymin) / (ymax - ymin)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
    ]
    if data_comment is not None:
        payload = json.dumps(data_comment, sort_keys=True).replace("--", "- -")
        out.append(f"<!-- data: {payload} -->")
    out += [
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _nice_ticks(xmin, xmax):
        if xmin <= t <= xmax:
            x = sx(t)
            out.append(f'<line x1="{_fmt(x)}" y1="{MARGIN_T + ph}" x2="{_fmt(x)}" y2="{MARGIN_T + ph + 5}" stroke="#333"/>')
            out.append(
                f'<text x="{_fmt(x)}" y="{MARGIN_T + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="10">{t:g}</text>'
            )
    if log_y:
        yticks = [10.0**e for e in range(math.floor(ymin), math.ceil(ymax) + 1)]
    else:
        yticks = _nice_ticks(ymin, ymax)
    for t in yticks:
        if ymin <= tf(t) <= ymax:
            y = sy(t)
            out.append(f'<line x1="{MARGIN_L - 5}" y1="{_fmt(y)}" x2="{MARGIN_L}" y2="{_fmt(y)}" stroke="#333"/>')
            out.append(
                f'<text x="{MARGIN_L - 8}" y="{_fmt(y + 3)}" text-anchor="end" font-family="sans-serif" font-size="10">{t:g}</text>'
            )
    out.append(
        f'<text x="{MARGIN_L + pw / 2:.0f}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{MARGIN_T + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.0f})">{_esc(ylabel)}</text>'
    )
    for n, (label, xs, ys) in enumerate(series):
        color = COLORS[n % len(COLORS)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = MARGIN_T + 12 + 16 * n
        lx = WIDTH - MARGIN_R + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{lx + 22}" y="{ly + 4}" font-family="sans-serif" font-size="10">{_esc(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def variance_factor_svg(var_epsilons=(0.0, 1e-6, 1e-4, 1e-2), step: float = 0.005) -> str:
    """Variance factor against success probability, one curve per epsilon, log-scale y."""
    curves = variance_factor_curve(var_epsilons, step)
    series = [(f"eps = {eps:g}", ps.tolist(), vals.tolist()) for eps, (ps, vals) in curves.items()]
    data = {"kind": "variance_factor", "step": step, "curves": {f"{eps:g}": {"p": s[1], "factor": s[2]} for eps, s in zip(curves, series)}}
    return line_chart(
        series,
        "variance factor (1 - s)/s, s = sqrt(p(1-p) + eps)",
        "success probability p",
        "factor (log scale)",
        log_y=True,
        data_comment=data,
    )


def metrics_svg(kind: str, runs: Sequence[tuple[str, list[dict]]]) -> str:
    metric = _METRIC_FOR_KIND[kind]
    series = []
    for label, records in runs:
        pts = [(r["step"], r[metric]) for r in records if r.get(metric) is not None]
        if pts:
            series.append((label, [p[0] for p in pts], [p[1] for p in pts]))
    if not series:
        raise PlotError(f"no '{metric}' values in the given metrics files")
    data = {"kind": kind, "metric": metric, "series": {s[0]: {"step": list(s[1]), metric: list(s[2])} for s in series}}
    return line_chart(series, f"{metric} per iteration", "iteration", metric, data_comment=data)


def plot(kind: str, metrics_files: Sequence = (), output=None, var_epsilons=(0.0, 1e-6, 1e-4, 1e-2)) -> str:
    """Render one chart; writes it to ``output`` when given and returns the SVG text."""
    from .harness import read_metrics

    if kind not in PLOT_KINDS:
        raise PlotError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    if kind == "variance_factor":
        svg = variance_factor_svg(var_epsilons)
    else:
        if not metrics_files:
            raise PlotError(f"plot kind {kind!r} needs at least one metrics file")
        runs = []
        for f in metrics_files:
            p = Path(f)
            path = p / "metrics.jsonl" if p.is_dir() else p
            label = p.name if p.is_dir() else p.parent.name or p.stem
            runs.append((label, read_metrics(path)))
        svg = metrics_svg(kind, runs)
    if output is not None:
        Path(output).write_text(svg)
    return svg
