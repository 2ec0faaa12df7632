"""CSV tables, dependency-free SVG line charts and run metadata."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

TRAJECTORY_CSV = "trajectories.csv"
RECOVERY_CSV = "recovery.csv"
KL_CSV = "kl.csv"
DIMENSIONALITY_CSV = "dimensionality_total.csv"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt_cell(v) for v in r])
            n += 1
    return n


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        rows = list(r)
        return list(r.fieldnames or []), rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_metadata(out_dir, command: Sequence[str], inputs: Sequence, config: dict | None = None, seed=None) -> Path:
    """Record versions, arguments and a SHA-256 for every input file consumed."""
    hashes = {}
    for p in inputs:
        p = Path(p)
        if p.is_file():
            hashes[str(p)] = sha256_file(p)
    meta = {
        "featrace_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": list(command),
        "seed": seed,
        "config": config or {},
        "inputs": hashes,
    }
    path = Path(out_dir) / "run_metadata.json"
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(
    series: Sequence[Series],
    title: str,
    xlabel: str,
    ylabel: str,
    log_x: bool = False,
    width: int = 640,
    height: int = 400,
) -> str:
    """Render series as an SVG string. Output depends only on the inputs.

    With ``log_x`` the axis shows ``log10(x + 1)`` so step 0 stays plottable.
    Every point becomes one ``<circle>`` inside its series group.
    """
    ml, mr, mt, mb = 70, 20, 40, 55
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v: float) -> float:
        return math.log10(v + 1.0) if log_x else v

    pts = [(tx(float(x)), float(y)) for s in series for x, y in zip(s.x, s.y) if math.isfinite(float(y))]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]
    xl = xlabel + (" (log scale)" if log_x else "")
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xl)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    if not pts:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{mt + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" fill="gray">no data</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
    xs, ys = zip(*pts)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v: float) -> float:
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v: float) -> float:
        return mt + ph - (v - y0) / (y1 - y0) * ph

    for t in _ticks(x0, x1):
        label = f"{10 ** t - 1:.0f}" if log_x else f"{t:.3g}"
        out.append(f'<line x1="{_fmt(px(t))}" y1="{mt + ph}" x2="{_fmt(px(t))}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{mt + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="10">{label}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 5}" y1="{_fmt(py(t))}" x2="{ml}" y2="{_fmt(py(t))}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{_fmt(py(t) + 3)}" text-anchor="end" font-family="sans-serif" font-size="10">{t:.3g}</text>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = [(px(tx(float(x))), py(float(y))) for x, y in zip(s.x, s.y) if math.isfinite(float(y))]
        out.append(f'<g class="series" data-name="{escape(s.name)}" data-points="{len(coords)}">')
        if len(coords) > 1:
            poly = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in coords)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{poly}"/>')
        for a, b in coords:
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        out.append("</g>")
    if len(series) <= len(PALETTE):
        for i, s in enumerate(series):
            y = mt + 14 + 14 * i
            out.append(f'<text x="{ml + pw - 6}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="10" fill="{PALETTE[i]}">{escape(s.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _float(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def _series_by(rows: list[dict], key: str, x: str, y: str) -> list[Series]:
    groups: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append((_float(r[x]), _float(r[y])))
    return [Series(name, [p[0] for p in pts], [p[1] for p in pts]) for name, pts in groups.items()]


def chart_trajectories(csv_path, max_features: int = 50) -> str:
    """Rescaled decoder norm per snapshot for (up to) the first ``max_features`` features."""
    header, rows = read_csv(csv_path)
    steps = [h[len("norm_"):] for h in header if h.startswith("norm_")]
    series = []
    for r in rows[:max_features]:
        vals = [_float(r[f"norm_{s}"]) for s in steps]
        peak = max([v for v in vals if math.isfinite(v)], default=0.0)
        ys = [v / peak if peak > 0 else 0.0 for v in vals]
        series.append(Series(f"feature {r['feature']}", [float(s) for s in steps], ys))
    return line_chart(series, "Decoder norm evolution", "step", "rescaled decoder norm", log_x=True)


def chart_recovery(csv_path) -> str:
    _, rows = read_csv(csv_path)
    return line_chart(_series_by(rows, "mode", "k", "recovery"), "Metric recovery when ablating", "k (top features)", "metric recovery")


def chart_kl(csv_path) -> str:
    _, rows = read_csv(csv_path)
    series = [
        Series(col, [_float(r["step"]) for r in rows], [_float(r[col]) for r in rows])
        for col in ("unigram_kl", "bigram_kl")
    ]
    return line_chart(series, "KL divergence evolution", "step", "KL (nats)", log_x=True)


def chart_dimensionality(csv_path) -> str:
    _, rows = read_csv(csv_path)
    s = Series("total dimensionality ratio", [_float(r["step"]) for r in rows], [_float(r["total_ratio"]) for r in rows])
    return line_chart([s], "Total feature dimensionality", "step", "sum D_i / d_model", log_x=True)


CHARTS = {
    TRAJECTORY_CSV: ("decoder_norms.svg", chart_trajectories),
    RECOVERY_CSV: ("metric_recovery.svg", chart_recovery),
    KL_CSV: ("kl_divergence.svg", chart_kl),
    DIMENSIONALITY_CSV: ("dimensionality.svg", chart_dimensionality),
}


def emit_report(inputs: Sequence, out_dir, command: Sequence[str] = ()) -> dict[str, str]:
    """Render a chart for every known CSV found in ``inputs`` (directories or files).

    Each chart's CSV is copied next to it so the bundle is self-contained.
    Returns a map from chart file name to source CSV.
    """
    out = Path(out_dir)
    found: dict[str, Path] = {}
    for p in map(Path, inputs):
        if not p.exists():
            raise FileNotFoundError(f"report input not found: {p}")
        if p.is_dir():
            for name in CHARTS:
                if (p / name).is_file():
                    found.setdefault(name, p / name)
        elif p.name in CHARTS:
            found.setdefault(p.name, p)
        else:
            raise ValueError(f"unrecognised report input {p}; expected one of {sorted(CHARTS)}")
    out.mkdir(parents=True, exist_ok=True)
    made = {}
    for name in sorted(found):
        svg_name, fn = CHARTS[name]
        src = found[name]
        data = src.read_bytes()
        if src.resolve() != (out / name).resolve():
            (out / name).write_bytes(data)
        (out / svg_name).write_text(fn(out / name), encoding="utf-8")
        made[svg_name] = str(src)
    if not found:
        (out / "EMPTY.txt").write_text("no analysis tables found in the given inputs\n", encoding="utf-8")
    write_metadata(out, command or sys.argv, list(found.values()))
    return made
