"""Training-log CSVs to standalone SVG line charts."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .errors import ReportError

METRICS = "metrics.csv"
LAYERS = "layer_bitwidths.csv"
LOSSES = "loss_components.csv"

W, H = 720, 420
PAD_L, PAD_R, PAD_T, PAD_B = 64, 170, 40, 48
PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
    "#e6550d", "#31a354", "#756bb1", "#636363", "#9c9ede", "#cedb9c", "#e7969c",
]


def read_table(path: Path, columns: Sequence[str], text_columns: Sequence[str] = ()) -> list[dict]:
    """Rows as dicts; numeric columns parsed to float. Errors name the file, line and column."""
    if not path.is_file():
        raise ReportError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ReportError(f"{path}: empty file, expected header {','.join(columns)}")
        for col in columns:
            if col not in header:
                raise ReportError(f"{path}: line 1: missing column '{col}'")
        pos = {c: header.index(c) for c in columns}
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise ReportError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(raw)}")
            row = {}
            for col in columns:
                cell = raw[pos[col]]
                if col in text_columns:
                    row[col] = cell
                    continue
                try:
                    row[col] = float(cell)
                except ValueError:
                    raise ReportError(f"{path}: line {lineno}: column '{col}' is not a number: {cell!r}") from None
            rows.append(row)
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


@dataclass
class Series:
    label: str
    xs: list
    ys: list
    right_axis: bool = False


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _range(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    margin = 0.05 * (hi - lo)
    return lo - margin, hi + margin


def line_chart(title: str, xlabel: str, ylabel: str, series: Sequence[Series],
               y2label: Optional[str] = None) -> str:
    xs = [x for s in series for x in s.xs]
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    left = [y for s in series if not s.right_axis for y in s.ys]
    right = [y for s in series if s.right_axis for y in s.ys]
    ly = _range(left) if left else (0.0, 1.0)
    ry = _range(right) if right else None
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B

    def px(x):
        return PAD_L + (x - x0) / (x1 - x0) * pw

    def py(y, rng):
        return PAD_T + ph - (y - rng[0]) / (rng[1] - rng[0]) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in _ticks(ly[0], ly[1]):
        y = py(t, ly)
        out.append(f'<line x1="{PAD_L - 4}" y1="{y:.1f}" x2="{PAD_L}" y2="{y:.1f}" stroke="#444"/>')
        out.append(f'<text x="{PAD_L - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    if ry is not None:
        xr = PAD_L + pw
        for t in _ticks(ry[0], ry[1]):
            y = py(t, ry)
            out.append(f'<line x1="{xr}" y1="{y:.1f}" x2="{xr + 4}" y2="{y:.1f}" stroke="#444"/>')
            out.append(f'<text x="{xr + 6}" y="{y + 4:.1f}">{t:.3g}</text>')
    epochs = sorted(set(xs))
    step = max(1, len(epochs) // 10)
    for t in epochs[::step]:
        x = px(t)
        out.append(f'<line x1="{x:.1f}" y1="{PAD_T + ph}" x2="{x:.1f}" y2="{PAD_T + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{x:.1f}" y="{PAD_T + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{PAD_L + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{PAD_T + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {PAD_T + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    if y2label and ry is not None:
        xl = PAD_L + pw + 44
        out.append(
            f'<text x="{xl}" y="{PAD_T + ph / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(90 {xl} {PAD_T + ph / 2:.1f})">{escape(y2label)}</text>'
        )
    legend_x = PAD_L + pw + (60 if ry is not None else 12)
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        rng = ry if s.right_axis else ly
        pts = " ".join(f"{px(x):.1f},{py(y, rng):.1f}" for x, y in zip(s.xs, s.ys))
        dash = ' stroke-dasharray="5,3"' if s.right_axis else ""
        out.append(f'<polyline class="series" data-label="{escape(s.label)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"{dash} points="{pts}"/>')
        ly_ = PAD_T + 8 + i * 14
        if ly_ < H - 10:
            out.append(f'<line x1="{legend_x}" y1="{ly_}" x2="{legend_x + 14}" y2="{ly_}" stroke="{color}" '
                       f'stroke-width="2"{dash}/>')
            out.append(f'<text x="{legend_x + 18}" y="{ly_ + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(csv_dir, out_dir=None) -> list[Path]:
    """Write the three charts next to the CSVs (or into ``out_dir``); returns the paths.

    Every CSV is parsed before anything is written, so a malformed input leaves no output.
    """
    src = Path(csv_dir)
    dst = Path(out_dir) if out_dir is not None else src
    metrics = read_table(src / METRICS, ["epoch", "val_dice", "val_accuracy", "avg_bitwidth"])
    layers = read_table(src / LAYERS, ["epoch", "layer", "bitwidth"], text_columns=("layer",))
    losses = read_table(src / LOSSES, ["epoch", "bce", "dice", "bitwidth_term"])

    by_layer: dict[str, Series] = {}
    for r in layers:
        s = by_layer.setdefault(r["layer"], Series(r["layer"], [], []))
        s.xs.append(r["epoch"])
        s.ys.append(r["bitwidth"])

    ep = [r["epoch"] for r in metrics]
    charts = {
        "layer_bitwidths.svg": line_chart("Per-layer bitwidth", "epoch", "bitwidth", list(by_layer.values())),
        "accuracy_bitwidth.svg": line_chart(
            "Accuracy and average bitwidth",
            "epoch",
            "validation score",
            [
                Series("val_accuracy", ep, [r["val_accuracy"] for r in metrics]),
                Series("val_dice", ep, [r["val_dice"] for r in metrics]),
                Series("avg_bitwidth", ep, [r["avg_bitwidth"] for r in metrics], right_axis=True),
            ],
            y2label="average bitwidth",
        ),
        "loss_components.svg": line_chart(
            "Loss components",
            "epoch",
            "loss",
            [
                Series(name, [r["epoch"] for r in losses], [r[name] for r in losses])
                for name in ("bce", "dice", "bitwidth_term")
            ],
        ),
    }
    dst.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, svg in charts.items():
        path = dst / name
        path.write_text(svg, encoding="utf-8")
        paths.append(path)
    return paths
