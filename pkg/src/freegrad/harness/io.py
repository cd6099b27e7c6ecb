"""Persistence: tensor checkpoints, metrics CSV and SVG learning curves.

Checkpoint layout (all integers little-endian u32, payload little-endian f64)::

    b"FGCK" | version | count | count x (name_len | name utf-8 | rank | dims... | payload)
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..numcore import FreegradError

MAGIC = b"FGCK"
VERSION = 1
CSV_HEADER = ("run", "seed", "step", "metric", "value")


class CheckpointError(FreegradError, ValueError):
    """Bad magic, unsupported version, or a table that does not match its payload."""


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the tensor table")
    return tensors


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


@dataclass(frozen=True)
class MetricsRow:
    run: str
    seed: int
    step: int
    metric: str
    value: float


def validate_rows(rows: Sequence[MetricsRow]) -> None:
    """Values must be finite and steps must not go backwards within a (run, seed, metric) series."""
    last: dict[tuple[str, int, str], int] = {}
    for r in rows:
        if not math.isfinite(r.value):
            raise FreegradError(f"non-finite value for {r.run}/{r.metric} at step {r.step}")
        key = (r.run, r.seed, r.metric)
        if key in last and r.step < last[key]:
            raise FreegradError(f"step index went backwards for {key}: {last[key]} -> {r.step}")
        last[key] = r.step


def metrics_csv_text(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow((r.run, r.seed, r.step, r.metric, repr(float(r.value))))
    return buf.getvalue()


def emit_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    validate_rows(rows)
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8")


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise FreegradError(f"{path}: unexpected header {header}")
        return [MetricsRow(run, int(seed), int(step), metric, float(value))
                for run, seed, step, metric, value in reader]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
_PANEL_W, _PANEL_H, _MARGIN = 520, 300, 60


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def plot_svg_text(rows: Sequence[MetricsRow], title: str = "") -> str:
    """One panel per metric, one polyline per (run, seed); byte-stable for identical input."""
    metrics = sorted({r.metric for r in rows})
    series: dict[str, dict[tuple[str, int], list[tuple[int, float]]]] = {m: {} for m in metrics}
    for r in rows:
        series[r.metric].setdefault((r.run, r.seed), []).append((r.step, float(r.value)))
    labels = sorted({(r.run, r.seed) for r in rows})
    colour = {lab: _PALETTE[i % len(_PALETTE)] for i, lab in enumerate(labels)}
    legend_h = 18 * len(labels) + 10
    height = len(metrics) * (_PANEL_H + _MARGIN) + legend_h + 40
    width = _PANEL_W + 2 * _MARGIN
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for p, metric in enumerate(metrics):
        x0, y0 = _MARGIN, 40 + p * (_PANEL_H + _MARGIN)
        pts = [pt for s in series[metric].values() for pt in s]
        xs = [s for s, _ in pts]
        ys = [v for _, v in pts]
        xlo, xhi = min(xs), max(xs)
        ylo, yhi = min(ys), max(ys)
        if xhi == xlo:
            xhi = xlo + 1
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5

        def sx(v: float) -> float:
            return x0 + (v - xlo) / (xhi - xlo) * _PANEL_W

        def sy(v: float) -> float:
            return y0 + _PANEL_H - (v - ylo) / (yhi - ylo) * _PANEL_H

        parts.append(f'<rect x="{x0}" y="{y0}" width="{_PANEL_W}" height="{_PANEL_H}" fill="none" stroke="#000"/>')
        for k in range(5):
            fx = xlo + (xhi - xlo) * k / 4
            fy = ylo + (yhi - ylo) * k / 4
            parts.append(f'<text x="{sx(fx):.2f}" y="{y0 + _PANEL_H + 14}" text-anchor="middle">{_fmt(fx)}</text>')
            parts.append(f'<text x="{x0 - 4}" y="{sy(fy) + 4:.2f}" text-anchor="end">{_fmt(fy)}</text>')
        parts.append(f'<text x="{x0 + _PANEL_W / 2}" y="{y0 + _PANEL_H + 30}" text-anchor="middle">step</text>')
        parts.append(f'<text x="{x0 + 4}" y="{y0 - 6}">{escape(metric)}</text>')
        for lab in labels:
            s = series[metric].get(lab)
            if not s:
                continue
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in s)
            parts.append(f'<polyline fill="none" stroke="{colour[lab]}" stroke-width="1.5" points="{coords}"/>')
    ly = 40 + len(metrics) * (_PANEL_H + _MARGIN)
    for i, lab in enumerate(labels):
        y = ly + 18 * i
        parts.append(f'<line x1="{_MARGIN}" y1="{y}" x2="{_MARGIN + 24}" y2="{y}" stroke="{colour[lab]}" stroke-width="3"/>')
        parts.append(f'<text x="{_MARGIN + 30}" y="{y + 4}">{escape(f"{lab[0]} (seed {lab[1]})")}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plot_svg(rows: Sequence[MetricsRow], path: str | Path, title: str = "") -> None:
    if not rows:
        raise FreegradError("no metric rows to plot")
    Path(path).write_text(plot_svg_text(rows, title), encoding="utf-8")
