"""Deterministic SVG figures from results CSVs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGURES = {
    # figure: (series column, x column, y column, x label, y label, log y)
    "pe_vs_L": ("scheme", "L_test", "P_e", "test preamble length L", "P_e", True),
    "nmse_vs_r": ("variant", "r", "nmse_db", "compression ratio r", "NMSE (dB)", False),
    "quality_vs_snr": ("scheme", "snr_db", "psnr_db", "SNR (dB)", "PSNR (dB)", False),
}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot(results_csv, figure: str, out_path) -> Path:
    """Render ``figure`` from ``results_csv`` into an SVG at ``out_path``."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {sorted(FIGURES)}")
    series_col, x_col, y_col, xlabel, ylabel, logy = FIGURES[figure]
    rows = read_csv(results_csv)
    if not rows:
        raise ValueError(f"{results_csv} has no data rows")
    missing = {series_col, x_col, y_col} - set(rows[0])
    if missing:
        raise ValueError(f"{results_csv} lacks columns {sorted(missing)} needed for {figure}")
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r[series_col], []).append((float(r[x_col]), float(r[y_col])))

    with plt.rc_context({"svg.hashsalt": "samimo", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for name, pts in series.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        fig.tight_layout()
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
