"""Metric reports and reconstruction sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .guidance import Embedder
from .metrics import SSIM_WINDOW, mae, s_dir, ssim
from .pipelines import round_trip
from .schedule import Schedule

__all__ = ["MetricsReport", "SweepTable", "evaluate", "sweep_reconstruction"]


@dataclass
class MetricsReport:
    mae: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    s_dir: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _mean(values):
        return float(np.mean(values)) if values else float("nan")

    @property
    def aggregate(self) -> dict[str, float]:
        return {"mae": self._mean(self.mae), "ssim": self._mean(self.ssim), "s_dir": self._mean(self.s_dir)}

    def write_csv(self, path) -> None:
        n = max(len(self.mae), len(self.ssim), len(self.s_dir))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "mae", "ssim", "s_dir"])
            for i in range(n):
                w.writerow([i] + [col[i] if i < len(col) else "" for col in (self.mae, self.ssim, self.s_dir)])
            agg = self.aggregate
            w.writerow(["mean", agg["mae"], agg["ssim"], agg["s_dir"]])


def _ssim_ok(x: np.ndarray) -> bool:
    return x.ndim >= 2 and min(x.shape[-2:]) >= SSIM_WINDOW


def evaluate(
    originals: Sequence[np.ndarray],
    outputs: Sequence[np.ndarray],
    embedder: Embedder | None = None,
    y_ref: str | None = None,
    y_tar: str | None = None,
    **meta,
) -> MetricsReport:
    """Per-image MAE, SSIM (images at least one window wide) and optionally S_dir."""
    if len(originals) != len(outputs):
        raise ValueError("originals and outputs differ in length")
    report = MetricsReport(meta=dict(meta))
    for x0, x in zip(originals, outputs):
        x0 = np.asarray(x0, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        report.mae.append(mae(x, x0))
        if _ssim_ok(x0):
            report.ssim.append(ssim(np.clip(x, 0, 1), np.clip(x0, 0, 1)))
        if embedder is not None:
            report.s_dir.append(s_dir(embedder, x, x0, y_tar, y_ref))
    return report


@dataclass
class SweepTable:
    rows: list[tuple[int, int, MetricsReport]]

    def mae(self, t0: int, S: int) -> float:
        for r_t0, r_S, rep in self.rows:
            if (r_t0, r_S) == (t0, S):
                return rep.aggregate["mae"]
        raise KeyError((t0, S))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t0", "S_for", "S_gen", "mae", "ssim"])
            for t0, S, rep in self.rows:
                agg = rep.aggregate
                w.writerow([t0, S, S, repr(agg["mae"]), repr(agg["ssim"])])


def sweep_reconstruction(
    model,
    images: Sequence[np.ndarray],
    t0_list: Sequence[int],
    S_list: Sequence[int],
    s: Schedule | None = None,
) -> SweepTable:
    """Round-trip every image for each ``(t0, S)`` cell, with ``S_for = S_gen = S``."""
    s = s if s is not None else model.schedule
    batch = np.stack([np.asarray(x, dtype=np.float64) for x in images])
    rows = []
    for t0, S in product(t0_list, S_list):
        out = round_trip(model, batch, t0, S, S, s)
        rows.append((t0, S, evaluate(batch, out, t0=t0, S_for=S, S_gen=S)))
    return SweepTable(rows)
