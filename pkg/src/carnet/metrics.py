"""Rate-distortion metrics: PSNR, combined YUV PSNR, and BD-Rate.

BD-Rate follows the common protocol: fit log10(rate) as a cubic polynomial
in PSNR for both curves, integrate the fits over the shared PSNR interval,
and report the percentage rate change of the test curve against the anchor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 100.0


def mse(ref: np.ndarray, test: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    if ref.size == 0:
        raise ValueError("empty arrays")
    return float(np.mean((ref - test) ** 2))


def psnr(ref: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB, capped so exact matches stay finite."""
    err = mse(ref, test)
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / err))


def psnr_yuv(ref: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    """Combined PSNR with the conventional 6:1:1 luma/chroma MSE weighting."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape or ref.ndim != 2 or ref.shape[1] != 3:
        raise ValueError("expected matching (N, 3) yuv arrays")
    per = [mse(ref[:, ch], test[:, ch]) for ch in range(3)]
    combined = (6.0 * per[0] + per[1] + per[2]) / 8.0
    if combined <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / combined))


@dataclass(frozen=True)
class RDCurve:
    """An RD sweep for one codec configuration: (bpp, psnr) points by rate."""

    label: str
    points: tuple

    def __post_init__(self):
        pts = tuple((float(b), float(p)) for b, p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValueError("curve needs at least 2 points")
        rates = [b for b, _ in pts]
        if any(b <= 0 for b in rates):
            raise ValueError("bpp must be positive")
        if any(b2 <= b1 for b1, b2 in zip(rates, rates[1:])):
            raise ValueError("bpp must be strictly increasing")
        if not all(np.isfinite(p) for _, p in pts):
            raise ValueError("psnr must be finite")

    @property
    def rates(self) -> np.ndarray:
        return np.array([b for b, _ in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p for _, p in self.points])


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate change of `test` vs `anchor` in percent (negative = saves).

    Both curves need at least four points and overlapping PSNR ranges.
    """
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ValueError(f"curve {curve.label!r} needs >= 4 points")
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not lo < hi:
        raise ValueError("curves have no overlapping psnr range")
    avg = []
    for curve in (anchor, test):
        fit = np.polyfit(curve.psnrs, np.log10(curve.rates), 3)
        integral = np.polyint(fit)
        avg.append((np.polyval(integral, hi) - np.polyval(integral, lo)) / (hi - lo))
    return float(100.0 * (10.0 ** (avg[1] - avg[0]) - 1.0))


CSV_FIELDS = ("label", "component", "bpp", "psnr")


def write_rd_csv(path, rows):
    """Write RD rows; each row is a (label, component, bpp, psnr) mapping."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "label": row["label"],
                    "component": row["component"],
                    "bpp": f"{row['bpp']:.10g}",
                    "psnr": f"{row['psnr']:.6f}",
                }
            )


def read_rd_csv(path) -> dict:
    """Group a results CSV into {(label, component): [(bpp, psnr), ...]}."""
    out: dict = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [k for k in CSV_FIELDS if k not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"csv missing columns {missing}")
        for row in reader:
            key = (row["label"], row["component"])
            out.setdefault(key, []).append((float(row["bpp"]), float(row["psnr"])))
    for pts in out.values():
        pts.sort()
    return out
