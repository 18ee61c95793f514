"""Evaluation metrics: PSNR, rate-distortion curves, Bjontegaard delta rate."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .exceptions import DimensionError, EvaluationError

#: Minimum PSNR overlap (dB) required between curves for a meaningful BD-rate.
MIN_OVERLAP_DB = 3.0
#: Cubic interpolation wants at least this many points per curve.
MIN_CURVE_POINTS = 4


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB over all samples of unit-range images.

    Identical inputs give math.inf.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class RdCurve:
    """(bpp, PSNR-dB) samples for one codec configuration, sorted by bpp."""

    points: list[tuple[float, float]]

    def __post_init__(self):
        self.points = sorted((float(b), float(p)) for b, p in self.points)
        for b, p in self.points:
            if b <= 0 or not math.isfinite(p):
                raise EvaluationError(f"invalid RD point ({b}, {p})")
        bpps = [b for b, _ in self.points]
        if len(set(bpps)) != len(bpps):
            raise EvaluationError("bpp values must be strictly increasing")

    @property
    def bpp(self) -> np.ndarray:
        return np.array([b for b, _ in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p for _, p in self.points])


def bdrate(anchor: RdCurve, test: RdCurve) -> float:
    """Average rate difference of ``test`` against ``anchor`` in percent.

    log-rate is interpolated over PSNR with a monotone piecewise cubic
    (PCHIP) and the gap is averaged over the common PSNR interval. Negative
    values mean the test codec needs less rate at equal quality.
    """
    for name, curve in (("anchor", anchor), ("test", test)):
        if len(curve.points) < MIN_CURVE_POINTS:
            raise EvaluationError(
                f"{name} curve has {len(curve.points)} points; "
                f"need at least {MIN_CURVE_POINTS}"
            )
        if np.any(np.diff(curve.psnr) <= 0):
            raise EvaluationError(f"{name} curve PSNR must increase with bpp")
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if hi - lo < MIN_OVERLAP_DB:
        raise EvaluationError(
            f"curves overlap over {hi - lo:.2f} dB; need {MIN_OVERLAP_DB} dB"
        )
    f_anchor = PchipInterpolator(anchor.psnr, np.log(anchor.bpp))
    f_test = PchipInterpolator(test.psnr, np.log(test.bpp))
    avg = (f_test.integrate(lo, hi) - f_anchor.integrate(lo, hi)) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)


@dataclass
class EvalRow:
    file: str
    lam: float
    bpp: float
    psnr: float


@dataclass
class EvalReport:
    """Per-image evaluation rows plus codec identifiers."""

    rows: list[EvalRow] = field(default_factory=list)
    checkpoint: str = ""
    label: str = ""

    @property
    def mean_bpp(self) -> float:
        return sum(r.bpp for r in self.rows) / len(self.rows)

    @property
    def mean_psnr(self) -> float:
        return sum(r.psnr for r in self.rows) / len(self.rows)

    def curve(self) -> RdCurve:
        """Aggregate rows into per-lambda mean (bpp, psnr) points."""
        by_lam: dict[float, list[EvalRow]] = {}
        for r in self.rows:
            by_lam.setdefault(r.lam, []).append(r)
        points = []
        for lam in sorted(by_lam):
            rs = by_lam[lam]
            points.append(
                (sum(r.bpp for r in rs) / len(rs), sum(r.psnr for r in rs) / len(rs))
            )
        return RdCurve(points)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# checkpoint={self.checkpoint}\n")
            fh.write(f"# label={self.label}\n")
            writer = csv.writer(fh)
            writer.writerow(["file", "lambda", "bpp", "psnr"])
            for r in self.rows:
                writer.writerow([r.file, repr(r.lam), repr(r.bpp), repr(r.psnr)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as fh:
            header_lines = []
            pos = fh.tell()
            line = fh.readline()
            while line.startswith("#"):
                header_lines.append(line[1:].strip())
                pos = fh.tell()
                line = fh.readline()
            fh.seek(pos)
            for item in header_lines:
                key, _, value = item.partition("=")
                if key == "checkpoint":
                    report.checkpoint = value
                elif key == "label":
                    report.label = value
            reader = csv.DictReader(fh)
            for row in reader:
                report.rows.append(
                    EvalRow(
                        row["file"],
                        float(row["lambda"]),
                        float(row["bpp"]),
                        float(row["psnr"]),
                    )
                )
        if not report.label:
            report.label = Path(path).stem
        return report
