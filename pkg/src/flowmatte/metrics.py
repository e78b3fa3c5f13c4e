"""Alpha-matte evaluation metrics: MAD, MSE, SAD, Grad, Conn, dtSSD, PSNR, SSIM.

Everything here runs in float64 on numpy arrays shaped T x H x W (a single
H x W frame is promoted to T=1).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import check_same_shape

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_MIN_DEFICIT = 0.15


@dataclass(frozen=True)
class MetricScales:
    mad_scale: float = 1e3
    mse_scale: float = 1e3
    sad_scale: float = 1e-3
    grad_scale: float = 1e-3
    conn_scale: float = 1e-3
    dtssd_scale: float = 1e2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

    def describe(self) -> str:
        return ", ".join(f"{k[:-6]}x{v:g}" for k, v in asdict(self).items())


DEFAULT_SCALES = MetricScales()


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if g.ndim == 2:
        g = g[None]
    check_same_shape(p, g, "pred/gt")
    return p, g


def mad(pred, gt, scale: float = DEFAULT_SCALES.mad_scale) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)) * scale)


def mse(pred, gt, scale: float = DEFAULT_SCALES.mse_scale) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((p - g) ** 2) * scale)


def sad(pred, gt, scale: float = DEFAULT_SCALES.sad_scale) -> float:
    p, g = _pair(pred, gt)
    return float(np.sum(np.abs(p - g)) * scale)


def gaussian_derivative_kernels(sigma: float = GRAD_SIGMA):
    """First-order Gaussian derivative pair, truncated at 3 sigma, unit L2 norm."""
    half = int(math.ceil(3 * sigma))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(u**2) / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi))
    dg = -u * g / sigma**2
    # hx[i, j] = g(row offset) * dg(column offset): derivative along x (columns)
    hx = np.outer(g, dg)
    hx /= np.sqrt(np.sum(hx**2))
    return hx, hx.T


def _gauss_gradient(frame: np.ndarray, hx: np.ndarray, hy: np.ndarray):
    gx = ndimage.convolve(frame, hx, mode="nearest")
    gy = ndimage.convolve(frame, hy, mode="nearest")
    return gx, gy


def grad_error(pred, gt, scale: float = DEFAULT_SCALES.grad_scale, sigma: float = GRAD_SIGMA) -> float:
    p, g = _pair(pred, gt)
    hx, hy = gaussian_derivative_kernels(sigma)
    radius = hx.shape[0] // 2
    if min(p.shape[1:]) < radius:
        raise ValueError(f"frame {p.shape[1:]} smaller than the {radius}-pixel filter radius")
    total = 0.0
    for pf, gf in zip(p, g):
        px, py = _gauss_gradient(pf, hx, hy)
        gx, gy = _gauss_gradient(gf, hx, hy)
        total += float(np.sum((px - gx) ** 2 + (py - gy) ** 2))
    return total * scale


def _largest_component(mask: np.ndarray) -> np.ndarray:
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # argmax returns the first maximum: ties go to the earliest label in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def connectivity_levels(pred: np.ndarray, gt: np.ndarray, step: float = CONN_STEP) -> np.ndarray:
    """For each pixel, the highest threshold at which it is still connected to the core region."""
    thresholds = np.round(np.arange(step, 1.0 - 1e-9, step), 10)
    level = np.full(pred.shape, -1.0)
    prev = 0.0
    for theta in thresholds:
        omega = _largest_component((pred >= theta) & (gt >= theta))
        newly_lost = (level == -1.0) & ~omega
        level[newly_lost] = prev
        prev = theta
    level[level == -1.0] = 1.0
    return level


def conn_error(pred, gt, scale: float = DEFAULT_SCALES.conn_scale, step: float = CONN_STEP,
               min_deficit: float = CONN_MIN_DEFICIT) -> float:
    p, g = _pair(pred, gt)
    total = 0.0
    for pf, gf in zip(p, g):
        level = connectivity_levels(pf, gf, step)
        dp = pf - level
        dg = gf - level
        phi_p = 1.0 - dp * (dp >= min_deficit)
        phi_g = 1.0 - dg * (dg >= min_deficit)
        total += float(np.sum(np.abs(phi_p - phi_g)))
    return total * scale


def dtssd(pred, gt, scale: float = DEFAULT_SCALES.dtssd_scale) -> float:
    p, g = _pair(pred, gt)
    if p.shape[0] < 2:
        raise ValueError("dtSSD needs at least two frames")
    dp = np.diff(p, axis=0)
    dg = np.diff(g, axis=0)
    return float(np.sqrt(np.mean((dp - dg) ** 2)) * scale)


def psnr(pred, gt, peak: float = 1.0) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    check_same_shape(p, g, "pred/gt")
    err = float(np.mean((p - g) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak**2 / err)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    u = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(u**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_2d(x: np.ndarray, y: np.ndarray, window: np.ndarray, peak: float) -> float:
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(a):
        return ndimage.correlate(a, window, mode="reflect")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, peak: float = 1.0) -> float:
    """Mean SSIM over frames (and colour channels), 11x11 Gaussian window, sigma 1.5."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    check_same_shape(p, g, "pred/gt")
    if np.array_equal(p, g):
        return 1.0
    window = _gaussian_window()
    if p.ndim == 2:
        p, g = p[None], g[None]
    if p.ndim == 4:  # T x H x W x C -> (T*C) x H x W
        p = np.moveaxis(p, -1, 1).reshape(-1, *p.shape[1:3])
        g = np.moveaxis(g, -1, 1).reshape(-1, *g.shape[1:3])
    return float(np.mean([_ssim_2d(a, b, window, peak) for a, b in zip(p, g)]))


# -- reports ----------------------------------------------------------------

METRIC_COLUMNS = ("mad", "mse", "sad", "grad", "conn", "dtssd")
TABLE_COLUMNS = ("mad", "mse", "grad", "conn", "dtssd")


def clip_metrics(pred, gt, scales: MetricScales = DEFAULT_SCALES) -> dict:
    p, g = _pair(pred, gt)
    row = {
        "mad": mad(p, g, scales.mad_scale),
        "mse": mse(p, g, scales.mse_scale),
        "sad": sad(p, g, scales.sad_scale),
        "grad": grad_error(p, g, scales.grad_scale),
        "conn": conn_error(p, g, scales.conn_scale),
        "dtssd": dtssd(p, g, scales.dtssd_scale) if p.shape[0] >= 2 else float("nan"),
    }
    return row


@dataclass
class MetricReport:
    scales: MetricScales
    rows: list = field(default_factory=list)  # [{"clip": id, **metrics}]
    missing: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    @property
    def aggregate(self) -> dict:
        out = {}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in self.rows if not math.isnan(r[col])]
            out[col] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_json(self) -> str:
        return json.dumps({
            "scales": asdict(self.scales),
            "rows": self.rows,
            "aggregate": self.aggregate,
            "missing": self.missing,
            "partial": self.partial,
        }, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["clip", *METRIC_COLUMNS])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in ["clip", *METRIC_COLUMNS]})
            writer.writerow({"clip": "mean" + (" (partial)" if self.partial else ""), **self.aggregate})

    def table(self, columns=TABLE_COLUMNS) -> str:
        return format_table(
            [(r["clip"], r) for r in self.rows]
            + [("mean" + (" (partial)" if self.partial else ""), self.aggregate)],
            columns, self.scales)


def format_table(rows, columns=TABLE_COLUMNS, scales: MetricScales | None = None) -> str:
    """Aligned text table; ``rows`` is a sequence of (label, metric dict)."""
    labels = [str(label) for label, _ in rows]
    lw = max([4] + [len(l) for l in labels])
    head = " " * lw + " | " + " | ".join(f"{c.upper():>9}" for c in columns)
    lines = []
    if scales is not None:
        lines.append(f"scales: {scales.describe()}")
    lines += [head, "-" * len(head)]
    for label, row in rows:
        cells = []
        for c in columns:
            v = row.get(c, float("nan")) if row else float("nan")
            cells.append(f"{v:9.3f}" if isinstance(v, (int, float)) else f"{str(v):>9}")
        lines.append(f"{label:<{lw}} | " + " | ".join(cells))
    return "\n".join(lines)


def evaluate(manifest, predictions_dir, scales: MetricScales = DEFAULT_SCALES) -> MetricReport:
    """Score ``predictions_dir/<clip_id>/alpha/*.png`` against a dataset manifest."""
    from .core import read_frames
    from .synth import DatasetManifest

    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    predictions_dir = Path(predictions_dir)
    report = MetricReport(scales)
    for clip in manifest.clips:
        gt_dir = manifest.root / clip["path"] / "alpha"
        pred_dir = predictions_dir / clip["path"]
        if (pred_dir / "alpha").is_dir():
            pred_dir = pred_dir / "alpha"
        if not pred_dir.is_dir() or not any(pred_dir.glob("*.png")):
            logger.warning("missing prediction for clip %s", clip["path"])
            report.missing.append(clip["path"])
            continue
        pred = read_frames(pred_dir)
        gt = read_frames(gt_dir)
        report.rows.append({"clip": clip["path"], **clip_metrics(pred, gt, scales)})
    return report
