"""SSIM, PSNR and NRMSE with patient-level macro aggregation."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import as_real_image

__all__ = [
    "SsimConfig",
    "SliceMetrics",
    "MetricsReport",
    "gaussian_window",
    "ssim",
    "psnr",
    "nrmse",
    "slice_metrics",
    "macro_aggregate",
    "write_report_csv",
    "read_report_csv",
]


@dataclass(frozen=True)
class SsimConfig:
    """Wang et al. (2004) defaults.

    ``range_mode="joint"`` takes the dynamic range from both images, which
    keeps the metric symmetric; ``"ref"`` uses the reference range only.
    """

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    range_mode: str = "joint"
    data_range: float | None = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd size")
        if self.range_mode not in ("joint", "ref"):
            raise ValueError("range_mode must be 'joint' or 'ref'")


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _dynamic_range(test, ref, cfg):
    if cfg.data_range is not None:
        return float(cfg.data_range)
    if cfg.range_mode == "joint":
        return float(max(test.max(), ref.max()) - min(test.min(), ref.min()))
    return float(ref.max() - ref.min())


def _valid_filter(img, g):
    h = g.size // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def ssim(test, ref, cfg=None):
    """Mean SSIM over all fully overlapped Gaussian-window positions."""
    cfg = cfg or SsimConfig()
    x = as_real_image(test, "test")
    y = as_real_image(ref, "ref")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.window:
        raise ValueError(f"images smaller than the {cfg.window}x{cfg.window} window")
    if not np.any(y):
        raise ValueError("reference is constant zero")
    L = _dynamic_range(x, y, cfg)
    if not L > 0:
        raise ValueError("degenerate dynamic range L = 0")
    c1 = (cfg.k1 * L) ** 2
    c2 = (cfg.k2 * L) ** 2
    g = gaussian_window(cfg.window, cfg.sigma)
    mx = _valid_filter(x, g)
    my = _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def psnr(test, ref, data_range=None):
    """``20 log10(L / RMSE)`` in dB; identical images give ``math.inf``.

    ``data_range`` defaults to ``max(ref) - min(ref)``.
    """
    x = as_real_image(test, "test")
    y = as_real_image(ref, "ref")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    L = float(y.max() - y.min()) if data_range is None else float(data_range)
    rmse = math.sqrt(float(np.mean((x - y) ** 2)))
    if rmse == 0:
        return math.inf
    return 20.0 * math.log10(L / rmse)


def nrmse(test, ref):
    """``||test - ref|| / ||ref||``."""
    x = as_real_image(test, "test")
    y = as_real_image(ref, "ref")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    denom = float(np.linalg.norm(y))
    if denom == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(x - y)) / denom


@dataclass(frozen=True)
class SliceMetrics:
    patient_id: str
    slice_id: str
    ssim: float
    psnr_db: float
    nrmse: float


def slice_metrics(test, ref, patient_id, slice_id="0", cfg=None):
    return SliceMetrics(str(patient_id), str(slice_id), ssim(test, ref, cfg), psnr(test, ref), nrmse(test, ref))


@dataclass(frozen=True)
class MetricsReport:
    slices: tuple
    per_patient: dict  # patient_id -> {metric: mean}
    mean: dict  # metric -> macro mean
    std_error: dict  # metric -> standard error across patients
    n_patients: int
    psnr_infinite: int


METRIC_NAMES = ("ssim", "psnr_db", "nrmse")


def _mean(values):
    return math.fsum(values) / len(values) if values else math.nan


def _std_error(values):
    n = len(values)
    if n < 2:
        return 0.0 if n == 1 else math.nan
    mu = _mean(values)
    var = math.fsum((v - mu) ** 2 for v in values) / (n - 1)
    return math.sqrt(var) / math.sqrt(n)


def macro_aggregate(records):
    """Average per patient first, then mean and standard error across patients.

    Infinite PSNR values (identical images) are excluded from the PSNR means
    and counted in ``psnr_infinite``. Sums use ``math.fsum`` so the result does
    not depend on record order.
    """
    records = list(records)
    if not records:
        raise ValueError("no metric records to aggregate")
    groups = {}
    for r in records:
        groups.setdefault(r.patient_id, []).append(r)
    per_patient = {}
    n_inf = 0
    for pid in sorted(groups):
        rs = groups[pid]
        finite_psnr = [r.psnr_db for r in rs if math.isfinite(r.psnr_db)]
        n_inf += len(rs) - len(finite_psnr)
        per_patient[pid] = {
            "ssim": _mean([r.ssim for r in rs]),
            "psnr_db": _mean(finite_psnr),
            "nrmse": _mean([r.nrmse for r in rs]),
        }
    mean, se = {}, {}
    for name in METRIC_NAMES:
        vals = [v[name] for v in per_patient.values() if not math.isnan(v[name])]
        mean[name] = _mean(vals)
        se[name] = _std_error(vals)
    return MetricsReport(tuple(records), per_patient, mean, se, len(per_patient), n_inf)


def _fmt(v):
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def write_report_csv(path, report):
    """Per-slice rows followed by a ``#``-prefixed summary footer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "slice_id", "ssim", "psnr_db", "nrmse"])
        for r in report.slices:
            w.writerow([r.patient_id, r.slice_id, _fmt(r.ssim), _fmt(r.psnr_db), _fmt(r.nrmse)])
        fh.write("# summary: macro average over patients\n")
        fh.write(f"# n_patients,{report.n_patients}\n")
        fh.write(f"# psnr_infinite_excluded,{report.psnr_infinite}\n")
        fh.write("# metric,macro_mean,std_error\n")
        for name in METRIC_NAMES:
            fh.write(f"# {name},{_fmt(report.mean[name])},{_fmt(report.std_error[name])}\n")


def read_report_csv(path):
    """Per-slice records from a report written by :func:`write_report_csv`."""
    out = []
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    for row in reader:
        out.append(
            SliceMetrics(row["patient_id"], row["slice_id"], float(row["ssim"]), float(row["psnr_db"]), float(row["nrmse"]))
        )
    return out
