"""Parametric cardiac phantom and interleaved IR/PD multi-coil acquisition simulator."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kvfile
from .core import SamplingMask, fft2c
from .preprocess import CoilSensitivities, NoiseCovariance, rss

__all__ = [
    "Tissue",
    "Region",
    "PhantomSpec",
    "MotionTrace",
    "AcquisitionSeries",
    "ir_signal",
    "region_mask",
    "render_phantom",
    "default_phantom",
    "simulate_coil_maps",
    "sinusoidal_motion",
    "fourier_shift",
    "simulate_series",
    "phantom_to_kv",
    "phantom_from_kv",
]


def ir_signal(t1_msec, ti_msec, pd):
    """Ideal single-inversion longitudinal signal ``pd * (1 - 2 exp(-TI/T1))``."""
    t1 = np.asarray(t1_msec, dtype=np.float64)
    ti = np.asarray(ti_msec, dtype=np.float64)
    if np.any(t1 <= 0) or np.any(ti <= 0):
        raise ValueError("T1 and TI must be positive")
    if np.any(np.asarray(pd) < 0):
        raise ValueError("proton density must be non-negative")
    out = pd * (1.0 - 2.0 * np.exp(-ti / t1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Tissue:
    t1_msec: float
    pd: float

    def __post_init__(self):
        if self.t1_msec <= 0:
            raise ValueError("T1 must be positive")
        if self.pd < 0:
            raise ValueError("proton density must be non-negative")


@dataclass(frozen=True)
class Region:
    """Ellipse (optionally restricted to an angular sector) filled with one tissue.

    Centers and semi-axes are fractions of (rows, cols). The sector is measured
    in the ellipse's own rotated frame, counter-clockwise from the +col axis.
    """

    label: str
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float = 0.0
    sector: tuple[float, float] | None = None

    def __post_init__(self):
        if self.axes[0] <= 0 or self.axes[1] <= 0:
            raise ValueError("semi-axes must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Regions are painted in order; later regions win (innermost last)."""

    rows: int
    cols: int
    regions: tuple[Region, ...]
    tissues: dict
    ti_msec: float
    seed: int = 0
    phase_scale: float = 1.0

    def __post_init__(self):
        if not self.regions:
            raise ValueError("phantom needs at least one region")
        if self.ti_msec <= 0:
            raise ValueError("TI must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("phantom dimensions must be positive")
        for r in self.regions:
            if r.label not in self.tissues:
                raise ValueError(f"region uses unknown tissue {r.label!r}")
        object.__setattr__(self, "regions", tuple(self.regions))


def region_mask(region, rows, cols):
    yy = (np.arange(rows) + 0.5) / rows - region.center[0]
    xx = (np.arange(cols) + 0.5) / cols - region.center[1]
    y, x = np.meshgrid(yy, xx, indexing="ij")
    c, s = math.cos(region.rotation), math.sin(region.rotation)
    # rotate into the ellipse frame
    u = c * x + s * y
    v = -s * x + c * y
    inside = (v / region.axes[0]) ** 2 + (u / region.axes[1]) ** 2 <= 1.0
    if region.sector is not None:
        start, span = region.sector
        ang = np.mod(np.arctan2(-v, u) - start, 2 * np.pi)
        inside &= ang <= span
    return inside


def _smooth_phase(rows, cols, seed, scale):
    rng = np.random.default_rng([seed, 0x5053])
    a = rng.uniform(-1.0, 1.0, size=6) * np.array([np.pi, 0.6, 0.6, 0.3, 0.3, 0.3])
    y = np.linspace(-1, 1, rows)[:, None]
    x = np.linspace(-1, 1, cols)[None, :]
    return scale * (a[0] + a[1] * y + a[2] * x + a[3] * y * y + a[4] * x * y + a[5] * x * x)


def render_phantom(spec):
    """Ground-truth ``(truth_ir, truth_pd)`` complex images."""
    ir = np.zeros((spec.rows, spec.cols))
    pd = np.zeros((spec.rows, spec.cols))
    for region in spec.regions:
        t = spec.tissues[region.label]
        m = region_mask(region, spec.rows, spec.cols)
        ir[m] = ir_signal(t.t1_msec, spec.ti_msec, t.pd)
        pd[m] = t.pd
    phase = np.exp(1j * _smooth_phase(spec.rows, spec.cols, spec.seed, spec.phase_scale))
    return ir * phase, pd * phase


# post-contrast T1 values are plausible configuration defaults only
DEFAULT_TISSUES = {
    "chest": Tissue(900.0, 0.7),
    "myocardium": Tissue(450.0, 0.8),
    "scar": Tissue(250.0, 0.85),
    "blood": Tissue(300.0, 1.0),
}


def default_phantom(rows=144, cols=256, seed=0, jitter=0.0):
    """Chest ellipse, myocardial annulus with a 60 degree scar wedge, LV blood pool.

    ``jitter`` perturbs geometry (fractions) using ``seed`` so a dataset of
    "patients" is not one repeated anatomy.
    """
    rng = np.random.default_rng([seed, 0x1A])
    j = lambda: 1.0 + jitter * rng.uniform(-1, 1)  # noqa: E731
    aspect = cols / rows
    cy, cx = 0.5 + 0.03 * jitter * rng.uniform(-1, 1), 0.5 + 0.03 * jitter * rng.uniform(-1, 1)
    myo = 0.27 * j()
    regions = (
        Region("chest", (0.5, 0.5), (0.44 * j(), 0.44 * j()), rotation=0.1 * jitter * rng.uniform(-1, 1)),
        Region("myocardium", (cy, cx), (myo, myo / aspect)),
        Region("scar", (cy, cx), (myo, myo / aspect), sector=(rng.uniform(0, 2 * np.pi) if jitter else 0.5, np.pi / 3)),
        Region("blood", (cy, cx), (0.6 * myo, 0.6 * myo / aspect)),
    )
    return PhantomSpec(rows, cols, regions, dict(DEFAULT_TISSUES), ti_msec=450.0 * math.log(2), seed=seed)


def simulate_coil_maps(n_coils, rows, cols, seed=0):
    """Smooth complex receive maps normalized to unit RSS.

    Gaussian lobes sit on a ring just outside the field of view; each coil
    gets a random linear phase ramp.
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    rng = np.random.default_rng([seed, 0xC011])
    y = (np.arange(rows) + 0.5) / rows - 0.5
    x = (np.arange(cols) + 0.5) / cols - 0.5
    yy, xx = np.meshgrid(y, x, indexing="ij")
    maps = np.empty((n_coils, rows, cols), dtype=np.complex128)
    offset = rng.uniform(0, 2 * np.pi)
    for c in range(n_coils):
        ang = offset + 2 * np.pi * c / n_coils
        py, px = 0.6 * math.sin(ang), 0.6 * math.cos(ang)
        width = rng.uniform(0.35, 0.5)
        mag = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * width**2))
        ramp = rng.uniform(-np.pi, np.pi, size=3)
        maps[c] = mag * np.exp(1j * (ramp[0] + ramp[1] * yy + ramp[2] * xx))
    maps /= rss(maps)
    # second normalization trims rounding so RSS == 1 to ~1e-15
    maps /= rss(maps)
    return CoilSensitivities(maps)


@dataclass(frozen=True, eq=False)
class MotionTrace:
    """Per-heartbeat rigid translation ``(dy, dx)`` in pixels."""

    shifts: np.ndarray

    def __post_init__(self):
        s = np.array(self.shifts, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(s)):
            raise ValueError("motion trace must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "shifts", s)

    @property
    def n_beats(self):
        return self.shifts.shape[0]

    @classmethod
    def static(cls, n_beats):
        return cls(np.zeros((n_beats, 2)))


def sinusoidal_motion(n_beats, amplitude=4.0, period=12.0, phase=0.0, dx_amplitude=0.0):
    """``dy(t) = A sin(2 pi t / T + phase)``; optional in-plane ``dx`` component."""
    t = np.arange(n_beats)
    arg = 2 * np.pi * t / period + phase
    return MotionTrace(np.stack([amplitude * np.sin(arg), dx_amplitude * np.sin(arg)], axis=1))


def fourier_shift(img, dy, dx):
    """Translate ``img`` by ``(dy, dx)`` pixels with a Fourier phase ramp (circular)."""
    if dy == 0 and dx == 0:
        return np.array(img, dtype=np.complex128)
    rows, cols = img.shape[-2:]
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    ramp = np.exp(-2j * np.pi * (fy * dy + fx * dx))
    return np.fft.ifft2(np.fft.fft2(img, axes=(-2, -1)) * ramp, axes=(-2, -1))


@dataclass(eq=False)
class AcquisitionSeries:
    """Interleaved IR/PD pairs sharing one mask, coil set and noise model."""

    k_ir: list
    k_pd: list
    mask: SamplingMask
    coils: CoilSensitivities
    noise_cov: NoiseCovariance | None
    motion: MotionTrace
    truth_ir: np.ndarray
    truth_pd: np.ndarray
    noise_samples: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.k_ir) < 1 or len(self.k_ir) != len(self.k_pd):
            raise ValueError("series needs n_avg >= 1 matching IR/PD pairs")
        shape = (self.coils.coils, self.mask.rows, self.truth_ir.shape[1])
        for k in (*self.k_ir, *self.k_pd):
            if k.shape != shape:
                raise ValueError(f"k-space shape {k.shape} != {shape}")

    @property
    def n_avg(self):
        return len(self.k_ir)


def simulate_series(spec, coils, mask, motion, noise_cov, n_avg, seed=0, n_noise_samples=0):
    """Simulate ``n_avg`` IR/PD pairs on consecutive heartbeats.

    Pair ``i`` sees the motion of beats ``2i`` (IR) and ``2i + 1`` (PD). Noise
    is complex Gaussian with coil covariance ``noise_cov`` (``None`` for
    noiseless data), added on sampled rows only. ``n_noise_samples`` > 0 also
    records a noise-only calibration scan of that length.
    """
    if n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    if motion.n_beats < 2 * n_avg:
        raise ValueError(f"motion trace has {motion.n_beats} beats, need {2 * n_avg}")
    if coils.shape != (spec.rows, spec.cols) or mask.rows != spec.rows:
        raise ValueError("coil maps / mask do not match phantom dimensions")
    if noise_cov is not None and noise_cov.coils != coils.coils:
        raise ValueError("noise covariance size does not match coil count")

    truth_ir, truth_pd = render_phantom(spec)
    rng = np.random.default_rng([seed, 0x5E21E5])
    w = mask.as_kspace_weights()
    factor = None if noise_cov is None else noise_cov.color_factor()
    n_coils = coils.coils

    def noise(shape):
        z = rng.standard_normal((2, n_coils, int(np.prod(shape)))) / math.sqrt(2.0)
        return (factor @ (z[0] + 1j * z[1])).reshape((n_coils, *shape))

    def acquire(img, beat):
        dy, dx = motion.shifts[beat]
        moved = fourier_shift(img, dy, dx)
        k = fft2c(coils.maps * moved) * w
        if factor is not None:
            k = k + noise((spec.rows, spec.cols)) * w
        return k

    k_ir, k_pd = [], []
    for i in range(n_avg):
        k_ir.append(acquire(truth_ir, 2 * i))
        k_pd.append(acquire(truth_pd, 2 * i + 1))

    samples = None
    if n_noise_samples and factor is not None:
        samples = noise((n_noise_samples,))
    return AcquisitionSeries(
        k_ir, k_pd, mask, coils, noise_cov, motion, truth_ir, truth_pd, noise_samples=samples,
    )


def phantom_to_kv(spec):
    d = {
        "rows": spec.rows,
        "cols": spec.cols,
        "ti_msec": spec.ti_msec,
        "seed": spec.seed,
        "phase_scale": spec.phase_scale,
        "n_regions": len(spec.regions),
    }
    for name, t in spec.tissues.items():
        d[f"tissue.{name}.t1_msec"] = t.t1_msec
        d[f"tissue.{name}.pd"] = t.pd
    for i, r in enumerate(spec.regions):
        d[f"region.{i}.label"] = r.label
        d[f"region.{i}.center"] = list(r.center)
        d[f"region.{i}.axes"] = list(r.axes)
        d[f"region.{i}.rotation"] = r.rotation
        if r.sector is not None:
            d[f"region.{i}.sector"] = list(r.sector)
    return d


def phantom_from_kv(d):
    tissues = {}
    for key in d:
        if key.startswith("tissue.") and key.endswith(".t1_msec"):
            name = key[len("tissue.") : -len(".t1_msec")]
            tissues[name] = Tissue(kvfile.as_float(d[key]), kvfile.as_float(d[f"tissue.{name}.pd"]))
    regions = []
    for i in range(kvfile.as_int(d["n_regions"])):
        p = f"region.{i}."
        sector = d.get(p + "sector")
        regions.append(
            Region(
                d[p + "label"],
                tuple(kvfile.as_floats(d[p + "center"])),
                tuple(kvfile.as_floats(d[p + "axes"])),
                kvfile.as_float(d.get(p + "rotation", 0.0)),
                None if sector is None else tuple(kvfile.as_floats(sector)),
            )
        )
    return PhantomSpec(
        kvfile.as_int(d["rows"]),
        kvfile.as_int(d["cols"]),
        tuple(regions),
        tissues,
        kvfile.as_float(d["ti_msec"]),
        kvfile.as_int(d.get("seed", 0)),
        kvfile.as_float(d.get("phase_scale", 1.0)),
    )
