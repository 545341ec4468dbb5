"""Conventional reference: register, drop half the beats, average, then PSIR.

Registration is rigid translation by phase correlation. Respiratory-phase
selection keeps the frames closest to the medoid frame position.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import as_complex_image
from .phantom import fourier_shift
from .recon import EncodingOperator, RefinementConfig, ReconParams, landweber_reconstruct, psir_scc

__all__ = [
    "ShiftEstimate",
    "estimate_shift",
    "register_frames",
    "medoid_index",
    "select_frames",
    "moco_average",
    "moco_psir_reference",
]


@dataclass(frozen=True, eq=False)
class ShiftEstimate:
    """Per-frame displacement ``(dy, dx)`` relative to the reference frame."""

    shifts: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        s = np.array(self.shifts, dtype=np.float64).reshape(-1, 2)
        c = np.array(self.confidence, dtype=np.float64).reshape(-1)
        if c.size != s.shape[0]:
            raise ValueError("one confidence value per frame required")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(c))):
            raise ValueError("shift estimates must be finite")
        object.__setattr__(self, "shifts", s)
        object.__setattr__(self, "confidence", c)

    def __len__(self):
        return self.shifts.shape[0]


def _subpixel(m1, m0, p1):
    """Vertex offset of the parabola through three samples (log domain when possible)."""
    if m1 > 0 and m0 > 0 and p1 > 0:
        m1, m0, p1 = math.log(m1), math.log(m0), math.log(p1)
    denom = m1 - 2.0 * m0 + p1
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (m1 - p1) / denom, -0.5, 0.5))


def estimate_shift(reference, moving, bandwidth=0.15):
    """Displacement of ``moving`` relative to ``reference`` in pixels.

    Phase correlation of the magnitude images with a Gaussian spectral
    taper (``bandwidth`` in cycles/pixel), peak refined per axis with a
    three-point parabolic fit. Translating ``moving`` by the negated result
    maps it onto ``reference``.

    Returns
    -------
    (dy, dx, confidence)
    """
    a = np.abs(as_complex_image(reference, "reference"))
    b = np.abs(as_complex_image(moving, "moving"))
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("cannot register an all-zero image")
    rows, cols = a.shape
    cross = np.fft.fft2(b) * np.fft.fft2(a).conj()
    mag = np.abs(cross)
    cross = cross / (mag + 1e-12 * mag.max())
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    cross *= np.exp(-(fy**2 + fx**2) / bandwidth**2)
    corr = np.fft.ifft2(cross).real
    iy, ix = np.unravel_index(int(np.argmax(corr)), corr.shape)
    peak = corr[iy, ix]
    oy = _subpixel(corr[(iy - 1) % rows, ix], peak, corr[(iy + 1) % rows, ix])
    ox = _subpixel(corr[iy, (ix - 1) % cols], peak, corr[iy, (ix + 1) % cols])
    dy = iy - rows if iy > rows // 2 else iy
    dx = ix - cols if ix > cols // 2 else ix
    confidence = peak / max(corr.sum(), np.finfo(float).tiny)
    return float(dy + oy), float(dx + ox), float(confidence)


def register_frames(frames, reference_index=0):
    """Shift of every frame relative to ``frames[reference_index]``."""
    ref = frames[reference_index]
    shifts, conf = [], []
    for i, f in enumerate(frames):
        if i == reference_index:
            shifts.append((0.0, 0.0))
            conf.append(1.0)
            continue
        dy, dx, c = estimate_shift(ref, f)
        shifts.append((dy, dx))
        conf.append(c)
    return ShiftEstimate(np.array(shifts), np.array(conf))


def medoid_index(points):
    """Index minimizing the summed Euclidean distance to all points (lowest on ties)."""
    p = np.asarray(points, dtype=np.float64)
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return int(np.argmin(dist.sum(axis=1)))


def select_frames(shifts):
    """Keep the ``ceil(n/2)`` frames nearest the medoid position.

    Ties go to the lower frame index. Returns sorted indices.
    """
    s = shifts.shifts if isinstance(shifts, ShiftEstimate) else np.asarray(shifts, dtype=np.float64)
    s = s.reshape(-1, 2)
    n = s.shape[0]
    if n < 2:
        raise ValueError("frame selection needs at least 2 frames")
    disp = np.linalg.norm(s - s[medoid_index(s)], axis=1)
    order = np.argsort(disp, kind="stable")
    return np.sort(order[: math.ceil(n / 2)])


def moco_average(frames, shifts, retained):
    """Undo each retained frame's displacement (Fourier shift) and take the complex mean."""
    retained = list(retained)
    if not retained:
        raise ValueError("no frames retained")
    s = shifts.shifts if isinstance(shifts, ShiftEstimate) else np.asarray(shifts, dtype=np.float64)
    s = s.reshape(-1, 2)
    acc = None
    for i in retained:
        f = fourier_shift(as_complex_image(frames[i]), -s[i, 0], -s[i, 1])
        acc = f if acc is None else acc + f
    return acc / len(retained)


def _average(frames, shifts=None, retained=None):
    if len(frames) == 1:
        return as_complex_image(frames[0]).copy(), np.array([0])
    if shifts is None:
        shifts = register_frames(frames)
    if retained is None:
        retained = select_frames(shifts)
    return moco_average(frames, shifts, retained), retained


def moco_psir_reference(series, sens, params=None, independent_pd_selection=False, return_details=False):
    """MOCO-averaged PSIR from every IR/PD pair of ``series``.

    Each pair is reconstructed with the Landweber cascade (no refinement).
    The IR-derived retention set is reused for PD unless
    ``independent_pd_selection`` is set.
    """
    params = params or ReconParams()
    plain = replace(params, refinement=RefinementConfig())
    op = EncodingOperator(sens, series.mask)
    ir_frames, pd_frames = [], []
    for k_ir, k_pd in zip(series.k_ir, series.k_pd):
        x_ir, x_pd = landweber_reconstruct(k_ir, k_pd, op, plain)
        ir_frames.append(x_ir)
        pd_frames.append(x_pd)

    ir_avg, retained = _average(ir_frames)
    if len(pd_frames) == 1:
        pd_avg, pd_retained = _average(pd_frames)
    else:
        pd_shifts = register_frames(pd_frames)
        pd_retained = select_frames(pd_shifts) if independent_pd_selection else retained
        pd_avg = moco_average(pd_frames, pd_shifts, pd_retained)
    out = psir_scc(ir_avg, pd_avg, params.scc)
    if return_details:
        return out, {"ir_retained": np.asarray(retained), "pd_retained": np.asarray(pd_retained)}
    return out
