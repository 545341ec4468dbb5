"""Noise prewhitening and coil sensitivity estimation."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import SamplingMask, as_multicoil, ifft2c

__all__ = [
    "NoiseCovariance",
    "CoilSensitivities",
    "estimate_noise_covariance",
    "prewhiten",
    "estimate_sensitivities",
    "rss",
]

RSS_TOL = 1e-6


def rss(maps):
    """Root-sum-of-squares over the coil axis."""
    return np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    """Receiver noise covariance ``Psi`` (coils x coils, Hermitian PSD)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.all(np.isfinite(m)):
            raise ValueError("covariance contains non-finite entries")
        scale = max(float(np.abs(np.trace(m))), 1.0)
        if np.max(np.abs(m - m.conj().T)) > 1e-10 * scale:
            raise ValueError("covariance is not Hermitian")
        m = 0.5 * (m + m.conj().T)
        if np.linalg.eigvalsh(m).min() < -1e-10 * scale:
            raise ValueError("covariance is not positive semidefinite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def coils(self):
        return self.matrix.shape[0]

    @classmethod
    def correlated(cls, coils, sigma=1.0, rho=0.1):
        """``sigma**2`` on the diagonal, ``rho * sigma**2`` off it."""
        m = np.full((coils, coils), rho, dtype=np.complex128)
        np.fill_diagonal(m, 1.0)
        return cls(sigma**2 * m)

    def color_factor(self):
        """Matrix ``F`` with ``F @ F^H == Psi``; valid for singular Psi too."""
        w, v = np.linalg.eigh(self.matrix)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class CoilSensitivities:
    """Complex coil maps ``(coils, rows, cols)`` with unit RSS (or zero)."""

    maps: np.ndarray

    def __post_init__(self):
        m = as_multicoil(self.maps, "coil maps").copy()
        r = rss(m)
        bad = (r > 0) & (np.abs(r - 1.0) > RSS_TOL)
        if bad.any():
            raise ValueError(
                f"coil maps RSS must be 0 or 1 (+-{RSS_TOL}); worst {np.abs(r - 1)[bad].max():.3g}"
            )
        m.setflags(write=False)
        object.__setattr__(self, "maps", m)

    @property
    def coils(self):
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]


def estimate_noise_covariance(noise_samples):
    """Sample covariance ``X X^H / m`` of a ``(coils, m)`` noise record."""
    x = np.asarray(noise_samples, dtype=np.complex128)
    if x.ndim != 2:
        raise ValueError("noise samples must be (coils, m)")
    coils, m = x.shape
    if m < coils:
        raise ValueError(f"need at least {coils} noise samples per coil, got {m}")
    cov = (x @ x.conj().T) / m
    return NoiseCovariance(0.5 * (cov + cov.conj().T))


def prewhiten(k, cov):
    """Decorrelate coils: apply ``L^-1`` with ``Psi = L L^H`` to every sample.

    Parameters
    ----------
    k : ndarray, (coils, ...)
        Multi-coil data; any trailing shape.
    cov : NoiseCovariance

    Returns
    -------
    ndarray
        Data whose noise covariance is the identity.
    """
    k = np.asarray(k, dtype=np.complex128)
    if k.shape[0] != cov.coils:
        raise ValueError(f"data has {k.shape[0]} coils, covariance {cov.coils}")
    try:
        chol = linalg.cholesky(cov.matrix, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("noise covariance is singular") from exc
    d = np.abs(np.diag(chol))
    if d.min() <= 1e-12 * d.max():
        raise ValueError("noise covariance is singular")
    flat = k.reshape(k.shape[0], -1)
    out = linalg.solve_triangular(chol, flat, lower=True)
    return out.reshape(k.shape)


def estimate_sensitivities(k_pd, mask, smoothing_sigma=2.0, floor=0.01):
    """Coil maps from the ACS block of the PD k-space.

    Each coil's ACS rows are Gaussian-apodized (equivalent to an image-domain
    blur of ``smoothing_sigma`` pixels) and transformed to a low-resolution
    coil image; maps are the coil images divided by their RSS. Pixels with
    RSS below ``floor * max(RSS)`` get zero sensitivity.
    """
    k = as_multicoil(k_pd, "PD k-space")
    if not isinstance(mask, SamplingMask):
        raise TypeError("mask must be a SamplingMask")
    if mask.acs_lines < 8:
        raise ValueError(f"need at least 8 ACS lines, mask has {mask.acs_lines}")
    _, rows, cols = k.shape
    if mask.rows != rows:
        raise ValueError("mask and k-space row counts differ")

    acs = np.zeros_like(k)
    sl = mask.acs_slice()
    acs[:, sl, :] = k[:, sl, :]
    if smoothing_sigma > 0:
        fr = (np.arange(rows) - rows // 2) / rows
        fc = (np.arange(cols) - cols // 2) / cols
        g = np.exp(-2.0 * np.pi**2 * smoothing_sigma**2 * (fr[:, None] ** 2 + fc[None, :] ** 2))
        acs *= g
    coil_imgs = ifft2c(acs)
    r = rss(coil_imgs)
    rmax = r.max()
    maps = np.zeros_like(coil_imgs)
    if rmax > 0:
        keep = r >= floor * rmax
        maps[:, keep] = coil_imgs[:, keep] / r[keep]
        # second pass removes rounding drift from the division
        r2 = rss(maps)
        maps[:, keep] /= r2[keep]
    return CoilSensitivities(maps)
