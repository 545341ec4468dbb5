"""Encoding operator, unrolled Landweber cascade and PSIR with surface coil correction."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import kvfile
from .core import SamplingMask, as_complex_image, as_multicoil, fft2c, ifft2c
from .preprocess import CoilSensitivities

__all__ = [
    "DivergenceError",
    "EncodingOperator",
    "StepSchedule",
    "RefinementConfig",
    "SccConfig",
    "ReconParams",
    "encode",
    "adjoint",
    "refine",
    "landweber_step",
    "landweber_reconstruct",
    "scc_profile",
    "psir_scc",
    "reconstruct_single_shot",
    "params_to_kv",
    "params_from_kv",
]

DEFAULT_ITERS = 12
DEFAULT_STEP = 0.5
REFINEMENT_KINDS = ("none", "tikhonov", "gaussian_residual")


class DivergenceError(FloatingPointError):
    """Landweber iterates became non-finite or blew up."""


@dataclass(frozen=True, eq=False)
class EncodingOperator:
    """``A x = M . F(S x)`` for every coil; ``A^H`` is its exact adjoint."""

    sens: CoilSensitivities
    mask: SamplingMask

    def __post_init__(self):
        if self.sens.shape[0] != self.mask.rows:
            raise ValueError(
                f"coil maps have {self.sens.shape[0]} rows, mask {self.mask.rows}"
            )

    @property
    def shape(self):
        return self.sens.shape

    @property
    def kshape(self):
        return (self.sens.coils, *self.sens.shape)

    def normal(self, x):
        """``A^H A x`` for a stack of images ``(..., rows, cols)``.

        Works in the ifftshifted frame, where the centered transforms reduce to
        plain FFTs and the shifts cancel between forward and adjoint.
        """
        s = self._shifted_maps()
        w = self._shifted_weights()
        xs = np.fft.ifftshift(x, axes=(-2, -1))
        coil = s * xs[..., None, :, :]
        k = np.fft.fft2(coil, axes=(-2, -1), norm="ortho")
        k *= w
        back = np.fft.ifft2(k, axes=(-2, -1), norm="ortho")
        out = np.sum(s.conj() * back, axis=-3)
        return np.fft.fftshift(out, axes=(-2, -1))

    def _shifted_maps(self):
        cached = self.__dict__.get("_smaps")
        if cached is None:
            cached = np.fft.ifftshift(self.sens.maps, axes=(-2, -1))
            object.__setattr__(self, "_smaps", cached)
        return cached

    def _shifted_weights(self):
        cached = self.__dict__.get("_sw")
        if cached is None:
            cached = np.fft.ifftshift(self.mask.as_kspace_weights(), axes=(-2,))
            object.__setattr__(self, "_sw", cached)
        return cached


def encode(x, op):
    """Per coil ``mask * fft2c(s_c * x)``; unsampled rows are exactly zero."""
    x = as_complex_image(x)
    if x.shape != op.shape:
        raise ValueError(f"image shape {x.shape} != operator shape {op.shape}")
    k = fft2c(op.sens.maps * x)
    k[:, ~op.mask.sampled, :] = 0.0
    return k


def adjoint(k, op):
    """``sum_c conj(s_c) * ifft2c(mask * k_c)``."""
    k = as_multicoil(k)
    if k.shape != op.kshape:
        raise ValueError(f"k-space shape {k.shape} != operator shape {op.kshape}")
    km = k * op.mask.as_kspace_weights()
    return np.sum(op.sens.maps.conj() * ifft2c(km), axis=0)


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Per-iteration data-consistency step sizes for the IR and PD channels.

    ``n_iters == 0`` is allowed and means "adjoint only".
    """

    lambda_ir: np.ndarray
    lambda_pd: np.ndarray

    def __post_init__(self):
        a = np.array(self.lambda_ir, dtype=np.float64).reshape(-1)
        b = np.array(self.lambda_pd, dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise ValueError("IR and PD schedules must have the same length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("step sizes must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "lambda_ir", a)
        object.__setattr__(self, "lambda_pd", b)

    @property
    def n_iters(self):
        return self.lambda_ir.size

    @classmethod
    def constant(cls, n_iters=DEFAULT_ITERS, step=DEFAULT_STEP):
        return cls(np.full(n_iters, step), np.full(n_iters, step))

    def __eq__(self, other):
        if not isinstance(other, StepSchedule):
            return NotImplemented
        return np.array_equal(self.lambda_ir, other.lambda_ir) and np.array_equal(
            self.lambda_pd, other.lambda_pd
        )


@dataclass(frozen=True)
class RefinementConfig:
    """Stand-in for the learned joint IR-PD refinement.

    kinds:
      ``none``               r = 0
      ``tikhonov``           r = mu * x
      ``gaussian_residual``  r = beta * (x - blur(x, sigma))

    ``overrides`` optionally maps an iteration index to a dict of parameter
    values that replace the shared ones for that iteration.
    """

    kind: str = "none"
    mu: float = 0.0
    beta: float = 0.0
    sigma: float = 1.0
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REFINEMENT_KINDS:
            raise ValueError(f"unknown refinement kind {self.kind!r}")
        for p in (self, *(_Params(**o) for o in self.overrides.values())):
            if p.mu < 0:
                raise ValueError("mu must be >= 0")
            if not np.isfinite(p.beta):
                raise ValueError("beta must be finite")
            if p.sigma <= 0:
                raise ValueError("sigma must be > 0")

    def at(self, n):
        o = self.overrides.get(n)
        if not o:
            return self
        return replace(self, overrides={}, **o)


@dataclass(frozen=True)
class _Params:
    mu: float = 0.0
    beta: float = 0.0
    sigma: float = 1.0


@dataclass(frozen=True)
class SccConfig:
    sigma: float = 16.0
    eps: float = 0.05
    percentile: float = 90.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("SCC sigma must be > 0")
        if not 0 < self.eps < 1:
            raise ValueError("SCC eps must be in (0, 1)")
        if not 50 <= self.percentile <= 100:
            raise ValueError("SCC percentile must be in [50, 100]")


@dataclass(frozen=True)
class ReconParams:
    steps: StepSchedule = field(default_factory=StepSchedule.constant)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    scc: SccConfig = field(default_factory=SccConfig)

    @property
    def n_iters(self):
        return self.steps.n_iters


def _blur_complex(x, sigma):
    # channels on axis 0 are blurred independently
    s = (0, sigma, sigma) if x.ndim == 3 else sigma
    return ndimage.gaussian_filter(x.real, s) + 1j * ndimage.gaussian_filter(x.imag, s)


def refine(x, cfg, n=0):
    """Refinement residuals for a stacked ``(2, rows, cols)`` IR/PD state."""
    p = cfg.at(n)
    if p.kind == "none":
        return np.zeros_like(x)
    if p.kind == "tikhonov":
        return p.mu * x
    return p.beta * (x - _blur_complex(x, p.sigma))


def landweber_step(x, ahk, op, lam, cfg, n):
    """One cascade element on the stacked state ``x = (x_ir, x_pd)``.

    ``ahk`` is the stacked ``A^H k``; ``lam`` holds ``(lambda_ir, lambda_pd)``.
    """
    r = refine(x, cfg, n)
    grad = op.normal(x) - ahk
    lam = np.asarray(lam, dtype=np.float64)[:, None, None]
    return x - lam * grad - r


def landweber_reconstruct(k_ir, k_pd, op, params, x0=None, growth_limit=1e6, callback=None):
    """Run the IR/PD Landweber cascade.

    Parameters
    ----------
    k_ir, k_pd : ndarray, (coils, rows, cols)
        Prewhitened k-space for the two channels.
    op : EncodingOperator
    params : ReconParams
    x0 : tuple of ndarray, optional
        Starting images; defaults to ``(A^H k_ir, A^H k_pd)``.
    growth_limit : float
        Iterates whose norm exceeds ``growth_limit`` times the starting scale
        are treated as divergent.
    callback : callable, optional
        Called as ``callback(n, x_ir, x_pd)`` after every iteration.

    Returns
    -------
    x_ir, x_pd : ndarray
    """
    ahk = np.stack([adjoint(k_ir, op), adjoint(k_pd, op)])
    if x0 is None:
        x = ahk.copy()
    else:
        x = np.stack([as_complex_image(x0[0]), as_complex_image(x0[1])])
        if x.shape[1:] != op.shape:
            raise ValueError("x0 does not match the operator shape")
    scale = max(np.linalg.norm(x), np.linalg.norm(ahk), np.finfo(float).tiny)
    sched = params.steps
    for n in range(sched.n_iters):
        x = landweber_step(x, ahk, op, (sched.lambda_ir[n], sched.lambda_pd[n]), params.refinement, n)
        norm = np.linalg.norm(x)
        if not np.isfinite(norm):
            raise DivergenceError(f"non-finite iterate at iteration {n}")
        if norm > growth_limit * scale:
            raise DivergenceError(f"iterate norm grew {norm / scale:.3g}x by iteration {n}")
        if callback is not None:
            callback(n, x[0], x[1])
    return x[0], x[1]


def scc_profile(x_pd, cfg=None):
    """Multiplicative surface-coil correction from the low-pass PD magnitude.

    ``m / (P + eps * m)`` with ``P`` the Gaussian-blurred ``|x_pd|`` and ``m``
    its ``percentile``-th value. All-zero input gives a flat unit profile.
    """
    cfg = cfg or SccConfig()
    mag = np.abs(as_complex_image(x_pd, "PD image"))
    blurred = ndimage.gaussian_filter(mag, cfg.sigma)
    top = blurred.max()
    if not top > 0:
        return np.ones_like(mag)
    m = np.percentile(blurred, cfg.percentile)
    if not m > 0:
        m = top
    return m / (np.clip(blurred, 0.0, None) + cfg.eps * m)


def psir_scc(x_ir, x_pd, cfg=None):
    """``Re{x_ir * exp(-j arg x_pd)} * SCC(x_pd)``; ``arg 0`` is taken as 0."""
    x_ir = as_complex_image(x_ir, "IR image")
    x_pd = as_complex_image(x_pd, "PD image")
    if x_ir.shape != x_pd.shape:
        raise ValueError(f"IR {x_ir.shape} and PD {x_pd.shape} shapes differ")
    mag = np.abs(x_pd)
    unit = np.ones_like(x_pd)
    nz = mag > 0
    unit[nz] = x_pd[nz] / mag[nz]
    return np.real(x_ir * unit.conj()) * scc_profile(x_pd, cfg)


def reconstruct_single_shot(series, sens, params=None, pair=0):
    """Landweber cascade on the first IR/PD pair, then PSIR with SCC."""
    params = params or ReconParams()
    if series.n_avg < 1:
        raise ValueError("series has no IR/PD pairs")
    op = EncodingOperator(sens, series.mask)
    x_ir, x_pd = landweber_reconstruct(series.k_ir[pair], series.k_pd[pair], op, params)
    return psir_scc(x_ir, x_pd, params.scc)


def params_to_kv(params):
    ref = params.refinement
    d = {
        "n_iters": params.n_iters,
        "lambda_ir": params.steps.lambda_ir,
        "lambda_pd": params.steps.lambda_pd,
        "refinement.kind": ref.kind,
        "refinement.mu": float(ref.mu),
        "refinement.beta": float(ref.beta),
        "refinement.sigma": float(ref.sigma),
        "scc.sigma": float(params.scc.sigma),
        "scc.eps": float(params.scc.eps),
        "scc.percentile": float(params.scc.percentile),
    }
    for n, o in sorted(ref.overrides.items()):
        for name, value in o.items():
            d[f"refinement.override.{n}.{name}"] = float(value)
    return d


def params_from_kv(d):
    n = kvfile.as_int(d.get("n_iters", DEFAULT_ITERS))
    lam_ir = kvfile.as_floats(d["lambda_ir"]) if "lambda_ir" in d else [DEFAULT_STEP] * n
    lam_pd = kvfile.as_floats(d["lambda_pd"]) if "lambda_pd" in d else [DEFAULT_STEP] * n
    if len(lam_ir) != n or len(lam_pd) != n:
        raise ValueError("step schedule length does not match n_iters")
    overrides = {}
    for key, value in d.items():
        if key.startswith("refinement.override."):
            _, _, it, name = key.split(".", 3)
            overrides.setdefault(int(it), {})[name] = float(value)
    ref = RefinementConfig(
        d.get("refinement.kind", "none"),
        kvfile.as_float(d.get("refinement.mu", 0.0)),
        kvfile.as_float(d.get("refinement.beta", 0.0)),
        kvfile.as_float(d.get("refinement.sigma", 1.0)),
        overrides,
    )
    scc = SccConfig(
        kvfile.as_float(d.get("scc.sigma", 16.0)),
        kvfile.as_float(d.get("scc.eps", 0.05)),
        kvfile.as_float(d.get("scc.percentile", 90.0)),
    )
    return ReconParams(StepSchedule(lam_ir, lam_pd), ref, scc)
