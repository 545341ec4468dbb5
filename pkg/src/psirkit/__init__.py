"""Single-shot PSIR reconstruction by an unrolled Landweber cascade, with the
conventional MOCO reference, image metrics, reader-study statistics and a
small end-to-end trainer."""

from .core import SamplingMask, fft2c, ifft2c, read_array, uniform_mask, write_array
from .recon import ReconParams, RefinementConfig, SccConfig, StepSchedule, psir_scc, reconstruct_single_shot

__version__ = "0.1.0"

__all__ = [
    "SamplingMask",
    "uniform_mask",
    "fft2c",
    "ifft2c",
    "read_array",
    "write_array",
    "ReconParams",
    "RefinementConfig",
    "SccConfig",
    "StepSchedule",
    "psir_scc",
    "reconstruct_single_shot",
]
