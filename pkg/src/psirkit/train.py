"""End-to-end tuning of the cascade's step sizes and refinement scalars.

The objective is the mean SSIM between the single-shot PSIR output and each
case's MOCO PSIR reference. Gradients come from central finite differences;
the trainable vector is small (2N step sizes plus two refinement scalars).
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvfile
from .core import uniform_mask
from .metrics import ssim
from .moco import moco_psir_reference
from .phantom import default_phantom, simulate_coil_maps, simulate_series, sinusoidal_motion
from .preprocess import NoiseCovariance, estimate_noise_covariance, estimate_sensitivities, prewhiten
from .recon import (
    DivergenceError,
    ReconParams,
    StepSchedule,
    params_to_kv,
    reconstruct_single_shot,
)

__all__ = [
    "TrainCase",
    "Checkpoint",
    "TrainRun",
    "pack",
    "unpack",
    "active_mask",
    "reference_params",
    "standard_dataset",
    "check_disjoint",
    "evaluate",
    "objective",
    "fd_gradient",
    "optimize",
    "write_log_csv",
    "write_checkpoint",
    "thread_count",
]

log = logging.getLogger(__name__)

LR_DECAY = 0.98
MAX_BACKOFF = 5


def thread_count():
    """Worker cap from ``PSIR_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PSIR_THREADS", "1")))
    except ValueError:
        return 1


def pack(params):
    """``[lambda_ir..., lambda_pd..., mu, beta]`` as a float vector."""
    s = params.steps
    r = params.refinement
    return np.concatenate([s.lambda_ir, s.lambda_pd, [r.mu, r.beta]]).astype(np.float64)


def unpack(vector, template):
    """Inverse of :func:`pack`; non-trainable settings come from ``template``.

    ``mu`` is clipped at 0 to keep the Tikhonov term a penalty.
    """
    v = np.asarray(vector, dtype=np.float64)
    n = template.n_iters
    if v.size != 2 * n + 2:
        raise ValueError(f"expected {2 * n + 2} parameters, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("trainable parameters must be finite")
    steps = StepSchedule(v[:n], v[n : 2 * n])
    ref = replace(template.refinement, mu=max(float(v[2 * n]), 0.0), beta=float(v[2 * n + 1]))
    return replace(template, steps=steps, refinement=ref)


def active_mask(template):
    """Which packed coordinates influence the output for this refinement kind."""
    n = template.n_iters
    m = np.ones(2 * n + 2, dtype=bool)
    kind = template.refinement.kind
    m[2 * n] = kind == "tikhonov"
    m[2 * n + 1] = kind == "gaussian_residual"
    return m


def reference_params():
    """Per-pair reconstruction used when building MOCO references: 24 steps of 1.0."""
    return ReconParams(StepSchedule.constant(24, 1.0))


@dataclass(eq=False)
class TrainCase:
    patient_id: str
    series: object
    sens: object
    reference: np.ndarray


def _make_case(pid, seed, rows, cols, coils, accel, noise_sigma, n_avg, acs_lines):
    spec = default_phantom(rows, cols, seed=seed, jitter=0.15)
    maps = simulate_coil_maps(coils, rows, cols, seed=seed + 1)
    mask = uniform_mask(rows, accel, acs_lines)
    rng = np.random.default_rng([seed, 7])
    motion = sinusoidal_motion(2 * n_avg, amplitude=rng.uniform(2.0, 4.0), phase=rng.uniform(0, 2 * np.pi))
    cov = NoiseCovariance.correlated(coils, noise_sigma, 0.1) if noise_sigma > 0 else None
    series = simulate_series(spec, maps, mask, motion, cov, n_avg, seed=seed + 2, n_noise_samples=4096)
    if series.noise_samples is not None:
        est = estimate_noise_covariance(series.noise_samples)
        series.k_ir = [prewhiten(k, est) for k in series.k_ir]
        series.k_pd = [prewhiten(k, est) for k in series.k_pd]
    sens = estimate_sensitivities(series.k_pd[0], mask)
    reference = moco_psir_reference(series, sens, reference_params())
    return TrainCase(pid, series, sens, reference)


def standard_dataset(n_patients, seed=0, rows=72, cols=128, coils=4, accel=2, noise_sigma=0.005,
                     n_avg=8, acs_lines=8, prefix="p"):
    """Synthetic patients: jittered phantom, own coils/motion/noise, 8-average MOCO reference.

    Data are prewhitened with a covariance estimated from a simulated noise
    scan and coil maps are estimated from the first PD frame, as in a real
    pipeline.
    """
    cases = []
    for i in range(n_patients):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0] % (2**31))
        cases.append(_make_case(f"{prefix}{seed}-{i}", case_seed, rows, cols, coils, accel, noise_sigma, n_avg, acs_lines))
    return cases


def check_disjoint(train, val):
    overlap = {c.patient_id for c in train} & {c.patient_id for c in val}
    if overlap:
        raise ValueError(f"patients appear in both splits: {sorted(overlap)}")


def _case_ssim(case, params):
    try:
        out = reconstruct_single_shot(case.series, case.sens, params)
    except DivergenceError:
        log.warning("reconstruction diverged for %s; scoring SSIM 0", case.patient_id)
        return 0.0, True
    return ssim(out, case.reference), False


def evaluate(vector, cases, template):
    """Mean SSIM over ``cases`` and the number of diverged reconstructions."""
    if not cases:
        raise ValueError("empty dataset")
    params = unpack(vector, template)
    workers = min(thread_count(), len(cases))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(lambda c: _case_ssim(c, params), cases))
    else:
        res = [_case_ssim(c, params) for c in cases]
    return math.fsum(r[0] for r in res) / len(res), sum(r[1] for r in res)


def objective(vector, cases, template):
    return evaluate(vector, cases, template)[0]


def fd_gradient(fn, params, h=1e-3, active=None):
    """Central-difference gradient of ``fn`` at ``params``.

    Coordinates with ``active[i] == False`` are skipped and reported as 0.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.asarray(params, dtype=np.float64)
    g = np.zeros_like(p)
    for i in range(p.size):
        if active is not None and not active[i]:
            continue
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (fn(p + e) - fn(p - e)) / (2.0 * h)
    return g


@dataclass(frozen=True)
class Checkpoint:
    step: int
    params: np.ndarray
    train_ssim: float
    val_ssim: float


@dataclass
class TrainRun:
    train_ids: list
    val_ids: list
    steps: int
    eval_every: int
    history: list = field(default_factory=list)
    log: list = field(default_factory=list)  # (step, train_ssim, val_ssim or nan)
    selected: Checkpoint | None = None
    aborted: bool = False
    template: ReconParams | None = None

    @property
    def selected_params(self):
        return unpack(self.selected.params, self.template)


def optimize(initial, train, val, steps=20, lr=1.0, seed=0, eval_every=1, decay=LR_DECAY, h=1e-3,
             batch_size=None):
    """Finite-difference gradient ascent on mean training SSIM.

    ``initial`` is a :class:`ReconParams` (its non-trainable settings are
    kept). The learning rate is multiplied by ``decay`` after every step. A
    step whose reconstructions diverge is retried with half the learning
    rate, up to five times; if it still fails the run stops. Every
    ``eval_every`` steps the validation SSIM is recorded and the selected
    checkpoint is the one with the highest validation SSIM.
    """
    check_disjoint(train, val)
    if steps < 0:
        raise ValueError("steps must be >= 0")
    template = initial
    p = pack(initial)
    active = active_mask(initial)
    rng = np.random.default_rng(seed)
    run = TrainRun([c.patient_id for c in train], [c.patient_id for c in val], steps, eval_every, template=template)

    def checkpoint(step, vec, train_value):
        val_value = objective(vec, val, template)
        run.history.append(Checkpoint(step, vec.copy(), train_value, val_value))
        run.log[-1] = (step, train_value, val_value)
        log.info("step %d: train SSIM %.4f, val SSIM %.4f", step, train_value, val_value)

    f_cur, diverged = evaluate(p, train, template)
    if diverged or not math.isfinite(f_cur):
        raise DivergenceError("initial parameters diverge on the training set")
    run.log.append((0, f_cur, math.nan))
    checkpoint(0, p, f_cur)

    rate = lr
    for step in range(1, steps + 1):
        batch = train
        if batch_size is not None and batch_size < len(train):
            idx = np.sort(rng.choice(len(train), size=batch_size, replace=False))
            batch = [train[i] for i in idx]
        g = fd_gradient(lambda v: objective(v, batch, template), p, h, active)
        accepted = False
        trial_rate = rate
        for _ in range(MAX_BACKOFF + 1):
            cand = p + trial_rate * g
            try:
                f_new, div = evaluate(cand, train, template)
            except ValueError:
                f_new, div = math.nan, 1
            if div == 0 and math.isfinite(f_new):
                accepted = True
                break
            trial_rate *= 0.5
        if not accepted:
            log.warning("step %d: divergence persists after backoff; stopping", step)
            run.aborted = True
            break
        p, f_cur = cand, f_new
        run.log.append((step, f_cur, math.nan))
        if step % eval_every == 0 or step == steps:
            checkpoint(step, p, f_cur)
        rate *= decay

    best = max(run.history, key=lambda c: c.val_ssim)
    run.selected = best
    return run


def write_log_csv(path, run):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_ssim", "val_ssim"])
        for step, tr, va in run.log:
            w.writerow([step, repr(float(tr)), "" if math.isnan(va) else repr(float(va))])


def write_checkpoint(path, vector, template, **extra):
    d = dict(extra)
    d.update(params_to_kv(unpack(vector, template)))
    kvfile.dump(path, d)
