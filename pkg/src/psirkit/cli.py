"""Command-line front end: simulate, recon, moco, metrics, stats, train.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure
(unreadable/unwritable paths, corrupt CXF files).
"""

import argparse
import csv
import hashlib
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import kvfile, metrics, plotting, stats, train
from .core import CxfError, SamplingMask, read_array, uniform_mask, write_array
from .moco import moco_psir_reference
from .phantom import (
    AcquisitionSeries,
    MotionTrace,
    default_phantom,
    phantom_from_kv,
    phantom_to_kv,
    simulate_coil_maps,
    simulate_series,
    sinusoidal_motion,
)
from .preprocess import (
    CoilSensitivities,
    NoiseCovariance,
    estimate_noise_covariance,
    estimate_sensitivities,
    prewhiten,
    rss,
)
from .recon import ReconParams, params_from_kv, reconstruct_single_shot

log = logging.getLogger("psirkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

MANIFEST = "manifest.txt"
SERIES_FORMAT = "psir-series"
SERIES_VERSION = 1


class ConfigError(ValueError):
    """Bad flags or inputs; maps to exit code 2."""


class CorruptSeriesError(CxfError):
    """A series file does not match its manifest checksum."""


# ---------------------------------------------------------------- series I/O


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_series(directory, series, extra=None):
    """Store ``series`` as CXF files plus a ``manifest.txt`` with checksums.

    The manifest holds no timestamps or absolute paths, so identical inputs
    give a byte-identical directory.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (k_ir, k_pd) in enumerate(zip(series.k_ir, series.k_pd)):
        files[f"k_ir_{i:03d}"] = k_ir
        files[f"k_pd_{i:03d}"] = k_pd
    files["coils"] = series.coils.maps
    files["truth_ir"] = series.truth_ir
    files["truth_pd"] = series.truth_pd
    if series.noise_samples is not None:
        files["noise_samples"] = series.noise_samples
    if series.noise_cov is not None:
        files["noise_cov"] = series.noise_cov.matrix

    man = {"format": SERIES_FORMAT, "version": SERIES_VERSION, "n_avg": series.n_avg}
    man.update(extra or {})
    man["mask.rows"] = series.mask.rows
    man["mask.acceleration"] = series.mask.acceleration
    man["mask.acs_lines"] = series.mask.acs_lines
    man["mask.sampled"] = [int(i) for i in np.flatnonzero(series.mask.sampled)]
    man["motion.dy"] = [float(v) for v in series.motion.shifts[:, 0]]
    man["motion.dx"] = [float(v) for v in series.motion.shifts[:, 1]]
    for name, arr in files.items():
        fname = f"{name}.cxf"
        write_array(d / fname, arr)
        man[f"file.{name}"] = fname
        man[f"sha256.{name}"] = _sha256(d / fname)
    kvfile.dump(d / MANIFEST, man, header="psirkit acquisition series")
    return d / MANIFEST


def read_series(directory):
    """Inverse of :func:`write_series`; verifies every checksum."""
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise ConfigError(f"no series manifest at {mpath}")
    man = kvfile.load(mpath)
    if man.get("format") != SERIES_FORMAT:
        raise ConfigError(f"{mpath}: not a series manifest")

    def load(name, required=True):
        key = f"file.{name}"
        if key not in man:
            if required:
                raise ConfigError(f"{mpath}: manifest lacks {key}")
            return None
        path = d / man[key]
        if _sha256(path) != man.get(f"sha256.{name}"):
            raise CorruptSeriesError(f"{path}: checksum does not match manifest")
        return read_array(path).astype(np.complex128)

    n_avg = kvfile.as_int(man["n_avg"])
    rows = kvfile.as_int(man["mask.rows"])
    sampled = np.zeros(rows, dtype=bool)
    sampled[[int(i) for i in kvfile.as_floats(man["mask.sampled"])]] = True
    mask = SamplingMask(sampled, kvfile.as_int(man["mask.acceleration"]), kvfile.as_int(man["mask.acs_lines"]))
    motion = MotionTrace(np.column_stack([kvfile.as_floats(man["motion.dy"]), kvfile.as_floats(man["motion.dx"])]))

    maps = load("coils")
    r = rss(maps)
    maps[:, r > 0] /= r[r > 0]  # undo float32 rounding of the unit-RSS constraint
    cov = load("noise_cov", required=False)
    series = AcquisitionSeries(
        [load(f"k_ir_{i:03d}") for i in range(n_avg)],
        [load(f"k_pd_{i:03d}") for i in range(n_avg)],
        mask,
        CoilSensitivities(maps),
        None if cov is None else NoiseCovariance(0.5 * (cov + cov.conj().T)),
        motion,
        load("truth_ir"),
        load("truth_pd"),
        noise_samples=load("noise_samples", required=False),
        meta={k: v for k, v in man.items() if not k.startswith(("file.", "sha256.", "motion.", "mask."))},
    )
    return series


def prepare_series(series):
    """Prewhiten with the covariance of the noise scan (if any) and estimate coil maps from the first PD frame."""
    if series.noise_samples is not None:
        cov = estimate_noise_covariance(series.noise_samples)
        series.k_ir = [prewhiten(k, cov) for k in series.k_ir]
        series.k_pd = [prewhiten(k, cov) for k in series.k_pd]
    return estimate_sensitivities(series.k_pd[0], series.mask)


# ---------------------------------------------------------------- images


def write_png(path, img, percentiles=(1.0, 99.0)):
    """8-bit grayscale PNG windowed to the image's percentiles; window stored as PNG text."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = (float(v) for v in np.percentile(img, percentiles))
    if not hi > lo:
        hi = lo + 1.0
    u8 = np.round(255.0 * np.clip((img - lo) / (hi - lo), 0.0, 1.0)).astype(np.uint8)
    info = PngInfo()
    info.add_text("window_lo", repr(lo))
    info.add_text("window_hi", repr(hi))
    info.add_text("window_percentiles", f"{percentiles[0]:g},{percentiles[1]:g}")
    Image.fromarray(u8, mode="L").save(path, pnginfo=info)
    return lo, hi


# ---------------------------------------------------------------- helpers


def _positive(flag, value, allow_zero=False):
    if value is None:
        return
    if not math.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{flag} must be {'>= 0' if allow_zero else '> 0'}, got {value}")


def _load_params(path, default=None):
    if path is None:
        return default if default is not None else ReconParams()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"--params: no such file {p}")
    try:
        return params_from_kv(kvfile.load(p))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"--params {p}: {exc}") from exc


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    if args.n_avg < 1:
        raise ConfigError(f"--n-avg must be >= 1, got {args.n_avg}")
    if args.coils < 1:
        raise ConfigError(f"--coils must be >= 1, got {args.coils}")
    _positive("--noise-sigma", args.noise_sigma, allow_zero=True)
    _positive("--motion-amplitude", args.motion_amplitude, allow_zero=True)
    if args.rows < 16 or args.cols < 16:
        raise ConfigError("--rows and --cols must be >= 16")
    if not 8 <= args.acs_lines <= args.rows:
        raise ConfigError(f"--acs-lines must lie in [8, rows], got {args.acs_lines}")

    seed = args.seed
    spec = default_phantom(args.rows, args.cols, seed=seed, jitter=args.jitter)
    maps = simulate_coil_maps(args.coils, args.rows, args.cols, seed=seed + 1)
    mask = uniform_mask(args.rows, args.accel, args.acs_lines)
    if args.motion_amplitude > 0:
        motion = sinusoidal_motion(2 * args.n_avg, amplitude=args.motion_amplitude)
    else:
        motion = MotionTrace.static(2 * args.n_avg)
    cov = NoiseCovariance.correlated(args.coils, args.noise_sigma, args.noise_rho) if args.noise_sigma > 0 else None
    series = simulate_series(spec, maps, mask, motion, cov, args.n_avg, seed=seed + 2,
                             n_noise_samples=args.noise_samples)
    extra = {
        "seed": seed,
        "accel": args.accel,
        "coils": args.coils,
        "noise_sigma": float(args.noise_sigma),
        "noise_rho": float(args.noise_rho),
    }
    extra.update({f"phantom.{k}": v for k, v in phantom_to_kv(spec).items()})
    path = write_series(_out_dir(args.out), series, extra)
    log.info("wrote series with %d IR/PD pairs to %s", series.n_avg, path.parent)
    return EXIT_OK


def _reconstruct_command(args, label, fn):
    paths = [Path(p) for p in args.series]
    for p in paths:
        if not (p / MANIFEST).is_file():
            raise ConfigError(f"--series: no series manifest at {p / MANIFEST}")
    params = _load_params(args.params, train.reference_params() if label == "moco" else None)
    out = _out_dir(args.out)
    timings = []
    for p in paths:
        series = read_series(p)
        name = p.resolve().name or "series"
        t0 = time.perf_counter()
        sens = prepare_series(series)
        img = fn(series, sens, params)
        wall = time.perf_counter() - t0
        timings.append((name, wall))
        log.info("%s %s: wall time %.4f s", label, name, wall)
        write_array(out / f"{name}.cxf", img)
        if args.png:
            lo, hi = write_png(out / f"{name}.png", img)
            log.info("%s %s: PNG window [%.4g, %.4g]", label, name, lo, hi)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "wall_time_s"])
        for name, wall in timings:
            w.writerow([name, f"{wall:.6f}"])
    return EXIT_OK


def cmd_recon(args):
    return _reconstruct_command(args, "recon", lambda s, sens, p: reconstruct_single_shot(s, sens, p))


def cmd_moco(args):
    return _reconstruct_command(args, "moco", lambda s, sens, p: moco_psir_reference(s, sens, p))


PAIR_COLUMNS = ("patient_id", "slice_id", "test", "ref")


def read_pairs_csv(path):
    """Rows of ``patient_id,slice_id,test,ref``; image paths are relative to the CSV."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise stats.CsvFormatError(1, "empty file") from None
        if tuple(h.strip() for h in header) != PAIR_COLUMNS:
            raise stats.CsvFormatError(1, f"expected header {','.join(PAIR_COLUMNS)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise stats.CsvFormatError(reader.line_num, f"expected 4 fields, got {len(row)}")
            pid, sid, test, ref = (c.strip() for c in row)
            if not pid or not test or not ref:
                raise stats.CsvFormatError(reader.line_num, "patient_id, test and ref must be non-empty")
            out.append((pid, sid, base / test, base / ref))
    if not out:
        raise stats.CsvFormatError(2, "no image pairs")
    return out


def _real_image(path):
    arr = read_array(path)
    if np.iscomplexobj(arr) or arr.ndim != 2:
        raise ConfigError(f"{path}: expected a real 2-D image")
    return arr.astype(np.float64)


def cmd_metrics(args):
    if args.pairs is not None:
        pairs = read_pairs_csv(args.pairs)
    elif args.test and args.ref:
        pairs = [(args.patient_id, "0", Path(args.test), Path(args.ref))]
    else:
        raise ConfigError("give --pairs CSV or both --test and --ref")
    for _, _, t, r in pairs:
        for p in (t, r):
            if not p.is_file():
                raise ConfigError(f"no such image {p}")
    cfg = metrics.SsimConfig(range_mode=args.ssim_range)
    records = [metrics.slice_metrics(_real_image(t), _real_image(r), pid, sid, cfg) for pid, sid, t, r in pairs]
    report = metrics.macro_aggregate(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(out, report)
    plotting.plot_metrics(report, out.with_suffix(".png"))
    print(
        f"{report.n_patients} patients: SSIM {report.mean['ssim']:.4f} +- {report.std_error['ssim']:.4f}, "
        f"PSNR {report.mean['psnr_db']:.2f} dB, NRMSE {report.mean['nrmse']:.4f}"
    )
    return EXIT_OK


def cmd_stats(args):
    _positive("--margin", args.margin)
    if not 0 < args.alpha < 1:
        raise ConfigError(f"--alpha must lie in (0, 1), got {args.alpha}")
    if args.bootstrap_iters < 1:
        raise ConfigError(f"--bootstrap-iters must be >= 1, got {args.bootstrap_iters}")
    if not Path(args.scores).is_file():
        raise ConfigError(f"no such score file {args.scores}")
    rows = stats.read_score_csv(args.scores, aggregate=args.aggregate)
    report = stats.analyze(rows, args.margin, args.alpha, args.bootstrap_iters, seed=args.seed,
                           workers=train.thread_count())
    sys.stdout.write(stats.format_report(report))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        stats.write_verdict_csv(out, report)
        plotting.plot_verdicts(report, out.with_suffix(".png"))
    return EXIT_OK


def cmd_train(args):
    if args.steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {args.steps}")
    if args.n_train < 1 or args.n_val < 1:
        raise ConfigError("--n-train and --n-val must be >= 1")
    if args.n_avg < 1:
        raise ConfigError(f"--n-avg must be >= 1, got {args.n_avg}")
    _positive("--lr", args.lr)
    _positive("--noise-sigma", args.noise_sigma, allow_zero=True)
    if args.eval_every < 1:
        raise ConfigError("--eval-every must be >= 1")
    initial = _load_params(args.params)
    out = _out_dir(args.out)

    common = dict(coils=args.coils, accel=args.accel, noise_sigma=args.noise_sigma, n_avg=args.n_avg)
    t0 = time.perf_counter()
    tr = train.standard_dataset(args.n_train, seed=args.seed, prefix="train", **common)
    va = train.standard_dataset(args.n_val, seed=args.seed + 1, prefix="val", **common)
    log.info("built %d train / %d validation cases in %.1f s", len(tr), len(va), time.perf_counter() - t0)
    run = train.optimize(initial, tr, va, steps=args.steps, lr=args.lr, seed=args.seed, eval_every=args.eval_every)

    train.write_log_csv(out / "train_log.csv", run)
    for c in run.history:
        train.write_checkpoint(out / f"checkpoint_{c.step:04d}.txt", c.params, run.template, step=c.step,
                               train_ssim=c.train_ssim, val_ssim=c.val_ssim)
    sel = run.selected
    train.write_checkpoint(out / "selected_params.txt", sel.params, run.template, step=sel.step,
                           train_ssim=sel.train_ssim, val_ssim=sel.val_ssim)
    plotting.plot_training(run, out / "train_log.png")
    print(f"selected step {sel.step}: train SSIM {sel.train_ssim:.4f}, validation SSIM {sel.val_ssim:.4f}"
          + (" (aborted after divergence)" if run.aborted else ""))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="psirkit", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic IR/PD acquisition series")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-avg", type=int, default=8)
    s.add_argument("--accel", type=int, choices=[1, 2, 3], default=2)
    s.add_argument("--coils", type=int, default=4)
    s.add_argument("--noise-sigma", type=float, default=0.005)
    s.add_argument("--noise-rho", type=float, default=0.1)
    s.add_argument("--noise-samples", type=int, default=4096)
    s.add_argument("--rows", type=int, default=144)
    s.add_argument("--cols", type=int, default=256)
    s.add_argument("--acs-lines", type=int, default=24)
    s.add_argument("--motion-amplitude", type=float, default=4.0)
    s.add_argument("--jitter", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    for name, fn, text in (("recon", cmd_recon, "single-shot PSIR from the first IR/PD pair"),
                           ("moco", cmd_moco, "MOCO-averaged PSIR reference from all pairs")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--series", required=True, nargs="+", help="series directories (one slice each)")
        r.add_argument("--out", required=True)
        r.add_argument("--params", help="reconstruction parameter file")
        r.add_argument("--png", action="store_true", help="also write windowed 8-bit PNGs")
        r.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the pipeline is deterministic")
        r.set_defaults(func=fn)

    m = sub.add_parser("metrics", help="SSIM / PSNR / NRMSE with macro averaging")
    m.add_argument("--pairs", help="CSV with patient_id,slice_id,test,ref")
    m.add_argument("--test")
    m.add_argument("--ref")
    m.add_argument("--patient-id", default="0")
    m.add_argument("--ssim-range", choices=["joint", "ref"], default="joint")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    t = sub.add_parser("stats", help="superiority / equivalence testing of reader scores")
    t.add_argument("scores", help="CSV with patient_id,variant,reader,score_a,score_b")
    t.add_argument("--out")
    t.add_argument("--margin", type=float, default=stats.MARGIN)
    t.add_argument("--alpha", type=float, default=stats.ALPHA)
    t.add_argument("--bootstrap-iters", type=int, default=stats.BOOTSTRAP_ITERS)
    t.add_argument("--aggregate", action="store_true", help="average repeated rows per patient")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_stats)

    g = sub.add_parser("train", help="tune step sizes and refinement scalars on synthetic data")
    g.add_argument("--out", required=True)
    g.add_argument("--params", help="initial parameter file (default: untrained defaults)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=12)
    g.add_argument("--lr", type=float, default=30.0)
    g.add_argument("--eval-every", type=int, default=1)
    g.add_argument("--n-train", type=int, default=4)
    g.add_argument("--n-val", type=int, default=2)
    g.add_argument("--n-avg", type=int, default=8)
    g.add_argument("--accel", type=int, choices=[1, 2, 3], default=2)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--noise-sigma", type=float, default=0.005)
    g.set_defaults(func=cmd_train)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except stats.CsvFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CxfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
