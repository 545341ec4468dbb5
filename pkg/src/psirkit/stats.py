"""Reader-study statistics.

Exact Wilcoxon signed-rank tests with Pratt zero handling, a fixed-sequence
superiority-then-TOST decision per variant, Holm step-down across variants,
percentile bootstrap intervals and the conservative two-reader merge.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ALPHA",
    "MARGIN",
    "BOOTSTRAP_ITERS",
    "LEVEL",
    "WilcoxonUndefinedError",
    "CsvFormatError",
    "wilcoxon_null_counts",
    "wilcoxon_exact",
    "tost_equivalence",
    "TestVerdict",
    "fixed_sequence",
    "holm_adjust",
    "holm_adjusted_pvalues",
    "bootstrap_ci",
    "conservative_merge",
    "ScoreRow",
    "read_score_csv",
    "analyze",
    "StudyReport",
    "write_verdict_csv",
    "format_report",
]

ALPHA = 0.05
MARGIN = 0.25
BOOTSTRAP_ITERS = 100_000
LEVEL = 0.95
# int64 counts stay exact up to 2**62 sign patterns; beyond that Python ints
_INT64_LIMIT = 62
EXACT_LIMIT = 200
DECISIONS = ("inconclusive", "equivalent", "superior")


class WilcoxonUndefinedError(ValueError):
    """All differences are zero, so the Pratt statistic has no null distribution."""


class CsvFormatError(ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _pratt_ranks(d):
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("empty difference vector")
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    ranks = rankdata(np.abs(d), method="average")
    nz = d != 0
    if not nz.any():
        raise WilcoxonUndefinedError("all differences are zero")
    # midranks are multiples of 1/2, so doubled ranks are exact integers
    doubled = np.rint(2.0 * ranks[nz]).astype(np.int64)
    return doubled, d[nz] > 0


def wilcoxon_null_counts(doubled_ranks):
    """Number of sign assignments giving each doubled ``W+`` value.

    Shift algorithm: fold in one rank at a time, ``c'(w) = c(w) + c(w - r)``.
    """
    r = np.asarray(doubled_ranks, dtype=np.int64)
    total = int(r.sum())
    dtype = np.int64 if r.size <= _INT64_LIMIT else object
    counts = np.zeros(total + 1, dtype=dtype)
    counts[0] = 1
    top = 0
    for rank in r:
        rank = int(rank)
        counts[rank : top + rank + 1] = counts[rank : top + rank + 1] + counts[: top + 1].copy()
        top += rank
    return counts


def wilcoxon_exact(d, alternative="greater", exact_limit=EXACT_LIMIT):
    """Exact signed-rank p-value with Pratt's treatment of zeros.

    Zeros take part in ranking ``|d|`` (ties get midranks) and are then
    dropped; the null distribution enumerates the signs of the remaining
    ranks exactly. ``greater`` tests for positive location.
    """
    if alternative not in ("greater", "less", "two_sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    doubled, positive = _pratt_ranks(d)
    m = doubled.size
    if m > exact_limit:
        raise ValueError(f"{m} nonzero differences exceeds the exact limit {exact_limit}")
    counts = wilcoxon_null_counts(doubled)
    obs = int(doubled[positive].sum())
    denom = 2**m
    upper = int(counts[obs:].sum())
    lower = int(counts[: obs + 1].sum())
    if alternative == "greater":
        return upper / denom
    if alternative == "less":
        return lower / denom
    return min(1.0, 2.0 * min(upper, lower) / denom)


def tost_equivalence(d, margin=MARGIN):
    """Two one-sided exact signed-rank tests on shifted differences.

    Returns ``(p_lower, p_upper, p_tost)`` where ``p_lower`` tests
    ``location > -margin`` and ``p_upper`` tests ``location < +margin``.
    """
    if not margin > 0:
        raise ValueError("equivalence margin must be positive")
    d = np.asarray(d, dtype=np.float64)
    p_lower = wilcoxon_exact(d + margin, "greater")
    p_upper = wilcoxon_exact(d - margin, "less")
    return p_lower, p_upper, max(p_lower, p_upper)


@dataclass(frozen=True)
class TestVerdict:
    """Outcome of the fixed-sequence procedure for one variant.

    TOST fields are ``None`` when superiority was established. A merged
    verdict keeps the per-reader verdicts in ``readers``.
    """

    variant: str
    decision: str
    superiority_p: float
    tost_p_lower: float | None = None
    tost_p_upper: float | None = None
    holm_rejected: bool | None = None
    reader: str | None = None
    n: int = 0
    note: str = ""
    readers: tuple = field(default=())

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")
        for p in (self.superiority_p, self.tost_p_lower, self.tost_p_upper):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError(f"p-value {p} outside [0, 1]")

    @property
    def tost_p(self):
        if self.tost_p_lower is None:
            return None
        return max(self.tost_p_lower, self.tost_p_upper)

    @property
    def decisive_p(self):
        """The p-value the decision rests on (used for Holm)."""
        if self.decision == "superior" or self.tost_p is None:
            return self.superiority_p
        return self.tost_p


def fixed_sequence(d, margin=MARGIN, alpha=ALPHA, variant="", reader=None):
    """Superiority first; equivalence (TOST) only if superiority fails."""
    d = np.asarray(d, dtype=np.float64)
    notes = []
    try:
        p_sup = wilcoxon_exact(d, "greater")
    except WilcoxonUndefinedError:
        p_sup = 1.0
        notes.append("superiority undefined (all differences zero)")
    if p_sup <= alpha:
        return TestVerdict(variant, "superior", p_sup, reader=reader, n=d.size)
    try:
        p_lo, p_hi, p_tost = tost_equivalence(d, margin)
    except WilcoxonUndefinedError:
        notes.append("TOST undefined (shifted differences all zero)")
        return TestVerdict(variant, "inconclusive", p_sup, 1.0, 1.0, reader=reader, n=d.size, note="; ".join(notes))
    decision = "equivalent" if p_tost <= alpha else "inconclusive"
    return TestVerdict(variant, decision, p_sup, p_lo, p_hi, reader=reader, n=d.size, note="; ".join(notes))


def holm_adjust(p, alpha=ALPHA):
    """Holm step-down rejections, returned in input order."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    reject = np.zeros(m, dtype=bool)
    for i, idx in enumerate(np.argsort(p, kind="stable")):
        if p[idx] <= alpha / (m - i):
            reject[idx] = True
        else:
            break
    return reject


def holm_adjusted_pvalues(p):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj
    return out


def _chunk_means(values, n, seed, chunk_index, size):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, chunk_index])))
    idx = rng.integers(0, n, size=(size, n))
    return values[idx].mean(axis=1)


def bootstrap_ci(values, iters=BOOTSTRAP_ITERS, level=LEVEL, seed=0, chunk=4096, workers=1):
    """Percentile bootstrap interval for the mean (nearest-rank percentiles).

    Resamples are drawn in fixed-size chunks; chunk ``c`` uses
    ``PCG64(SeedSequence([seed, c]))``, so the result depends only on
    ``(values, iters, seed, chunk)`` and never on ``workers``.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("bootstrap needs at least one value")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    # center on the first value so a constant sample resamples to exactly itself
    base = v[0]
    centered = v - base
    sizes = [min(chunk, iters - s) for s in range(0, iters, chunk)]
    jobs = [(centered, v.size, seed, c, size) for c, size in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda a: _chunk_means(*a), jobs))
    else:
        parts = [_chunk_means(*a) for a in jobs]
    means = np.sort(np.concatenate(parts)) + base
    q = (1.0 - level) / 2.0
    k_lo = min(max(math.ceil(q * iters - 1e-9), 1), iters)
    k_hi = min(max(math.ceil((1.0 - q) * iters - 1e-9), 1), iters)
    return float(means[k_lo - 1]), float(means[k_hi - 1])


def conservative_merge(first, second):
    """Report the weaker of two readers' conclusions for the same variant.

    Ordering is superior > equivalent > inconclusive. P-values of the merged
    verdict are the larger of the two readers'; both verdicts are kept.
    """
    if first.variant != second.variant:
        raise ValueError(f"variant mismatch: {first.variant!r} vs {second.variant!r}")
    rank = DECISIONS.index
    decision = min(first.decision, second.decision, key=rank)

    def worst(a, b):
        vals = [x for x in (a, b) if x is not None]
        return max(vals) if vals else None

    holm = None
    if first.holm_rejected is not None and second.holm_rejected is not None:
        holm = first.holm_rejected and second.holm_rejected
    tost_lo, tost_hi = worst(first.tost_p_lower, second.tost_p_lower), worst(first.tost_p_upper, second.tost_p_upper)
    if decision == "superior":
        tost_lo = tost_hi = None
    return TestVerdict(
        first.variant,
        decision,
        max(first.superiority_p, second.superiority_p),
        tost_lo,
        tost_hi,
        holm_rejected=holm,
        reader="merged",
        n=min(first.n, second.n),
        readers=(first, second),
    )


@dataclass(frozen=True)
class ScoreRow:
    patient_id: str
    variant: str
    reader: str
    score_a: float
    score_b: float


SCORE_COLUMNS = ("patient_id", "variant", "reader", "score_a", "score_b")


def read_score_csv(path, aggregate=False):
    """Load paired Likert scores.

    With ``aggregate`` the file may hold several rows per (patient, variant,
    reader) (e.g. one per scored stack); they are averaged per patient.
    Without it, duplicates are an error.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file") from None
        if tuple(h.strip() for h in header) != SCORE_COLUMNS:
            raise CsvFormatError(1, f"expected header {','.join(SCORE_COLUMNS)}")
        groups = {}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise CsvFormatError(lineno, f"expected 5 fields, got {len(row)}")
            pid, variant, rdr = (c.strip() for c in row[:3])
            try:
                a, b = float(row[3]), float(row[4])
            except ValueError:
                raise CsvFormatError(lineno, "scores must be numeric") from None
            if not (1.0 <= a <= 5.0 and 1.0 <= b <= 5.0):
                raise CsvFormatError(lineno, "scores must lie in [1, 5]")
            key = (pid, variant, rdr)
            if key in groups and not aggregate:
                raise CsvFormatError(lineno, f"duplicate row for {key}; use aggregate")
            groups.setdefault(key, []).append((a, b))
    if not groups:
        raise CsvFormatError(2, "no score rows")
    return [
        ScoreRow(pid, var, rdr, math.fsum(x[0] for x in v) / len(v), math.fsum(x[1] for x in v) / len(v))
        for (pid, var, rdr), v in groups.items()
    ]


@dataclass
class StudyReport:
    per_reader: dict  # (variant, reader) -> dict with verdict, means, cis
    merged: dict  # variant -> merged TestVerdict
    variants: list
    readers: list
    margin: float
    alpha: float
    iters: int


def analyze(rows, margin=MARGIN, alpha=ALPHA, iters=BOOTSTRAP_ITERS, level=LEVEL, seed=0, workers=1):
    """Full protocol: per reader and variant, then Holm per reader, then merge."""
    variants = sorted({r.variant for r in rows})
    readers = sorted({r.reader for r in rows})
    per_reader = {}
    for rdr in readers:
        verdicts = []
        for var in variants:
            sel = [r for r in rows if r.variant == var and r.reader == rdr]
            if not sel:
                continue
            sel.sort(key=lambda r: r.patient_id)
            a = np.array([r.score_a for r in sel])
            b = np.array([r.score_b for r in sel])
            v = fixed_sequence(a - b, margin, alpha, variant=var, reader=rdr)
            verdicts.append(v)
            per_reader[(var, rdr)] = {
                "verdict": v,
                "n": len(sel),
                "mean_a": float(a.mean()),
                "mean_b": float(b.mean()),
                "ci_a": bootstrap_ci(a, iters, level, seed, workers=workers),
                "ci_b": bootstrap_ci(b, iters, level, seed + 1, workers=workers),
            }
        flags = holm_adjust([v.decisive_p for v in verdicts], alpha)
        for v, ok in zip(verdicts, flags):
            entry = per_reader[(v.variant, rdr)]
            new = replace(v, holm_rejected=bool(ok))
            if not ok and new.decision != "inconclusive":
                new = replace(new, decision="inconclusive", note=(new.note + "; " if new.note else "") + "not significant after Holm")
            entry["verdict"] = new

    merged = {}
    for var in variants:
        vs = [per_reader[(var, r)]["verdict"] for r in readers if (var, r) in per_reader]
        out = vs[0]
        for other in vs[1:]:
            out = conservative_merge(out, other)
        merged[var] = out
    return StudyReport(per_reader, merged, variants, readers, margin, alpha, iters)


def _p(x):
    return "" if x is None else f"{x:.6g}"


def write_verdict_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["variant", "reader", "n", "mean_a", "ci_a_lo", "ci_a_hi", "mean_b", "ci_b_lo", "ci_b_hi",
             "superiority_p", "tost_p_lower", "tost_p_upper", "decision", "holm_rejected"]
        )
        for var in report.variants:
            for rdr in report.readers:
                e = report.per_reader.get((var, rdr))
                if e is None:
                    continue
                v = e["verdict"]
                w.writerow(
                    [var, rdr, e["n"], f"{e['mean_a']:.6g}", f"{e['ci_a'][0]:.6g}", f"{e['ci_a'][1]:.6g}",
                     f"{e['mean_b']:.6g}", f"{e['ci_b'][0]:.6g}", f"{e['ci_b'][1]:.6g}",
                     _p(v.superiority_p), _p(v.tost_p_lower), _p(v.tost_p_upper), v.decision, v.holm_rejected]
                )
            m = report.merged[var]
            w.writerow([var, "merged", m.n, "", "", "", "", "", "", _p(m.superiority_p), _p(m.tost_p_lower),
                        _p(m.tost_p_upper), m.decision, m.holm_rejected])


def format_report(report):
    lines = [
        f"Paired comparison A vs B (margin {report.margin}, alpha {report.alpha}, "
        f"{report.iters} bootstrap resamples)",
        "",
        f"{'variant':<12}{'reader':<10}{'n':>4}  {'mean A (95% CI)':<24}{'mean B (95% CI)':<24}"
        f"{'p sup':>9}{'p TOST':>9}  {'Holm':<6}decision",
    ]
    for var in report.variants:
        for rdr in report.readers:
            e = report.per_reader.get((var, rdr))
            if e is None:
                continue
            v = e["verdict"]
            ca = f"{e['mean_a']:.2f} ({e['ci_a'][0]:.2f}, {e['ci_a'][1]:.2f})"
            cb = f"{e['mean_b']:.2f} ({e['ci_b'][0]:.2f}, {e['ci_b'][1]:.2f})"
            tp = "-" if v.tost_p is None else f"{v.tost_p:.3g}"
            lines.append(
                f"{var:<12}{rdr:<10}{e['n']:>4}  {ca:<24}{cb:<24}{v.superiority_p:>9.3g}{tp:>9}  "
                f"{'yes' if v.holm_rejected else 'no':<6}{v.decision}"
            )
    lines.append("")
    lines.append("Conservative merge across readers:")
    for var in report.variants:
        m = report.merged[var]
        parts = ", ".join(f"{v.reader}={v.decision}" for v in m.readers) or f"{m.reader}={m.decision}"
        lines.append(f"  {var:<12}{m.decision:<14}({parts})")
    return "\n".join(lines) + "\n"
