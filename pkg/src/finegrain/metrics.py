"""
Evaluation for 4-way multi-label scores: AP/mAP, thresholded precision,
recall and F1, confusion matrices, bootstrap intervals, paired permutation
tests and the shifted field/disease correlation.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, UndefinedMetricError

log = logging.getLogger(__name__)

CLASS_NAMES = ("pneumonia", "rti", "bronchitis", "asthma")
EXACT_PERMUTATION_LIMIT = 20
_TIE_RTOL = 1e-9


def check_scored_set(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Validate an (N, K) score matrix against an (N, K) 0/1 label matrix."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y.reshape(-1, 1)
    if s.ndim != 2 or s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} must be matching (N, K) arrays")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0/1")
    return s, y.astype(np.int64)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive.

    Ranks by descending score; tied scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    hits = y[order] == 1
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class ClassMetrics:
    name: str
    ap: float | None
    precision: float
    recall: float
    f1: float
    tn: int
    fp: int
    fn: int
    tp: int
    flags: list[str] = field(default_factory=list)

    @property
    def confusion(self) -> np.ndarray:
        """``[[TN, FP], [FN, TP]]``."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


@dataclass
class MetricsReport:
    classes: list[ClassMetrics]
    mAP: float | None
    macro_precision: float
    macro_recall: float
    macro_f1: float
    threshold: float
    n: int
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["intervals"] = {k: list(v) for k, v in self.intervals.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{v:6.4f}"

        rows = [f"{'class':<12} {'AP':>6} {'P':>6} {'R':>6} {'F1':>6} {'TN':>6} {'FP':>6} {'FN':>6} {'TP':>6}"]
        for c in self.classes:
            rows.append(f"{c.name:<12} {fmt(c.ap)} {fmt(c.precision)} {fmt(c.recall)} {fmt(c.f1)} "
                        f"{c.tn:6d} {c.fp:6d} {c.fn:6d} {c.tp:6d}")
        rows.append(f"{'macro':<12} {fmt(self.mAP)} {fmt(self.macro_precision)} "
                    f"{fmt(self.macro_recall)} {fmt(self.macro_f1)}")
        for name, (lo, hi) in sorted(self.intervals.items()):
            rows.append(f"{name} interval: [{lo:.4f}, {hi:.4f}]")
        return "\n".join(rows) + "\n"


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def summarize(scores, labels, threshold: float = 0.5, names: Sequence[str] = CLASS_NAMES) -> MetricsReport:
    """Per-class and macro metrics; a score counts as positive when strictly above ``threshold``."""
    s, y = check_scored_set(scores, labels)
    k = s.shape[1]
    names = list(names)[:k] if len(names) >= k else [f"class{i}" for i in range(k)]
    pred = s > threshold
    classes = []
    for j in range(k):
        flags: list[str] = []
        t, p = y[:, j] == 1, pred[:, j]
        tp, fp = int(np.sum(t & p)), int(np.sum(~t & p))
        fn, tn = int(np.sum(t & ~p)), int(np.sum(~t & ~p))
        prec = _ratio(tp, tp + fp, "precision_zero_denominator", flags)
        rec = _ratio(tp, tp + fn, "recall_zero_denominator", flags)
        f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        if prec + rec == 0:
            flags.append("f1_zero_denominator")
        try:
            ap = average_precision(s[:, j], y[:, j])
        except UndefinedMetricError:
            ap = None
            flags.append("ap_undefined_no_positives")
            warnings.warn(f"class {names[j]} has no positive labels; skipped in mAP", RuntimeWarning, stacklevel=2)
        classes.append(ClassMetrics(names[j], ap, prec, rec, f1, tn, fp, fn, tp, flags))
    aps = [c.ap for c in classes if c.ap is not None]
    return MetricsReport(
        classes=classes,
        mAP=float(np.mean(aps)) if aps else None,
        macro_precision=float(np.mean([c.precision for c in classes])),
        macro_recall=float(np.mean([c.recall for c in classes])),
        macro_f1=float(np.mean([c.f1 for c in classes])),
        threshold=threshold,
        n=s.shape[0],
    )


def mean_average_precision(scores, labels) -> float:
    """Mean AP over classes that have positives; undefined if none do."""
    s, y = check_scored_set(scores, labels)
    aps = [average_precision(s[:, j], y[:, j]) for j in range(s.shape[1]) if y[:, j].any()]
    if not aps:
        raise UndefinedMetricError("no class has positive labels")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

METRICS: dict[str, Callable] = {
    "mAP": mean_average_precision,
    "macro_f1": lambda s, y: summarize(s, y).macro_f1,
}


def bootstrap_ci(scores, labels, metric: str | Callable = "mAP", n_resamples: int = 1000,
                 level: float = 0.95, seed: int = 0, max_retries: int = 100) -> tuple[float, float]:
    """Percentile interval of ``metric`` over N-out-of-N resamples.

    Resample ``i`` draws from ``default_rng([seed, i, attempt])`` so the result
    does not depend on evaluation order. A resample on which the metric is
    undefined is redrawn, at most ``max_retries`` times.
    """
    if n_resamples < 100:
        raise ConfigurationError(f"n_resamples must be >= 100, got {n_resamples}")
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    s, y = np.asarray(scores), np.asarray(labels)
    n = len(s)
    if n == 0:
        raise ContractError("cannot bootstrap an empty set")
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        for attempt in range(max_retries + 1):
            idx = np.random.default_rng([seed, i, attempt]).integers(0, n, size=n)
            try:
                with warnings.catch_warnings():
                    # a resample often drops every positive of a rare class
                    warnings.simplefilter("ignore", RuntimeWarning)
                    v = float(fn(s[idx], y[idx]))
            except UndefinedMetricError:
                continue
            if np.isfinite(v):
                values[i] = v
                break
        else:
            raise UndefinedMetricError(f"metric undefined on resample {i} after {max_retries} redraws")
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _exceeds(stats: np.ndarray, observed: float) -> np.ndarray:
    # tolerance absorbs summation-order rounding between equal statistics
    return np.abs(stats) >= abs(observed) - _TIE_RTOL * max(abs(observed), 1e-300)


def permutation_test(scores_a, scores_b, method: str = "auto", n_resamples: int = 10_000,
                     seed: int = 0) -> float:
    """Two-sided paired permutation test on the mean difference.

    ``exact`` enumerates every swap pattern, so the observed pattern is
    already counted once. ``monte_carlo`` draws random swap patterns and
    reports ``(1 + hits) / (1 + draws)``. ``auto`` is exact up to 20 pairs.
    """
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"paired inputs differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ContractError("permutation test needs at least one pair")
    d = a - b
    n = d.size
    observed = d.mean()
    if method == "auto":
        method = "exact" if n <= EXACT_PERMUTATION_LIMIT else "monte_carlo"
    if method == "exact":
        if n > EXACT_PERMUTATION_LIMIT:
            raise ConfigurationError(f"exact enumeration limited to {EXACT_PERMUTATION_LIMIT} pairs, got {n}")
        hits = 0
        total = 1 << n
        bits = np.arange(n)
        for start in range(0, total, 1 << 14):
            codes = np.arange(start, min(total, start + (1 << 14)))
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
            hits += int(_exceeds(signs @ d / n, observed).sum())
        return hits / total
    if method == "monte_carlo":
        rng = np.random.default_rng(seed)
        hits = 0
        done = 0
        while done < n_resamples:
            m = min(4096, n_resamples - done)
            signs = rng.integers(0, 2, size=(m, n)) * 2.0 - 1.0
            hits += int(_exceeds(signs @ d / n, observed).sum())
            done += m
        return (1 + hits) / (1 + n_resamples)
    raise ConfigurationError(f"method must be 'auto', 'exact' or 'monte_carlo', got {method!r}")


def metric_permutation_test(scores_a: Sequence[np.ndarray], scores_b: Sequence[np.ndarray],
                            labels: Sequence[np.ndarray], metric: str | Callable = "mAP",
                            n_resamples: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Paired permutation test of a set-level metric averaged over runs.

    Each run (e.g. one training seed) supplies per-note scores from two
    systems on the same labels. Under the null the two systems' outputs for
    a note are exchangeable, so each draw swaps a random subset of note rows
    in every run and recomputes the mean metric difference.

    Returns ``(observed difference, two-sided p)`` with ``+1`` smoothing.
    """
    fn = METRICS[metric] if isinstance(metric, str) else metric
    if not (len(scores_a) == len(scores_b) == len(labels)) or not scores_a:
        raise ContractError("need the same positive number of runs for both systems and labels")
    runs = []
    for sa, sb, y in zip(scores_a, scores_b, labels):
        sa, y = check_scored_set(sa, y)
        sb, _ = check_scored_set(sb, y)
        if sa.shape != sb.shape:
            raise ContractError(f"paired score sets differ in shape: {sa.shape} vs {sb.shape}")
        runs.append((sa, sb, y))

    def diff(swaps):
        total = 0.0
        for (sa, sb, y), sw in zip(runs, swaps):
            pa = np.where(sw[:, None], sb, sa)
            pb = np.where(sw[:, None], sa, sb)
            total += fn(pa, y) - fn(pb, y)
        return total / len(runs)

    observed = diff([np.zeros(len(y), dtype=bool) for _, _, y in runs])
    hits = 0
    for i in range(n_resamples):
        rng = np.random.default_rng([seed, i])
        swaps = [rng.integers(0, 2, size=len(y)).astype(bool) for _, _, y in runs]
        if abs(diff(swaps)) >= abs(observed) - _TIE_RTOL * max(abs(observed), 1e-300):
            hits += 1
    return float(observed), (1 + hits) / (1 + n_resamples)


# ---------------------------------------------------------------------------
# Field / disease correlation
# ---------------------------------------------------------------------------

@dataclass
class CorrelationEntry:
    field: str
    disease: str
    cov: float
    shift: int
    n: int
    flags: list[str] = field(default_factory=list)


def correlation(values, labels, present=None) -> tuple[float, int, list[str]]:
    """Largest cyclic-shift cross product between a standardized field and a label.

    Only samples where the field is present take part. Returns
    ``(cov, best shift, flags)``; ties go to the smallest shift.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ContractError(f"field values {x.shape} and labels {y.shape} differ in length")
    if present is not None:
        keep = np.asarray(present, dtype=bool).reshape(-1)
        x, y = x[keep], y[keep]
    n = x.size
    if n == 0:
        raise ContractError("correlation needs at least one sample with the field present")
    sd = x.std()
    if sd == 0:
        return 0.0, 0, ["zero_variance"]
    z = (x - x.mean()) / sd
    if n <= 4096:
        sums = np.array([np.dot(np.roll(z, -k), y) for k in range(n)])
    else:
        sums = np.fft.irfft(np.fft.rfft(z) * np.conj(np.fft.rfft(y)), n)
    k = int(np.argmax(sums))
    return float(sums[k] / n), k, []


def correlation_table(values, present, labels, field_names: Sequence[str],
                      disease_names: Sequence[str] = CLASS_NAMES) -> list[CorrelationEntry]:
    values = np.asarray(values, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    labels = np.asarray(labels)
    out = []
    for i, fname in enumerate(field_names):
        for j, dname in enumerate(disease_names):
            if not present[:, i].any():
                out.append(CorrelationEntry(fname, dname, 0.0, 0, 0, ["no_samples"]))
                continue
            cov, k, flags = correlation(values[:, i], labels[:, j], present[:, i])
            out.append(CorrelationEntry(fname, dname, cov, k, int(present[:, i].sum()), flags))
    return out


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------

def write_scores(path: str | Path, scores, labels) -> None:
    """One line per note: four scores then four 0/1 labels."""
    s, y = check_scored_set(scores, labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row_s, row_y in zip(s, y):
            fh.write(" ".join(f"{v:.17g}" for v in row_s) + " " + " ".join(str(int(v)) for v in row_y) + "\n")


def read_scores(path: str | Path, n_classes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 * n_classes:
                raise ContractError(f"{path}:{lineno}: expected {2 * n_classes} fields, got {len(parts)}")
            try:
                scores.append([float(v) for v in parts[:n_classes]])
                labels.append([int(v) for v in parts[n_classes:]])
            except ValueError as exc:
                raise ContractError(f"{path}:{lineno}: {exc}") from exc
    if not scores:
        raise ContractError(f"{path}: no score records")
    return check_scored_set(np.array(scores), np.array(labels))
