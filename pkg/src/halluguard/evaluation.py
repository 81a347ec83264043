"""Detection metrics, score-distribution summaries and annotation statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import HALLUCINATIONS, PathologyLabel


class MetricError(ValueError):
    pass


@dataclass
class LabeledScores:
    risk: np.ndarray
    positive: np.ndarray  # bool: hallucination indicator
    labels: list = field(default_factory=list)  # PathologyLabel per item
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.risk = np.asarray(self.risk, dtype=np.float64)
        self.positive = np.asarray(self.positive, dtype=bool)
        if self.risk.shape != self.positive.shape:
            raise MetricError("risk and positive arrays differ in length")
        if self.labels and len(self.labels) != self.risk.size:
            raise MetricError("labels length differs from risk length")
        if not self.ids:
            self.ids = [f"{i:06d}" for i in range(self.risk.size)]

    @classmethod
    def from_records(cls, records, detector: str, positive=None):
        """``positive``: label predicate; defaults to any hallucination type."""
        positive = positive or (lambda lab: lab in HALLUCINATIONS)
        return cls(
            [r.scores[detector] for r in records],
            [positive(r.label) for r in records],
            [r.label for r in records],
            [r.id for r in records],
        )

    def require_both_classes(self, what: str) -> None:
        n1 = int(self.positive.sum())
        if n1 == 0 or n1 == self.positive.size:
            raise MetricError(f"{what} needs both positive and negative items")


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: LabeledScores) -> float:
    """P(risk_pos > risk_neg) + 0.5 * P(tie), via the rank-sum identity."""
    scores.require_both_classes("roc_auc")
    pos = scores.positive
    n1 = int(pos.sum())
    n0 = pos.size - n1
    r = average_ranks(scores.risk)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def precision_at_recall(scores: LabeledScores, target_recall: float = 0.9) -> float:
    """Precision at the highest risk cutoff whose recall reaches the target."""
    scores.require_both_classes("precision_at_recall")
    risk, pos = scores.risk, scores.positive
    n1 = int(pos.sum())
    order = np.argsort(-risk, kind="mergesort")
    sr, sp = risk[order], pos[order]
    tp = np.cumsum(sp)
    # last index of each block of equal risk = a valid cutoff
    ends = np.flatnonzero(np.r_[sr[1:] != sr[:-1], True])
    for e in ends:
        if tp[e] / n1 >= target_recall:
            return float(tp[e] / (e + 1))
    return float(n1 / risk.size)


def worst_k(scores: LabeledScores, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * N) highest-risk items, ties by id."""
    if not 0.0 < fraction <= 1.0:
        raise MetricError("fraction must be in (0, 1]")
    k = math.ceil(fraction * scores.risk.size - 1e-12)
    order = sorted(range(scores.risk.size), key=lambda i: (-scores.risk[i], scores.ids[i]))
    return np.array(order[:k], dtype=np.int64)


def recall_by_type(scores: LabeledScores, fraction: float) -> dict:
    """label -> share of that label's items inside the worst-k set (absent
    labels are omitted)."""
    flagged = set(worst_k(scores, fraction).tolist())
    out = {}
    for lab in PathologyLabel:
        members = [i for i, l in enumerate(scores.labels) if l is lab]
        if members:
            out[lab] = sum(i in flagged for i in members) / len(members)
    return out


def type_distribution(scores: LabeledScores, fraction: float) -> dict:
    idx = worst_k(scores, fraction)
    if idx.size == 0:
        raise MetricError("flagged set is empty")
    out = {}
    for lab in PathologyLabel:
        n = sum(scores.labels[i] is lab for i in idx)
        if n:
            out[lab] = n / idx.size
    return out


@dataclass
class Histogram:
    edges: np.ndarray
    density: dict  # label -> array of densities (integrates to 1)
    counts: dict


def score_histogram(values_by_label: dict, bins: int = 40) -> Histogram:
    """Per-label normalized histograms over common bin edges."""
    if bins < 2:
        raise MetricError("need at least 2 bins")
    present = {k: np.asarray(v, dtype=np.float64) for k, v in values_by_label.items() if len(v)}
    if not present:
        raise MetricError("no values to histogram")
    allv = np.concatenate(list(present.values()))
    lo, hi = float(allv.min()), float(allv.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    width = np.diff(edges)
    density, counts = {}, {}
    for k, v in present.items():
        c, _ = np.histogram(v, bins=edges)
        counts[k] = c
        density[k] = c / (v.size * width)
    return Histogram(edges, density, counts)


# --------------------------------------------------------------------------
# annotation statistics

class KappaUndefined(MetricError):
    pass


def fleiss_kappa(counts, raters_per_item: int) -> float:
    """Fleiss' kappa for an items x categories matrix of rater counts."""
    m = np.asarray(counts, dtype=np.float64)
    n = raters_per_item
    if m.ndim != 2 or m.shape[0] == 0:
        raise MetricError("counts must be a non-empty items x categories matrix")
    if not np.all(m.sum(axis=1) == n):
        raise MetricError(f"every row must sum to raters_per_item={n}")
    if n < 2:
        raise MetricError("need at least two raters")
    p_j = m.sum(axis=0) / (m.shape[0] * n)
    P_i = ((m * m).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = (p_j * p_j).sum()
    if P_e >= 1.0:
        raise KappaUndefined("kappa undefined: all ratings fall in one category")
    return float((P_bar - P_e) / (1.0 - P_e))


ANNOTATION_LABELS = ("Correct", "Error", "Hallucination")


def majority_vote(labels) -> str:
    """Majority of three annotator labels; a three-way split counts as a
    hallucination."""
    labels = list(labels)
    if len(labels) != 3 or any(l not in ANNOTATION_LABELS for l in labels):
        raise MetricError("majority_vote takes exactly 3 labels from Correct/Error/Hallucination")
    for l in ANNOTATION_LABELS:
        if labels.count(l) >= 2:
            return l
    return "Hallucination"


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired Student t-test on a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise MetricError("paired_t_test needs two equal-length lists of >= 2 values")
    d = a - b
    n = d.size
    mean = d.mean()
    if np.all(d == 0):
        return TTestResult(0.0, 1.0, n - 1)
    sd = d.std(ddof=1)
    if sd == 0:
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1)
    t = float(mean / (sd / math.sqrt(n)))
    return TTestResult(t, student_t_two_sided_p(t, n - 1), n - 1)


# --------------------------------------------------------------------------
# report tables

def _fd_vs_clean(lab):
    return lab is PathologyLabel.FullyDetached


@dataclass
class EvalReport:
    detection: list  # rows: detector, auc_all, pr90_all, auc_fd, pr90_fd
    recall_by_type: dict  # detector -> {label: recall}
    type_distribution: dict  # detector -> {label: share}
    histograms: dict  # detector -> Histogram
    recall_fraction: float = 0.2
    distribution_fraction: float = 0.1


def evaluate_records(records, detectors, recall_fraction=0.2, distribution_fraction=0.1,
                     bins=40) -> EvalReport:
    """All detection tables for the scored ``records``.

    Fully-detached metrics compare FullyDetached items against the
    non-hallucinated ones (other hallucination types are left out).
    """
    rows, rbt, td, hist = [], {}, {}, {}
    clean = [r for r in records if r.label not in HALLUCINATIONS or r.label is PathologyLabel.FullyDetached]
    for det in detectors:
        allv = LabeledScores.from_records(records, det)
        fd = LabeledScores.from_records(clean, det, _fd_vs_clean)
        rows.append({
            "detector": det,
            "auc_all": roc_auc(allv),
            "pr90_all": precision_at_recall(allv, 0.9),
            "auc_fd": roc_auc(fd),
            "pr90_fd": precision_at_recall(fd, 0.9),
        })
        rbt[det] = recall_by_type(allv, recall_fraction)
        td[det] = type_distribution(allv, distribution_fraction)
        by_label: dict = {}
        for r in records:
            by_label.setdefault(r.label, []).append(r.scores[det])
        hist[det] = score_histogram(by_label, bins)
    return EvalReport(rows, rbt, td, hist, recall_fraction, distribution_fraction)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_report_csv(report: EvalReport, out_dir) -> list:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "detection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "auc_all", "pr90_all", "auc_fd", "pr90_fd"])
        for row in report.detection:
            w.writerow([row["detector"], *(_fmt(row[k]) for k in ("auc_all", "pr90_all", "auc_fd", "pr90_fd"))])
    written.append("detection.csv")
    for name, table, frac in (
        ("recall_by_type.csv", report.recall_by_type, report.recall_fraction),
        ("type_distribution.csv", report.type_distribution, report.distribution_fraction),
    ):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["detector", "fraction", "label", "value"])
            for det, vals in table.items():
                for lab in PathologyLabel:
                    if lab in vals:
                        w.writerow([det, _fmt(frac), lab.value, _fmt(vals[lab])])
        written.append(name)
    with open(out / "histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "label", "bin_lo", "bin_hi", "count", "density"])
        for det, h in report.histograms.items():
            for lab in PathologyLabel:
                if lab not in h.density:
                    continue
                for i in range(h.edges.size - 1):
                    w.writerow([det, lab.value, _fmt(h.edges[i]), _fmt(h.edges[i + 1]),
                                int(h.counts[lab][i]), _fmt(h.density[lab][i])])
    written.append("histograms.csv")
    return written
