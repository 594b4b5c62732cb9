"""Latency and boundary-quality metrics, plus a plain corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class LatencyReport:
    CW: float
    AP: float
    AL: float
    DAL: float


@dataclass
class SegmentationReport:
    P: float
    R: float
    F1: float
    OS: float | None
    r_value: float | None
    n_hyp: int
    n_ref: int
    matches: int
    tolerance_ms: float
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    k: str
    AL: float | None
    AP: float | None
    CW: float | None
    DAL: float | None
    BLEU: float
    P: float | None = None
    R: float | None = None
    F1: float | None = None
    OS: float | None = None
    r_value: float | None = None
    tolerance_ms: float | None = None
    sentences: int = 0

    CSV_FIELDS = ("k", "AL", "AP", "CW", "DAL", "BLEU", "P", "R", "F1", "OS", "R-value")

    def csv_row(self) -> list:
        values = [self.k, self.AL, self.AP, self.CW, self.DAL, self.BLEU, self.P, self.R, self.F1, self.OS,
                  self.r_value]
        return ["" if v is None else (f"{v:.4f}" if isinstance(v, float) else v) for v in values]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- latency


def latency_metrics(tau_ms, T_ms: float) -> LatencyReport | None:
    """Latency of one sentence from per-token emission times; None without emissions."""
    tau = [float(t) for t in tau_ms]
    if not tau:
        return None
    if T_ms <= 0:
        raise ValueError("source duration must be positive")
    n = len(tau)
    rate = T_ms / n  # ideal time per target token

    prev, waited, waits = 0.0, 0.0, 0
    for t in tau:
        if t - prev > 0:
            waits += 1
        waited += t - prev
        prev = t
    cw = waited / waits if waits else 0.0

    ap = sum(t / T_ms for t in tau) / n

    cutoff = next((i + 1 for i, t in enumerate(tau) if t >= T_ms), n)
    al = sum(tau[i] - i * rate for i in range(cutoff)) / cutoff

    lagged = [tau[0]]
    for t in tau[1:]:
        lagged.append(max(t, lagged[-1] + rate))
    dal = sum(lagged[i] - i * rate for i in range(n)) / n
    return LatencyReport(CW=cw, AP=ap, AL=al, DAL=dal)


def corpus_latency(reports) -> LatencyReport | None:
    """Mean of per-sentence reports, skipping sentences without emissions."""
    present = [r for r in reports if r is not None]
    if not present:
        return None
    return LatencyReport(*(float(np.mean([getattr(r, f) for r in present])) for f in ("CW", "AP", "AL", "DAL")))


# ---------------------------------------------------------------- boundaries


def _match_count(hyp_ms, ref_ms, tol_ms: float) -> int:
    ref = list(ref_ms)
    used = [False] * len(ref)
    matches = 0
    for h in hyp_ms:
        best, best_d = None, None
        for j, r in enumerate(ref):
            if used[j]:
                continue
            d = abs(h - r)
            if d <= tol_ms and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            used[best] = True
            matches += 1
    return matches


def _prf(matches: int, n_hyp: int, n_ref: int) -> tuple[float, float, float]:
    P = 100.0 * matches / n_hyp if n_hyp else 0.0
    R = 100.0 * matches / n_ref if n_ref else 0.0
    F1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return P, R, F1


def boundary_prf(hyp_ms, ref_ms, tol_ms: float) -> tuple[float, float, float]:
    """Greedy one-to-one matching in time order; scores in percent.

    Each hypothesis boundary takes the nearest still-unmatched reference within
    ``tol_ms`` (ties go to the earlier reference).  An empty hypothesis scores
    (0, 0, 0); see :func:`segmentation_report` for the flag.
    """
    if tol_ms < 0:
        raise ValueError("tolerance must be non-negative")
    return _prf(_match_count(hyp_ms, ref_ms, tol_ms), len(hyp_ms), len(ref_ms))


def over_segmentation(P: float, R: float) -> float | None:
    """100 * (R / P - 1); None when P is zero."""
    if P <= 0:
        return None
    return 100.0 * (R / P - 1.0)


def r_value(R: float, OS: float) -> float:
    """R-value in percent from fractional recall and over-segmentation."""
    r1 = math.sqrt((1.0 - R) ** 2 + OS**2)
    r2 = (-OS + R - 1.0) / math.sqrt(2.0)
    return 100.0 * (1.0 - (abs(r1) + abs(r2)) / 2.0)


def segmentation_report(pairs, tol_ms: float) -> SegmentationReport:
    """Micro-averaged boundary scores over ``(hyp_ms, ref_ms)`` pairs."""
    matches = n_hyp = n_ref = 0
    for hyp, ref in pairs:
        matches += _match_count(hyp, ref, tol_ms)
        n_hyp += len(hyp)
        n_ref += len(ref)
    P, R, F1 = _prf(matches, n_hyp, n_ref)
    flags = []
    if n_hyp == 0:
        flags.append("empty hypothesis: precision undefined, reported as 0")
    OS = over_segmentation(P, R)
    rv = None
    if OS is None:
        flags.append("precision is zero: OS and R-value undefined")
    else:
        rv = r_value(R / 100.0, OS / 100.0)
    return SegmentationReport(P, R, F1, OS, rv, n_hyp, n_ref, matches, tol_ms, flags)


# ---------------------------------------------------------------- quality


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU (0-100): clipped n-gram precisions, uniform weights, brevity penalty.

    No smoothing: any order without a match gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matched[n - 1] += sum((h & r).values())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)
