"""Open-set evaluation: AUROC, FPR@95TPR, Acc_D / Acc_U / HM, feature separation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import EmptyClass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyClass("both score lists must be non-empty")
    return a, b


def auroc(scores_desired, scores_undesired) -> float:
    """P(desired score > undesired score), ties credited 1/2 (Mann-Whitney U)."""
    d, u = _pair(scores_desired, scores_undesired)
    ranks = rankdata(np.concatenate([d, u]))
    u_stat = ranks[: d.size].sum() - d.size * (d.size + 1) / 2.0
    return float(u_stat / (d.size * u.size))


def fpr_at_95tpr(scores_desired, scores_undesired) -> float:
    """Fraction of undesired scores at or above the 95%-recall desired threshold.

    The threshold is the largest value keeping at least 95% of desired
    scores at or above it, i.e. the ceil(0.95 n)-th largest desired score.
    """
    d, u = _pair(scores_desired, scores_undesired)
    need = (95 * d.size + 99) // 100
    theta = np.sort(d)[::-1][need - 1]
    return float(np.count_nonzero(u >= theta) / u.size)


@dataclass(frozen=True)
class MetricSummary:
    acc_d: float | None
    acc_u: float | None
    hm: float | None
    n_desired: int
    n_undesired: int
    n_correct_d: int
    n_rejected_u: int
    auroc: float | None = None
    fpr95: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def harmonic_mean(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    if a <= 0 or b <= 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def accuracies(records: Sequence) -> MetricSummary:
    """Acc_D counts desired samples accepted *and* given the right class; Acc_U counts rejected undesired."""
    if not records:
        raise EmptyClass("no records")
    n_d = n_u = correct = rejected = 0
    for r in records:
        accepted = r.decision == "desired"
        if r.is_desired:
            n_d += 1
            correct += accepted and r.prediction == r.gt_class
        else:
            n_u += 1
            rejected += not accepted
    acc_d = correct / n_d if n_d else None
    acc_u = rejected / n_u if n_u else None
    return MetricSummary(acc_d, acc_u, harmonic_mean(acc_d, acc_u), n_d, n_u, correct, rejected)


def summarize(records: Sequence) -> MetricSummary:
    """Accuracies plus score-ranking metrics when both sides are present."""
    acc = accuracies(records)
    sd = [r.s_t for r in records if r.is_desired]
    su = [r.s_t for r in records if not r.is_desired]
    if sd and su:
        return MetricSummary(**{**acc.__dict__, "auroc": auroc(sd, su), "fpr95": fpr_at_95tpr(sd, su)})
    return acc


def online_accuracy(records: Sequence) -> np.ndarray:
    """Cumulative (acc_d, acc_u, hm) after each step; NaN while a side is unseen."""
    out = np.full((len(records), 3), np.nan)
    n_d = n_u = correct = rejected = 0
    for t, r in enumerate(records):
        accepted = r.decision == "desired"
        if r.is_desired:
            n_d += 1
            correct += accepted and r.prediction == r.gt_class
        else:
            n_u += 1
            rejected += not accepted
        a = correct / n_d if n_d else None
        b = rejected / n_u if n_u else None
        h = harmonic_mean(a, b)
        out[t] = [np.nan if v is None else v for v in (a, b, h)]
    return out


def score_histograms(records: Sequence, window: int = 500, bins: int = 100) -> list[tuple[int, float, int, int]]:
    """(window_start, bin_left, count_desired, count_undesired) over [-1, 1]."""
    if window < 1:
        raise ValueError("window must be >= 1")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    rows = []
    for start in range(0, len(records), window):
        chunk = records[start : start + window]
        sd = np.array([r.s_t for r in chunk if r.is_desired])
        su = np.array([r.s_t for r in chunk if not r.is_desired])
        hd, _ = np.histogram(np.clip(sd, -1.0, 1.0), bins=edges)
        hu, _ = np.histogram(np.clip(su, -1.0, 1.0), bins=edges)
        rows.extend((start, float(edges[i]), int(hd[i]), int(hu[i])) for i in range(bins))
    return rows


# --- separation diagnostics -------------------------------------------------


def _features(xs: Iterable) -> np.ndarray:
    arr = np.asarray(list(xs) if not isinstance(xs, np.ndarray) else xs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyClass("feature set must be a non-empty 2D array")
    return arr


def pairwise_distances(F_d, F_u, chunk: int = 1024) -> tuple[float, float]:
    """Mean Euclidean distance and mean cosine distance over all (desired, undesired) pairs."""
    A, B = _features(F_d), _features(F_u)
    b2 = np.einsum("ij,ij->i", B, B)
    total = 0.0
    for i in range(0, A.shape[0], chunk):
        a = A[i : i + chunk]
        sq = np.einsum("ij,ij->i", a, a)[:, None] + b2[None, :] - 2.0 * a @ B.T
        total += float(np.sqrt(np.maximum(sq, 0.0)).sum())
    euclid = total / (A.shape[0] * B.shape[0])
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    mean_cos = float(An.sum(axis=0) @ Bn.sum(axis=0)) / (A.shape[0] * B.shape[0])
    return euclid, 1.0 - mean_cos


def assignment_cost(cost: np.ndarray) -> float:
    """Mean cost of the optimal one-to-one assignment of a square cost matrix."""
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def wasserstein_small(F_d, F_u, n_sub: int = 256, seed: int = 0) -> float:
    """Exact balanced optimal transport (Euclidean cost) between seeded equal-size subsamples."""
    A, B = _features(F_d), _features(F_u)
    if not 1 <= n_sub <= 256:
        raise ValueError("n_sub must lie in [1, 256]")
    n = min(n_sub, A.shape[0], B.shape[0])
    rng = np.random.default_rng(seed)
    A = A[np.sort(rng.choice(A.shape[0], n, replace=False))]
    B = B[np.sort(rng.choice(B.shape[0], n, replace=False))]
    diff = A[:, None, :] - B[None, :, :]
    return assignment_cost(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))
