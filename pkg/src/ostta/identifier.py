"""Desired-vs-undesired identification from a rolling bank of scores.

Three identifiers share one output shape (a decision plus a reliability
band): the 1D LDA split (default), a two-component Gaussian mixture fitted
by EM (DAF), and fixed MSP-style thresholds.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import Degenerate, InvalidThresholds, NotNormalized

SCORE_BANK_SIZE = 512
NORM_TOL = 1e-6
# relative slack under which two split objectives count as tied
OBJECTIVE_TIE_RTOL = 1e-12
VARIANCE_FLOOR = 1e-6


class Decision(str, enum.Enum):
    DESIRED = "desired"
    UNDESIRED = "undesired"


class Reliability(str, enum.Enum):
    RELIABLE_DESIRED = "reliable_desired"
    UNRELIABLE_DESIRED = "unreliable_desired"
    UNRELIABLE_UNDESIRED = "unreliable_undesired"
    RELIABLE_UNDESIRED = "reliable_undesired"

    @property
    def is_reliable(self) -> bool:
        return self in (Reliability.RELIABLE_DESIRED, Reliability.RELIABLE_UNDESIRED)


def score(f: np.ndarray, prototypes: np.ndarray) -> tuple[float, int]:
    """Max cosine similarity of ``f`` against the prototype rows, and its argmax.

    ``f`` must already be unit norm (within 1e-6); ties go to the lowest index.
    """
    n = float(np.linalg.norm(f))
    if abs(n - 1.0) > NORM_TOL:
        raise NotNormalized(f"embedding norm {n:.9g} is not 1")
    if n != 1.0:
        f = f / n
    sims = prototypes @ f
    k = int(np.argmax(sims))
    return float(sims[k]), k


class ScoreBank:
    """Fixed-capacity ring buffer of recent scores; the oldest is evicted first."""

    def __init__(self, capacity: int = SCORE_BANK_SIZE, scores: Iterable[float] = ()):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf: deque[float] = deque(maxlen=capacity)
        for s in scores:
            self.push(s)

    def push(self, s: float) -> None:
        s = float(s)
        if not math.isfinite(s):
            raise ValueError(f"non-finite score {s}")
        self._buf.append(s)

    def __len__(self) -> int:
        return len(self._buf)

    def values(self) -> np.ndarray:
        return np.fromiter(self._buf, dtype=np.float64, count=len(self._buf))


@dataclass(frozen=True)
class LdaStats:
    tau_star: float
    mu_d: float
    mu_u: float
    n_d: int
    n_u: int
    objective: float = 0.0


def _split_objectives(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Objective of every split of the sorted array ``x`` between distinct neighbours.

    Returns (split indices i, objectives) where the lower part is x[:i].
    """
    n = x.size
    c = x - x.mean()
    cs = np.cumsum(c)
    cs2 = np.cumsum(c * c)
    idx = np.flatnonzero(np.diff(x) > 0) + 1
    n_u = idx.astype(np.float64)
    n_d = n - n_u
    sum_u, sq_u = cs[idx - 1], cs2[idx - 1]
    sum_d, sq_d = cs[-1] - sum_u, cs2[-1] - sq_u
    var_u = np.maximum(sq_u / n_u - (sum_u / n_u) ** 2, 0.0)
    var_d = np.maximum(sq_d / n_d - (sum_d / n_d) ** 2, 0.0)
    return idx, var_u + var_d


def lda_threshold(bank: ScoreBank | Iterable[float]) -> LdaStats:
    """Threshold minimising the summed per-side mean squared deviation of the scores.

    Candidates are midpoints between consecutive distinct sorted scores; the
    smaller threshold wins a tie.  Scores at or above the threshold form the
    desired side.  A bank with fewer than two distinct values takes the
    degenerate path: the threshold sits on the (max) value and everything is
    desired.
    """
    x = bank.values() if isinstance(bank, ScoreBank) else np.asarray(list(bank), dtype=np.float64)
    x = np.sort(x)
    n = x.size
    if n == 0:
        raise Degenerate("empty score bank")
    if x[0] == x[-1]:
        v = float(x[-1])
        return LdaStats(v, v, v, n, 0, 0.0)
    idx, obj = _split_objectives(x)
    best = float(obj.min())
    # earliest candidate within tolerance of the minimum == smallest tau
    j = int(np.flatnonzero(obj <= best + OBJECTIVE_TIE_RTOL * max(abs(best), 1e-300))[0])
    i = int(idx[j])
    lo, hi = x[:i], x[i:]
    tau = 0.5 * (float(x[i - 1]) + float(x[i]))
    return LdaStats(tau, float(hi.mean()), float(lo.mean()), hi.size, lo.size, float(obj[j]))


def classify(s: float, stats: LdaStats) -> Decision:
    return Decision.DESIRED if s >= stats.tau_star else Decision.UNDESIRED


def _bands(s: float, lo: float, mid: float, hi: float) -> Reliability:
    if s > hi:
        return Reliability.RELIABLE_DESIRED
    if s >= mid:
        return Reliability.UNRELIABLE_DESIRED
    if s >= lo:
        return Reliability.UNRELIABLE_UNDESIRED
    return Reliability.RELIABLE_UNDESIRED


def reliability(s: float, stats: LdaStats) -> Reliability:
    return _bands(s, stats.mu_u, stats.tau_star, stats.mu_d)


def msp_identify(s: float, tau_u: float, tau_t: float, tau_d: float) -> tuple[Decision, Reliability]:
    if not tau_u <= tau_t <= tau_d:
        raise InvalidThresholds(f"need tau_u <= tau_t <= tau_d, got {tau_u}, {tau_t}, {tau_d}")
    decision = Decision.DESIRED if s >= tau_t else Decision.UNDESIRED
    return decision, _bands(s, tau_u, tau_t, tau_d)


# --- DAF: two-component 1D Gaussian mixture ---------------------------------


@dataclass(frozen=True)
class GmmStats:
    mu_lo: float
    mu_hi: float
    var_lo: float
    var_hi: float
    w_lo: float
    w_hi: float
    log_likelihood: float = float("nan")
    n_iter: int = 0


def _log_normal(x: np.ndarray, mu: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def daf_fit(bank: ScoreBank | Iterable[float], max_iters: int = 100, tol: float = 1e-8) -> GmmStats:
    """EM for a 2-component Gaussian mixture over the bank, started from the LDA split."""
    x = bank.values() if isinstance(bank, ScoreBank) else np.asarray(list(bank), dtype=np.float64)
    if x.size < 4:
        raise Degenerate("DAF needs at least 4 scores")
    if np.all(x == x[0]):
        raise Degenerate("all scores equal")
    init = lda_threshold(x)
    lo, hi = x[x < init.tau_star], x[x >= init.tau_star]
    mu = np.array([lo.mean(), hi.mean()])
    var = np.maximum([lo.var(), hi.var()], VARIANCE_FLOOR)
    w = np.array([lo.size, hi.size], dtype=np.float64) / x.size

    prev = -np.inf
    ll = -np.inf
    it = 0
    for it in range(1, max_iters + 1):
        logp = np.stack([np.log(w[k]) + _log_normal(x, mu[k], var[k]) for k in range(2)])
        norm = np.logaddexp(logp[0], logp[1])
        ll = float(norm.sum())
        resp = np.exp(logp - norm)
        nk = resp.sum(axis=1)
        if np.any(nk <= 0):
            break
        w = nk / x.size
        mu = (resp @ x) / nk
        var = np.maximum((resp * (x - mu[:, None]) ** 2).sum(axis=1) / nk, VARIANCE_FLOOR)
        if abs(ll - prev) < tol:
            break
        prev = ll
    order = np.argsort(mu, kind="stable")
    mu, var, w = mu[order], var[order], w[order]
    return GmmStats(float(mu[0]), float(mu[1]), float(var[0]), float(var[1]), float(w[0]), float(w[1]), ll, it)


def daf_posterior(s: float, g: GmmStats) -> float:
    """Posterior probability that ``s`` came from the high-mean component."""
    a = math.log(g.w_lo) + float(_log_normal(np.float64(s), g.mu_lo, g.var_lo))
    b = math.log(g.w_hi) + float(_log_normal(np.float64(s), g.mu_hi, g.var_hi))
    return 1.0 / (1.0 + math.exp(a - b)) if a - b < 700 else 0.0


def daf_identify(s: float, g: GmmStats) -> tuple[Decision, Reliability, float]:
    pi = daf_posterior(s, g)
    decision = Decision.DESIRED if pi >= 0.5 else Decision.UNDESIRED
    if s > g.mu_hi and decision is Decision.DESIRED:
        rel = Reliability.RELIABLE_DESIRED
    elif s < g.mu_lo and decision is Decision.UNDESIRED:
        rel = Reliability.RELIABLE_UNDESIRED
    elif decision is Decision.DESIRED:
        rel = Reliability.UNRELIABLE_DESIRED
    else:
        rel = Reliability.UNRELIABLE_UNDESIRED
    return decision, rel, pi
