"""ReDUCe loss terms and their gradients with respect to the adapted feature.

Similarities inside the losses are plain dot products on unit vectors, so
each gradient here is taken with respect to ``f`` as a free vector.  The
adapter's backward pass supplies the L2-normalisation Jacobian.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .banks import NeighborSet
from .errors import EmptyBank, EmptyNegatives
from .identifier import Reliability


# small max-shifted helpers; the scipy.special versions carry heavy per-call overhead


def logsumexp(a: np.ndarray, axis=None):
    if axis is None:
        m = float(a.max())
        return m + math.log(float(np.exp(a - m).sum()))
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m, axis=axis)


def log_softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max()
    return z - math.log(float(np.exp(z).sum()))


def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    ce_temperature: float = 0.01
    k: int = 5
    # add each positive to its own partition function (InfoNCE form)
    positive_in_denominator: bool = False

    def __post_init__(self):
        if self.temperature <= 0 or self.ce_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.k < 0:
            raise ValueError("k must be >= 0")


class ActiveCase(str, enum.Enum):
    DESIRED = "desired_case"
    UNDESIRED = "undesired_case"
    NO_UPDATE = "no_update"


@dataclass(frozen=True)
class LossBreakdown:
    total: float = 0.0
    active_case: ActiveCase = ActiveCase.NO_UPDATE
    l_re: float | None = None
    l_d: float | None = None
    l_u: float | None = None
    k_plus: int = 0


def _ce(f: np.ndarray, prototypes: np.ndarray, y: int, temperature: float) -> tuple[float, np.ndarray]:
    logits = prototypes @ f / temperature
    z = logits - logits.max()
    e = np.exp(z)
    total = float(e.sum())
    value = math.log(total) - float(z[y])
    p = e / total
    p[y] -= 1.0
    return value, prototypes.T @ p / temperature


def ce_pseudo(
    f: np.ndarray,
    f_aug: np.ndarray,
    prototypes: np.ndarray,
    y_hat: int,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> tuple[float, np.ndarray, np.ndarray]:
    """Pseudo-label cross entropy on both views; each view's gradient is its own."""
    v1, g1 = _ce(f, prototypes, y_hat, cfg.ce_temperature)
    v2, g2 = _ce(f_aug, prototypes, y_hat, cfg.ce_temperature)
    return v1 + v2, g1, g2


def _contrastive(
    f: np.ndarray, pos: np.ndarray, neg: np.ndarray, tau: float, include_pos: bool
) -> tuple[float, np.ndarray]:
    """-(1/P) sum_p log(exp(f.z_p/tau) / sum_n exp(f.z_n/tau)) and its gradient in f."""
    a_pos = pos @ f / tau
    a_neg = neg @ f / tau
    if include_pos:
        # one partition per positive: its own logit plus all negatives
        logits = np.concatenate([a_pos[:, None], np.broadcast_to(a_neg, (a_pos.size, a_neg.size))], axis=1)
        lse = logsumexp(logits, axis=1)
        value = -float(np.mean(a_pos - lse))
        p = softmax(logits, axis=1)
        mix = p[:, :1] * pos + p[:, 1:] @ neg
        grad = -(pos - mix).mean(axis=0) / tau
        return value, grad
    lse = logsumexp(a_neg)
    value = lse - float(a_pos.sum()) / a_pos.size
    p = softmax(a_neg)
    grad = (p @ neg - pos.sum(axis=0) / pos.shape[0]) / tau
    return value, grad


def _positives(q_d: NeighborSet, y_hat: int) -> np.ndarray:
    rows = [n.feature for n in q_d if n.label == y_hat]
    return np.stack(rows) if rows else np.empty((0, 0))


def l_desired(
    f: np.ndarray, q_d: NeighborSet, q_u: NeighborSet, y_hat: int, cfg: ContrastiveConfig = ContrastiveConfig()
) -> tuple[float | None, int]:
    """Contrast a reliable desired feature against label-matched Q_d vs Q_u.

    Returns ``(None, 0)`` when no neighbour in ``q_d`` carries ``y_hat``.
    """
    if len(q_u) == 0:
        raise EmptyNegatives("Q_u is empty")
    pos = _positives(q_d, y_hat)
    if pos.shape[0] == 0:
        return None, 0
    value, _ = _contrastive(f, pos, q_u.features(), cfg.temperature, cfg.positive_in_denominator)
    return value, pos.shape[0]


def grad_l_desired(
    f: np.ndarray, q_d: NeighborSet, q_u: NeighborSet, y_hat: int, cfg: ContrastiveConfig = ContrastiveConfig()
) -> np.ndarray:
    if len(q_u) == 0:
        raise EmptyNegatives("Q_u is empty")
    pos = _positives(q_d, y_hat)
    if pos.shape[0] == 0:
        raise EmptyNegatives("no label-matched positives (K+ = 0)")
    _, grad = _contrastive(f, pos, q_u.features(), cfg.temperature, cfg.positive_in_denominator)
    return grad


def l_undesired(
    f: np.ndarray, q_u: NeighborSet, q_d: NeighborSet, cfg: ContrastiveConfig = ContrastiveConfig()
) -> float:
    """Contrast a reliable undesired feature: Q_u positives against Q_d negatives."""
    if len(q_u) == 0 or len(q_d) == 0:
        raise EmptyBank("both Q_u and Q_d must be non-empty")
    value, _ = _contrastive(f, q_u.features(), q_d.features(), cfg.temperature, cfg.positive_in_denominator)
    return value


def grad_l_undesired(
    f: np.ndarray, q_u: NeighborSet, q_d: NeighborSet, cfg: ContrastiveConfig = ContrastiveConfig()
) -> np.ndarray:
    if len(q_u) == 0 or len(q_d) == 0:
        raise EmptyBank("both Q_u and Q_d must be non-empty")
    _, grad = _contrastive(f, q_u.features(), q_d.features(), cfg.temperature, cfg.positive_in_denominator)
    return grad


def negative_weights(f: np.ndarray, negatives: NeighborSet, cfg: ContrastiveConfig = ContrastiveConfig()) -> np.ndarray:
    """Softmax weight p(z-) of each negative; harder negatives repel more."""
    return softmax(negatives.features() @ f / cfg.temperature)


def reduce_total(
    rel: Reliability,
    l_re: float | None = None,
    l_d: float | None = None,
    l_u: float | None = None,
    k_plus: int = 0,
) -> LossBreakdown:
    """Combine the available terms for the sample's reliability band.

    Only the two reliable bands produce an update; absent terms (``None``)
    were skipped upstream for lack of neighbours and contribute nothing.
    """
    if rel is Reliability.RELIABLE_DESIRED:
        terms = [v for v in (l_re, l_d) if v is not None]
        if not terms:
            return LossBreakdown(k_plus=k_plus)
        return LossBreakdown(float(sum(terms)), ActiveCase.DESIRED, l_re, l_d, None, k_plus)
    if rel is Reliability.RELIABLE_UNDESIRED and l_u is not None:
        return LossBreakdown(float(l_u), ActiveCase.UNDESIRED, None, None, l_u, 0)
    return LossBreakdown()
