"""Central finite-difference checks for every analytic gradient in the package.

Each trial draws a random configuration (F in {8, 64}, K in {1, 5}) and
compares analytic gradients with central differences, both with respect to
the feature ``f`` (dot-product similarity) and with respect to the adapter
parameters (gamma, beta) through the full forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapter import LayerNormAdapter
from .banks import Neighbor, NeighborSet
from .engine import entropy, kplus1_ce
from .losses import (
    ContrastiveConfig,
    ce_pseudo,
    grad_l_desired,
    grad_l_undesired,
    l_desired,
    l_undesired,
)

STEP = 1e-5
TOLERANCE = 1e-5
# gradients smaller than this carry no usable relative-error signal; redraw
MIN_GRAD_NORM = 1e-2
COMPONENTS = (
    "l_d_f",
    "l_u_f",
    "ce_f",
    "l_re_adapter",
    "l_d_adapter",
    "l_u_adapter",
    "reduce_total_adapter",
    "unient_adapter",
    "kplus1pc_adapter",
)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-300)
    return float(np.linalg.norm(analytic - numeric)) / denom


@dataclass
class GradcheckReport:
    trials: int
    errors: dict[str, list[float]] = field(default_factory=lambda: {c: [] for c in COMPONENTS})
    tolerance: float = TOLERANCE

    def max_errors(self) -> dict[str, float]:
        return {c: max(v) if v else float("nan") for c, v in self.errors.items()}

    @property
    def passed(self) -> bool:
        return all(v and max(v) <= self.tolerance for v in self.errors.values())


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _neighbors(rows: np.ndarray, labels=None) -> NeighborSet:
    labels = [None] * len(rows) if labels is None else labels
    return NeighborSet(tuple(Neighbor(r, 0.0, lab) for r, lab in zip(rows, labels)))


@dataclass
class _Config:
    dim: int
    k: int
    cfg: ContrastiveConfig
    prototypes: np.ndarray
    q_d: NeighborSet
    q_u: NeighborSet
    pool: np.ndarray
    y_hat: int
    adapter: LayerNormAdapter
    raw: np.ndarray
    raw_aug: np.ndarray


def _draw(rng: np.random.Generator, trial: int) -> _Config:
    dim = (8, 64)[trial % 2]
    k = (1, 5)[(trial // 2) % 2]
    n_cls = int(rng.integers(2, 11))
    cfg = ContrastiveConfig(
        temperature=float(rng.choice([0.07, 0.1, 0.5])),
        ce_temperature=float(rng.choice([0.01, 0.05, 0.1])),
        k=k,
        positive_in_denominator=bool(rng.random() < 0.25),
    )
    prototypes = _unit_rows(rng, n_cls, dim)
    y_hat = int(rng.integers(n_cls))
    labels = [y_hat] + [int(rng.integers(n_cls)) for _ in range(k - 1)]
    q_d = _neighbors(_unit_rows(rng, k, dim), labels)
    q_u = _neighbors(_unit_rows(rng, k, dim))
    pool = _unit_rows(rng, int(rng.integers(1, 6)), dim)
    adapter = LayerNormAdapter(dim)
    adapter.gamma = 1.0 + 0.2 * rng.standard_normal(dim)
    adapter.beta = 0.2 * rng.standard_normal(dim)
    raw = rng.standard_normal(dim)
    raw_aug = raw + 0.05 * rng.standard_normal(dim)
    return _Config(dim, k, cfg, prototypes, q_d, q_u, pool, y_hat, adapter, raw, raw_aug)


def _through_adapter(
    c: _Config,
    loss_and_grads: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    loss_value: Callable[[np.ndarray, np.ndarray], float],
) -> tuple[np.ndarray, np.ndarray]:
    """(analytic, numeric) gradients w.r.t. concat(gamma, beta) of a loss of (f, f_aug)."""
    a = c.adapter
    f, cache = a.forward(c.raw)
    f_aug, cache_aug = a.forward(c.raw_aug)
    _, g_f, g_aug = loss_and_grads(f, f_aug)
    gg, gb = a.backward(cache, g_f)
    gg2, gb2 = a.backward(cache_aug, g_aug)
    analytic = np.concatenate([gg + gg2, gb + gb2])

    probe = a.copy()
    dim = c.dim

    def value(theta: np.ndarray) -> float:
        probe.gamma, probe.beta = theta[:dim], theta[dim:]
        return loss_value(probe(c.raw), probe(c.raw_aug))

    numeric = central_difference(value, np.concatenate([a.gamma, a.beta]))
    return analytic, numeric


def _single_view(fn):
    def wrapped(f, f_aug):
        v, g = fn(f)
        return v, g, np.zeros_like(f_aug)

    return wrapped


def _value_single(fn):
    return lambda f, f_aug: fn(f)


def _checks(c: _Config) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    cfg = c.cfg
    f0 = c.adapter(c.raw)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    out["l_d_f"] = (
        grad_l_desired(f0, c.q_d, c.q_u, c.y_hat, cfg),
        central_difference(lambda x: l_desired(x, c.q_d, c.q_u, c.y_hat, cfg)[0], f0),
    )
    out["l_u_f"] = (
        grad_l_undesired(f0, c.q_u, c.q_d, cfg),
        central_difference(lambda x: l_undesired(x, c.q_u, c.q_d, cfg), f0),
    )
    f_aug = c.adapter(c.raw_aug)
    _, g1, g2 = ce_pseudo(f0, f_aug, c.prototypes, c.y_hat, cfg)
    out["ce_f"] = (
        np.concatenate([g1, g2]),
        np.concatenate([
            central_difference(lambda x: ce_pseudo(x, f_aug, c.prototypes, c.y_hat, cfg)[0], f0),
            central_difference(lambda x: ce_pseudo(f0, x, c.prototypes, c.y_hat, cfg)[0], f_aug),
        ]),
    )

    def l_re(f, fa):
        return ce_pseudo(f, fa, c.prototypes, c.y_hat, cfg)

    def l_d(f):
        return l_desired(f, c.q_d, c.q_u, c.y_hat, cfg)[0], grad_l_desired(f, c.q_d, c.q_u, c.y_hat, cfg)

    def l_u(f):
        return l_undesired(f, c.q_u, c.q_d, cfg), grad_l_undesired(f, c.q_u, c.q_d, cfg)

    def total(f, fa):
        v, g1, g2 = l_re(f, fa)
        vd, gd = l_d(f)
        return v + vd, g1 + gd, g2

    def l_re_value(f, fa):
        return ce_pseudo(f, fa, c.prototypes, c.y_hat, cfg)[0]

    def l_d_value(f):
        return l_desired(f, c.q_d, c.q_u, c.y_hat, cfg)[0]

    def l_u_value(f):
        return l_undesired(f, c.q_u, c.q_d, cfg)

    out["l_re_adapter"] = _through_adapter(c, l_re, l_re_value)
    out["l_d_adapter"] = _through_adapter(c, _single_view(l_d), _value_single(l_d_value))
    out["l_u_adapter"] = _through_adapter(c, _single_view(l_u), _value_single(l_u_value))
    out["reduce_total_adapter"] = _through_adapter(c, total, lambda f, fa: l_re_value(f, fa) + l_d_value(f))
    minimize = c.y_hat % 2 == 0
    sign = 1.0 if minimize else -1.0

    def unient(f):
        v, g = entropy(f, c.prototypes, cfg.ce_temperature)
        return sign * v, sign * g

    out["unient_adapter"] = _through_adapter(c, _single_view(unient), _value_single(lambda f: unient(f)[0]))
    target = c.y_hat if c.k == 1 else c.prototypes.shape[0]

    def kp1(f):
        return kplus1_ce(f, c.prototypes, c.pool, target, cfg.ce_temperature)

    out["kplus1pc_adapter"] = _through_adapter(c, _single_view(kp1), _value_single(lambda f: kp1(f)[0]))
    return out


def run_gradcheck(seed: int = 0, trials: int = 100, perturb: float = 0.0) -> GradcheckReport:
    """Run ``trials`` random configurations; ``perturb`` corrupts analytic gradients (detector self-test)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(trials)
    for trial in range(trials):
        while True:
            checks = _checks(_draw(rng, trial))
            if all(np.linalg.norm(n) >= MIN_GRAD_NORM for _, n in checks.values()):
                break
        for name, (analytic, numeric) in checks.items():
            if perturb:
                analytic = analytic + perturb * np.linalg.norm(analytic) * rng.standard_normal(analytic.shape)
            report.errors[name].append(relative_error(analytic, numeric))
    return report
