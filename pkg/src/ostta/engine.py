"""Per-sample online adaptation loop and the comparison baselines.

Each step reads one sample, scores it with the current adapter, updates the
identifier, emits the open-set prediction, and only then (for adapting
methods) takes at most one SGD step on the adapter.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import UNKNOWN
from .adapter import LayerNormAdapter
from .banks import DesiredBank, NeighborSet, UndesiredBank, knn
from .errors import ConfigError, OsttaError
from .identifier import (
    SCORE_BANK_SIZE,
    Decision,
    Reliability,
    ScoreBank,
    daf_fit,
    daf_identify,
    lda_threshold,
    msp_identify,
    reliability,
    classify,
    score,
)
from .losses import (
    ActiveCase,
    ContrastiveConfig,
    LossBreakdown,
    ce_pseudo,
    grad_l_desired,
    grad_l_undesired,
    l_desired,
    log_softmax,
    softmax,
    l_undesired,
    reduce_total,
)
from .metrics import MetricSummary, score_histograms, summarize
from .stream import ClassPrototypeSet, StreamSample

log = logging.getLogger(__name__)

WARMUP = 32


class Method(str, enum.Enum):
    ZSEVAL = "zseval"
    ROSITA = "rosita"
    UNIENT = "unient"
    KPLUS1PC = "kplus1pc"


class IdentifierKind(str, enum.Enum):
    LDA = "lda"
    DAF = "daf"
    MSP = "msp"


@dataclass(frozen=True)
class MethodConfig:
    method: Method = Method.ROSITA
    identifier: IdentifierKind = IdentifierKind.LDA
    msp_thresholds: tuple[float, float, float] = (0.4, 0.6, 0.8)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    lr: float = 1e-3
    warmup: int = WARMUP
    score_bank_size: int = SCORE_BANK_SIZE
    undesired_bank_size: int = 64
    use_l_re: bool = True
    use_l_d: bool = True
    use_l_u: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "identifier", IdentifierKind(self.identifier))
        tu, tt, td = self.msp_thresholds
        if not tu <= tt <= td:
            raise ConfigError("MSP thresholds must satisfy tau_u <= tau_t <= tau_d")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.warmup < 0 or self.score_bank_size < 1:
            raise ConfigError("warmup must be >= 0 and score_bank_size >= 1")


@dataclass(frozen=True)
class StepRecord:
    t: int
    s_t: float
    tau_star: float
    mu_d: float
    mu_u: float
    decision: Decision
    reliability: Reliability
    prediction: int
    gt_class: int
    is_desired: bool
    loss: LossBreakdown = field(default_factory=LossBreakdown)
    m_d_size: int = 0
    m_u_size: int = 0
    warmup: bool = False
    failed: bool = False


@dataclass
class RunResult:
    records: list[StepRecord]
    summary: MetricSummary | None
    histograms: list[tuple[int, float, int, int]]
    failed_steps: int = 0
    engine: "Engine | None" = None


@dataclass(frozen=True)
class _Identification:
    decision: Decision
    reliability: Reliability
    tau_star: float
    mu_d: float
    mu_u: float
    warmup: bool


class Engine:
    """One adaptation run's mutable state.  Strictly single-threaded."""

    def __init__(self, prototypes: ClassPrototypeSet, config: MethodConfig = MethodConfig()):
        self.prototypes = prototypes
        self.P = prototypes.prototypes
        self.config = config
        self.ccfg = config.contrastive
        self.adapter = LayerNormAdapter(prototypes.dim, lr=config.lr)
        self.score_bank = ScoreBank(config.score_bank_size)
        self.desired_bank = DesiredBank(prototypes.num_classes, self.ccfg.k)
        u_cap = config.undesired_bank_size if (self.ccfg.k > 0 or config.method is Method.KPLUS1PC) else 0
        self.undesired_bank = UndesiredBank(u_cap)
        self.failed_steps = 0
        self._step = {
            Method.ROSITA: self._adapt_rosita,
            Method.ZSEVAL: None,
            Method.UNIENT: self._adapt_unient,
            Method.KPLUS1PC: self._adapt_kplus1pc,
        }[config.method]

    # -- identification -------------------------------------------------

    def _identify(self, s: float) -> _Identification:
        self.score_bank.push(s)
        if len(self.score_bank) < self.config.warmup:
            return _Identification(Decision.DESIRED, Reliability.UNRELIABLE_DESIRED, np.nan, np.nan, np.nan, True)
        kind = self.config.identifier
        if kind is IdentifierKind.MSP:
            tu, tt, td = self.config.msp_thresholds
            dec, rel = msp_identify(s, tu, tt, td)
            return _Identification(dec, rel, tt, td, tu, False)
        if kind is IdentifierKind.DAF and len(self.score_bank) >= 4 and np.ptp(self.score_bank.values()) > 0:
            g = daf_fit(self.score_bank, max_iters=50, tol=1e-6)
            dec, rel, _ = daf_identify(s, g)
            return _Identification(dec, rel, np.nan, g.mu_hi, g.mu_lo, False)
        stats = lda_threshold(self.score_bank)
        return _Identification(classify(s, stats), reliability(s, stats), stats.tau_star, stats.mu_d, stats.mu_u, False)

    # -- one step ---------------------------------------------------------

    def step(self, sample: StreamSample) -> StepRecord:
        f, cache = self.adapter.forward(sample.raw)
        s, y_hat = score(f, self.P)
        ident = self._identify(s)
        prediction = y_hat if ident.decision is Decision.DESIRED else UNKNOWN
        loss = LossBreakdown()
        failed = False
        if self._step is not None and not ident.warmup:
            try:
                loss = self._step(sample, f, cache, y_hat, ident)
            except OsttaError as exc:
                self.failed_steps += 1
                failed = True
                log.warning("step %d failed: %s", sample.t, exc)
        return StepRecord(
            sample.t, s, ident.tau_star, ident.mu_d, ident.mu_u, ident.decision, ident.reliability,
            prediction, sample.gt_class, sample.is_desired, loss,
            len(self.desired_bank), len(self.undesired_bank), ident.warmup, failed,
        )

    def _apply(self, pairs) -> None:
        gg = np.zeros(self.adapter.dim)
        gb = np.zeros(self.adapter.dim)
        for cache, grad in pairs:
            a, b = self.adapter.backward(cache, grad)
            gg += a
            gb += b
        self.adapter.sgd_step(gg, gb)

    def _neighbors(self, f: np.ndarray) -> tuple[NeighborSet, NeighborSet]:
        k = self.ccfg.k
        if k < 1:
            return NeighborSet(), NeighborSet()
        return knn(f, self.desired_bank, k), knn(f, self.undesired_bank, k)

    def _adapt_rosita(self, sample, f, cache, y_hat, ident) -> LossBreakdown:
        cfg = self.config
        rel = ident.reliability
        if rel is Reliability.RELIABLE_DESIRED:
            q_d, q_u = self._neighbors(f)
            pairs = []
            l_re = l_d = None
            k_plus = 0
            if cfg.use_l_re:
                f_aug, cache_aug = self.adapter.forward(sample.raw_aug)
                l_re, g1, g2 = ce_pseudo(f, f_aug, self.P, y_hat, self.ccfg)
                pairs += [(cache, g1), (cache_aug, g2)]
            if cfg.use_l_d and len(q_u) > 0:
                l_d, k_plus = l_desired(f, q_d, q_u, y_hat, self.ccfg)
                if l_d is not None:
                    pairs.append((cache, grad_l_desired(f, q_d, q_u, y_hat, self.ccfg)))
            out = reduce_total(rel, l_re, l_d, None, k_plus)
            if pairs:
                self._apply(pairs)
            self.desired_bank.push(f, y_hat)
            return out
        if rel is Reliability.RELIABLE_UNDESIRED:
            q_d, q_u = self._neighbors(f)
            l_u = None
            if cfg.use_l_u and len(q_u) > 0 and len(q_d) > 0:
                l_u = l_undesired(f, q_u, q_d, self.ccfg)
                self._apply([(cache, grad_l_undesired(f, q_u, q_d, self.ccfg))])
            if self.undesired_bank.capacity:
                self.undesired_bank.push(f)
            return reduce_total(rel, l_u=l_u)
        return LossBreakdown()

    def _adapt_unient(self, sample, f, cache, y_hat, ident) -> LossBreakdown:
        minimize = ident.decision is Decision.DESIRED
        value, grad = signed_entropy(f, self.P, self.ccfg.ce_temperature, minimize)
        self._apply([(cache, grad)])
        case = ActiveCase.DESIRED if minimize else ActiveCase.UNDESIRED
        return LossBreakdown(value, case)

    def _adapt_kplus1pc(self, sample, f, cache, y_hat, ident) -> LossBreakdown:
        pool = np.stack([e.feature for e in self.undesired_bank.entries()]) if len(self.undesired_bank) else None
        out = LossBreakdown()
        if ident.decision is Decision.DESIRED:
            value, grad = kplus1_ce(f, self.P, pool, y_hat, self.ccfg.ce_temperature)
            self._apply([(cache, grad)])
            out = LossBreakdown(value, ActiveCase.DESIRED)
        elif pool is not None:
            value, grad = kplus1_ce(f, self.P, pool, self.P.shape[0], self.ccfg.ce_temperature)
            self._apply([(cache, grad)])
            out = LossBreakdown(value, ActiveCase.UNDESIRED)
        if ident.reliability is Reliability.RELIABLE_UNDESIRED:
            self.undesired_bank.push(f)
        return out

    def features(self, raws: np.ndarray) -> np.ndarray:
        """Adapter outputs for a batch of raw embeddings under the current parameters."""
        return np.stack([self.adapter(x) for x in raws])


# --- baseline objectives ----------------------------------------------------


def entropy(f: np.ndarray, prototypes: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Prediction entropy of softmax(P f / T) and its gradient in f."""
    z = prototypes @ f / temperature
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -float(p @ logp)
    dz = -p * (logp + h)
    return h, prototypes.T @ dz / temperature


def signed_entropy(f, prototypes, temperature, minimize: bool) -> tuple[float, np.ndarray]:
    h, g = entropy(f, prototypes, temperature)
    return (h, g) if minimize else (-h, -g)


def kplus1_ce(
    f: np.ndarray, prototypes: np.ndarray, pool: np.ndarray | None, target: int, temperature: float
) -> tuple[float, np.ndarray]:
    """Cross entropy over the class prototypes plus one undesired logit.

    The extra logit is the best similarity to any pool feature; with an empty
    pool it is dropped and the loss is plain prototype cross entropy.
    """
    protos = prototypes
    if pool is not None and len(pool):
        sims = pool @ f
        protos = np.vstack([prototypes, pool[int(np.argmax(sims))]])
    if target >= protos.shape[0]:
        raise ConfigError("undesired target needs a non-empty pool")
    logits = protos @ f / temperature
    value = -float(log_softmax(logits)[target])
    p = softmax(logits)
    p[target] -= 1.0
    return value, protos.T @ p / temperature


# --- run -------------------------------------------------------------------


def run(
    stream: Iterable[StreamSample],
    prototypes: ClassPrototypeSet,
    config: MethodConfig = MethodConfig(),
    histogram_window: int = 500,
) -> RunResult:
    engine = Engine(prototypes, config)
    records = [engine.step(sample) for sample in stream]
    summary = summarize(records) if records else None
    hist = score_histograms(records, histogram_window) if records else []
    return RunResult(records, summary, hist, engine.failed_steps, engine)
