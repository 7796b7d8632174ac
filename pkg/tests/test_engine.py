import math

import numpy as np
import pytest

from oracles import central_difference
from ostta import UNKNOWN
from ostta.engine import (
    Engine,
    IdentifierKind,
    Method,
    MethodConfig,
    entropy,
    kplus1_ce,
    run,
    signed_entropy,
)
from ostta.errors import ConfigError
from ostta.identifier import Decision, Reliability, score
from ostta.losses import ActiveCase, ContrastiveConfig
from ostta.stream import ScenarioConfig, StreamSample, generate_prototypes, synth_stream

SC = ScenarioConfig(dim=32, num_desired_classes=5, samples_per_domain=300, noise_sigma=0.15,
                    shift_strength=1.0, seed=3)
P = generate_prototypes(5, 32, 0.3, 3)
STREAM = synth_stream(SC, P)


def test_empty_stream():
    res = run([], P, MethodConfig())
    assert res.records == [] and res.summary is None


def test_record_count_and_prediction_contract():
    res = run(STREAM, P, MethodConfig())
    assert len(res.records) == len(STREAM)
    for r in res.records:
        assert (r.prediction == UNKNOWN) == (r.decision is Decision.UNDESIRED)
        assert r.m_d_size <= 5 * 5 and r.m_u_size <= 64
        if r.loss.active_case is ActiveCase.DESIRED:
            assert r.loss.l_u is None
        if r.loss.active_case is ActiveCase.UNDESIRED:
            assert r.loss.l_re is None and r.loss.l_d is None
        if r.loss.active_case is ActiveCase.NO_UPDATE:
            assert r.loss.total == 0.0
        assert r.loss.k_plus <= 5


def test_warmup():
    res = run(STREAM[:40], P, MethodConfig())
    for r in res.records[:31]:
        assert r.warmup and r.decision is Decision.DESIRED and r.reliability is Reliability.UNRELIABLE_DESIRED
        assert math.isnan(r.tau_star) and r.loss.active_case is ActiveCase.NO_UPDATE
    assert not res.records[31].warmup


def test_zseval_no_update_and_argmax():
    res = run(STREAM, P, MethodConfig(method="zseval"))
    e = res.engine
    assert np.array_equal(e.adapter.gamma, np.ones(32)) and np.array_equal(e.adapter.beta, np.zeros(32))
    for s, r in zip(STREAM, res.records):
        _, y = score(e.adapter(s.raw), P.prototypes)
        if r.decision is Decision.DESIRED:
            assert r.prediction == y


def test_deterministic():
    a = run(STREAM, P, MethodConfig())
    b = run(STREAM, P, MethodConfig())
    key = lambda r: (r.s_t, r.prediction, r.loss.total, r.reliability)
    assert [key(r) for r in a.records] == [key(r) for r in b.records]
    assert a.engine.adapter.export_params() == b.engine.adapter.export_params()


def test_prediction_uses_pre_update_model():
    eng = Engine(P, MethodConfig())
    for s in STREAM[:200]:
        before = eng.adapter.copy()
        r = eng.step(s)
        s_before, y_before = score(before(s.raw), P.prototypes)
        assert r.s_t == s_before
        if r.decision is Decision.DESIRED:
            assert r.prediction == y_before


def test_no_update_leaves_state_bitwise():
    eng = Engine(P, MethodConfig())
    for s in STREAM:
        params = eng.adapter.export_params()
        d = [e.feature.tobytes() for e in eng.desired_bank.entries()]
        u = [e.feature.tobytes() for e in eng.undesired_bank.entries()]
        r = eng.step(s)
        if r.reliability in (Reliability.UNRELIABLE_DESIRED, Reliability.UNRELIABLE_UNDESIRED):
            assert eng.adapter.export_params() == params
            assert [e.feature.tobytes() for e in eng.desired_bank.entries()] == d
            assert [e.feature.tobytes() for e in eng.undesired_bank.entries()] == u


def test_first_reliable_desired_uses_l_re_only():
    eng = Engine(P, MethodConfig(warmup=0))
    s = StreamSample(0, P.prototypes[2].copy(), P.prototypes[2].copy(), 2)
    r = eng.step(s)
    # a one-score bank is degenerate: everything is desired, nothing is reliable
    assert r.reliability is Reliability.UNRELIABLE_DESIRED
    eng2 = Engine(P, MethodConfig(warmup=0, identifier="msp", msp_thresholds=(0.1, 0.2, 0.3)))
    feat = eng2.adapter(s.raw)
    r = eng2.step(s)
    assert r.reliability is Reliability.RELIABLE_DESIRED
    assert r.loss.l_re is not None and r.loss.l_d is None and r.loss.total == r.loss.l_re
    assert len(eng2.desired_bank) == 1 and len(eng2.undesired_bank) == 0
    assert eng2.desired_bank.queue(2)[0].tobytes() == feat.tobytes()


def test_ablation_switches():
    base = run(STREAM, P, MethodConfig(use_l_re=False, use_l_d=False, use_l_u=False))
    assert base.engine.adapter.export_params() == run(STREAM, P, MethodConfig(method="zseval")).engine.adapter.export_params()
    only_u = run(STREAM, P, MethodConfig(use_l_re=False, use_l_d=False))
    assert all(r.loss.l_re is None and r.loss.l_d is None for r in only_u.records)
    assert any(r.loss.l_u is not None for r in only_u.records)


def test_k_zero_disables_contrastive():
    res = run(STREAM, P, MethodConfig(contrastive=ContrastiveConfig(k=0)))
    assert all(r.loss.l_d is None and r.loss.l_u is None for r in res.records)
    assert all(r.m_d_size == 0 and r.m_u_size == 0 for r in res.records)


@pytest.mark.parametrize("ident", ["lda", "daf", "msp"])
@pytest.mark.parametrize("method", ["rosita", "unient", "kplus1pc", "zseval"])
def test_all_methods_run(method, ident):
    cfg = MethodConfig(method=method, identifier=ident, msp_thresholds=(0.3, 0.5, 0.7))
    res = run(STREAM[:250], P, cfg)
    assert len(res.records) == 250 and res.failed_steps == 0
    assert all(r.m_u_size <= 64 for r in res.records)


def test_lr_zero_matches_zseval():
    z = run(STREAM, P, MethodConfig(method="zseval"))
    for m in ("unient", "kplus1pc", "rosita"):
        r = run(STREAM, P, MethodConfig(method=m, lr=0.0))
        assert [x.prediction for x in r.records] == [x.prediction for x in z.records]


def test_config_errors():
    with pytest.raises(ConfigError):
        MethodConfig(identifier="msp", msp_thresholds=(0.6, 0.5, 0.8))
    with pytest.raises(ConfigError):
        MethodConfig(lr=-1)
    with pytest.raises(ValueError):
        MethodConfig(method="nope")
    assert MethodConfig(method="zseval").method is Method.ZSEVAL
    assert MethodConfig(identifier="daf").identifier is IdentifierKind.DAF


def test_uniform_entropy_stationary():
    Pm = np.eye(4)
    f = np.full(4, 0.5)
    h, g = entropy(f, Pm, 0.1)
    assert h == pytest.approx(math.log(4))
    assert np.abs(g).max() < 1e-12


def test_entropy_and_kplus1_fd():
    rng = np.random.default_rng(0)
    Pm = rng.standard_normal((5, 10))
    Pm /= np.linalg.norm(Pm, axis=1, keepdims=True)
    pool = rng.standard_normal((3, 10))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    f = rng.standard_normal(10)
    f /= np.linalg.norm(f)
    for minimize in (True, False):
        _, g = signed_entropy(f, Pm, 0.1, minimize)
        n = central_difference(lambda x: signed_entropy(x, Pm, 0.1, minimize)[0], f)
        assert np.linalg.norm(g - n) / np.linalg.norm(n) <= 1e-5
    for target in (1, 5):
        _, g = kplus1_ce(f, Pm, pool, target, 0.1)
        n = central_difference(lambda x: kplus1_ce(x, Pm, pool, target, 0.1)[0], f)
        assert np.linalg.norm(g - n) / np.linalg.norm(n) <= 1e-5


def test_kplus1_degenerate_pool_and_pool_hit():
    Pm = np.eye(4)[:3]
    f = np.eye(4)[1]
    v_pool, _ = kplus1_ce(f, Pm, None, 1, 0.5)
    logits = Pm @ f / 0.5
    assert v_pool == pytest.approx(-(logits[1] - np.log(np.exp(logits).sum())))
    with pytest.raises(ConfigError):
        kplus1_ce(f, Pm, None, 3, 0.5)
    u = np.eye(4)[3]
    v, _ = kplus1_ce(u, Pm, u[None, :], 3, 0.5)
    assert v < math.log(3)
