import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assignment_brute_force, auroc_all_pairs, fpr95_sweep, pairwise_naive
from ostta.errors import EmptyClass
from ostta.metrics import (
    accuracies,
    assignment_cost,
    auroc,
    fpr_at_95tpr,
    harmonic_mean,
    online_accuracy,
    pairwise_distances,
    score_histograms,
    summarize,
    wasserstein_small,
)


def rec(is_desired, decision, prediction=0, gt=0, s=0.5):
    return SimpleNamespace(is_desired=is_desired, decision=decision, prediction=prediction,
                           gt_class=gt if is_desired else -1, s_t=s)


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.2, 0.1]) == 1.0
    assert auroc([0.8, 0.4], [0.6, 0.2]) == 0.75
    assert auroc([0.3, 0.5, 0.5], [0.5, 0.3, 0.5]) == 0.5
    with pytest.raises(EmptyClass):
        auroc([], [0.1])


def test_fpr_examples():
    assert fpr_at_95tpr([0.9] * 20, [0.5] * 5) == 0.0
    assert fpr_at_95tpr([0.9] * 20, [0.95] * 5) == 1.0
    with pytest.raises(EmptyClass):
        fpr_at_95tpr([0.1], [])


def test_metric_oracles_random():
    rng = np.random.default_rng(0)
    for i in range(60):
        nd, nu = rng.integers(1, 201, 2)
        if i % 2:
            d, u = rng.integers(0, 20, nd) / 20, rng.integers(0, 20, nu) / 20
        else:
            d, u = rng.normal(0.6, 0.2, nd), rng.normal(0.4, 0.2, nu)
        assert auroc(d, u) == auroc_all_pairs(d, u)
        assert fpr_at_95tpr(d, u) == fpr95_sweep(d, u)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.lists(st.floats(-1, 1), min_size=1, max_size=30))
def test_auroc_scale_invariance(d, u):
    d, u = np.array(d), np.array(u)
    # scaling by a power of two is exact, so ranks and ties survive
    assert auroc(d, u) == auroc(8 * d, 8 * u)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.lists(st.floats(-1, 1), min_size=1, max_size=30),
       st.floats(0, 1))
def test_fpr_monotone(d, u, delta):
    assert fpr_at_95tpr(d, np.array(u) - delta) <= fpr_at_95tpr(d, u)


def test_accuracies_examples():
    recs = [rec(True, "desired", 1, 1), rec(False, "undesired")]
    m = accuracies(recs)
    assert (m.acc_d, m.acc_u, m.hm) == (1.0, 1.0, 1.0)
    recs = [rec(True, "desired", 1, 1), rec(True, "undesired", -1, 1), rec(False, "undesired")]
    assert accuracies(recs).hm == pytest.approx(2 / 3)
    m = accuracies([rec(True, "desired", 2, 1), rec(False, "undesired")])
    assert m.acc_d == 0.0 and m.hm == 0.0
    m = accuracies([rec(True, "desired", 1, 1)])
    assert m.acc_u is None and m.hm is None
    with pytest.raises(EmptyClass):
        accuracies([])


def test_accuracies_concatenation():
    rng = np.random.default_rng(1)

    def draw(n):
        out = []
        for _ in range(n):
            des = bool(rng.random() < 0.5)
            dec = "desired" if rng.random() < 0.6 else "undesired"
            gt = int(rng.integers(3))
            out.append(rec(des, dec, gt if rng.random() < 0.7 else 9, gt))
        return out

    a, b = draw(50), draw(70)
    ma, mb, mab = accuracies(a), accuracies(b), accuracies(a + b)
    assert mab.n_correct_d == ma.n_correct_d + mb.n_correct_d
    assert mab.acc_d == pytest.approx((ma.acc_d * ma.n_desired + mb.acc_d * mb.n_desired) / (ma.n_desired + mb.n_desired))
    assert mab.acc_u == pytest.approx((ma.acc_u * ma.n_undesired + mb.acc_u * mb.n_undesired) / (ma.n_undesired + mb.n_undesired))


def test_online_accuracy_prefix():
    recs = [rec(True, "desired", 0, 0), rec(False, "desired"), rec(False, "undesired"), rec(True, "desired", 1, 0)]
    out = online_accuracy(recs)
    assert out[0, 0] == 1.0 and math.isnan(out[0, 1])
    assert out[1, 1] == 0.0 and out[2, 1] == 0.5 and out[3, 0] == 0.5
    for t in range(len(recs)):
        m = accuracies(recs[: t + 1])
        assert out[t, 0] == (m.acc_d if m.acc_d is not None else out[t, 0])


def test_summarize_has_ranking():
    recs = [rec(True, "desired", 0, 0, 0.9), rec(False, "undesired", s=0.1)]
    m = summarize(recs)
    assert m.auroc == 1.0 and m.fpr95 == 0.0 and set(m.as_dict()) >= {"acc_d", "hm", "auroc"}


def test_harmonic_mean():
    assert harmonic_mean(0.5, 1.0) == pytest.approx(2 / 3)
    assert harmonic_mean(0.0, 1.0) == 0.0
    assert harmonic_mean(None, 1.0) is None


def test_histograms():
    recs = [rec(True, "desired", s=0.95), rec(False, "undesired", s=-1.0), rec(True, "desired", s=1.0)]
    rows = score_histograms(recs, window=2)
    assert len(rows) == 200
    assert rows[0][:2] == (0, -1.0) and rows[0][3] == 1
    assert sum(r[2] for r in rows if r[0] == 0) == 1 and sum(r[2] for r in rows if r[0] == 2) == 1
    assert rows[-1][2] == 1
    with pytest.raises(ValueError):
        score_histograms(recs, window=0)


def test_pairwise_examples():
    e = np.eye(3)
    eu, cs = pairwise_distances([e[0]], [e[1]])
    assert eu == pytest.approx(math.sqrt(2)) and cs == pytest.approx(1.0)
    eu, cs = pairwise_distances([e[2]], [e[2]])
    assert eu == pytest.approx(0.0, abs=1e-12) and cs == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(2)
    for _ in range(10):
        A, B = rng.standard_normal((7, 5)), rng.standard_normal((4, 5))
        got = pairwise_distances(A, B, chunk=3)
        want = pairwise_naive(A.tolist(), B.tolist())
        assert got == pytest.approx(want, rel=1e-10)
    with pytest.raises(EmptyClass):
        pairwise_distances(np.empty((0, 3)), B)


def test_wasserstein_examples():
    e = np.eye(2)
    assert wasserstein_small([e[0]], [e[0]]) == 0.0
    assert wasserstein_small([e[0], e[1]], [e[1], e[0]]) == 0.0
    rng = np.random.default_rng(3)
    A = rng.standard_normal((30, 4))
    assert wasserstein_small(A, A, n_sub=30) == 0.0
    with pytest.raises(ValueError):
        wasserstein_small(A, A, n_sub=257)


def test_assignment_vs_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(100):
        C = rng.uniform(0, 1, (4, 4))
        assert assignment_cost(C) == assignment_brute_force(C)


def test_wasserstein_subsample_deterministic():
    rng = np.random.default_rng(5)
    A, B = rng.standard_normal((300, 3)), rng.standard_normal((280, 3)) + 1
    assert wasserstein_small(A, B, 64, seed=1) == wasserstein_small(A, B, 64, seed=1)
