"""Metrics against brute-force and quadrature oracles."""

import itertools
import math

import numpy as np
import pytest

from kid.metrics import MetricError, TTestResult, accuracy, auc, macro_f1, paired_t_test


def auc_bruteforce(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def t_density(x, df):
    return (math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
            * (1 + x * x / df) ** (-(df + 1) / 2))


def two_sided_p_quadrature(t, df, steps=200000, span=400.0):
    # integrate the t density over |x| >= |t| by midpoint rule
    lo, hi = abs(t), abs(t) + span
    h = (hi - lo) / steps
    area = sum(t_density(lo + (i + 0.5) * h, df) for i in range(steps)) * h
    return 2.0 * area


# ---- auc ----

def test_auc_perfect_ranking():
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_tie_symmetry():
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def test_auc_mixed_case():
    assert auc([0.2, 0.8, 0.9, 0.3], [1, 0, 1, 0]) == 0.5


def test_auc_matches_bruteforce_on_200_random_instances():
    rng = np.random.default_rng(17)
    for trial in range(200):
        n = int(rng.integers(2, 101))
        # coarse grid of score values forces plenty of exact ties
        scores = rng.integers(0, 8, n) / 7.0
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) == auc_bruteforce(list(scores), list(labels))


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    scores = rng.normal(0, 1, 60)
    labels = rng.integers(0, 2, 60)
    labels[0], labels[1] = 0, 1
    base = auc(scores, labels)
    assert auc(np.exp(scores), labels) == base
    assert auc(3.0 * scores + 11.0, labels) == base


def test_auc_degenerate_labels_error():
    with pytest.raises(MetricError):
        auc([0.1, 0.9], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.9], [0, 2])


# ---- macro f1 / accuracy ----

def test_perfect_predictions():
    pred = ["a", "b", "a"]
    assert macro_f1(pred, pred, ["a", "b"]) == 1.0
    assert accuracy(pred, pred) == 1.0


def test_macro_f1_hand_case():
    got = macro_f1([1, 1, 0, 0], [1, 0, 0, 0], [0, 1])
    assert abs(got - (2 / 3 + 4 / 5) / 2) < 1e-12


def test_absent_class_scores_zero():
    # class "c" never predicted nor gold: contributes 0 by the 0/0 rule
    got = macro_f1(["a", "b"], ["a", "b"], ["a", "b", "c"])
    assert abs(got - 2 / 3) < 1e-12


def test_label_outside_space_rejected():
    with pytest.raises(MetricError):
        macro_f1(["a", "z"], ["a", "b"], ["a", "b"])
    with pytest.raises(MetricError):
        macro_f1(["a"], ["q"], ["a", "b"])


def f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def test_macro_f1_exhaustive_small_confusions_binary():
    # enumerate every 2x2 confusion matrix with cell counts <= 3
    for tt, tf, ft, ff in itertools.product(range(4), repeat=4):
        if tt + tf + ft + ff == 0:
            continue
        pred, gold = [], []
        pred += [1] * tt + [0] * tf + [1] * ft + [0] * ff
        gold += [1] * tt + [1] * tf + [0] * ft + [0] * ff
        want = (f1_from_counts(tt, ft, tf) + f1_from_counts(ff, tf, ft)) / 2
        assert abs(macro_f1(pred, gold, [0, 1]) - want) < 1e-12
        assert accuracy(pred, gold) == (tt + ff) / len(pred)


def test_macro_f1_exhaustive_small_confusions_threeway():
    rng = np.random.default_rng(23)
    labels = [0, 1, 2]
    for _ in range(120):
        conf = rng.integers(0, 4, (3, 3))
        if conf.sum() == 0:
            continue
        pred, gold = [], []
        for g in labels:
            for p in labels:
                pred += [p] * int(conf[g, p])
                gold += [g] * int(conf[g, p])
        want = 0.0
        for c in labels:
            tp = int(conf[c, c])
            fp = int(conf[:, c].sum() - conf[c, c])
            fn = int(conf[c, :].sum() - conf[c, c])
            want += f1_from_counts(tp, fp, fn)
        want /= 3.0
        assert abs(macro_f1(pred, gold, labels) - want) < 1e-12
        assert accuracy(pred, gold) == np.trace(conf) / conf.sum()


def test_multilabel_exact_set_match_and_f1():
    pred = [["a", "b"], ["a"], []]
    gold = [["b", "a"], ["b"], []]
    assert accuracy(pred, gold) == pytest.approx(2 / 3)
    # class a: tp=1 fp=1 fn=0 -> 2/3; class b: tp=1 fp=0 fn=1 -> 2/3
    assert macro_f1(pred, gold, ["a", "b"]) == pytest.approx(2 / 3)


# ---- paired t-test ----

def test_t_test_equal_samples_p_one():
    r = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.p == 1.0 and r.t == 0.0 and r.df == 2


def test_t_test_frozen_case_against_quadrature():
    r = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert abs(r.t - 2.0 * math.sqrt(3.0)) < 1e-12
    assert r.df == 2
    want = two_sided_p_quadrature(r.t, r.df)
    assert abs(r.p - want) < 1e-3
    assert abs(r.p - 0.074180) < 1e-3


def test_t_test_antisymmetry_and_shift_invariance():
    a = [0.91, 0.88, 0.95, 0.83]
    b = [0.87, 0.89, 0.90, 0.80]
    r1 = paired_t_test(a, b)
    r2 = paired_t_test(b, a)
    assert r1.t == -r2.t and r1.p == r2.p
    shifted = paired_t_test([x + 5.0 for x in a], [x + 5.0 for x in b])
    assert abs(shifted.t - r1.t) < 1e-9 and abs(shifted.p - r1.p) < 1e-9


def test_t_test_random_cases_against_quadrature():
    rng = np.random.default_rng(7)
    for _ in range(6):
        n = int(rng.integers(3, 9))
        a = rng.normal(0.5, 0.2, n)
        b = a + rng.normal(0.05, 0.1, n)
        r = paired_t_test(a, b)
        if not math.isfinite(r.t):
            continue
        assert abs(r.p - two_sided_p_quadrature(r.t, r.df)) < 1e-3


def test_t_test_zero_variance_rules():
    nz = paired_t_test([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    assert nz.p == 0.0 and math.isinf(nz.t) and nz.t > 0
    with pytest.raises(MetricError):
        paired_t_test([1.0], [0.0])
    with pytest.raises(MetricError):
        paired_t_test([1.0, 2.0], [0.0])
