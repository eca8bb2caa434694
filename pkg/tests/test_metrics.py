import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from discgen.metrics import fid, fid_from_features, gaussian_stats, inception_score, kid, mmd2_unbiased, recall_at_k


def brute_recall(sim, ks):
    """Sort each query's scores; the match's rank counts every competitor scoring >= it."""
    out = {}
    n = len(sim)
    for direction, mat in (("i2t", sim), ("t2i", sim.T)):
        ranks = []
        for i in range(n):
            order = sorted(range(n), key=lambda j: (-mat[i][j], j != i))
            # pessimistic: move the match behind any tied competitors
            pos = order.index(i)
            while pos + 1 < n and mat[i][order[pos + 1]] == mat[i][i]:
                pos += 1
            ranks.append(pos)
        vals = [100.0 * sum(r < k for r in ranks) / n for k in ks]
        for k, v in zip(ks, vals):
            out[f"{direction}_R@{k}"] = v
        out[f"{direction}_mean_R"] = sum(vals) / len(vals)
    return out


# ---------------------------------------------------------------- recall


def test_recall_identity():
    r = recall_at_k(np.eye(8))
    assert all(v == 100.0 for v in r.values())


def test_recall_anti_diagonal():
    sim = np.ones((4, 4)) - np.eye(4)
    r = recall_at_k(sim, ks=(1, 4))
    assert r["i2t_R@1"] == 0.0 and r["i2t_R@4"] == 100.0
    assert r["t2i_R@1"] == 0.0


def test_recall_all_ties_pessimistic():
    r = recall_at_k(np.full((10, 10), 0.5))
    assert r["i2t_R@1"] == 0.0 and r["t2i_R@10"] == 100.0


def test_recall_rejects_non_square():
    with pytest.raises(ValueError):
        recall_at_k(np.zeros((3, 4)))


def test_recall_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(50):
        sim = rng.normal(size=(20, 20))
        if trial % 5 == 0:
            sim = np.round(sim, 0)  # force ties
        assert recall_at_k(sim) == pytest.approx(brute_recall(sim, (1, 5, 10)), abs=1e-12)


def test_recall_mean_and_monotone_in_k():
    rng = np.random.default_rng(1)
    r = recall_at_k(rng.normal(size=(30, 30)))
    for d in ("i2t", "t2i"):
        assert r[f"{d}_R@1"] <= r[f"{d}_R@5"] <= r[f"{d}_R@10"]
        assert r[f"{d}_mean_R"] == pytest.approx((r[f"{d}_R@1"] + r[f"{d}_R@5"] + r[f"{d}_R@10"]) / 3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_recall_monotone_transform_invariant(seed):
    sim = np.random.default_rng(seed).normal(size=(12, 12))
    assert recall_at_k(np.exp(3 * sim) + 7) == recall_at_k(sim)


# ---------------------------------------------------------------- stats / fid


def test_gaussian_stats_cases():
    mu, cov = gaussian_stats([[0.0], [2.0]])
    assert mu.tolist() == [1.0] and cov.tolist() == [[2.0]]
    mu, cov = gaussian_stats(np.full((5, 3), 4.0))
    assert np.all(cov == 0)
    _, cov = gaussian_stats(np.random.default_rng(0).normal(size=(20, 4)))
    assert np.array_equal(cov, cov.T)
    with pytest.raises(ValueError):
        gaussian_stats([[1.0, 2.0]])


def test_fid_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(50, 6))
    mu, s = gaussian_stats(x)
    assert abs(fid(mu, s, mu, s)) <= 1e-8


def test_fid_equal_covariances():
    s = np.cov(np.random.default_rng(1).normal(size=(40, 3)), rowvar=False)
    mu1, mu2 = np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0])
    assert fid(mu1, s, mu2, s) == pytest.approx(1 + 4 + 4, abs=1e-8)


def test_fid_one_dimensional_closed_form():
    assert fid([0.0], [[4.0]], [1.0], [[1.0]]) == 2.0


def test_fid_matches_scipy_sqrtm():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(60, 5)), 0.5 + 1.3 * rng.normal(size=(70, 5))
    mu1, s1 = gaussian_stats(x)
    mu2, s2 = gaussian_stats(y)
    ref = np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * scipy.linalg.sqrtm(s1 @ s2).real)
    assert fid(mu1, s1, mu2, s2) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fid_symmetric(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(20, 4)), rng.normal(size=(25, 4)) * 2
    assert abs(fid_from_features(x, y) - fid_from_features(y, x)) <= 1e-8


def test_fid_errors():
    with pytest.raises(ValueError):
        fid([0.0, 0.0], np.eye(2), [0.0], np.eye(1))
    with pytest.raises(ValueError):
        fid([0.0, 0.0], np.diag([1.0, -1.0]), [0.0, 0.0], np.eye(2))


# ---------------------------------------------------------------- kid


def triple_loop_mmd(x, y):
    k = len(x[0])

    def kern(a, b):
        return (sum(p * q for p, q in zip(a, b)) / k + 1) ** 3

    n, m = len(x), len(y)
    sxx = sum(kern(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    syy = sum(kern(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sxy = sum(kern(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return sxx + syy - 2 * sxy


def test_kid_constant_is_zero():
    x = np.full((6, 4), 0.3)
    mean, std = kid(x, x.copy(), n_subsets=5)
    assert abs(mean) <= 1e-12 and std <= 1e-12


def test_kid_tiny_case_matches_triple_loop():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) + 0.5
    oracle = triple_loop_mmd(x.tolist(), y.tolist())
    assert abs(mmd2_unbiased(x, y) - oracle) <= 1e-12
    # with n = m = 3 every subset is the whole set
    mean, std = kid(x, y, n_subsets=4)
    assert abs(mean - oracle) <= 1e-12 and std <= 1e-12


def test_kid_same_distribution_within_noise():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(400, 8)), rng.normal(size=(400, 8))
    mean, std = kid(x, y)
    assert abs(mean) < 3 * std
    far_mean, _ = kid(x, y + 2.0)
    assert far_mean > 10 * std


def test_kid_errors():
    with pytest.raises(ValueError):
        kid(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        kid(np.zeros((4, 3)), np.zeros((4, 2)))


# ---------------------------------------------------------------- inception score


def test_is_uniform_is_one():
    mean, std = inception_score(np.full((12, 5), 0.2))
    assert abs(mean - 1.0) <= 1e-9 and std == 0.0


def test_is_one_hot_complete_is_c():
    for c in (2, 7, 10):
        mean, _ = inception_score(np.eye(c))
        assert abs(mean - c) <= 1e-9


def test_is_single_split_and_permutation():
    rng = np.random.default_rng(5)
    p = rng.dirichlet(np.ones(6), size=30)
    assert inception_score(p, splits=1) == inception_score(p)
    perm = rng.permutation(30)
    assert inception_score(p[perm])[0] == pytest.approx(inception_score(p)[0], rel=1e-12)
    mean, std = inception_score(p, splits=3)
    scores = [inception_score(p[i * 10:(i + 1) * 10])[0] for i in range(3)]
    assert mean == pytest.approx(np.mean(scores)) and std == pytest.approx(np.std(scores))
    assert all(s >= 1 - 1e-12 for s in scores)


def test_is_hand_kl():
    p = np.array([[0.9, 0.1], [0.2, 0.8]])
    marg = p.mean(axis=0)
    kl = [sum(r[j] * math.log(r[j] / marg[j]) for j in range(2)) for r in p]
    assert inception_score(p)[0] == pytest.approx(math.exp(sum(kl) / 2), abs=1e-12)


def test_is_rejects_non_stochastic():
    with pytest.raises(ValueError):
        inception_score(np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError):
        inception_score(np.eye(3), splits=4)


def test_brute_recall_self_check():
    # the oracle itself on a hand case: match tied with one competitor -> rank 1
    sim = np.array([[1.0, 1.0], [0.0, 2.0]])
    r = brute_recall(sim, (1, 2))
    assert r["i2t_R@1"] == 50.0 and r["i2t_R@2"] == 100.0
    assert list(itertools.chain(r)) == list(recall_at_k(sim, (1, 2)))
