"""Retrieval recall and generative metrics (FID, KID, Inception Score).

All functions take plain feature/probability arrays; the feature extractor
is supplied by the caller (see :mod:`discgen.extractor`).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SQRT_NEG_TOL = 1e-6


@dataclass
class MetricReport:
    retrieval: dict[str, float] = field(default_factory=dict)
    fid: float | None = None
    kid_mean: float | None = None
    kid_std: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}


def _ranks_pessimistic(scores: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row, ties counted ahead."""
    diag = np.diag(scores)
    ahead = (scores >= diag[:, None]).sum(axis=1) - 1
    return ahead


def recall_at_k(sim, ks=(1, 5, 10)) -> dict[str, float]:
    """Recall@k (percent) in both directions for a square similarity matrix.

    Row ``i`` is image query ``i``; its match is column ``i``. Image-to-text
    ranks along rows, text-to-image along columns. A tied competitor counts
    as ranked ahead of the match.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    out = {}
    for direction, mat in (("i2t", sim), ("t2i", sim.T)):
        ranks = _ranks_pessimistic(mat)
        vals = []
        for k in ks:
            r = 100.0 * float(np.mean(ranks < k)) if len(ranks) else 0.0
            out[f"{direction}_R@{k}"] = r
            vals.append(r)
        out[f"{direction}_mean_R"] = float(np.mean(vals))
    return out


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (n, k) matrix with n >= 2")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2
    return mu, cov


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.size and w.min() < -SQRT_NEG_TOL * scale:
        raise ValueError(f"matrix square root failed: eigenvalue {w.min():.3e} below tolerance")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(mu1, s1, mu2, s2) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((S1 S2)^1/2)`` is taken as ``Tr((sqrt(S1) S2 sqrt(S1))^1/2)``, which
    has the same value and keeps every square root symmetric.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(s1, float)), np.atleast_2d(np.asarray(s2, float))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("dimension mismatch between statistics")
    r1 = _psd_sqrt(s1)
    cross = np.trace(_psd_sqrt(r1 @ s2 @ r1))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * cross)
    if value < 0:
        log.info("fid: clamped small negative value %.3e to 0", value)
        value = 0.0
    return value


def fid_from_features(x, y) -> float:
    return fid(*gaussian_stats(x), *gaussian_stats(y))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("each set needs at least 2 samples")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid(x, y, n_subsets: int = 100, subset_size: int = 100, seed: int = 0) -> tuple[float, float]:
    """Mean and std of the unbiased polynomial-kernel MMD over random subsets."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("each set needs at least 2 samples")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature dimensions differ")
    size = min(len(x), len(y), subset_size)
    rng = np.random.default_rng(seed)
    vals = [
        mmd2_unbiased(x[rng.choice(len(x), size, replace=False)], y[rng.choice(len(y), size, replace=False)])
        for _ in range(n_subsets)
    ]
    return float(np.mean(vals)), float(np.std(vals))


def inception_score(probs, splits: int = 1) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))``, mean and std over ``splits`` chunks.

    Rows beyond ``splits * (n // splits)`` are dropped.
    """
    p = np.asarray(probs, np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("probs must be a non-empty (n, C) matrix")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1)) > 1e-6:
        raise ValueError("rows must be probability vectors")
    if not 1 <= splits <= len(p):
        raise ValueError("splits must be in [1, n]")
    chunk = len(p) // splits
    scores = []
    for i in range(splits):
        part = p[i * chunk:(i + 1) * chunk]
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))
