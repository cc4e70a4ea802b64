"""Pure-NumPy fallback for the ranking kernels.

Mirrors the compiled extension exactly; kept in lockstep by the parity tests.
"""

import numpy as np


def alpha_dcg_at_k(y_ranked, alpha, k):
    """Hard alpha-DCG of a ranked list.

    y_ranked: (n, m) binary label matrix in ranked order.  Gain of the item at
    position p (1-based) is sum_l y[p,l] * (1-alpha)^cov_l / log2(1+p), where
    cov_l counts how often category l appeared at earlier positions.
    """
    y = np.asarray(y_ranked, dtype=np.float64)
    n, m = y.shape
    cov = np.zeros(m)
    total = 0.0
    for p in range(min(k, n)):
        gains = y[p] * (1.0 - alpha) ** cov
        total += gains.sum() / np.log2(2.0 + p)
        cov += y[p]
    return float(total)


def ideal_alpha_dcg_at_k(y, alpha, k):
    """Greedy-ideal alpha-DCG: pick the marginal-gain maximizer per position.

    Ties break toward the smallest item index, which makes the value
    deterministic for equal inputs.
    """
    y = np.asarray(y, dtype=np.float64)
    n, m = y.shape
    cov = np.zeros(m)
    remaining = np.ones(n, dtype=bool)
    total = 0.0
    for p in range(min(k, n)):
        gains = (y * (1.0 - alpha) ** cov).sum(axis=1)
        gains[~remaining] = -np.inf
        best = int(np.argmax(gains))
        total += gains[best] / np.log2(2.0 + p)
        cov += y[best]
        remaining[best] = False
    return float(total)


def jaccard_matrix(y):
    """Pairwise Jaccard similarity of category sets; empty sets give 0."""
    y = np.asarray(y, dtype=np.float64)
    inter = y @ y.T
    sizes = y.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
    return sim


def mmr_select(rel, y, lam, k):
    """Greedy maximal-marginal-relevance selection.

    Maximizes lam*rel(i) - (1-lam)*max_{j selected} sim(i, j) with sim the
    Jaccard similarity of category sets.  Ties break by relevance, then by
    the smaller position index.  Returns the k selected positions in order.
    """
    rel = np.asarray(rel, dtype=np.float64)
    n = rel.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds candidate count {n}")
    sim = jaccard_matrix(y)
    max_sim = np.zeros(n)
    remaining = np.ones(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for p in range(k):
        score = lam * rel - (1.0 - lam) * max_sim
        best = -1
        for i in range(n):
            if not remaining[i]:
                continue
            if best < 0 or score[i] > score[best] + 1e-12 or (
                abs(score[i] - score[best]) <= 1e-12 and rel[i] > rel[best] + 1e-12
            ):
                best = i
        out[p] = best
        remaining[best] = False
        np.maximum(max_sim, sim[best], out=max_sim)
    return out
