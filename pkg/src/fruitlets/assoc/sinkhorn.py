"""Differentiable optimal-transport assignment and match extraction.

Scores are augmented with a dustbin row and column so unmatched nodes have
somewhere to go, then balanced by Sinkhorn iterations in log space.  The
target marginals are (1, ..., 1, N) over rows and (1, ..., 1, M) over
columns: each real node carries unit mass, each dustbin absorbs up to the
other side's node count.
"""

import numpy as np

from ..tensor import Tensor, logsumexp
from .types import MatchSet

__all__ = ["augment_scores", "sinkhorn_log", "extract_matches"]


def augment_scores(scores: Tensor, dustbin: Tensor) -> Tensor:
    """Append the learnable dustbin score as a last row and column."""
    from ..tensor import concat

    m, n = scores.shape
    z = dustbin.reshape((1, 1))
    right = z * Tensor(np.ones((m, 1)))
    bottom = z * Tensor(np.ones((1, n + 1)))
    return concat([concat([scores, right], axis=1), bottom], axis=0)


def sinkhorn_log(sbar: Tensor, iters: int) -> Tensor:
    """Log-domain Sinkhorn normalisation of an augmented score matrix.

    Args:
        sbar: (M+1, N+1) augmented scores; must be finite.
        iters: number of full row+column sweeps, >= 1.

    Returns:
        log of the assignment matrix, same shape, differentiable through
        every sweep.
    """
    if not isinstance(sbar, Tensor):
        sbar = Tensor(sbar)
    if sbar.ndim != 2 or sbar.shape[0] < 2 or sbar.shape[1] < 2:
        raise ValueError(f"augmented scores must be (M+1, N+1) with M, N >= 1, got {sbar.shape}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    sbar.check_finite("sinkhorn input")

    m1, n1 = sbar.shape
    m, n = m1 - 1, n1 - 1
    log_mu = np.zeros((m1, 1))
    log_mu[m, 0] = np.log(n)
    log_nu = np.zeros((1, n1))
    log_nu[0, n] = np.log(m)
    mu = Tensor(log_mu)
    nu = Tensor(log_nu)

    u = Tensor(np.zeros((m1, 1)))
    v = Tensor(np.zeros((1, n1)))
    for _ in range(iters):
        u = mu - logsumexp(sbar + v, axis=1, keepdims=True)
        v = nu - logsumexp(sbar + u, axis=0, keepdims=True)
    return sbar + u + v


def extract_matches(
    p: np.ndarray,
    threshold: float,
    is_cluster_a,
    is_cluster_b,
) -> MatchSet:
    """Mutual-max matches above a probability threshold.

    (i, j) is kept when p[i, j] is both the maximum of row i and of
    column j (ties resolve to the lowest index, so the pairing stays
    one-to-one) and strictly exceeds ``threshold``.  Pairs touching
    non-cluster nodes (the tag, intruders) are discarded, and remaining
    clustered fruitlets are reported unmatched.

    Args:
        p: (M, N) assignment probabilities, dustbins already stripped.
        threshold: minimum probability for a usable match.
        is_cluster_a: per-node flags for day A, length M.
        is_cluster_b: per-node flags for day B, length N.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got {p.shape}")
    m, n = p.shape
    is_cluster_a = np.asarray(is_cluster_a, dtype=bool)
    is_cluster_b = np.asarray(is_cluster_b, dtype=bool)
    if is_cluster_a.shape != (m,) or is_cluster_b.shape != (n,):
        raise ValueError(
            f"cluster flags must match matrix sides {p.shape}, got {is_cluster_a.shape} and {is_cluster_b.shape}"
        )

    row_best = p.argmax(axis=1)  # first max wins: lexicographic tie-break
    col_best = p.argmax(axis=0)
    pairs = []
    matched_a = set()
    matched_b = set()
    for i in range(m):
        j = int(row_best[i])
        if int(col_best[j]) != i or p[i, j] <= threshold:
            continue
        if not (is_cluster_a[i] and is_cluster_b[j]):
            continue
        pairs.append((i, j, float(p[i, j])))
        matched_a.add(i)
        matched_b.add(j)
    unmatched_a = tuple(i for i in range(m) if is_cluster_a[i] and i not in matched_a)
    unmatched_b = tuple(j for j in range(n) if is_cluster_b[j] and j not in matched_b)
    return MatchSet(pairs=tuple(pairs), unmatched_a=unmatched_a, unmatched_b=unmatched_b)
