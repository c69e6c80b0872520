"""Negative log-likelihood of a labelled assignment."""

from ..tensor import Tensor, gather_pairs
from .types import PairLabels

__all__ = ["assignment_loss"]


def assignment_loss(log_pbar: Tensor, labels: PairLabels) -> Tensor:
    """Sum of negative log assignment probabilities at the labelled cells.

    Matched pairs (i, j) index the inner block; day-A fruitlets with no
    day-B partner index the dustbin column, and day-B fruitlets with no
    day-A partner index the dustbin row.  An empty label set gives zero.

    Args:
        log_pbar: (M+1, N+1) log assignment matrix from Sinkhorn.
        labels: ground-truth matching over clustered fruitlets.
    """
    m1, n1 = log_pbar.shape
    m, n = m1 - 1, n1 - 1
    labels.validate_sizes(m, n)
    rows = [i for i, _ in labels.matches] + list(labels.unmatched_a) + [m] * len(labels.unmatched_b)
    cols = [j for _, j in labels.matches] + [n] * len(labels.unmatched_a) + list(labels.unmatched_b)
    picked = gather_pairs(log_pbar, rows, cols)
    return picked.sum() * Tensor(-1.0)
