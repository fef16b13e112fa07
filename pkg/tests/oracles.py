"""Independent reference implementations used by the tests."""
import numpy as np


def brute_force_top_k(losses: dict, k: int, highest: bool) -> set:
    """Winners by pairwise domination count: a beats b on loss, ties broken by smaller id."""
    ids = list(losses)
    vals = np.array([losses[i] for i in ids])
    if not highest:
        vals = -vals
    names = np.array(ids)
    beats = (vals[:, None] > vals[None, :]) | ((vals[:, None] == vals[None, :]) & (names[:, None] < names[None, :]))
    rank = beats.sum(axis=0)  # how many items beat each column item
    return {ids[j] for j in np.flatnonzero(rank < k)}


def pairwise_auc(pos, neg) -> float:
    """Probability a positive outscores a negative, ties counted half; O(n^2)."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))
