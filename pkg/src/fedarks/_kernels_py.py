"""NumPy implementations of the hot kernels (fallback backend).

Semantics must match ``_kernels.pyx`` exactly; ``weighted_sum`` and the
ranking kernel are bit-identical across backends, the distance kernels agree
to rounding.
"""

import numpy as np


def weighted_sum(stacked, weights):
    out = np.zeros(stacked.shape[1], dtype=np.float64)
    for k in range(stacked.shape[0]):
        out += weights[k] * stacked[k]
    return out


def pairwise_sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def batch_hard_mine(dist, labels, margin):
    n = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not (pos_mask.any(axis=1).all() and neg_mask.any(axis=1).all()):
        raise ValueError("every anchor needs at least one positive and one negative")
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    rows = np.arange(n)
    losses = np.maximum(0.0, margin + dist[rows, pos] - dist[rows, neg])
    return losses, pos.astype(np.int64), neg.astype(np.int64)


def rank_queries(dist, q_ids, g_ids, q_cams, g_cams):
    """Per-query average precision and 0-based rank of the first true match.

    Same-identity same-camera gallery entries are dropped.  Queries without a
    valid match get ``ap = nan`` and ``first = -1``.
    """
    num_q = dist.shape[0]
    order = np.argsort(dist, axis=1, kind="stable")
    ap = np.full(num_q, np.nan)
    first = np.full(num_q, -1, dtype=np.int64)
    for q in range(num_q):
        idx = order[q]
        keep = ~((g_ids[idx] == q_ids[q]) & (g_cams[idx] == q_cams[q]))
        matches = g_ids[idx][keep] == q_ids[q]
        if not matches.any():
            continue
        hits = 0
        total = 0.0
        for r, m in enumerate(matches):
            if m:
                hits += 1
                total += hits / (r + 1)
                if hits == 1:
                    first[q] = r
        ap[q] = total / hits
    return ap, first
