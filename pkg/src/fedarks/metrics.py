"""Re-identification retrieval metrics: distance matrix, CMC and mAP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

DEFAULT_MAX_RANK = 10


@dataclass
class EvalSet:
    query_features: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_features: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray


@dataclass
class EvalReport:
    mAP: float
    cmc: list[float]
    per_query_ap: list[float] = field(repr=False)
    dropped_queries: int = 0

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    def rank(self, k: int) -> float:
        return self.cmc[min(k, len(self.cmc)) - 1]

    def to_dict(self) -> dict:
        return asdict(self)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    r = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    return x / np.maximum(r, 1e-12)


def distance_matrix(query: np.ndarray, gallery: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Squared Euclidean distances between (L2-normalised) query and gallery rows."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimensions differ: {q.shape[1]} vs {g.shape[1]}")
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    return kernels.pairwise_sqdist(q, g)


def evaluate_distances(dist, q_ids, g_ids, q_cams, g_cams, max_rank: int = DEFAULT_MAX_RANK) -> EvalReport:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.size == 0:
        raise ValueError("evaluation needs a non-empty query and gallery")
    ap, first = kernels.rank_queries(
        dist, *(np.asarray(a, dtype=np.int64) for a in (q_ids, g_ids, q_cams, g_cams))
    )
    valid = first >= 0
    dropped = int(np.sum(~valid))
    max_rank = max(1, min(max_rank, dist.shape[1]))
    if not valid.any():
        return EvalReport(0.0, [0.0] * max_rank, [], dropped)
    firsts = first[valid]
    n = len(firsts)
    cmc = [float(np.sum(firsts < k)) / n for k in range(1, max_rank + 1)]
    per_query = [float(a) for a in ap[valid]]
    return EvalReport(float(np.mean(per_query)), cmc, per_query, dropped)


def evaluate(es: EvalSet, max_rank: int = DEFAULT_MAX_RANK) -> EvalReport:
    """Cross-camera retrieval evaluation.

    Gallery entries sharing both identity and camera with the query are
    excluded; ties in distance are broken by ascending gallery index.  AP is
    the mean precision at the rank of each true match.  Queries left with no
    true match are dropped and counted.
    """
    if len(es.query_features) == 0 or len(es.gallery_features) == 0:
        raise ValueError("evaluation needs a non-empty query and gallery")
    dist = distance_matrix(es.query_features, es.gallery_features)
    return evaluate_distances(dist, es.query_ids, es.gallery_ids, es.query_cams, es.gallery_cams, max_rank)


def savg(reports: Sequence[EvalReport]) -> tuple[float, float]:
    """Mean mAP and mean Rank-1 across transfer tasks."""
    if not reports:
        raise ValueError("savg of no reports")
    return (float(np.mean([r.mAP for r in reports])), float(np.mean([r.rank1 for r in reports])))
