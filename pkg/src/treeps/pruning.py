"""Sibling pruning by retrieved-passage overlap.

Search children of one parent are compared by the Jaccard similarity of
their retrieved passage-id sets. The candidates are clustered
agglomeratively on the distance ``1 - J`` and one medoid per cluster is kept.
Distances are handled as exact fractions inside the clustering so that tie
breaking never depends on floating-point rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import InvalidK

LINKAGES = ("average", "single", "complete")


@dataclass(frozen=True)
class PassageSet:
    node_id: Hashable
    passage_ids: frozenset[str]

    @classmethod
    def of(cls, node_id, ids: Iterable[str]) -> "PassageSet":
        return cls(node_id, frozenset(ids))


def _jaccard(a: frozenset, b: frozenset) -> Fraction:
    union = len(a | b)
    if union == 0:
        # both retrieved nothing: treat as the same intent
        return Fraction(1)
    return Fraction(len(a & b), union)


def jaccard_similarity(p_i: PassageSet, p_j: PassageSet) -> float:
    return float(_jaccard(p_i.passage_ids, p_j.passage_ids))


def distance_matrix(candidates: Sequence[PassageSet]) -> np.ndarray:
    """Symmetric matrix of ``1 - J`` with zero diagonal, in candidate order."""
    n = len(candidates)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = 1.0 - jaccard_similarity(candidates[i], candidates[j])
            out[i, j] = out[j, i] = d
    return out


def _exact_distances(candidates: Sequence[PassageSet]) -> list[list[Fraction]]:
    n = len(candidates)
    dist = [[Fraction(0)] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d = 1 - _jaccard(candidates[i].passage_ids, candidates[j].passage_ids)
            dist[i][j] = dist[j][i] = d
    return dist


def _linkage(a: list[int], b: list[int], dist, method: str) -> Fraction:
    pair = [dist[i][j] for i in a for j in b]
    if method == "average":
        return sum(pair, Fraction(0)) / len(pair)
    if method == "single":
        return min(pair)
    if method == "complete":
        return max(pair)
    raise ValueError(f"unknown linkage {method!r}; expected one of {LINKAGES}")


def agglomerative_clusters(
    candidates: Sequence[PassageSet], k: int, linkage: str = "average"
) -> list[list[int]]:
    """Partition candidate indices into exactly ``k`` clusters.

    Clusters are merged closest-first. Ties go to the pair whose members
    appear earliest in candidate order. The returned clusters are sorted by
    their first member and each cluster's indices are ascending.
    """
    n = len(candidates)
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must lie in [1, {n}]")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    dist = _exact_distances(candidates)
    clusters = [[i] for i in range(n)]
    while len(clusters) > k:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = _linkage(clusters[a], clusters[b], dist, linkage)
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        merged = sorted(clusters[a] + clusters[b])
        clusters = [c for i, c in enumerate(clusters) if i not in (a, b)]
        clusters.append(merged)
        clusters.sort(key=lambda c: c[0])
    return clusters


def _medoid(cluster: list[int], dist) -> int:
    if len(cluster) == 1:
        return cluster[0]
    # cluster is ascending, so the first minimum is the earliest in node order
    return min(cluster, key=lambda i: sum((dist[i][j] for j in cluster), Fraction(0)))


def select_representatives(
    candidates: Sequence[PassageSet],
    k: int,
    node_order: Sequence | None = None,
    linkage: str = "average",
) -> list:
    """Keep one medoid per cluster; returns node ids in node order."""
    if node_order is not None:
        rank = {nid: i for i, nid in enumerate(node_order)}
        candidates = sorted(candidates, key=lambda c: rank[c.node_id])
    clusters = agglomerative_clusters(candidates, k, linkage)
    dist = _exact_distances(candidates)
    picks = sorted(_medoid(c, dist) for c in clusters)
    return [candidates[i].node_id for i in picks]


def random_retain(candidates: Sequence, k: int, rng: np.random.Generator) -> list:
    """Uniform sample of ``k`` candidates without replacement, kept in input order.

    Accepts either PassageSet records or bare node ids.
    """
    n = len(candidates)
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must lie in [1, {n}]")
    idx = sorted(rng.choice(n, size=k, replace=False).tolist())
    return [getattr(candidates[i], "node_id", candidates[i]) for i in idx]
