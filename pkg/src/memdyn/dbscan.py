"""DBSCAN over points in the plane."""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1


def dbscan(points, eps: float, min_pts: int, ids=None) -> np.ndarray:
    """Cluster labels 0..k-1 per point, NOISE for outliers.

    A point's neighbourhood is every point within ``eps`` (itself included);
    it is a core point when that neighbourhood has at least ``min_pts``
    members. Clusters are grown from unvisited core points in ``ids`` order
    (row order by default), so a border point reachable from two clusters
    joins the lower-numbered one and relabelling is permutation invariant.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    rank = np.arange(n) if ids is None else np.argsort(np.argsort(ids, kind="stable"))
    neighbours = cKDTree(pts).query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in np.argsort(rank):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in sorted(neighbours[p], key=rank.__getitem__):
                if labels[q] == NOISE:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    queue.append(q)
        cluster += 1
    return labels


def n_clusters(labels) -> int:
    labels = np.asarray(labels)
    return int(len(np.unique(labels[labels != NOISE])))
