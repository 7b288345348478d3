"""Exact spatial queries over 3-D point clouds.

Provides k-nearest-neighbour search (kd-tree accelerated, with a
brute-force reference scan) and farthest point sampling. Both knn
implementations return identical results, including ordering: neighbours
are sorted by squared Euclidean distance and ties broken by lower point
index. Squared distances are computed the same way everywhere
(``dx*dx + dy*dy + dz*dz`` in float64) so the two routes agree bit for
bit, not merely within a tolerance.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    """N points in 3-D, float64, one row per point."""

    points: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"point cloud must have shape (N, 3), got {p.shape}")
        if p.size and not np.isfinite(p).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NeighborIndex:
    """k-NN query result: for each of N query points, the indices of its k
    neighbours in the reference cloud (nearest first) and their squared
    distances. Both arrays are N x k."""

    indices: np.ndarray    # int64
    sq_dists: np.ndarray   # float64

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _sq_dist(q: np.ndarray, p: np.ndarray) -> float:
    dx = q[0] - p[0]
    dy = q[1] - p[1]
    dz = q[2] - p[2]
    return dx * dx + dy * dy + dz * dz


class KdTree:
    """Static kd-tree over a 3-D cloud with exact k-NN queries.

    Axes cycle x, y, z by depth; splits take the median point (ties by
    index, via a stable argsort on the coordinate). Leaves hold up to
    ``leaf_size`` points and are scanned linearly.
    """

    __slots__ = ("points", "leaf_size", "_nodes")

    def __init__(self, points: np.ndarray, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"KdTree expects (N, 3) points, got {self.points.shape}")
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.leaf_size = leaf_size
        # Nodes are tuples; leaves: ("leaf", idx_array), splits:
        # ("split", axis, threshold, mid_index, left, right).
        self._nodes = self._build(np.arange(len(self.points), dtype=np.int64), 0)

    def _build(self, idx: np.ndarray, depth: int):
        if idx.size <= self.leaf_size:
            return ("leaf", idx)
        axis = depth % 3
        order = idx[np.argsort(self.points[idx, axis], kind="stable")]
        mid = order.size // 2
        threshold = self.points[order[mid], axis]
        left = self._build(order[:mid], depth + 1)
        right = self._build(order[mid:], depth + 1)
        return ("split", axis, float(threshold), left, right)

    def query(self, q: np.ndarray, k: int, skip: int = -1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest points to `q`, optionally skipping index `skip`.

        Returns (indices, squared distances), nearest first, ties by lower
        index. Branches are pruned only when the splitting plane is
        strictly farther than the current worst candidate, so equidistant
        points across the plane are still found.
        """
        q = np.asarray(q, dtype=np.float64)
        # Max-heap via negated keys; candidate order (d2, idx) ascending
        # means the heap root is the current worst keeper.
        heap: list[tuple[float, int]] = []

        def consider(i: int):
            if i == skip:
                return
            d2 = _sq_dist(q, self.points[i])
            entry = (-d2, -i)
            if len(heap) < k:
                heapq.heappush(heap, entry)
            elif entry > heap[0]:
                heapq.heapreplace(heap, entry)

        def visit(node):
            if node[0] == "leaf":
                for i in node[1]:
                    consider(int(i))
                return
            _, axis, threshold, left, right = node
            delta = q[axis] - threshold
            near, far = (left, right) if delta < 0.0 else (right, left)
            visit(near)
            if len(heap) < k or delta * delta <= -heap[0][0]:
                visit(far)

        visit(self._nodes)
        found = sorted((-nd2, -ni) for nd2, ni in heap)
        idx = np.array([i for _, i in found], dtype=np.int64)
        d2 = np.array([d for d, _ in found], dtype=np.float64)
        return idx, d2


def brute_force_knn(query: PointCloud, reference: PointCloud, k: int,
                    include_self: bool = False) -> NeighborIndex:
    """Reference k-NN by full pairwise scan.

    Semantics match :func:`knn` exactly; this is the slow route kept as an
    independent check of the kd-tree.
    """
    _validate_knn_args(query, reference, k, include_self)
    same = query.points is reference.points
    n = len(query)
    indices = np.empty((n, k), dtype=np.int64)
    sq_dists = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        pairs = []
        for j in range(len(reference)):
            if same and not include_self and j == i:
                continue
            pairs.append((_sq_dist(query.points[i], reference.points[j]), j))
        pairs.sort()
        for c, (d2, j) in enumerate(pairs[:k]):
            indices[i, c] = j
            sq_dists[i, c] = d2
    return NeighborIndex(indices, sq_dists)


def knn(query: PointCloud, reference: PointCloud, k: int,
        include_self: bool = False, method: str = "kdtree") -> NeighborIndex:
    """k nearest neighbours of each query point within `reference`.

    When query and reference are the same cloud (same array object), each
    point's own index is excluded unless ``include_self`` is set. Results
    are ordered nearest first with ties broken by lower reference index.
    ``method`` picks "kdtree" (default) or "brute".
    """
    _validate_knn_args(query, reference, k, include_self)
    if method == "brute":
        return brute_force_knn(query, reference, k, include_self)
    if method != "kdtree":
        raise ValueError(f"unknown knn method {method!r}")
    same = query.points is reference.points
    tree = KdTree(reference.points)
    n = len(query)
    indices = np.empty((n, k), dtype=np.int64)
    sq_dists = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        skip = i if (same and not include_self) else -1
        idx, d2 = tree.query(query.points[i], k, skip=skip)
        indices[i] = idx
        sq_dists[i] = d2
    return NeighborIndex(indices, sq_dists)


def _validate_knn_args(query: PointCloud, reference: PointCloud, k: int,
                       include_self: bool) -> None:
    if k < 1:
        raise ValueError("k must be positive")
    available = len(reference)
    if query.points is reference.points and not include_self:
        available -= 1
    if k > available:
        raise ValueError(f"k={k} exceeds the {available} available reference points")


def fps(cloud: PointCloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Farthest point sampling: greedily pick `m` indices, each maximizing
    the minimum squared distance to the points already chosen.

    Ties go to the lowest index. The result starts with ``seed_index`` and
    is deterministic for fixed inputs.
    """
    n = len(cloud)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed index {seed_index} out of range")
    pts = cloud.points
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    # Minimum squared distance from each point to the chosen set; chosen
    # points are forced to -1 so argmax never revisits them.
    min_d2 = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    min_d2[seed_index] = -1.0
    for c in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[c] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return chosen
