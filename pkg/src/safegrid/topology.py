"""Directed graph topology for grid sensors: neighborhoods, coordinates, weights."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GraphTopology:
    """Node graph with self-inclusive neighborhoods and planar coordinates (km).

    Invariants checked at construction: every neighborhood contains the node's
    own index exactly once, all neighbor indices are in range, and coordinates
    are finite.
    """

    node_count: int
    neighborhoods: tuple = field(repr=False)
    coordinates: np.ndarray = field(repr=False)
    weights: tuple = field(repr=False, default=None)

    def __post_init__(self):
        n = self.node_count
        if n <= 0:
            raise ValueError("node_count must be positive")
        if len(self.neighborhoods) != n:
            raise ValueError("one neighborhood required per node")
        coords = np.asarray(self.coordinates, dtype=np.float64)
        if coords.shape != (n, 2) or not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite with shape (n, 2)")
        object.__setattr__(self, "coordinates", coords)
        nbhs = []
        for i, nbrs in enumerate(self.neighborhoods):
            arr = np.asarray(nbrs, dtype=np.int64)
            if np.count_nonzero(arr == i) != 1:
                raise ValueError(f"neighborhood of node {i} must contain it exactly once")
            if arr.min() < 0 or arr.max() >= n:
                raise ValueError(f"neighbor index out of range for node {i}")
            nbhs.append(arr)
        object.__setattr__(self, "neighborhoods", tuple(nbhs))
        if self.weights is not None:
            wts = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
            for i, (w, nb) in enumerate(zip(wts, nbhs)):
                if w.shape != nb.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
                    raise ValueError(f"invalid adjacency weights for node {i}")
            object.__setattr__(self, "weights", wts)

    def pairwise_distances(self):
        """Euclidean distance matrix (km) between node coordinates."""
        diff = self.coordinates[:, None, :] - self.coordinates[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))

    def hop_neighborhoods(self, hops):
        """Per-node arrays of all nodes within ``hops`` edges (self included)."""
        if hops < 0:
            raise ValueError("hops must be nonnegative")
        balls = []
        for start in range(self.node_count):
            seen = {start}
            frontier = [start]
            for _ in range(hops):
                nxt = []
                for u in frontier:
                    for v in self.neighborhoods[u]:
                        v = int(v)
                        if v not in seen:
                            seen.add(v)
                            nxt.append(v)
                frontier = nxt
            balls.append(np.array(sorted(seen), dtype=np.int64))
        return balls


def grid_topology(rows, cols, spacing_km=1.0, node_count=None):
    """4-neighbor grid graph with self loops, row-major node order.

    ``node_count`` truncates to the first that many nodes (adjacency restricted
    accordingly), which supports non-rectangular sensor counts.
    """
    total = rows * cols
    n = total if node_count is None else int(node_count)
    if not 0 < n <= total:
        raise ValueError("node_count must be in (0, rows*cols]")
    coords = np.empty((n, 2), dtype=np.float64)
    neighborhoods = []
    for idx in range(n):
        r, c = divmod(idx, cols)
        coords[idx] = (c * spacing_km, r * spacing_km)
        nbrs = [idx]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            j = rr * cols + cc
            if 0 <= rr < rows and 0 <= cc < cols and j < n:
                nbrs.append(j)
        neighborhoods.append(np.array(sorted(nbrs), dtype=np.int64))
    return GraphTopology(node_count=n, neighborhoods=tuple(neighborhoods), coordinates=coords)
