"""Flat-kernel mean shift over instance embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClusterResult:
    assignment: np.ndarray  # (N,) dense cluster index
    modes: np.ndarray  # (K, d)
    bandwidth: float

    @property
    def n_clusters(self) -> int:
        return len(self.modes)


def sq_dist(a, b):
    """Pairwise squared Euclidean distances, clipped at 0."""
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def _shift(seeds, X, bandwidth, max_iters, tol):
    pos = seeds.copy()
    active = np.ones(len(pos), dtype=bool)
    sq_bw = bandwidth * bandwidth
    for _ in range(max_iters):
        if not active.any():
            break
        cur = pos[active]
        inside = (sq_dist(cur, X) <= sq_bw).astype(np.float64)
        counts = inside.sum(axis=1)
        # a bin seed may sit in empty space; it stays put
        has = counts > 0
        new = cur.copy()
        new[has] = inside[has] @ X / counts[has, None]
        moved = np.linalg.norm(new - cur, axis=1)
        pos[active] = new
        idx = np.flatnonzero(active)
        active[idx[moved < tol]] = False
    return pos


def _bin_seeds(X, bin_size):
    keys = np.floor(X / bin_size).astype(np.int64)
    uniq = np.unique(keys, axis=0)
    return (uniq + 0.5) * bin_size


def mean_shift(
    embeddings,
    bandwidth: float = 1.5,
    max_iters: int = 300,
    tol: float = 1e-4,
    merge_radius: float | None = None,
    bin_seeding: bool = False,
) -> ClusterResult:
    """Cluster ``embeddings`` (N, d).

    Every point (or, with ``bin_seeding``, every occupied grid cell of side
    ``bandwidth``) climbs to a mode by repeatedly moving to the mean of the
    embeddings within ``bandwidth``. Modes closer than ``merge_radius``
    (default ``bandwidth / 2``) are merged, keeping the one with the larger
    neighbourhood; clusters are numbered by decreasing support.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("embeddings must be a non-empty (N, d) array")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    if not np.all(np.isfinite(X)):
        raise ValueError("embeddings contain non-finite values")
    radius = bandwidth / 2 if merge_radius is None else merge_radius

    seeds = _bin_seeds(X, bandwidth) if bin_seeding else X
    converged = _shift(seeds, X, bandwidth, max_iters, tol)

    support = (sq_dist(converged, X) <= bandwidth * bandwidth).sum(axis=1)
    order = np.lexsort((*converged.T[::-1], -support))
    kept: list[np.ndarray] = []
    for i in order:
        if support[i] == 0:
            continue
        if all(np.linalg.norm(converged[i] - m) >= radius for m in kept):
            kept.append(converged[i])
    modes = np.array(kept)

    # bin seeds do not correspond to points, so points go to their nearest mode
    targets = X if bin_seeding else converged
    assignment = np.argmin(sq_dist(targets, modes), axis=1)
    # keep indices dense when a mode ends up with no points
    used = np.unique(assignment)
    remap = np.full(len(modes), -1)
    remap[used] = np.arange(len(used))
    return ClusterResult(remap[assignment], modes[used], float(bandwidth))
