"""Point-cloud geometry: resampling, normalization and distances."""
from __future__ import annotations

import numpy as np


def _as_cloud(cloud) -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("point cloud is empty")
    return pts


def farthest_point_indices(cloud, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point selection, returned as indices into ``cloud``.

    Ties are broken by the lowest index. When ``k`` exceeds the number of
    points, the result is padded by repeating the last selected index.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    pts = _as_cloud(cloud)
    n = pts.shape[0]
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")

    m = min(k, n)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start_index
    dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, m):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=dist)
    if k > n:
        chosen = np.concatenate([chosen, np.full(k - n, chosen[-1], dtype=np.int64)])
    return chosen


def farthest_point_sample(cloud, k: int, start_index: int = 0) -> np.ndarray:
    """Resample ``cloud`` to exactly ``k`` points by farthest-point selection."""
    pts = np.asarray(cloud)
    idx = farthest_point_indices(pts, k, start_index)
    return pts[idx]


def normalize_cloud(cloud) -> tuple[np.ndarray, np.ndarray, float]:
    """Center a cloud and scale it into the unit ball.

    Returns ``(normalized, centroid, scale)`` with
    ``cloud == normalized * scale + centroid``. A cloud whose points all
    coincide gets scale 1.
    """
    pts = _as_cloud(cloud)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt(np.sum(centered**2, axis=1)).max())
    if scale <= 1e-12:
        scale = 1.0
    return centered / scale, centroid, scale


def denormalize_cloud(cloud, centroid, scale: float) -> np.ndarray:
    return np.asarray(cloud, dtype=np.float64) * scale + np.asarray(centroid, dtype=np.float64)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer_distance(a, b) -> float:
    """Symmetric squared Chamfer distance with mean reduction per direction."""
    pa = _as_cloud(a)
    pb = _as_cloud(b)
    d = pairwise_sq_dists(pa, pb)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
