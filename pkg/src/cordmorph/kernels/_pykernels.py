"""Pure-Python/NumPy implementations of the hot kernels."""

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_SIX = ndimage.generate_binary_structure(3, 1)


def nearest_distances(src, dst):
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(dst) == 0:
        raise ValueError("destination point set is empty")
    if len(src) == 0:
        return np.empty(0, dtype=np.float64)
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _hull(points):
    pts = sorted(points)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def hull_lattice_count(ii, jj):
    pts = set(zip(np.asarray(ii, dtype=np.int64).tolist(), np.asarray(jj, dtype=np.int64).tolist()))
    if len(pts) <= 1:
        return len(pts)
    hull = _hull(pts)
    if len(hull) == 2:
        (ax, ay), (bx, by) = hull
        return math.gcd(bx - ax, by - ay) + 1
    edges = list(zip(hull, hull[1:] + hull[:1]))
    lower = [(a, b) for a, b in edges if b[0] > a[0]]
    upper = [(b, a) for a, b in edges if b[0] < a[0]]
    total = 0
    for x in range(min(p[0] for p in hull), max(p[0] for p in hull) + 1):
        ylo = max(-((-(ay * (bx - ax) + (x - ax) * (by - ay))) // (bx - ax))
                  for (ax, ay), (bx, by) in lower if ax <= x <= bx)
        yhi = min((ay * (bx - ax) + (x - ax) * (by - ay)) // (bx - ax)
                  for (ax, ay), (bx, by) in upper if ax <= x <= bx)
        total += max(0, yhi - ylo + 1)
    return total


def dilate6(mask):
    return ndimage.binary_dilation(np.asarray(mask, dtype=bool), structure=_SIX).astype(np.uint8)


def erode6(mask):
    return ndimage.binary_erosion(
        np.asarray(mask, dtype=bool), structure=_SIX, border_value=0
    ).astype(np.uint8)
