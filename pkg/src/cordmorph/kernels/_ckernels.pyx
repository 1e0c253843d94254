# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def nearest_distances(src, dst):
    """Euclidean distance from every row of ``src`` to its nearest row of ``dst``.

    Exact: ``dst`` is swept in x-sorted order and a candidate is abandoned
    only once its x gap alone exceeds the best distance found so far.
    """
    cdef double[:, ::1] a = np.ascontiguousarray(src, dtype=np.float64)
    b_arr = np.ascontiguousarray(dst, dtype=np.float64)
    if b_arr.shape[0] == 0:
        raise ValueError("destination point set is empty")
    order = np.argsort(b_arr[:, 0], kind="stable")
    cdef double[:, ::1] b = np.ascontiguousarray(b_arr[order])
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, lo, hi, mid
    cdef double ax, ay, az, dx, dy, dz, d2, best
    for i in range(n):
        ax = a[i, 0]
        ay = a[i, 1]
        az = a[i, 2]
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) >> 1
            if b[mid, 0] < ax:
                lo = mid + 1
            else:
                hi = mid
        best = INFINITY
        j = lo
        while j < m:
            dx = ax - b[j, 0]
            if dx * dx > best:
                break
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
            j += 1
        j = lo - 1
        while j >= 0:
            dx = ax - b[j, 0]
            if dx * dx > best:
                break
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
            j -= 1
        out[i] = sqrt(best)
    return out_arr


cdef inline long long _cross(long long ox, long long oy, long long ax, long long ay,
                             long long bx, long long by) nogil:
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


cdef inline long long _floor_div(long long p, long long q) nogil:
    # q > 0
    cdef long long r = p // q
    if (p % q != 0) and (p < 0):
        r -= 1
    return r


cdef inline long long _gcd(long long a, long long b) nogil:
    if a < 0:
        a = -a
    if b < 0:
        b = -b
    while b:
        a, b = b, a % b
    return a


def hull_lattice_count(ii, jj):
    """Number of integer points inside or on the convex hull of the points (ii, jj).

    Exact integer arithmetic: monotone-chain hull, then a column sweep
    between the lower and upper hull chains.
    """
    pts_arr = np.unique(np.column_stack((np.asarray(ii, dtype=np.int64),
                                         np.asarray(jj, dtype=np.int64))), axis=0)
    cdef long long[:, ::1] p = np.ascontiguousarray(pts_arr)
    cdef Py_ssize_t n = p.shape[0], i, k = 0, lower_k, e
    if n == 0:
        return 0
    if n == 1:
        return 1
    hull_arr = np.empty((2 * n, 2), dtype=np.int64)
    cdef long long[:, ::1] h = hull_arr
    for i in range(n):
        while k >= 2 and _cross(h[k - 2, 0], h[k - 2, 1], h[k - 1, 0], h[k - 1, 1],
                                p[i, 0], p[i, 1]) <= 0:
            k -= 1
        h[k, 0] = p[i, 0]
        h[k, 1] = p[i, 1]
        k += 1
    lower_k = k + 1
    for i in range(n - 2, -1, -1):
        while k >= lower_k and _cross(h[k - 2, 0], h[k - 2, 1], h[k - 1, 0], h[k - 1, 1],
                                      p[i, 0], p[i, 1]) <= 0:
            k -= 1
        h[k, 0] = p[i, 0]
        h[k, 1] = p[i, 1]
        k += 1
    k -= 1  # last vertex repeats the first
    if k == 2:
        return int(_gcd(h[1, 0] - h[0, 0], h[1, 1] - h[0, 1]) + 1)

    cdef long long xmin = p[0, 0], xmax = p[n - 1, 0], x, ylo, yhi, ax, ay, bx, by, dx, v
    cdef long long total = 0
    for x in range(xmin, xmax + 1):
        ylo = -(1LL << 62)
        yhi = 1LL << 62
        for e in range(k):
            ax = h[e, 0]
            ay = h[e, 1]
            bx = h[(e + 1) % k, 0]
            by = h[(e + 1) % k, 1]
            if bx > ax and ax <= x <= bx:  # lower chain (counter-clockwise order)
                dx = bx - ax
                v = -_floor_div(-(ay * dx + (x - ax) * (by - ay)), dx)
                if v > ylo:
                    ylo = v
            elif bx < ax and bx <= x <= ax:  # upper chain
                dx = ax - bx
                v = _floor_div(by * dx + (x - bx) * (ay - by), dx)
                if v < yhi:
                    yhi = v
        if yhi >= ylo:
            total += yhi - ylo + 1
    return int(total)


def dilate6(mask):
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] o = out_arr
    cdef Py_ssize_t i, j, k
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if m[i, j, k]:
                    o[i, j, k] = 1
                    if i > 0:
                        o[i - 1, j, k] = 1
                    if i < nx - 1:
                        o[i + 1, j, k] = 1
                    if j > 0:
                        o[i, j - 1, k] = 1
                    if j < ny - 1:
                        o[i, j + 1, k] = 1
                    if k > 0:
                        o[i, j, k - 1] = 1
                    if k < nz - 1:
                        o[i, j, k + 1] = 1
    return out_arr


def erode6(mask):
    """6-connected erosion; neighbours outside the grid count as background."""
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] o = out_arr
    cdef Py_ssize_t i, j, k
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                if (m[i, j, k] and m[i - 1, j, k] and m[i + 1, j, k]
                        and m[i, j - 1, k] and m[i, j + 1, k]
                        and m[i, j, k - 1] and m[i, j, k + 1]):
                    o[i, j, k] = 1
    return out_arr
