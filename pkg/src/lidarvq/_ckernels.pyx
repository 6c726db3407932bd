# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Arithmetic mirrors ``_pykernels`` operation for operation
so both backends return bit-identical results."""

import numpy as np

from libc.math cimport INFINITY, fabs, floor

cdef double _TINY = 1e-12


def raycast_ranges(const double[:, ::1] dirs, double ground_z0, double ground_slope,
                   const double[:, ::1] centers, const double[:, ::1] half,
                   const double[::1] cos_yaw, const double[::1] sin_yaw,
                   double max_range):
    cdef Py_ssize_t n_rays = dirs.shape[0]
    cdef Py_ssize_t n_boxes = centers.shape[0]
    out = np.full(n_rays, INFINITY, dtype=np.float64)
    cdef double[::1] ranges = out
    cdef Py_ssize_t r, b, a
    cdef double dx, dy, dz, denom, t_ground, best
    cdef double c, s, o[3]
    cdef double d[3]
    cdef double h[3]
    cdef double t_near, t_far, t1, t2, tmp
    cdef bint miss

    for r in range(n_rays):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        best = INFINITY

        denom = dz - ground_slope * dx
        if fabs(denom) > _TINY:
            t_ground = ground_z0 / denom
            if t_ground > 0.0 and t_ground <= max_range:
                best = t_ground

        for b in range(n_boxes):
            c = cos_yaw[b]
            s = sin_yaw[b]
            o[0] = -(c * centers[b, 0] + s * centers[b, 1])
            o[1] = s * centers[b, 0] - c * centers[b, 1]
            o[2] = -centers[b, 2]
            d[0] = c * dx + s * dy
            d[1] = c * dy - s * dx
            d[2] = dz
            h[0] = half[b, 0]
            h[1] = half[b, 1]
            h[2] = half[b, 2]
            t_near = -INFINITY
            t_far = INFINITY
            miss = False
            for a in range(3):
                if fabs(d[a]) < _TINY:
                    if fabs(o[a]) > h[a]:
                        miss = True
                else:
                    t1 = (-h[a] - o[a]) / d[a]
                    t2 = (h[a] - o[a]) / d[a]
                    if t1 > t2:
                        tmp = t1
                        t1 = t2
                        t2 = tmp
                    if t1 > t_near:
                        t_near = t1
                    if t2 < t_far:
                        t_far = t2
            if miss or t_near > t_far or t_near <= 0.0 or t_near > max_range:
                continue
            # box wins exact ties with the ground
            if t_near <= best:
                best = t_near
        ranges[r] = best
    return out


def nearest_codes(const double[:, ::1] z, const double[:, ::1] codes):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t k_count = codes.shape[0]
    cdef Py_ssize_t dim = z.shape[1]
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, k, j
    cdef double acc, diff, best
    cdef long long best_k
    for i in range(n):
        best = INFINITY
        best_k = 0
        for k in range(k_count):
            acc = 0.0
            for j in range(dim):
                diff = z[i, j] - codes[k, j]
                acc = acc + diff * diff
            if acc < best:
                best = acc
                best_k = k
        idx[i] = best_k
        dist[i] = best
    return idx_arr, dist_arr


def voxel_occupancy(const double[:, ::1] points, double x_min, double y_min, double z_min,
                    double vx, double vy, double vz, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz):
    grid_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] grid = grid_arr
    cdef Py_ssize_t p, i, j, k
    cdef double fi, fj, fk
    for p in range(points.shape[0]):
        fi = floor((points[p, 0] - x_min) / vx)
        fj = floor((points[p, 1] - y_min) / vy)
        fk = floor((points[p, 2] - z_min) / vz)
        # written positively so NaN coordinates are rejected too
        if not (fi >= 0 and fj >= 0 and fk >= 0 and fi < nx and fj < ny and fk < nz):
            continue
        i = <Py_ssize_t>fi
        j = <Py_ssize_t>fj
        k = <Py_ssize_t>fk
        grid[i, j, k] = 1
    return grid_arr
