"""Pure numpy versions of the compiled kernels.

Every function here performs the same floating-point operations, in the same
order, as its counterpart in ``_ckernels.pyx``; the test-suite checks the two
backends agree bit for bit.
"""

import numpy as np

_TINY = 1e-12


def raycast_ranges(dirs, ground_z0, ground_slope, centers, half, cos_yaw, sin_yaw, max_range):
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    best = np.full(dirs.shape[0], np.inf)

    denom = dz - ground_slope * dx
    usable = np.abs(denom) > _TINY
    t_ground = np.where(usable, ground_z0 / np.where(usable, denom, 1.0), np.inf)
    ok = usable & (t_ground > 0.0) & (t_ground <= max_range)
    best = np.where(ok, t_ground, best)

    for b in range(centers.shape[0]):
        c, s = cos_yaw[b], sin_yaw[b]
        cx, cy, cz = centers[b]
        origin = (-(c * cx + s * cy), s * cx - c * cy, -cz)
        direction = (c * dx + s * dy, c * dy - s * dx, dz)
        t_near = np.full_like(dx, -np.inf)
        t_far = np.full_like(dx, np.inf)
        miss = np.zeros(dx.shape, dtype=bool)
        for a in range(3):
            d = direction[a]
            o = origin[a]
            h = half[b, a]
            flat = np.abs(d) < _TINY
            miss |= flat & (abs(o) > h)
            safe = np.where(flat, 1.0, d)
            t1 = (-h - o) / safe
            t2 = (h - o) / safe
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            t_near = np.where(flat, t_near, np.maximum(t_near, lo))
            t_far = np.where(flat, t_far, np.minimum(t_far, hi))
        hit = ~miss & (t_near <= t_far) & (t_near > 0.0) & (t_near <= max_range)
        # box wins exact ties with the ground
        best = np.where(hit & (t_near <= best), t_near, best)
    return best


def nearest_codes(z, codes):
    n, dim = z.shape
    dist = np.zeros((n, codes.shape[0]))
    # sequential accumulation over the feature axis, matching the compiled loop
    for j in range(dim):
        diff = z[:, j, None] - codes[None, :, j]
        dist += diff * diff
    idx = np.argmin(dist, axis=1).astype(np.int64)
    return idx, dist[np.arange(n), idx]


def voxel_occupancy(points, x_min, y_min, z_min, vx, vy, vz, nx, ny, nz):
    grid = np.zeros((nx, ny, nz), dtype=np.uint8)
    fi = np.floor((points[:, 0] - x_min) / vx)
    fj = np.floor((points[:, 1] - y_min) / vy)
    fk = np.floor((points[:, 2] - z_min) / vz)
    keep = (fi >= 0) & (fj >= 0) & (fk >= 0) & (fi < nx) & (fj < ny) & (fk < nz)
    grid[fi[keep].astype(np.intp), fj[keep].astype(np.intp), fk[keep].astype(np.intp)] = 1
    return grid
