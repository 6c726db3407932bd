"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when
``LIDARVQ_PURE_PYTHON=1`` is set, the numpy fallback is used. Both backends
expose the same three functions and produce bit-identical results.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("LIDARVQ_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"
    else:
        BACKEND = "cython"


def available_backends():
    """Names of importable backends, fallback last."""
    names = []
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("cython")
    names.append("python")
    return names


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def raycast_ranges(dirs, ground_z0, ground_slope, centers, half, yaw, max_range):
    """Range of the nearest hit along each unit direction, ``inf`` for no hit."""
    yaw = _f64(yaw).reshape(-1)
    return _impl.raycast_ranges(
        _f64(dirs).reshape(-1, 3),
        float(ground_z0),
        float(ground_slope),
        _f64(centers).reshape(-1, 3),
        _f64(half).reshape(-1, 3),
        np.cos(yaw),
        np.sin(yaw),
        float(max_range),
    )


def nearest_codes(z, codes):
    """Index of the closest code per row (ties to the lowest index) and its squared distance."""
    return _impl.nearest_codes(_f64(z), _f64(codes))


def voxel_occupancy(points, mins, sizes, dims):
    return _impl.voxel_occupancy(
        _f64(points).reshape(-1, 3),
        float(mins[0]), float(mins[1]), float(mins[2]),
        float(sizes[0]), float(sizes[1]), float(sizes[2]),
        int(dims[0]), int(dims[1]), int(dims[2]),
    )
