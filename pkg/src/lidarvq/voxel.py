"""BEV occupancy grids: voxelization, inverse mapping and ground-plane histograms."""

from dataclasses import dataclass

import numpy as np

from . import kernels

HIST_BINS = 100
PATCH = 8


class GridError(ValueError):
    pass


def _cells(lo, hi, size, axis):
    extent = hi - lo
    if not (extent > 0 and size > 0):
        raise GridError(f"{axis}: empty extent or non-positive voxel size")
    n = round(extent / size)
    if n < 1 or abs(n * size - extent) > 1e-9 * max(1.0, abs(extent)):
        raise GridError(f"{axis}: extent {extent} is not a multiple of voxel size {size}")
    return n


@dataclass(frozen=True)
class GridConfig:
    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    z_min: float = -2.4
    z_max: float = 2.4
    vx: float = 0.4
    vy: float = 0.4
    vz: float = 0.3

    def __post_init__(self):
        h = _cells(self.x_min, self.x_max, self.vx, "x")
        w = _cells(self.y_min, self.y_max, self.vy, "y")
        _cells(self.z_min, self.z_max, self.vz, "z")
        if h % PATCH or w % PATCH:
            raise GridError(f"H={h} and W={w} must be divisible by {PATCH}")

    @classmethod
    def paper_scale(cls):
        return cls(0.0, 80.0, -40.0, 40.0, -3.0, 3.0, 0.15625, 0.15625, 0.15)

    @property
    def H(self):
        return _cells(self.x_min, self.x_max, self.vx, "x")

    @property
    def W(self):
        return _cells(self.y_min, self.y_max, self.vy, "y")

    @property
    def C(self):
        return _cells(self.z_min, self.z_max, self.vz, "z")

    @property
    def shape(self):
        return (self.H, self.W, self.C)

    @property
    def code_shape(self):
        return (self.H // PATCH, self.W // PATCH)

    def as_tuple(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max, self.vx, self.vy, self.vz)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    config: GridConfig
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.shape != self.config.shape:
            raise GridError(f"bits shape {bits.shape} does not match config {self.config.shape}")
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if bits.size and bits.max() > 1:
            raise GridError("occupancy bits must be 0 or 1")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.bits, other.bits)

    @property
    def n_occupied(self):
        return int(self.bits.sum())


@dataclass(frozen=True, eq=False)
class BevHistogram:
    bins: np.ndarray
    mode: str

    @property
    def total(self):
        return float(self.bins.sum())


def voxelize(cloud, cfg=GridConfig()):
    """Occupancy grid of a point cloud; half-open cells, out-of-region points dropped."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    bits = kernels.voxel_occupancy(cloud, (cfg.x_min, cfg.y_min, cfg.z_min), (cfg.vx, cfg.vy, cfg.vz), cfg.shape)
    return OccupancyGrid(cfg, bits)


def voxel_centers(cfg, index):
    index = np.asarray(index, dtype=np.float64).reshape(-1, 3)
    return np.stack(
        [
            cfg.x_min + (index[:, 0] + 0.5) * cfg.vx,
            cfg.y_min + (index[:, 1] + 0.5) * cfg.vy,
            cfg.z_min + (index[:, 2] + 0.5) * cfg.vz,
        ],
        axis=1,
    )


def devoxelize(grid):
    """One point at the center of every occupied voxel, row-major order."""
    return voxel_centers(grid.config, np.argwhere(grid.bits))


def iou(a, b):
    a = np.asarray(getattr(a, "bits", a), dtype=bool)
    b = np.asarray(getattr(b, "bits", b), dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _column_bins(n_cells):
    # bin of each cell center, in exact integer arithmetic
    i = np.arange(n_cells)
    return ((2 * i + 1) * HIST_BINS) // (2 * n_cells)


def bev_histogram(source, mode="occupancy", config=None):
    """100x100 ground-plane histogram over the grid's (x, y) extent.

    ``occupancy`` mode takes an OccupancyGrid and counts each occupied voxel
    once; ``points`` mode takes a point cloud plus its GridConfig and counts
    raw points.
    """
    if mode == "occupancy":
        if not isinstance(source, OccupancyGrid):
            raise TypeError("occupancy mode needs an OccupancyGrid")
        cfg = source.config
        per_column = source.bits.sum(axis=2, dtype=np.int64)
        rows = np.zeros((HIST_BINS, cfg.W), dtype=np.int64)
        np.add.at(rows, _column_bins(cfg.H), per_column)
        bins = np.zeros((HIST_BINS, HIST_BINS), dtype=np.int64)
        np.add.at(bins.T, _column_bins(cfg.W), rows.T)
        return BevHistogram(bins.astype(np.float64), "occupancy")
    if mode == "points":
        if config is None:
            if not isinstance(source, OccupancyGrid):
                raise TypeError("points mode needs the GridConfig of the cloud")
            config = source.config
            source = devoxelize(source)
        pts = np.asarray(source, dtype=np.float64).reshape(-1, 3)
        bx = np.floor((pts[:, 0] - config.x_min) * HIST_BINS / (config.x_max - config.x_min))
        by = np.floor((pts[:, 1] - config.y_min) * HIST_BINS / (config.y_max - config.y_min))
        keep = (bx >= 0) & (bx < HIST_BINS) & (by >= 0) & (by < HIST_BINS)
        bins = np.zeros((HIST_BINS, HIST_BINS), dtype=np.int64)
        np.add.at(bins, (bx[keep].astype(np.intp), by[keep].astype(np.intp)), 1)
        return BevHistogram(bins.astype(np.float64), "points")
    raise ValueError(f"unknown histogram mode {mode!r}")


def duplication_coefficients(real_hist, gen_hist):
    real = np.asarray(getattr(real_hist, "bins", real_hist), dtype=np.float64)
    gen = np.asarray(getattr(gen_hist, "bins", gen_hist), dtype=np.float64)
    if real.shape != gen.shape:
        raise ValueError("histograms differ in shape")
    out = np.zeros_like(real)
    np.divide(real, gen, out=out, where=gen > 0)
    return out


def duplication_counts(coeffs):
    """Copies emitted per voxel for each bin: round half up, at least one if the coefficient is positive."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    counts = np.floor(coeffs + 0.5).astype(np.int64)
    return np.where(coeffs > 0, np.maximum(counts, 1), 0)


def apply_duplication(grid, coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (HIST_BINS, HIST_BINS):
        raise ValueError(f"coefficients must be {HIST_BINS}x{HIST_BINS}")
    cfg = grid.config
    idx = np.argwhere(grid.bits)
    per_voxel = duplication_counts(coeffs)[_column_bins(cfg.H)[idx[:, 0]], _column_bins(cfg.W)[idx[:, 1]]]
    return voxel_centers(cfg, np.repeat(idx, per_voxel, axis=0))
