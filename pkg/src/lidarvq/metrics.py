"""Set-level generation metrics on 100x100 BEV histograms: JSD and MMD."""

from dataclasses import dataclass

import numpy as np

from .voxel import HIST_BINS, OccupancyGrid, apply_duplication, bev_histogram, duplication_coefficients

MODES = ("occupancy", "duplicated")


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HistogramSet:
    hists: np.ndarray  # (N, 100, 100)
    mode: str

    def __post_init__(self):
        h = np.asarray(self.hists, dtype=np.float64)
        if h.ndim != 3 or h.shape[1:] != (HIST_BINS, HIST_BINS):
            raise MetricError(f"expected (N, {HIST_BINS}, {HIST_BINS}) histograms, got {h.shape}")
        if not np.isfinite(h).all() or (h < 0).any():
            raise MetricError("histogram counts must be finite and nonnegative")
        object.__setattr__(self, "hists", h)

    @classmethod
    def from_histograms(cls, hists, mode=None):
        hists = list(hists)
        if mode is None:
            mode = hists[0].mode if hists and hasattr(hists[0], "mode") else "occupancy"
        return cls(np.stack([np.asarray(getattr(h, "bins", h)) for h in hists]) if hists
                   else np.zeros((0, HIST_BINS, HIST_BINS)), mode)

    def __len__(self):
        return len(self.hists)

    def aggregate(self):
        return self.hists.sum(axis=0)


@dataclass(frozen=True)
class MetricReport:
    mmd: float
    jsd: float
    mode: str
    bandwidth: float
    n_real: int
    n_gen: int

    def line(self):
        return f"mmd={self.mmd!r} jsd={self.jsd!r} mode={self.mode} bandwidth={self.bandwidth!r}"

    def text(self):
        return (f"real samples: {self.n_real}\ngenerated samples: {self.n_gen}\nmode: {self.mode}\n"
                f"MMD (BEV): {self.mmd:.6e}\nJSD (BEV): {self.jsd:.6f}\nbandwidth: {self.bandwidth:.6e}\n"
                + self.line() + "\n")


def _as_set(x):
    if isinstance(x, HistogramSet):
        return x
    return HistogramSet.from_histograms(x)


def _kl2(p, m):
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def jsd(set_a, set_b):
    """Base-2 Jensen-Shannon divergence between the two aggregate histograms."""
    a, b = _as_set(set_a), _as_set(set_b)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("jsd needs nonempty sets")
    p, q = a.aggregate().ravel(), b.aggregate().ravel()
    if p.sum() <= 0 or q.sum() <= 0:
        raise MetricError("all-zero aggregate histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    # the average of the two directions keeps jsd(a, b) == jsd(b, a) bit for bit
    d = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return min(1.0, max(0.0, d))


def _normalized(s):
    flat = s.hists.reshape(len(s), -1)
    totals = flat.sum(axis=1, keepdims=True)
    out = np.zeros_like(flat)
    np.divide(flat, totals, out=out, where=totals > 0)
    return out


def _sq_dists(x, y, block=16):
    # exact differences, fixed row-block order
    out = np.empty((len(x), len(y)))
    for i in range(0, len(x), block):
        d = x[i:i + block, None, :] - y[None, :, :]
        out[i:i + block] = np.einsum("ijk,ijk->ij", d, d)
    return out


def median_bandwidth(x):
    """Median pairwise Euclidean distance among distinct rows; 1.0 when that median is 0."""
    n = len(x)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(_sq_dists(x, x)[iu]))) if n > 1 else 0.0
    return med if med > 0 else 1.0


def mmd_raw(set_a, set_b, bandwidth="auto"):
    """Unbiased squared MMD before clamping, and the bandwidth used."""
    a, b = _as_set(set_a), _as_set(set_b)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("the unbiased MMD estimator needs at least two samples per set")
    x, y = _normalized(a), _normalized(b)
    if bandwidth == "auto":
        sigma = median_bandwidth(np.concatenate([x, y]))
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise MetricError("bandwidth must be positive")
    g = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-g * _sq_dists(x, x))
    kyy = np.exp(-g * _sq_dists(y, y))
    kxy = np.exp(-g * _sq_dists(x, y))
    m, n = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean()), sigma


def mmd(set_a, set_b, bandwidth="auto"):
    value, _ = mmd_raw(set_a, set_b, bandwidth)
    return max(0.0, value)


def occupancy_set(grids):
    return HistogramSet.from_histograms([bev_histogram(g, "occupancy") for g in grids], "occupancy")


def evaluate_sets(real, gen, mode="occupancy", real_points=None, coeffs=None, bandwidth="auto"):
    """MMD and JSD between real and generated grids.

    ``duplicated`` mode turns every generated voxel into as many points as its
    bin's duplication count before histogramming. Coefficients are the ratio of
    the mean real histogram to the mean generated occupancy histogram unless
    ``coeffs`` is given. ``real_points`` (one cloud per real grid) replaces the
    real occupancy histograms with raw point counts in that mode.
    """
    if mode not in MODES:
        raise MetricError(f"mode must be one of {MODES}")
    real, gen = list(real), list(gen)
    if not real or not gen:
        raise MetricError("evaluation needs nonempty real and generated sets")
    for g in real + gen:
        if not isinstance(g, OccupancyGrid):
            raise TypeError("evaluate_sets takes OccupancyGrid lists")
    gen_occ = occupancy_set(gen)
    if mode == "occupancy":
        real_set, gen_set = occupancy_set(real), gen_occ
    else:
        if real_points is not None:
            if len(real_points) != len(real):
                raise MetricError("real_points must hold one cloud per real grid")
            real_set = HistogramSet.from_histograms(
                [bev_histogram(p, "points", g.config) for p, g in zip(real_points, real)], "points")
        else:
            real_set = occupancy_set(real)
        if coeffs is None:
            coeffs = duplication_coefficients(real_set.aggregate() / len(real_set), gen_occ.aggregate() / len(gen_occ))
        gen_set = HistogramSet.from_histograms(
            [bev_histogram(apply_duplication(g, coeffs), "points", g.config) for g in gen], "points")
    value, sigma = mmd_raw(real_set, gen_set, bandwidth)
    return MetricReport(max(0.0, value), jsd(real_set, gen_set), mode, sigma, len(real), len(gen))
