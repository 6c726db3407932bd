"""Vector quantization with usage tracking and memory-bank k-means (re)initialization."""

from dataclasses import dataclass

import numpy as np

from . import kernels

DEAD_WINDOW = 256


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: np.ndarray
    mse: float


@dataclass
class VqLossTerms:
    codebook_loss: float
    commitment_loss: float
    grad_quantized: np.ndarray  # d codebook_loss / d quantized; z held constant
    grad_z: np.ndarray  # d commitment_loss / d z; quantized held constant


class Codebook:
    """K codes of width D plus per-code usage stamps.

    ``codes`` may be shared with a ParamStore entry; every update here is in place.
    """

    def __init__(self, codes, window=DEAD_WINDOW):
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise ValueError("a codebook needs at least two codes")
        if not np.isfinite(codes).all():
            raise ValueError("codes must be finite")
        self.codes = codes
        self.window = window
        self.last_used = np.full(codes.shape[0], -1, dtype=np.int64)
        self.ever_used = np.zeros(codes.shape[0], dtype=bool)
        self.iteration = 0

    @classmethod
    def uniform(cls, k, d, rng, dtype=np.float32):
        """Conventional uniform init in [-1/K, 1/K]."""
        return cls(rng.uniform(-1.0 / k, 1.0 / k, size=(k, d)).astype(dtype))

    @property
    def K(self):
        return self.codes.shape[0]

    @property
    def D(self):
        return self.codes.shape[1]

    def live_mask(self, iteration):
        return self.ever_used & (iteration - self.last_used <= self.window)

    def is_dead(self, k, iteration):
        return not self.live_mask(iteration)[k]


def quantize(z, cb):
    """Nearest code per row; ties go to the lowest index."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != cb.D:
        raise ValueError(f"expected (N, {cb.D}) embeddings, got {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("cannot quantize non-finite embeddings")
    idx, dist = kernels.nearest_codes(z, cb.codes)
    quantized = cb.codes[idx]
    mse = float(dist.sum() / z.size) if z.size else 0.0
    return QuantizeResult(idx, quantized, mse)


def vq_loss_terms(z, quantized):
    """Codebook and commitment terms (both mean squared distances) with their one-sided gradients."""
    if z.shape != quantized.shape:
        raise ValueError("z and quantized shapes differ")
    diff = quantized - z
    n = diff.size
    loss = float(np.mean(np.square(diff, dtype=np.float64))) if n else 0.0
    g = diff * diff.dtype.type(2.0 / n)
    return VqLossTerms(loss, loss, g, -g)


def code_gradient(grad_quantized, indices, k):
    """Scatter per-row gradients on quantized vectors onto the codes they were copied from."""
    out = np.zeros((k, grad_quantized.shape[-1]), dtype=grad_quantized.dtype)
    np.add.at(out, indices, grad_quantized)
    return out


def straight_through_compose(z, quantized):
    """Forward value is ``quantized``; the backward pass is the identity onto ``z``."""
    if z.shape != quantized.shape:
        raise ValueError("z and quantized shapes differ")
    return quantized.copy()


def straight_through_backward(grad):
    """(gradient reaching z, gradient reaching the codes through this path)."""
    return grad, np.zeros_like(grad)


def warmup_alpha(iteration, warmup_iters):
    if warmup_iters < 1:
        raise ValueError("warmup_iters must be at least 1")
    return min(1.0, max(0, iteration) / warmup_iters)


def warmup_blend(z, quantized, iteration, warmup_iters):
    """Decoder input shifting linearly from z to straight-through quantized values.

    The gradient w.r.t. z is the upstream gradient unchanged at every alpha.
    """
    alpha = warmup_alpha(iteration, warmup_iters)
    st = straight_through_compose(z, quantized)
    if alpha == 1.0:
        return st
    if alpha == 0.0:
        return z.copy()
    a = z.dtype.type(alpha)
    return a * st + (z.dtype.type(1.0) - a) * z


class MemoryBank:
    """Ring buffer of recent encoder embeddings."""

    def __init__(self, capacity, dim, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.rows = np.zeros((capacity, dim), dtype=dtype)
        self.count = 0
        self.cursor = 0

    @property
    def capacity(self):
        return self.rows.shape[0]

    @property
    def full(self):
        return self.count == self.capacity

    def push(self, rows):
        rows = np.asarray(rows).reshape(-1, self.rows.shape[1])
        if len(rows) >= self.capacity:
            rows = rows[-self.capacity:]
        n = len(rows)
        end = self.cursor + n
        if end <= self.capacity:
            self.rows[self.cursor:end] = rows
        else:
            split = self.capacity - self.cursor
            self.rows[self.cursor:] = rows[:split]
            self.rows[:n - split] = rows[split:]
        self.cursor = end % self.capacity
        self.count = min(self.capacity, self.count + n)

    def data(self):
        return self.rows[:self.count].copy()


def record_usage(cb, indices, iteration, bank=None, z=None):
    if iteration < cb.iteration:
        raise ValueError("usage iterations must be nondecreasing")
    cb.iteration = iteration
    indices = np.asarray(indices).reshape(-1)
    cb.last_used[indices] = iteration
    cb.ever_used[indices] = True
    if bank is not None and z is not None:
        bank.push(z)
    return cb


def utilization(cb, iteration):
    return float(cb.live_mask(iteration).mean())


def kmeans(data, k, n_iter=10, seed=0):
    """k-means++ seeding followed by ``n_iter`` Lloyd iterations; float64 centroids."""
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if n < k:
        raise ValueError(f"k-means needs at least {k} rows, got {n}")
    if k == 0:
        return np.zeros((0, data.shape[1]))
    rng = np.random.default_rng(seed)
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    closest = np.square(data - centers[0]).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = rng.integers(n)
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers[c] = data[pick]
        closest = np.minimum(closest, np.square(data - centers[c]).sum(axis=1))
    for _ in range(n_iter):
        assign, _ = kernels.nearest_codes(data, centers)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, data)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


def init_from_bank(cb, bank, iteration, seed=0, n_iter=10):
    """Data-dependent init: every code becomes a k-means centroid of the bank."""
    centers = kmeans(bank.data(), cb.K, n_iter, seed)
    cb.codes[...] = centers.astype(cb.codes.dtype)
    cb.last_used[:] = iteration
    cb.ever_used[:] = True
    return np.arange(cb.K)


def reinit_dead_codes(cb, bank, iteration, threshold=0.5, seed=0, n_iter=10):
    """Replace dead codes with bank k-means centroids when utilization drops below ``threshold``.

    Returns the replaced code indices (empty when nothing happened). With fewer
    bank rows than dead codes, rows are sampled with replacement instead.
    """
    if utilization(cb, iteration) >= threshold:
        return np.zeros(0, dtype=np.int64)
    dead = np.flatnonzero(~cb.live_mask(iteration))
    if len(dead) == 0:
        return dead
    if bank.count == 0:
        raise ValueError("memory bank is empty")
    rows = bank.data()
    if len(rows) < len(dead):
        rng = np.random.default_rng(seed)
        centers = rows[rng.integers(len(rows), size=len(dead))]
    else:
        centers = kmeans(rows, len(dead), n_iter, seed)
    cb.codes[dead] = centers.astype(cb.codes.dtype)
    cb.last_used[dead] = iteration
    cb.ever_used[dead] = True
    return dead
