"""Small dense differentiable toolkit on numpy.

Every op is a pair ``op(...) -> (out, cache)`` / ``op_backward(dout, cache)``.
Ops keep the dtype of their inputs: models train in float32 while gradient
checks run the very same code in float64.
"""

import math
from dataclasses import dataclass

import numpy as np

from .voxel import PATCH


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def _finite(x, where):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


# -- parameters ---------------------------------------------------------------

class ParamStore:
    """Named parameter arrays with adaptive-moment optimizer state."""

    def __init__(self):
        self.params = {}
        self.m1 = {}
        self.m2 = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float32)
        self.params[name] = value
        self.m1[name] = np.zeros_like(value)
        self.m2[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def group(self, prefix):
        """View of the parameters under ``prefix.`` keyed by the remaining suffix."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def n_parameters(self):
        return sum(v.size for v in self.params.values())

    def to_entries(self, with_moments=True):
        entries = {}
        for name, value in self.params.items():
            entries[name] = value
        if with_moments:
            for name in self.params:
                entries[name + ".m1"] = self.m1[name]
                entries[name + ".m2"] = self.m2[name]
            entries["step"] = np.array(self.step, dtype=np.float32)
        return entries

    def load_entries(self, entries):
        for name in self.params:
            if name not in entries:
                raise KeyError(f"checkpoint is missing {name!r}")
            value = np.asarray(entries[name], dtype=np.float32)
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {self.params[name].shape}")
            self.params[name][...] = value
            if name + ".m1" in entries:
                self.m1[name][...] = entries[name + ".m1"]
                self.m2[name][...] = entries[name + ".m2"]
        if "step" in entries:
            self.step = int(np.asarray(entries["step"]).reshape(()))


def adam_step(store, grads, lr=1e-4, beta1=0.9, beta2=0.96, eps=1e-8):
    """One bias-corrected adaptive-moment update, in place."""
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {store.params[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m1, m2 = store.m1[name], store.m2[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * (g * g)
        update = (lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps)).astype(store.params[name].dtype)
        store.params[name] -= update


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def add_grad(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def init_dense(store, rng, name, fan_in, fan_out, scale=1.0):
    store.add(f"{name}.w", rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


# -- elementwise / affine -----------------------------------------------------

def affine(x, w, b):
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x{x.shape} w{w.shape} b{b.shape}")
    y = x @ w + b
    return _finite(y, "affine"), (x, w)


def affine_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return _finite(xhat * gamma + beta, "layer_norm"), (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- attention ----------------------------------------------------------------

BLOCK_PARAMS = (
    "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
    "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
)


def init_block(store, rng, prefix, dim, mlp_ratio=4, residual_scale=0.5):
    """Pre-norm block parameters; ``residual_scale=0`` makes the block start as the identity."""
    store.add(f"{prefix}.ln1.g", np.ones(dim))
    store.add(f"{prefix}.ln1.b", np.zeros(dim))
    init_dense(store, rng, f"{prefix}.qkv", dim, 3 * dim)
    init_dense(store, rng, f"{prefix}.proj", dim, dim, scale=residual_scale)
    store.add(f"{prefix}.ln2.g", np.ones(dim))
    store.add(f"{prefix}.ln2.b", np.zeros(dim))
    init_dense(store, rng, f"{prefix}.fc1", dim, mlp_ratio * dim)
    init_dense(store, rng, f"{prefix}.fc2", mlp_ratio * dim, dim, scale=residual_scale)


def self_attention(x, p, n_heads, mask=None):
    """Bidirectional multi-head self-attention over the token axis (-2)."""
    *lead, t, dim = x.shape
    if dim % n_heads:
        raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
    dh = dim // n_heads
    qkv, qkv_cache = affine(x, p["qkv.w"], p["qkv.b"])
    qkv = qkv.reshape(*lead, t, 3, n_heads, dh)
    q = np.moveaxis(qkv[..., 0, :, :], -2, -3)
    k = np.moveaxis(qkv[..., 1, :, :], -2, -3)
    v = np.moveaxis(qkv[..., 2, :, :], -2, -3)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ np.swapaxes(k, -1, -2)) * x.dtype.type(scale)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != t:
            raise ShapeError("attention mask must have one entry per token")
        if not mask.any(axis=-1).all():
            raise ShapeError("attention mask hides every token")
        scores = np.where(mask[..., None, None, :], scores, -np.inf)
    attn = softmax(scores)
    ctx = attn @ v
    merged = np.moveaxis(ctx, -3, -2).reshape(*lead, t, dim)
    out, proj_cache = affine(merged, p["proj.w"], p["proj.b"])
    cache = {"qkv": qkv_cache, "q": q, "k": k, "v": v, "attn": attn, "scale": scale,
             "proj": proj_cache, "shape": (tuple(lead), t, dim, n_heads, dh)}
    return out, cache


def self_attention_backward(dout, cache):
    lead, t, dim, n_heads, dh = cache["shape"]
    dmerged, dproj_w, dproj_b = affine_backward(dout, cache["proj"])
    dctx = np.moveaxis(dmerged.reshape(*lead, t, n_heads, dh), -2, -3)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    dattn = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= dscores.dtype.type(cache["scale"])
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    dqkv = np.stack([np.moveaxis(d, -3, -2) for d in (dq, dk, dv)], axis=-3).reshape(*lead, t, 3 * dim)
    dx, dqkv_w, dqkv_b = affine_backward(dqkv, cache["qkv"])
    return dx, {"qkv.w": dqkv_w, "qkv.b": dqkv_b, "proj.w": dproj_w, "proj.b": dproj_b}


def attention_block(x, p, n_heads, mask=None):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    h1, ln1 = layer_norm(x, p["ln1.g"], p["ln1.b"])
    a, attn = self_attention(h1, p, n_heads, mask)
    x1 = x + a
    h2, ln2 = layer_norm(x1, p["ln2.g"], p["ln2.b"])
    f1, fc1 = affine(h2, p["fc1.w"], p["fc1.b"])
    g, act = gelu(f1)
    f2, fc2 = affine(g, p["fc2.w"], p["fc2.b"])
    y = _finite(x1 + f2, "attention_block")
    return y, {"ln1": ln1, "attn": attn, "ln2": ln2, "fc1": fc1, "act": act, "fc2": fc2}


def attention_block_backward(dy, cache):
    grads = {}
    dg, grads["fc2.w"], grads["fc2.b"] = affine_backward(dy, cache["fc2"])
    df1 = gelu_backward(dg, cache["act"])
    dh2, grads["fc1.w"], grads["fc1.b"] = affine_backward(df1, cache["fc1"])
    dx1_ln, grads["ln2.g"], grads["ln2.b"] = layer_norm_backward(dh2, cache["ln2"])
    dx1 = dy + dx1_ln
    dh1, attn_grads = self_attention_backward(dx1, cache["attn"])
    grads.update(attn_grads)
    dx_ln, grads["ln1.g"], grads["ln1.b"] = layer_norm_backward(dh1, cache["ln1"])
    return dx1 + dx_ln, grads


class BlockStack:
    """``n_blocks`` attention blocks followed by a final layer norm."""

    def __init__(self, prefix, n_blocks, dim, n_heads):
        if dim % n_heads:
            raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.prefix = prefix
        self.n_blocks = n_blocks
        self.dim = dim
        self.n_heads = n_heads

    def init(self, store, rng, residual_scale=0.5):
        for i in range(self.n_blocks):
            init_block(store, rng, f"{self.prefix}.{i}", self.dim, residual_scale=residual_scale)
        store.add(f"{self.prefix}.ln.g", np.ones(self.dim))
        store.add(f"{self.prefix}.ln.b", np.zeros(self.dim))

    def forward(self, params, x, mask=None):
        caches = []
        for i in range(self.n_blocks):
            p = {name: params[f"{self.prefix}.{i}.{name}"] for name in BLOCK_PARAMS}
            x, c = attention_block(x, p, self.n_heads, mask)
            caches.append(c)
        y, ln = layer_norm(x, params[f"{self.prefix}.ln.g"], params[f"{self.prefix}.ln.b"])
        return y, (caches, ln)

    def backward(self, dy, cache, grads):
        caches, ln = cache
        dx, dg, db = layer_norm_backward(dy, ln)
        add_grad(grads, f"{self.prefix}.ln.g", dg)
        add_grad(grads, f"{self.prefix}.ln.b", db)
        for i in reversed(range(self.n_blocks)):
            dx, block_grads = attention_block_backward(dx, caches[i])
            for name, g in block_grads.items():
                add_grad(grads, f"{self.prefix}.{i}.{name}", g)
        return dx


# -- patches ------------------------------------------------------------------

def patchify(bits, patch=PATCH):
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C), patches in row-major order."""
    *lead, h, w, c = bits.shape
    if h % patch or w % patch:
        raise ShapeError(f"grid {h}x{w} is not divisible into {patch}x{patch} patches")
    x = bits.reshape(*lead, h // patch, patch, w // patch, patch, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens, grid_shape, patch=PATCH):
    h, w, c = grid_shape
    *lead, t, f = tokens.shape
    if t != (h // patch) * (w // patch) or f != patch * patch * c:
        raise ShapeError(f"{t} tokens of width {f} do not tile a {grid_shape} grid")
    x = tokens.reshape(*lead, h // patch, w // patch, patch, patch, c)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, c)


def patch_embed(bits, w, b, pos, dtype=np.float32):
    x = patchify(np.asarray(bits)).astype(dtype)
    y, cache = affine(x, w, b)
    if pos.shape != y.shape[-2:]:
        raise ShapeError(f"positional table {pos.shape} does not match tokens {y.shape[-2:]}")
    return y + pos, cache


def patch_embed_backward(dy, cache):
    _, dw, db = affine_backward(dy, cache)
    dpos = dy.reshape(-1, *dy.shape[-2:]).sum(axis=0)
    return dw, db, dpos


def patch_unembed(tokens, w, b, grid_shape):
    y, cache = affine(tokens, w, b)
    return unpatchify(y, grid_shape), cache


def patch_unembed_backward(dlogits, cache):
    dy = patchify(dlogits)
    return affine_backward(dy, cache)


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits, target):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    if logits.shape != np.shape(target):
        raise ShapeError(f"bce: logits {logits.shape} vs target {np.shape(target)}")
    t = np.asarray(target, dtype=logits.dtype)
    n = logits.size
    e = np.exp(-np.abs(logits))
    loss = np.maximum(logits, 0) - logits * t + np.log1p(e)
    sig = np.where(logits >= 0, logits.dtype.type(1.0), e) / (1 + e)
    return float(loss.mean(dtype=np.float64)), (sig - t) / logits.dtype.type(n)


def cross_entropy(logits, targets, mask=None, label_smoothing=0.0):
    """Mean softmax cross-entropy over masked positions, with gradient.

    ``logits`` is (..., N, K); ``targets`` and ``mask`` are (..., N).
    """
    k = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("targets must have one entry per logit row")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError("target index out of range")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("cross_entropy needs a nonempty mask")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    q = np.full(logits.shape, label_smoothing / k, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - label_smoothing + label_smoothing / k, axis=-1)
    per_row = -(q * logp).sum(axis=-1)
    loss = float(per_row[mask].sum(dtype=np.float64) / m)
    grad = (np.exp(logp) - q) * mask[..., None] / logits.dtype.type(m)
    return loss, grad.astype(logits.dtype)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, theta, eps=1e-5, tol=1e-3, analytic=None, coords=None, floor=1e-6):
    """Compare an analytic gradient with central finite differences.

    ``f(theta)`` returns ``(value, grad)``; ``analytic`` overrides the gradient
    it reports at ``theta``. ``coords`` restricts the check to flat indices.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    theta = np.array(theta, dtype=np.float64)
    _, grad = f(theta.copy())
    if analytic is not None:
        grad = analytic
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    flat = theta.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    max_rel = max_abs = 0.0
    n = 0
    for i in idx:
        saved = flat[i]
        flat[i] = saved + eps
        fp = f(theta.copy())[0]
        flat[i] = saved - eps
        fm = f(theta.copy())[0]
        flat[i] = saved
        num = (fp - fm) / (2 * eps)
        err = abs(grad[i] - num)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(grad[i]), abs(num), floor))
        n += 1
    return GradCheckReport(max_rel, max_abs, n, tol)
