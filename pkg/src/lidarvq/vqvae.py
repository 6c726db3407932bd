"""LiDAR VQ-VAE: dense and sparse encoders sharing one codebook and one dense decoder.

Both encoders patchify a BEV occupancy grid (height as channels) into 8x8
patches, run a stack of attention blocks and project to the code width. The
decoder maps (quantized) code vectors back to per-voxel occupancy logits.
Training is joint: both branches reconstruct the dense grid.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cbk
from . import kernels
from . import nncore as nn
from .voxel import PATCH, GridConfig, OccupancyGrid, iou, voxelize

log = logging.getLogger(__name__)

ENCODERS = ("dense", "sparse")


@dataclass(frozen=True)
class ModelConfig:
    grid: GridConfig = GridConfig()
    n_blocks: int = 4
    dim: int = 64
    n_heads: int = 4
    n_codes: int = 128
    code_dim: int = 64
    head_hidden: int = 256  # width of the per-patch GELU layer at both ends; 0 = linear

    @property
    def n_tokens(self):
        h, w = self.grid.code_shape
        return h * w

    @property
    def patch_features(self):
        return PATCH * PATCH * self.grid.C


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 1
    learning_rate: float = 1e-3
    warmup_iters: int = 500
    commitment_weight: float = 0.25
    seed: int = 0
    reinit: bool = True  # dead-code reinitialization only; the initial codebook is governed by kmeans_init
    reinit_threshold: float = 0.5
    reinit_every: int = cbk.DEAD_WINDOW
    bank_capacity: int = 8192
    kmeans_iters: int = 10
    grad_clip: float = 1.0
    log_every: int = 0
    kmeans_init: bool = True  # False keeps the uniform random codebook

    def __post_init__(self):
        for name in ("iterations", "batch_size", "learning_rate", "warmup_iters", "commitment_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    bce: list = field(default_factory=list)
    utilization: list = field(default_factory=list)  # (iteration, fraction)
    reinit_events: list = field(default_factory=list)  # (iteration, n_codes)


@dataclass
class Reconstruction:
    logits: np.ndarray
    codemap: np.ndarray
    bce: float
    codebook_loss: float
    commitment_loss: float


class TrainingDiverged(nn.NonFiniteError):
    pass


class VqVaeModel:
    def __init__(self, cfg=ModelConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.store = nn.ParamStore()
        t, f = cfg.n_tokens, cfg.patch_features
        self.stacks = {}
        for which in ENCODERS:
            prefix = f"enc_{which}"
            if cfg.head_hidden:
                nn.init_dense(self.store, rng, f"{prefix}.patch", f, cfg.head_hidden)
                nn.init_dense(self.store, rng, f"{prefix}.embed", cfg.head_hidden, cfg.dim)
            else:
                nn.init_dense(self.store, rng, f"{prefix}.embed", f, cfg.dim)
            self.store.add(f"{prefix}.pos", rng.normal(0.0, 0.02, size=(t, cfg.dim)))
            self.stacks[which] = nn.BlockStack(f"{prefix}.blocks", cfg.n_blocks, cfg.dim, cfg.n_heads)
            # identity-initialized blocks: training starts out as a per-patch autoencoder
            self.stacks[which].init(self.store, rng, residual_scale=0.0)
            nn.init_dense(self.store, rng, f"{prefix}.out", cfg.dim, cfg.code_dim)
        nn.init_dense(self.store, rng, "dec.in", cfg.code_dim, cfg.dim)
        self.store.add("dec.pos", rng.normal(0.0, 0.02, size=(t, cfg.dim)))
        self.stacks["dec"] = nn.BlockStack("dec.blocks", cfg.n_blocks, cfg.dim, cfg.n_heads)
        self.stacks["dec"].init(self.store, rng, residual_scale=0.0)
        if cfg.head_hidden:
            nn.init_dense(self.store, rng, "dec.head", cfg.dim, cfg.head_hidden)
        # zero output layer: an untrained decoder predicts p = 0.5 everywhere
        self.store.add("dec.out.w", np.zeros((cfg.head_hidden or cfg.dim, f)))
        self.store.add("dec.out.b", np.zeros(f))
        codes = self.store.add("codebook.codes", cbk.Codebook.uniform(cfg.n_codes, cfg.code_dim, rng).codes)
        self.codebook = cbk.Codebook(codes)

    @property
    def params(self):
        return self.store.params

    # -- differentiable pieces (batched: leading axis is the batch) -----------

    def _encode(self, bits, which, params=None, dtype=np.float32):
        p = self.params if params is None else params
        prefix = f"enc_{which}"
        x = nn.patchify(np.asarray(bits)).astype(dtype)
        head = None
        if self.cfg.head_hidden:
            a, lin = nn.affine(x, p[f"{prefix}.patch.w"], p[f"{prefix}.patch.b"])
            x, act = nn.gelu(a)
            head = (lin, act)
        x, emb = nn.affine(x, p[f"{prefix}.embed.w"], p[f"{prefix}.embed.b"])
        h, stack = self.stacks[which].forward(p, x + p[f"{prefix}.pos"])
        z, out = nn.affine(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])
        return z, (head, emb, stack, out)

    def _encode_backward(self, dz, cache, which, grads):
        head, emb, stack, out = cache
        prefix = f"enc_{which}"
        dh, dw, db = nn.affine_backward(dz, out)
        nn.add_grad(grads, f"{prefix}.out.w", dw)
        nn.add_grad(grads, f"{prefix}.out.b", db)
        dx = self.stacks[which].backward(dh, stack, grads)
        nn.add_grad(grads, f"{prefix}.pos", dx.reshape(-1, *dx.shape[-2:]).sum(axis=0))
        dx, dw, db = nn.affine_backward(dx, emb)
        nn.add_grad(grads, f"{prefix}.embed.w", dw)
        nn.add_grad(grads, f"{prefix}.embed.b", db)
        if head is not None:
            lin, act = head
            _, dw, db = nn.affine_backward(nn.gelu_backward(dx, act), lin)
            nn.add_grad(grads, f"{prefix}.patch.w", dw)
            nn.add_grad(grads, f"{prefix}.patch.b", db)

    def _decode(self, zq, params=None):
        p = self.params if params is None else params
        x, inp = nn.affine(zq, p["dec.in.w"], p["dec.in.b"])
        x = x + p["dec.pos"]
        h, stack = self.stacks["dec"].forward(p, x)
        head = None
        if self.cfg.head_hidden:
            a, lin = nn.affine(h, p["dec.head.w"], p["dec.head.b"])
            h, act = nn.gelu(a)
            head = (lin, act)
        logits, out = nn.patch_unembed(h, p["dec.out.w"], p["dec.out.b"], self.cfg.grid.shape)
        return logits, (inp, stack, head, out)

    def _decode_backward(self, dlogits, cache, grads):
        inp, stack, head, out = cache
        dh, dw, db = nn.patch_unembed_backward(dlogits, out)
        nn.add_grad(grads, "dec.out.w", dw)
        nn.add_grad(grads, "dec.out.b", db)
        if head is not None:
            lin, act = head
            dh, dw, db = nn.affine_backward(nn.gelu_backward(dh, act), lin)
            nn.add_grad(grads, "dec.head.w", dw)
            nn.add_grad(grads, "dec.head.b", db)
        dx = self.stacks["dec"].backward(dh, stack, grads)
        nn.add_grad(grads, "dec.pos", dx.reshape(-1, *dx.shape[-2:]).sum(axis=0))
        dzq, dw, db = nn.affine_backward(dx, inp)
        nn.add_grad(grads, "dec.in.w", dw)
        nn.add_grad(grads, "dec.in.b", db)
        return dzq

    def loss_and_grads(self, bits_in, target, which, iteration, warmup_iters, beta, params=None, frozen=None,
                       feature_loss=None):
        """Training loss of one branch and the gradients of every parameter it touches.

        ``frozen`` (indices, z_const, zq_const) pins the quantizer's discrete
        choice and stop-gradient operands; used for finite-difference checks.
        ``feature_loss(target, logits) -> (loss, dlogits)`` adds an extra term.
        """
        p = self.params if params is None else params
        dtype = p["dec.in.w"].dtype
        z, enc_cache = self._encode(bits_in, which, p, dtype)
        flat = z.reshape(-1, z.shape[-1])
        codes = p["codebook.codes"]
        if frozen is None:
            idx, _ = _nearest(flat, codes)
            z_sg = zq_sg = None
        else:
            idx, z_sg, zq_sg = frozen
        zq = codes[idx].reshape(z.shape)
        dec_in = cbk.warmup_blend(z, zq, iteration, warmup_iters)
        logits, dec_cache = self._decode(dec_in, p)
        bce, dlogits = nn.bce_with_logits(logits, target)
        extra = 0.0
        if feature_loss is not None:
            extra, dextra = feature_loss(target, logits)
            dlogits = dlogits + dextra
        # the two VQ terms share ||zq - z||^2; each one sees the other operand as a constant
        cb_terms = cbk.vq_loss_terms(z if z_sg is None else z_sg, zq)
        cm_terms = cbk.vq_loss_terms(z, zq if zq_sg is None else zq_sg)
        loss = bce + cb_terms.codebook_loss + beta * cm_terms.commitment_loss + extra
        grads = {}
        ddec = self._decode_backward(dlogits, dec_cache, grads)
        dz, _ = cbk.straight_through_backward(ddec)
        self._encode_backward(dz + dtype.type(beta) * cm_terms.grad_z, enc_cache, which, grads)
        grads["codebook.codes"] = cbk.code_gradient(
            cb_terms.grad_quantized.reshape(-1, codes.shape[1]), idx, codes.shape[0])
        parts = {"bce": bce, "codebook": cb_terms.codebook_loss, "commitment": cm_terms.commitment_loss}
        return loss, grads, {"z": flat, "indices": idx, "parts": parts}


def _nearest(flat, codes):
    return kernels.nearest_codes(flat, codes)


def _as_bits(grid, cfg):
    bits = grid.bits if isinstance(grid, OccupancyGrid) else np.asarray(grid)
    if bits.shape[-3:] != cfg.grid.shape:
        raise ValueError(f"grid shape {bits.shape[-3:]} does not match model grid {cfg.grid.shape}")
    return bits


def encode(grid, which, model):
    """Continuous embedding map, (h*w, D) for one grid or (B, h*w, D) for a batch."""
    if which not in ENCODERS:
        raise ValueError(f"encoder must be one of {ENCODERS}")
    z, _ = model._encode(_as_bits(grid, model.cfg), which)
    return z


def code_vectors(codemap, model):
    codemap = np.asarray(codemap)
    if codemap.size and (codemap.min() < 0 or codemap.max() >= model.cfg.n_codes):
        raise ValueError("code map contains indices outside the codebook")
    return model.codebook.codes[codemap.reshape(*codemap.shape[:-2], -1)]


def decode(codes, model):
    """Logit grid from a code-index map (h, w) or quantized vectors (h*w, D); batches allowed."""
    codes = np.asarray(codes)
    h, w = model.cfg.grid.code_shape
    if np.issubdtype(codes.dtype, np.integer):
        if codes.shape[-2:] != (h, w):
            raise ValueError(f"code map must be {h}x{w}")
        vectors = code_vectors(codes, model)
    else:
        if codes.shape[-2:] != (h * w, model.cfg.code_dim):
            raise ValueError(f"quantized map must be ({h * w}, {model.cfg.code_dim})")
        vectors = codes.astype(np.float32)
    logits, _ = model._decode(vectors)
    return logits


def binarize(logits, mode="threshold", temperature=1.0, seed=0, config=None):
    """Hard occupancy from logits: ``logit > 0`` or a Gumbel-perturbed decision.

    In gumbel mode each voxel draws two Gumbel variables g1, g0 and is occupied
    iff ``logit + g1 - g0 > 0``. Returns an OccupancyGrid when ``config`` is
    given, else the raw uint8 bits.
    """
    logits = np.asarray(logits)
    if mode == "threshold":
        bits = (logits > 0).astype(np.uint8)
    elif mode == "gumbel":
        if not temperature > 0:
            raise ValueError("gumbel temperature must be positive")
        rng = np.random.default_rng(seed)
        g = rng.gumbel(size=(2,) + logits.shape)
        bits = ((logits + g[0] - g[1]) / temperature > 0).astype(np.uint8)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    if config is not None:
        return OccupancyGrid(config, bits)
    return bits


def reconstruct(grid, which, model, target=None, beta=0.25):
    """Encode, quantize and decode (pure quantized decoder input, as at inference)."""
    bits = _as_bits(grid, model.cfg)
    z = encode(bits, which, model)
    flat = z.reshape(-1, z.shape[-1])
    q = cbk.quantize(flat, model.codebook)
    zq = q.quantized.reshape(z.shape)
    logits, _ = model._decode(zq)
    tgt = bits if target is None else _as_bits(target, model.cfg)
    bce, _ = nn.bce_with_logits(logits, tgt)
    terms = cbk.vq_loss_terms(z, zq)
    codemap = q.indices.reshape(*z.shape[:-2], *model.cfg.grid.code_shape)
    return Reconstruction(logits, codemap, bce, terms.codebook_loss, beta * terms.commitment_loss)


def complete(sparse_grid, model):
    """Densify: sparse encoder -> shared codebook -> dense decoder -> threshold."""
    rec = reconstruct(sparse_grid, "sparse", model)
    bits = binarize(rec.logits)
    if bits.ndim == 3:
        return OccupancyGrid(model.cfg.grid, bits)
    return bits


def voxelize_pairs(pairs, grid_cfg):
    sparse = np.stack([voxelize(p.sparse, grid_cfg).bits for p in pairs])
    dense = np.stack([voxelize(p.dense, grid_cfg).bits for p in pairs])
    return sparse, dense


def _reset_moments(store, name, rows):
    if len(rows):
        store.m1[name][rows] = 0.0
        store.m2[name][rows] = 0.0


def train(pairs, cfg=TrainConfig(), model_cfg=ModelConfig(), model=None, feature_loss=None):
    """Jointly train both encoders, the codebook and the decoder on paired scans.

    ``pairs`` is a list of PairedSample or a (sparse_bits, dense_bits) tuple of
    pre-voxelized arrays. ``feature_loss(dense_bits, logits) -> (loss, dlogits)``
    is an optional extra reconstruction term.
    """
    if isinstance(pairs, tuple):
        sparse_bits, dense_bits = pairs
    else:
        if not pairs:
            raise ValueError("training set is empty")
        sparse_bits, dense_bits = voxelize_pairs(pairs, model_cfg.grid)
    if len(dense_bits) == 0:
        raise ValueError("training set is empty")
    if model is None:
        model = VqVaeModel(model_cfg, seed=cfg.seed)
    cb = model.codebook
    bank = cbk.MemoryBank(cfg.bank_capacity, model.cfg.code_dim)
    rng = np.random.default_rng([cfg.seed, 1])
    history = TrainHistory()
    initialized = not cfg.kmeans_init

    for it in range(cfg.iterations):
        batch = rng.integers(len(dense_bits), size=cfg.batch_size)
        target = dense_bits[batch]
        grads = {}
        total = 0.0
        bce_total = 0.0
        for which, inputs in (("dense", target), ("sparse", sparse_bits[batch])):
            try:
                loss, g, aux = model.loss_and_grads(inputs, target, which, it, cfg.warmup_iters,
                                                    cfg.commitment_weight, feature_loss=feature_loss)
            except nn.NonFiniteError as exc:
                raise TrainingDiverged(f"iteration {it}: {which} branch: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"iteration {it}: non-finite {which} loss {aux['parts']}")
            total += loss
            bce_total += aux["parts"]["bce"]
            for name, value in g.items():
                nn.add_grad(grads, name, value)
            cbk.record_usage(cb, aux["indices"], it, bank, aux["z"])
        history.loss.append(total)
        history.bce.append(bce_total)

        if not initialized and bank.full:
            replaced = cbk.init_from_bank(cb, bank, it, seed=_kmeans_seed(cfg.seed, it), n_iter=cfg.kmeans_iters)
            _reset_moments(model.store, "codebook.codes", replaced)
            history.reinit_events.append((it, len(replaced)))
            initialized = True
        elif cfg.reinit and initialized and it > 0 and it % cfg.reinit_every == 0:
            replaced = cbk.reinit_dead_codes(cb, bank, it, cfg.reinit_threshold,
                                             seed=_kmeans_seed(cfg.seed, it), n_iter=cfg.kmeans_iters)
            _reset_moments(model.store, "codebook.codes", replaced)
            if len(replaced):
                history.reinit_events.append((it, len(replaced)))
        if it % cfg.reinit_every == 0 or it == cfg.iterations - 1:
            history.utilization.append((it, cbk.utilization(cb, it)))

        if cfg.grad_clip:
            nn.clip_grad_norm(grads, cfg.grad_clip)
        nn.adam_step(model.store, grads, lr=cfg.learning_rate, beta1=0.9, beta2=0.99)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("it %d loss %.5f bce %.5f util %.3f", it, total, bce_total, cbk.utilization(cb, it))
    model.history = history
    model.final_iteration = cfg.iterations - 1
    return model


def _kmeans_seed(seed, iteration):
    return np.random.SeedSequence([seed, 2, iteration]).generate_state(1)[0]


def final_utilization(model):
    return cbk.utilization(model.codebook, model.final_iteration)


def mean_iou(pred_bits, true_bits):
    return float(np.mean([iou(p, t) for p, t in zip(pred_bits, true_bits)]))


# -- checkpoints ----------------------------------------------------------------

def to_entries(model, with_moments=True):
    cfg = model.cfg
    entries = {
        "meta.grid": np.array(cfg.grid.as_tuple(), dtype=np.float32),
        "meta.arch": np.array([cfg.n_blocks, cfg.dim, cfg.n_heads, cfg.n_codes, cfg.code_dim, cfg.head_hidden], dtype=np.float32),
    }
    entries.update(model.store.to_entries(with_moments))
    entries["codebook.last_used"] = model.codebook.last_used.astype(np.float32)
    return entries


def from_entries(entries):
    try:
        # float32 storage: the shortest decimal repr recovers the configured values
        grid = GridConfig(*[float(str(np.float32(v))) for v in entries["meta.grid"]])
        n_blocks, dim, n_heads, n_codes, code_dim, head_hidden = (int(v) for v in entries["meta.arch"])
    except KeyError as exc:
        raise ValueError(f"not a VQ-VAE checkpoint: missing {exc}") from exc
    model = VqVaeModel(ModelConfig(grid, n_blocks, dim, n_heads, n_codes, code_dim, head_hidden))
    model.store.load_entries(entries)
    if "codebook.last_used" in entries:
        last = np.asarray(entries["codebook.last_used"]).astype(np.int64)
        model.codebook.last_used[:] = last
        model.codebook.ever_used[:] = last >= 0
        model.codebook.iteration = int(last.max(initial=0))
    return model
