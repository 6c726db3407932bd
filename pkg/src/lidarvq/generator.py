"""Masked-token transformer prior over code maps.

Training masks a random subset of each code map and predicts the hidden codes.
Sampling starts from an all-masked (or partially conditioned) canvas and
commits the most confident predictions over T steps, optionally forbidding
the free-space (BLANK) codes during the first S steps.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn

log = logging.getLogger(__name__)


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GenModelConfig:
    h: int = 16
    w: int = 16
    n_codes: int = 128
    n_blocks: int = 6
    dim: int = 128
    n_heads: int = 4

    @property
    def mask_id(self):
        return self.n_codes

    @property
    def n_tokens(self):
        return self.h * self.w


@dataclass(frozen=True)
class GenTrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    learning_rate: float = 5e-4
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 0


@dataclass(frozen=True)
class GenConfig:
    T: int = 12
    S: int = 6
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        # S = 0 switches suppression off entirely
        if self.T < 1 or not 0 <= self.S <= self.T:
            raise GeneratorError(f"need T >= 1 and 0 <= S <= T, got T={self.T} S={self.S}")
        if not self.temperature >= 0:
            raise GeneratorError("temperature must be nonnegative")


@dataclass(frozen=True, eq=False)
class BlankSet:
    codes: np.ndarray  # sorted code indices
    counts: np.ndarray  # corpus frequency of every code

    def mask(self, k):
        out = np.zeros(k, dtype=bool)
        out[self.codes] = True
        return out

    def __contains__(self, code):
        return int(code) in set(self.codes.tolist())

    def __len__(self):
        return len(self.codes)


@dataclass
class GenHistory:
    loss: list = field(default_factory=list)


def mask_schedule(t, T, n_tokens):
    """Tokens still masked after step ``t`` of ``T`` (cosine schedule)."""
    if not 0 <= t <= T:
        raise GeneratorError(f"step {t} outside [0, {T}]")
    if t == T:
        return 0
    return int(math.ceil(n_tokens * math.cos(math.pi / 2 * t / T)))


class GeneratorModel:
    def __init__(self, cfg=GenModelConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 3])
        self.store = nn.ParamStore()
        # row K of the token table is the MASK embedding
        self.store.add("tok.emb", rng.normal(0.0, 0.02, size=(cfg.n_codes + 1, cfg.dim)))
        self.store.add("tok.pos", rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.dim)))
        self.stack = nn.BlockStack("gen.blocks", cfg.n_blocks, cfg.dim, cfg.n_heads)
        self.stack.init(self.store, rng)
        nn.init_dense(self.store, rng, "gen.out", cfg.dim, cfg.n_codes)
        self.history = GenHistory()

    @property
    def params(self):
        return self.store.params

    def forward(self, tokens, params=None):
        """(B, h*w) token ids in [0, K] -> (B, h*w, K) logits."""
        p = self.params if params is None else params
        tokens = np.asarray(tokens)
        if tokens.shape[-1] != self.cfg.n_tokens:
            raise GeneratorError(f"expected {self.cfg.n_tokens} tokens per map, got {tokens.shape[-1]}")
        x = p["tok.emb"][tokens] + p["tok.pos"]
        h, stack = self.stack.forward(p, x)
        logits, out = nn.affine(h, p["gen.out.w"], p["gen.out.b"])
        return logits, (tokens, stack, out)

    def backward(self, dlogits, cache):
        tokens, stack, out = cache
        grads = {}
        dh, dw, db = nn.affine_backward(dlogits, out)
        grads["gen.out.w"] = dw
        grads["gen.out.b"] = db
        dx = self.stack.backward(dh, stack, grads)
        grads["tok.pos"] = dx.reshape(-1, *dx.shape[-2:]).sum(axis=0)
        demb = np.zeros_like(self.params["tok.emb"])
        np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["tok.emb"] = demb
        return grads

    def loss_and_grads(self, inputs, targets, mask, label_smoothing=0.0, params=None):
        logits, cache = self.forward(inputs, params)
        loss, dlogits = nn.cross_entropy(logits, targets, mask, label_smoothing)
        return loss, self.backward(dlogits, cache)


def _check_corpus(codemaps, k):
    maps = np.asarray(codemaps)
    if maps.size == 0:
        raise GeneratorError("empty code-map corpus")
    if maps.ndim == 2:
        maps = maps[None]
    if maps.min() < 0 or maps.max() >= k:
        raise GeneratorError(f"corpus entries must lie in [0, {k})")
    return maps.astype(np.int64)


def random_mask(rng, n_tokens):
    """Training mask: ratio from the cosine schedule at a uniform time, never empty."""
    while True:
        count = int(math.ceil(n_tokens * math.cos(math.pi / 2 * rng.random())))
        if count > 0:
            break
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.permutation(n_tokens)[:count]] = True
    return mask


def train_masked(codemaps, cfg=GenTrainConfig(), model_cfg=None, model=None):
    """Fit the masked-token prior on complete code maps from a frozen VQ-VAE."""
    if model is None:
        if model_cfg is None:
            raise GeneratorError("need a model or a model config")
        model = GeneratorModel(model_cfg, seed=cfg.seed)
    mc = model.cfg
    maps = _check_corpus(codemaps, mc.n_codes)
    if maps.shape[1:] != (mc.h, mc.w):
        raise GeneratorError(f"code maps are {maps.shape[1:]}, model expects {(mc.h, mc.w)}")
    flat = maps.reshape(len(maps), -1)
    rng = np.random.default_rng([cfg.seed, 4])
    for it in range(cfg.iterations):
        batch = flat[rng.integers(len(flat), size=cfg.batch_size)]
        mask = np.stack([random_mask(rng, mc.n_tokens) for _ in range(cfg.batch_size)])
        inputs = np.where(mask, mc.mask_id, batch)
        loss, grads = model.loss_and_grads(inputs, batch, mask, cfg.label_smoothing)
        if not math.isfinite(loss):
            raise nn.NonFiniteError(f"generator loss is non-finite at iteration {it}")
        model.history.loss.append(loss)
        if cfg.grad_clip:
            nn.clip_grad_norm(grads, cfg.grad_clip)
        nn.adam_step(model.store, grads, lr=cfg.learning_rate, beta1=0.9, beta2=0.96)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("gen it %d loss %.4f", it, loss)
    return model


def identify_blank(corpus, coverage=0.5, n_codes=None):
    """Most frequent codes whose cumulative share first reaches ``coverage``."""
    if not 0 < coverage < 1:
        raise GeneratorError("coverage must lie strictly between 0 and 1")
    maps = np.asarray(corpus)
    if maps.size == 0:
        raise GeneratorError("empty code-map corpus")
    k = int(maps.max()) + 1 if n_codes is None else n_codes
    maps = _check_corpus(maps, k)
    counts = np.bincount(maps.reshape(-1), minlength=k)
    order = np.argsort(-counts, kind="stable")
    cum = np.cumsum(counts[order])
    n = int(np.searchsorted(cum, coverage * cum[-1], side="left")) + 1
    return BlankSet(np.sort(order[:n]), counts)


def _softmax64(logits):
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _draw(rng, probs, tau):
    if tau <= 0:
        return probs.argmax(axis=-1)
    with np.errstate(divide="ignore"):
        logp = np.log(probs) / tau
    tempered = _softmax64(logp)
    cdf = np.cumsum(tempered, axis=-1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    # never land on a zero-probability code through rounding at the top of the cdf
    idx = np.minimum(idx, probs.shape[-1] - 1)
    bad = tempered[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = tempered[bad].argmax(axis=-1)
    return idx


def sample(model, cfg=GenConfig(), blanks=None, condition=None, trace=None):
    """Iteratively fill a code map.

    ``condition`` is an (h, w) map whose non-MASK entries are kept fixed.
    ``trace``, if a list, receives one (step, positions, tokens) tuple per step.
    """
    mc = model.cfg
    k = mc.n_codes
    if condition is None:
        canvas = np.full(mc.n_tokens, mc.mask_id, dtype=np.int64)
    else:
        cond = np.asarray(condition)
        if cond.shape != (mc.h, mc.w):
            raise GeneratorError(f"condition must be {mc.h}x{mc.w}, got {cond.shape}")
        if cond.min() < 0 or cond.max() > k:
            raise GeneratorError("condition entries must lie in [0, K]")
        canvas = cond.astype(np.int64).reshape(-1).copy()
    n_free = int((canvas == mc.mask_id).sum())
    if n_free == 0:
        return canvas.reshape(mc.h, mc.w)
    blank = np.zeros(k, dtype=bool) if blanks is None else blanks.mask(k)
    if cfg.S > 0 and blank.all():
        raise GeneratorError("degenerate blank set: every code is suppressed")
    rng = np.random.default_rng([cfg.seed, 5])
    for t in range(1, cfg.T + 1):
        masked = np.flatnonzero(canvas == mc.mask_id)
        logits, _ = model.forward(canvas[None])
        probs = _softmax64(logits[0, masked])
        if t <= cfg.S:
            probs[:, blank] = 0.0
            probs /= probs.sum(axis=-1, keepdims=True)
        tau = cfg.temperature * (1.0 - t / cfg.T)
        tokens = _draw(rng, probs, tau)
        conf = probs[np.arange(len(masked)), tokens] + tau * rng.gumbel(size=len(masked))
        n_commit = len(masked) - mask_schedule(t, cfg.T, n_free)
        keep = np.argsort(-conf, kind="stable")[:n_commit]
        canvas[masked[keep]] = tokens[keep]
        if trace is not None:
            trace.append((t, masked[keep].copy(), tokens[keep].copy()))
    return canvas.reshape(mc.h, mc.w)


def denoise_regions(shape, rounds, mask_fraction, seed):
    """Rectangles (r0, c0, rh, rw) re-generated by denoise()."""
    if not 0 < mask_fraction < 1:
        raise GeneratorError("mask_fraction must lie strictly between 0 and 1")
    h, w = shape
    rh = min(h, max(1, round(h * math.sqrt(mask_fraction))))
    rw = min(w, max(1, round(h * w * mask_fraction / rh)))
    rng = np.random.default_rng([seed, 6])
    out = []
    for _ in range(rounds):
        r0 = int(rng.integers(h - rh + 1))
        c0 = int(rng.integers(w - rw + 1))
        out.append((r0, c0, rh, rw))
    return out


def denoise(codemap, model, rounds=2, mask_fraction=0.25, cfg=GenConfig(), blanks=None):
    """Re-generate random rectangles of a complete code map, one rectangle per round."""
    cm = np.asarray(codemap).astype(np.int64)
    mc = model.cfg
    if cm.shape != (mc.h, mc.w):
        raise GeneratorError(f"code map must be {mc.h}x{mc.w}")
    if cm.min() < 0 or cm.max() >= mc.n_codes:
        raise GeneratorError("denoise input must be free of MASK entries")
    for i, (r0, c0, rh, rw) in enumerate(denoise_regions(cm.shape, rounds, mask_fraction, cfg.seed)):
        cond = cm.copy()
        cond[r0:r0 + rh, c0:c0 + rw] = mc.mask_id
        step_cfg = GenConfig(cfg.T, cfg.S, cfg.temperature, int(np.random.SeedSequence([cfg.seed, 7, i]).generate_state(1)[0]))
        cm = sample(model, step_cfg, blanks, cond)
    return cm


def paste_region(dst, src, src_rect, dst_origin):
    """Copy ``src[r0:r0+rh, c0:c0+rw]`` into ``dst`` at ``dst_origin``; returns a new map."""
    dst = np.asarray(dst)
    src = np.asarray(src)
    r0, c0, rh, rw = (int(v) for v in src_rect)
    dr, dc = (int(v) for v in dst_origin)
    if rh < 1 or rw < 1:
        raise GeneratorError("paste rectangle must be nonempty")
    if r0 < 0 or c0 < 0 or r0 + rh > src.shape[0] or c0 + rw > src.shape[1]:
        raise GeneratorError(f"source rectangle {src_rect} out of bounds for {src.shape}")
    if dr < 0 or dc < 0 or dr + rh > dst.shape[0] or dc + rw > dst.shape[1]:
        raise GeneratorError(f"destination {dst_origin} + {(rh, rw)} out of bounds for {dst.shape}")
    out = dst.copy()
    out[dr:dr + rh, dc:dc + rw] = src[r0:r0 + rh, c0:c0 + rw]
    return out


def to_entries(model, with_moments=True):
    c = model.cfg
    entries = {"meta.arch": np.array([c.h, c.w, c.n_codes, c.n_blocks, c.dim, c.n_heads], dtype=np.float32)}
    entries.update(model.store.to_entries(with_moments))
    return entries


def from_entries(entries):
    if "meta.arch" not in entries:
        raise GeneratorError("not a generator checkpoint")
    h, w, k, nb, dim, heads = (int(v) for v in entries["meta.arch"])
    model = GeneratorModel(GenModelConfig(h, w, k, nb, dim, heads))
    model.store.load_entries(entries)
    return model
