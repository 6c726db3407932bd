"""Finite-difference gradient cases shared by the unit and acceptance suites (float64 throughout)."""

import numpy as np

from lidarvq import generator as gen
from lidarvq import nncore as nn
from lidarvq import vqvae
from lidarvq.voxel import GridConfig

TINY_GRID = GridConfig(0.0, 6.4, -3.2, 3.2, 0.0, 0.6, 0.4, 0.4, 0.3)  # 16 x 16 x 2
TOL = 1e-3


def _coords(rng, size, k):
    return None if size <= k else rng.choice(size, k, replace=False)


def _check_inputs(rng, forward, backward, inputs, k=24):
    """forward(*inputs) -> (y, cache); backward(dy, cache) -> tuple of input grads (None = skip)."""
    y, _ = forward(*inputs)
    r = rng.normal(size=y.shape)
    worst = 0.0
    for pos, x in enumerate(inputs):
        def f(theta, pos=pos):
            args = list(inputs)
            args[pos] = theta.reshape(x.shape)
            out, cache = forward(*args)
            grads = backward(r, cache)
            g = grads[pos]
            return float(np.sum(out * r)), (None if g is None else np.asarray(g))

        _, g = f(x.copy())
        if g is None:
            continue
        rep = nn.grad_check(f, x, coords=_coords(rng, x.size, k))
        worst = max(worst, rep.max_rel_error)
    return worst


def _block_params(rng, dim):
    store = nn.ParamStore()
    nn.init_block(store, rng, "b", dim)
    p = {k: v.astype(np.float64) for k, v in store.group("b").items()}
    # perturb the norms so their gradients are not degenerate
    for name in ("ln1.g", "ln2.g"):
        p[name] = p[name] + 0.1 * rng.normal(size=p[name].shape)
    for name in ("ln1.b", "ln2.b", "qkv.b", "proj.b", "fc1.b", "fc2.b"):
        p[name] = 0.1 * rng.normal(size=p[name].shape)
    return p


def _dict_case(rng, forward, backward, x, params, k=12):
    """Check d/dx and d/dparams for ops taking (x, params-dict)."""
    y, _ = forward(x, params)
    r = rng.normal(size=y.shape)
    worst = 0.0
    names = [None] + sorted(params)
    for name in names:
        base = x if name is None else params[name]

        def f(theta, name=name):
            p = dict(params)
            xx = x
            if name is None:
                xx = theta.reshape(x.shape)
            else:
                p[name] = theta.reshape(base.shape)
            out, cache = forward(xx, p)
            dx, grads = backward(r, cache)
            return float(np.sum(out * r)), (dx if name is None else grads[name])

        rep = nn.grad_check(f, base, coords=_coords(rng, base.size, k))
        worst = max(worst, rep.max_rel_error)
    return worst


def op_cases(seed):
    """name -> worst relative error over the checked coordinates."""
    rng = np.random.default_rng(seed)
    out = {}
    x = rng.normal(size=(2, 5, 6))
    out["affine"] = _check_inputs(
        rng, nn.affine, nn.affine_backward, [x, rng.normal(size=(6, 4)), rng.normal(size=4)])
    out["layer_norm"] = _check_inputs(
        rng, nn.layer_norm, lambda dy, c: nn.layer_norm_backward(dy, c),
        [x, 1 + 0.1 * rng.normal(size=6), rng.normal(size=6)])
    out["gelu"] = _check_inputs(rng, nn.gelu, lambda dy, c: (nn.gelu_backward(dy, c),), [3 * x])

    dim, heads = 8, 2
    p = _block_params(rng, dim)
    xt = rng.normal(size=(2, 6, dim))
    mask = np.ones(6, dtype=bool)
    mask[2] = False
    attn_p = {k: p[k] for k in ("qkv.w", "qkv.b", "proj.w", "proj.b")}
    out["self_attention"] = _dict_case(
        rng, lambda xx, pp: nn.self_attention(xx, pp, heads), nn.self_attention_backward, xt, attn_p)
    out["self_attention_masked"] = _dict_case(
        rng, lambda xx, pp: nn.self_attention(xx, pp, heads, mask), nn.self_attention_backward, xt, attn_p)
    out["attention_block"] = _dict_case(
        rng, lambda xx, pp: nn.attention_block(xx, pp, heads), nn.attention_block_backward, xt, p)

    stack = nn.BlockStack("s", 2, dim, heads)
    store = nn.ParamStore()
    stack.init(store, rng)
    sp = {k: v.astype(np.float64) for k, v in store.params.items()}

    def stack_bwd(dy, cache):
        grads = {}
        dx = stack.backward(dy, cache, grads)
        return dx, grads

    out["block_stack"] = _dict_case(rng, lambda xx, pp: stack.forward(pp, xx), stack_bwd, xt, sp, k=6)

    bits = (rng.random((2, 16, 16, 2)) < 0.3).astype(np.uint8)
    f = 8 * 8 * 2

    def embed_fwd(w, b, pos):
        return nn.patch_embed(bits, w, b, pos, np.float64)

    out["patch_embed"] = _check_inputs(
        rng, embed_fwd, lambda dy, c: nn.patch_embed_backward(dy, c),
        [0.1 * rng.normal(size=(f, 5)), rng.normal(size=5), rng.normal(size=(4, 5))])
    out["patch_unembed"] = _check_inputs(
        rng, lambda t, w, b: nn.patch_unembed(t, w, b, (16, 16, 2)), nn.patch_unembed_backward,
        [rng.normal(size=(2, 4, 5)), rng.normal(size=(5, f)), rng.normal(size=f)])

    target = (rng.random((3, 7)) < 0.4).astype(np.uint8)

    def bce(theta):
        return nn.bce_with_logits(theta.reshape(3, 7), target)

    out["bce_with_logits"] = nn.grad_check(bce, 3 * rng.normal(size=(3, 7))).max_rel_error
    targets = rng.integers(0, 5, size=(2, 6))
    ce_mask = rng.random((2, 6)) < 0.5
    ce_mask[0, 0] = True

    def ce(theta):
        return nn.cross_entropy(theta.reshape(2, 6, 5), targets, ce_mask, 0.1)

    out["cross_entropy"] = nn.grad_check(ce, rng.normal(size=(2, 6, 5))).max_rel_error
    out["vqvae_loss"] = vqvae_loss_case(seed)
    out["generator_loss"] = generator_loss_case(seed)
    return out


def tiny_vqvae(seed=0):
    cfg = vqvae.ModelConfig(TINY_GRID, n_blocks=1, dim=8, n_heads=2, n_codes=6, code_dim=4, head_hidden=8)
    return vqvae.VqVaeModel(cfg, seed=seed)


def vqvae_loss_case(seed, k=6):
    """Whole training loss with the discrete choice and stop-gradient operands pinned, warmup alpha = 0."""
    rng = np.random.default_rng([seed, 9])
    model = tiny_vqvae(seed)
    params = {name: v.astype(np.float64) for name, v in model.params.items()}
    # nonzero output layer so every upstream gradient is exercised
    params["dec.out.w"] = 0.1 * rng.normal(size=params["dec.out.w"].shape)
    for name in params:
        if name.endswith((".proj.w", ".fc2.w")):  # zero at init
            params[name] = 0.3 * rng.normal(size=params[name].shape)
    params["codebook.codes"] = rng.normal(size=params["codebook.codes"].shape)
    bits_in = (rng.random((2,) + TINY_GRID.shape) < 0.3).astype(np.uint8)
    target = (rng.random((2,) + TINY_GRID.shape) < 0.3).astype(np.uint8)
    z, _ = model._encode(bits_in, "sparse", params, np.float64)
    flat = z.reshape(-1, z.shape[-1])
    idx, _ = vqvae._nearest(flat, params["codebook.codes"])
    frozen = (idx, z.copy(), params["codebook.codes"][idx].reshape(z.shape).copy())
    _, grads, _ = model.loss_and_grads(bits_in, target, "sparse", 0, 10, 0.25, params=params, frozen=frozen)
    worst = 0.0
    for name in sorted(grads):
        base = params[name]

        def f(theta, name=name):
            p = dict(params)
            p[name] = theta.reshape(base.shape)
            loss, g, _ = model.loss_and_grads(bits_in, target, "sparse", 0, 10, 0.25, params=p, frozen=frozen)
            return loss, g[name]

        rep = nn.grad_check(f, base, coords=_coords(rng, base.size, k))
        worst = max(worst, rep.max_rel_error)
    return worst


def generator_loss_case(seed, k=6):
    rng = np.random.default_rng([seed, 10])
    model = gen.GeneratorModel(gen.GenModelConfig(2, 3, 5, 1, 8, 2), seed=seed)
    params = {name: v.astype(np.float64) for name, v in model.params.items()}
    targets = rng.integers(0, 5, size=(2, 6))
    mask = rng.random((2, 6)) < 0.5
    mask[:, 0] = True
    inputs = np.where(mask, 5, targets)
    worst = 0.0
    for name in sorted(params):
        base = params[name]

        def f(theta, name=name):
            p = dict(params)
            p[name] = theta.reshape(base.shape)
            model.store.params, saved = p, model.store.params
            try:
                loss, g = model.loss_and_grads(inputs, targets, mask, 0.1, params=p)
            finally:
                model.store.params = saved
            return loss, g[name]

        rep = nn.grad_check(f, base, coords=_coords(rng, base.size, k))
        worst = max(worst, rep.max_rel_error)
    return worst
