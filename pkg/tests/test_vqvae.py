import dataclasses
import math

import numpy as np
import pytest

from lidarvq import formats, vqvae
from lidarvq.voxel import OccupancyGrid, iou
from gradcases import TINY_GRID, tiny_vqvae


def _bits(seed, n=None, p=0.2):
    rng = np.random.default_rng(seed)
    shape = TINY_GRID.shape if n is None else (n,) + TINY_GRID.shape
    return (rng.random(shape) < p).astype(np.uint8)


@pytest.fixture(scope="module")
def tiny():
    return tiny_vqvae(3)


def test_desk_geometry():
    model = vqvae.VqVaeModel(vqvae.ModelConfig(n_blocks=1, head_hidden=0))
    grid = np.zeros((128, 128, 16), np.uint8)
    z = vqvae.encode(grid, "dense", model)
    assert z.shape == (256, 64)
    rec = vqvae.reconstruct(grid, "sparse", model)
    assert rec.logits.shape == (128, 128, 16) and rec.codemap.shape == (16, 16)


def test_untrained_loss_is_ln2(tiny):
    rec = vqvae.reconstruct(_bits(0), "dense", tiny)
    assert np.all(rec.logits == 0)
    assert rec.bce == pytest.approx(math.log(2), rel=1e-6)


def test_encode_deterministic_and_geometry_errors(tiny):
    g = _bits(1)
    np.testing.assert_array_equal(vqvae.encode(g, "dense", tiny), vqvae.encode(g, "dense", tiny))
    assert vqvae.encode(g, "dense", tiny).shape == (4, 4)
    assert vqvae.encode(_bits(1, n=3), "sparse", tiny).shape == (3, 4, 4)
    with pytest.raises(ValueError):
        vqvae.encode(np.zeros((8, 8, 2), np.uint8), "dense", tiny)
    with pytest.raises(ValueError):
        vqvae.encode(g, "lateral", tiny)
    with pytest.raises(ValueError):
        vqvae.decode(np.zeros((3, 3), np.int64), tiny)
    with pytest.raises(ValueError):
        vqvae.decode(np.full((2, 2), 6), tiny)


def test_codemap_is_faithful_bottleneck():
    model = tiny_vqvae(4)
    model.params["dec.out.w"][...] = np.random.default_rng(0).normal(size=model.params["dec.out.w"].shape)
    g = _bits(2)
    rec = vqvae.reconstruct(g, "sparse", model)
    assert rec.codemap.max() < model.cfg.n_codes
    np.testing.assert_array_equal(vqvae.decode(rec.codemap, model), rec.logits)


def test_completion_ignores_dense_encoder():
    model = tiny_vqvae(5)
    model.params["dec.out.w"][...] = np.random.default_rng(1).normal(size=model.params["dec.out.w"].shape)
    g = _bits(3)
    before = vqvae.complete(g, model)
    for name, value in model.params.items():
        if name.startswith("enc_dense"):
            value[...] = 0
    after = vqvae.complete(g, model)
    assert isinstance(after, OccupancyGrid)
    np.testing.assert_array_equal(before.bits, after.bits)


def test_completion_of_dense_path_equals_reconstruction():
    model = tiny_vqvae(6)
    model.params["dec.out.w"][...] = np.random.default_rng(2).normal(size=model.params["dec.out.w"].shape)
    g = _bits(4)
    rec = vqvae.reconstruct(g, "sparse", model)
    np.testing.assert_array_equal(vqvae.complete(g, model).bits, vqvae.binarize(rec.logits))


def test_binarize_threshold():
    assert not vqvae.binarize(np.full((4, 4, 2), -5.0)).any()
    bits = vqvae.binarize(np.array([-0.1, 0.0, 0.1]))
    assert bits.tolist() == [0, 0, 1]
    cfg = TINY_GRID
    assert isinstance(vqvae.binarize(np.zeros(cfg.shape), config=cfg), OccupancyGrid)
    with pytest.raises(ValueError):
        vqvae.binarize(np.zeros(3), mode="coin")


def test_binarize_gumbel():
    logits = np.zeros(10_000)
    a = vqvae.binarize(logits, "gumbel", seed=7)
    np.testing.assert_array_equal(a, vqvae.binarize(logits, "gumbel", seed=7))
    assert abs(a.mean() - 0.5) <= 0.02
    # a logit l is accepted with probability sigmoid(l)
    b = vqvae.binarize(np.full(10_000, 2.0), "gumbel", seed=8)
    assert abs(b.mean() - 1 / (1 + math.exp(-2.0))) <= 0.02
    with pytest.raises(ValueError):
        vqvae.binarize(logits, "gumbel", temperature=0)


def test_training_decreases_loss_and_is_reproducible():
    dense = _bits(10, n=8, p=0.15)
    sparse = dense * _bits(11, n=8, p=0.5)
    cfg = vqvae.TrainConfig(iterations=60, batch_size=2, learning_rate=3e-3, warmup_iters=20,
                            bank_capacity=32, reinit_every=16)
    mcfg = tiny_vqvae().cfg
    a = vqvae.train((sparse, dense), cfg, mcfg)
    b = vqvae.train((sparse, dense), cfg, mcfg)
    loss = np.array(a.history.loss)
    assert loss[-6:].mean() < loss[:6].mean()
    assert a.history.loss == b.history.loss
    for name, value in a.params.items():
        np.testing.assert_array_equal(value, b.params[name])
    assert a.history.reinit_events[0][1] == mcfg.n_codes  # data-dependent initial codebook
    assert 0 < vqvae.final_utilization(a) <= 1


def test_reinit_flag_leaves_only_the_initial_kmeans(monkeypatch):
    calls = []
    real = vqvae.cbk.reinit_dead_codes
    monkeypatch.setattr(vqvae.cbk, "reinit_dead_codes", lambda *a, **k: calls.append(a[2]) or real(*a, **k))
    dense = _bits(12, n=4)
    cfg = vqvae.TrainConfig(iterations=40, batch_size=1, warmup_iters=5, reinit=False, bank_capacity=16,
                            reinit_every=8)
    m = vqvae.train((dense, dense), cfg, tiny_vqvae().cfg)
    assert len(m.history.reinit_events) == 1  # bank-full initialization, nothing after
    assert calls == []
    vqvae.train((dense, dense), dataclasses.replace(cfg, reinit=True), tiny_vqvae().cfg)
    assert calls == [8, 16, 24, 32]


def test_uniform_codebook_without_kmeans_init():
    dense = _bits(12, n=4)
    cfg = vqvae.TrainConfig(iterations=10, batch_size=1, warmup_iters=5, reinit=False, kmeans_init=False,
                            bank_capacity=16)
    m = vqvae.train((dense, dense), cfg, tiny_vqvae().cfg)
    assert m.history.reinit_events == []


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        vqvae.train([], vqvae.TrainConfig(iterations=1), tiny_vqvae().cfg)
    with pytest.raises(ValueError):
        vqvae.TrainConfig(iterations=0)


def test_non_finite_loss_aborts():
    model = tiny_vqvae(7)
    model.params["dec.out.b"][...] = np.nan
    dense = _bits(13, n=2)
    with pytest.raises(vqvae.TrainingDiverged, match="iteration 0"):
        vqvae.train((dense, dense), vqvae.TrainConfig(iterations=3, batch_size=1), model=model)


def test_feature_loss_hook_is_added():
    dense = _bits(14, n=2)
    calls = []

    def extra(target, logits):
        calls.append(logits.shape)
        return 1.0, np.zeros_like(logits)

    cfg = vqvae.TrainConfig(iterations=2, batch_size=1, bank_capacity=8)
    m = vqvae.train((dense, dense), cfg, tiny_vqvae().cfg, feature_loss=extra)
    assert len(calls) == 4  # two branches per iteration
    assert m.history.loss[0] > 2.0


def test_linear_heads_variant():
    cfg = vqvae.ModelConfig(TINY_GRID, n_blocks=1, dim=8, n_heads=2, n_codes=6, code_dim=4, head_hidden=0)
    model = vqvae.VqVaeModel(cfg)
    assert "enc_dense.patch.w" not in model.params
    assert vqvae.reconstruct(_bits(5), "dense", model).logits.shape == TINY_GRID.shape


def test_checkpoint_round_trip(tmp_path):
    model = tiny_vqvae(8)
    dense = _bits(15, n=3)
    vqvae.train((dense, dense), vqvae.TrainConfig(iterations=4, batch_size=1, bank_capacity=8), model=model)
    path = tmp_path / "m.ulck"
    formats.write_ulck(path, vqvae.to_entries(model))
    back = vqvae.from_entries(formats.read_ulck(path))
    assert back.cfg == model.cfg
    g = _bits(16)
    np.testing.assert_array_equal(vqvae.reconstruct(g, "sparse", back).logits,
                                  vqvae.reconstruct(g, "sparse", model).logits)
    np.testing.assert_array_equal(back.codebook.last_used, model.codebook.last_used)
    with pytest.raises(ValueError):
        vqvae.from_entries({})


def test_mean_iou():
    a = _bits(17, n=2)
    assert vqvae.mean_iou(a, a) == 1.0
    assert vqvae.mean_iou(a, 1 - a) == pytest.approx(np.mean([iou(x, 1 - x) for x in a]))
