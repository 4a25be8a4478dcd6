import numpy as np
import pytest

from immalab import autodiff as ad
from immalab import concepts as cc
from immalab import diffusion as dm


def _product_loop(T, b1, bT):
    prod = 1.0
    for k in range(T):
        beta = b1 + (bT - b1) * k / (T - 1) if T > 1 else b1
        prod *= 1.0 - beta
    return prod


def test_schedule_small_cases():
    s = dm.schedule_linear(100, 1e-4, 0.02)
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-12)
    s1 = dm.schedule_linear(1, 1e-3, 1e-3)
    assert np.allclose(s1.alpha_bar, [1 - 1e-3])


def test_default_schedule_alpha_bar_matches_product_loop():
    s = dm.schedule_linear()
    assert s.alpha_bar[-1] == pytest.approx(_product_loop(s.T, 1e-4, 0.05), rel=1e-6)
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all(np.diff(s.beta) >= 0)


def test_schedule_bounds_rejected():
    for args in ((0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)):
        with pytest.raises(ValueError):
            dm.schedule_linear(*args)


def test_q_sample_cases():
    s = dm.schedule_linear()
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 2)).astype(np.float32)
    eps = rng.normal(size=(5, 2)).astype(np.float32)
    t = np.array([1, 5, 50, 100, s.T])
    ab = s.alpha_bar[t - 1].astype(np.float32)[:, None]
    assert np.array_equal(dm.q_sample(x0, t, np.zeros_like(x0), s), np.sqrt(ab) * x0)
    assert np.array_equal(dm.q_sample(np.zeros_like(x0), t, eps, s), np.sqrt(1 - ab) * eps)
    top = dm.q_sample(np.ones((1, 2)), [s.T], np.zeros((1, 2)), s)
    assert top[0, 0] == pytest.approx(np.sqrt(_product_loop(s.T, 1e-4, 0.05)), rel=1e-6)
    with pytest.raises(ValueError):
        dm.q_sample(x0, np.full(5, s.T + 1), eps, s)
    with pytest.raises(ValueError):
        dm.q_sample(x0, t, eps[:, :1], s)


def test_forward_process_variance():
    s = dm.schedule_linear()
    rng = np.random.default_rng(1)
    for t in (10, 100, 200):
        x = dm.q_sample(np.full((100_000, 2), 0.7), np.full(100_000, t), rng.standard_normal((100_000, 2)), s)
        assert x.var(axis=0) == pytest.approx(np.full(2, 1 - s.alpha_bar[t - 1]), rel=0.02)


def test_loss_of_oracle_and_zero_denoisers():
    s = dm.schedule_linear()
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(4096, 2)).astype(np.float32)
    t, eps = dm.draw_noise(rng, 4096, s)
    exact = dm.noise_loss(lambda x, tt: ad.as_tensor(eps), x0, t, eps, s)
    assert float(exact.data) == 0.0
    # the loss is a per-coordinate mean: zero prediction gives E||eps||^2 / dim, i.e. 2 / 2
    zero = dm.noise_loss(lambda x, tt: ad.as_tensor(np.zeros_like(x)), x0, t, eps, s)
    assert 2 * float(zero.data) == pytest.approx(2.0, abs=0.1)


def test_loss_rejects_empty_batch_and_bad_rows():
    p = dm.init_params(3)
    s = dm.schedule_linear()
    with pytest.raises(ValueError):
        dm.loss_diffusion(p, np.zeros((0, 2)), 1, s, np.random.default_rng(0))
    with pytest.raises(IndexError):
        dm.loss_diffusion(p, np.zeros((4, 2)), 9, s, np.random.default_rng(0))


def test_denoiser_loss_gradient_finite_differences():
    s = dm.schedule_linear()
    rng = np.random.default_rng(3)
    full = dm.init_params(3, seed=1)
    x0 = rng.normal(size=(8, 2)).astype(np.float32)
    t, eps = dm.draw_noise(rng, 8, s)
    rows = np.array([0, 1, 2, 3] * 2)
    # check a slice of every tensor family; the full store has ~10k coordinates
    names = ["embed", "film.0.scale_w", "film.1.shift_b", "trunk.1.b", "trunk.2.w"]
    sub = ad.ParamStore({n: full[n].data for n in names})

    def loss_fn(p):
        w = {n: (p[n] if n in p else full[n]) for n in full}
        return dm.noise_loss(lambda x, tt: dm.denoise(w, x, tt, ad.gather_rows(w["embed"], rows)), x0, t, eps, s)

    assert ad.finite_diff_check(loss_fn, sub, step=1e-3) <= 1e-3


def test_architecture_shapes():
    p = dm.init_params(8)
    assert p["embed"].shape == (9, dm.EMBED_DIM)
    for blk in dm.FILM_BLOCKS:
        assert p[f"{blk}.scale_w"].shape == (dm.EMBED_DIM, dm.HIDDEN)
    out = dm.forward(p, np.zeros((3, 2)), [1, 2, 3], [0, 1, 8])
    assert out.shape == (3, 2)


def test_pretrain_zero_steps_returns_init():
    ds = cc.make_datasets(n_train=64, n_ref=16)
    init = dm.init_params(len(ds), seed=0)
    out = dm.pretrain(ds, dm.TrainConfig(steps=0), params=init)
    assert out.equal(init)


def test_short_pretraining_lowers_loss():
    ds = cc.make_datasets()
    hist = []
    dm.pretrain(ds, dm.TrainConfig(steps=4000, batch_size=128, lr=1e-3, lr_final=None), history=hist)
    assert hist[-1] < hist[0]
    assert np.mean(hist[-200:]) < np.mean(hist[:200])


def test_train_config_validation():
    with pytest.raises(ValueError):
        dm.TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        dm.TrainConfig(cf_dropout_p=1.0)


def test_sampling_contract():
    p = dm.init_params(2)
    s = dm.schedule_linear()
    assert dm.sample(p, 1, 0, s).shape == (0, 2)
    assert np.array_equal(dm.sample(p, 1, 16, s, seed=5), dm.sample(p, 1, 16, s, seed=5))
    with pytest.raises(ValueError):
        dm.sample(p, 1, -1, s)
    with pytest.raises(IndexError):
        dm.sample(p, 3, 4, s)
