"""Conditional DDPM over 2-D points with a FiLM-conditioned MLP denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore, Tensor

log = logging.getLogger(__name__)

TIME_DIM = 16
HIDDEN = 64
EMBED_DIM = 8
DATA_DIM = 2
NULL_ROW = 0

TRUNK_LAYERS = ("trunk.0", "trunk.1", "trunk.2")
FILM_BLOCKS = ("film.0", "film.1")
FILM_NAMES = tuple(
    f"{blk}.{part}" for blk in FILM_BLOCKS for part in ("scale_w", "scale_b", "shift_w", "shift_b")
)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def at(self, t):
        """Schedule entries for 1-based step indices ``t``."""
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"time step out of range [1, {self.T}]")
        i = t - 1
        return self.beta[i], self.alpha[i], self.alpha_bar[i]


def schedule_linear(T=200, beta1=1e-4, betaT=0.05) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta1 <= betaT < 1):
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got {beta1}, {betaT}")
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape != x0.shape:
        raise ValueError(f"q_sample: eps shape {eps.shape} != x0 shape {x0.shape}")
    _, _, ab = sched.at(t)
    ab = np.asarray(ab, dtype=np.float32).reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, dim=TIME_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


# ------------------------------------------------------------------ denoiser


def init_params(n_concepts: int, seed=0) -> ParamStore:
    """Fresh denoiser weights; embedding row 0 is the null token."""
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, fan_out))

    p = {
        "embed": rng.normal(0, 1.0, (n_concepts + 1, EMBED_DIM)),
        "trunk.0.w": dense(DATA_DIM + TIME_DIM, HIDDEN),
        "trunk.0.b": np.zeros(HIDDEN),
        "trunk.1.w": dense(HIDDEN, HIDDEN),
        "trunk.1.b": np.zeros(HIDDEN),
        "trunk.2.w": dense(HIDDEN, DATA_DIM) * 0.1,
        "trunk.2.b": np.zeros(DATA_DIM),
    }
    for blk in FILM_BLOCKS:
        p[f"{blk}.scale_w"] = rng.normal(0, 0.1, (EMBED_DIM, HIDDEN))
        p[f"{blk}.scale_b"] = np.zeros(HIDDEN)
        p[f"{blk}.shift_w"] = rng.normal(0, 0.1, (EMBED_DIM, HIDDEN))
        p[f"{blk}.shift_b"] = np.zeros(HIDDEN)
    return ParamStore(p)


def n_rows(weights) -> int:
    return weights["embed"].shape[0]


def film(h: Tensor, e: Tensor, w, block: str) -> Tensor:
    """h * (1 + scale(e)) + shift(e); scale/shift are affine maps of the embedding."""
    s = ad.affine(e, w[f"{block}.scale_w"], w[f"{block}.scale_b"])
    b = ad.affine(e, w[f"{block}.shift_w"], w[f"{block}.shift_b"])
    return ad.add(ad.add(h, ad.mul(h, s)), b)


def denoise(w, x_t, t, e: Tensor) -> Tensor:
    """Predicted noise for points ``x_t`` at steps ``t`` under embeddings ``e``.

    ``w`` is any name -> Tensor mapping holding the trunk and FiLM weights
    (adapters pass effective weights here).
    """
    x_t = ad.as_tensor(x_t)
    if x_t.shape[0] != e.shape[0]:
        raise ad.ShapeError("denoise", x_t.shape, e.shape)
    h = ad.concat([x_t, ad.as_tensor(time_embedding(t))])
    h = ad.silu(ad.affine(h, w["trunk.0.w"], w["trunk.0.b"]))
    h = film(h, e, w, "film.0")
    h = ad.silu(ad.affine(h, w["trunk.1.w"], w["trunk.1.b"]))
    h = film(h, e, w, "film.1")
    return ad.affine(h, w["trunk.2.w"], w["trunk.2.b"])


def forward(params, x_t, t, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    e = ad.gather_rows(params["embed"], rows)
    return denoise(params, x_t, t, e)


def draw_noise(rng, n, sched):
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n, DATA_DIM)).astype(np.float32)
    return t, eps


def noise_loss(predict, x0, t, eps, sched) -> Tensor:
    """mean ||predict(x_t, t) - eps||^2 with unit per-step weights."""
    if len(x0) == 0:
        raise ValueError("empty batch")
    x_t = q_sample(x0, t, eps, sched)
    return ad.mean(ad.square(ad.sub(predict(x_t, t), eps)))


def loss_diffusion(params, batch, concept_rows, sched, rng) -> Tensor:
    batch = np.asarray(batch, dtype=np.float32)
    if len(batch) == 0:
        raise ValueError("loss_diffusion: empty batch")
    rows = np.broadcast_to(np.asarray(concept_rows, dtype=np.int64), (len(batch),))
    if rows.min() < 0 or rows.max() >= n_rows(params):
        raise IndexError("loss_diffusion: concept row outside the embedding table")
    t, eps = draw_noise(rng, len(batch), sched)
    return noise_loss(lambda x, tt: forward(params, x, tt, rows), batch, t, eps, sched)


# ---------------------------------------------------------------- pretrain


@dataclass
class TrainConfig:
    steps: int = 60000
    batch_size: int = 256
    lr: float = 2e-3
    cf_dropout_p: float = 0.1
    seed: int = 0
    lr_final: float | None = 1e-5  # cosine decay from lr to lr_final; None keeps lr constant
    ema_decay: float | None = None  # return an exponential moving average of the weights

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.cf_dropout_p < 1:
            raise ValueError("cf_dropout_p must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _cosine_lr(config, step):
    if config.lr_final is None or config.steps <= 1:
        return config.lr
    frac = step / (config.steps - 1)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))


def pretrain(datasets, config: TrainConfig = None, sched=None, params=None, history=None):
    """Train a denoiser on every concept; returns the trained ParamStore.

    Concept rows are taken from each dataset's ``spec.concept_id``.  Pass a
    list as ``history`` to collect the per-step loss.
    """
    config = config or TrainConfig()
    if not datasets:
        raise ValueError("pretrain needs at least one dataset")
    sched = sched or schedule_linear()
    ids = [ds.spec.concept_id for ds in datasets]
    if params is None:
        params = init_params(max(ids), seed=config.seed)
    params = params.copy()
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    pools = [ds.train for ds in datasets]
    ema = params.copy() if config.ema_decay else None
    for step in range(config.steps):
        which = rng.integers(0, len(datasets), config.batch_size)
        batch = np.stack([pools[k][rng.integers(0, len(pools[k]))] for k in which])
        rows = np.array([ids[k] for k in which])
        rows[rng.random(config.batch_size) < config.cf_dropout_p] = NULL_ROW
        loss, grads = ad.grad(lambda: loss_diffusion(params, batch, rows, sched, rng), params)
        ad.adam_update(params, grads, state, _cosine_lr(config, step))
        if ema is not None:
            d = config.ema_decay
            for n in params:
                ema[n].data = d * ema[n].data + (1 - d) * params[n].data
        if history is not None:
            history.append(loss)
        if step % 1000 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss)
    return ema if ema is not None else params


# ------------------------------------------------------------------ sampling


def sample_with(predict, n, sched, seed):
    """DDPM ancestral sampling; ``predict(x_t, t)`` returns a noise estimate array."""
    if n < 0:
        raise ValueError(f"sample: n must be >= 0, got {n}")
    rng = np.random.default_rng([seed, 7])
    x = rng.standard_normal((n, DATA_DIM)).astype(np.float32)
    if n == 0:
        return x
    for t in range(sched.T, 0, -1):
        beta, alpha, ab = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
        eps_hat = predict(x, np.full(n, t))
        mean = (x - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            ab_prev = sched.alpha_bar[t - 2]
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + np.sqrt(var) * rng.standard_normal((n, DATA_DIM))
        else:
            x = mean
        x = x.astype(np.float32)
    return x


def sample(params, concept_row, n, sched=None, seed=0):
    sched = sched or schedule_linear()
    if not 0 <= concept_row < n_rows(params):
        raise IndexError(f"sample: concept row {concept_row} not in the embedding table")
    rows = np.full(max(n, 0), concept_row)

    def predict(x, t):
        return forward(params, x, t, rows).data

    return sample_with(predict, n, sched, seed)
