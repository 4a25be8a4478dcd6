"""Bi-level immunization against an adaptation method.

The outer loop ascends the adaptation loss over a subset S of the base
weights while the inner loop descends it over the adaptation variables,
warm-started from the previous outer iteration.  Only first-order
gradients are taken: the upper gradient is evaluated at the current inner
solution, held constant.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation as adp
from . import autodiff as ad
from . import diffusion as dm
from .autodiff import AdamState, ParamStore

log = logging.getLogger(__name__)


class ImmaError(ValueError):
    pass


@dataclass
class ImmaConfig:
    method: adp.AdaptMethod = field(default_factory=lambda: adp.AdaptMethod(adp.LORA, new_token=False))
    iterations: int = 500
    inner_steps: int = 1
    upper_lr: float = 1e-4
    inner_lr: float | None = None
    inner_optimizer: str = "sgd"
    batch_size: int = 128
    upper_batch_size: int | None = None
    s_names: tuple = dm.FILM_NAMES
    imma_token: int | None = None
    target_row: int | None = None
    no_warm_start: bool = False
    no_overlap_assign: bool = False
    direct_max: bool = False
    local: bool = False  # confine upper steps to the target row's FiLM output
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ImmaError("iterations must be >= 0")
        if self.inner_steps < 1:
            raise ImmaError("inner_steps must be >= 1")
        if self.upper_lr < 0:
            raise ImmaError("upper_lr must be >= 0")
        if not self.s_names:
            raise ImmaError("the upper-level parameter set S is empty")
        if self.inner_optimizer not in ("sgd", "adam"):
            raise ImmaError(f"unknown inner optimizer {self.inner_optimizer!r}")
        if not self.method.new_token and self.target_row is None:
            raise ImmaError("a method without a new token needs target_row")
        if self.local and self.target_row is None:
            raise ImmaError("local immunization needs target_row")

    @property
    def alpha(self):
        return self.upper_lr


@dataclass
class ImmunizationTrace:
    records: list = field(default_factory=list)  # (iteration, inner_loss, upper_loss)

    def append(self, i, inner, upper):
        self.records.append((i, inner, upper))

    def __len__(self):
        return len(self.records)

    def inner_losses(self):
        return np.array([r[1] for r in self.records])

    def upper_losses(self):
        return np.array([r[2] for r in self.records])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "inner_loss", "upper_loss"])
            for i, inner, upper in self.records:
                w.writerow([i, "" if inner is None else repr(inner), repr(upper)])


def local_basis(model, target_row):
    """Unit vector v over [embedding, 1] with v . [e_o, 1] = 0 for every row o != target_row.

    Moving a FiLM pair (W, b) only along v (one coefficient per output
    feature) changes the target row's scale/shift and leaves every other
    row's, the null row included, exactly as it was.
    """
    e = np.asarray(model["embed"].data, dtype=np.float64)
    if not 0 < target_row < len(e):
        raise ImmaError(f"target row {target_row} not in the embedding table")
    aug = np.concatenate([e, np.ones((len(e), 1))], axis=1)
    others = np.delete(aug, target_row, axis=0)
    _, sv, vt = np.linalg.svd(others)
    rank = int(np.sum(sv > 1e-6 * sv[0]))
    if rank >= aug.shape[1]:
        raise ImmaError("other embedding rows span the conditioning space; no local direction exists")
    v = vt[rank]
    if v @ aug[target_row] < 0:
        v = -v
    if abs(v @ aug[target_row]) < 1e-6:
        raise ImmaError("target row is a combination of the other rows; no local direction exists")
    return v


def _film_pairs(s_names):
    pairs = []
    for n in s_names:
        if n.endswith("_w"):
            b = n[:-2] + "_b"
            if b not in s_names:
                raise ImmaError(f"local immunization needs {b} alongside {n}")
            pairs.append((n, b))
        elif not (n.endswith("_b") and n[:-2] + "_w" in s_names):
            raise ImmaError(f"local immunization only handles FiLM weight pairs, got {n}")
    return pairs


def gradient_ascent_step(
    theta, phi, batch, s_names, state: AdamState, alpha, token, sched, rng, theta_overlap=True, basis=None
):
    """One Adam ascent step of the adaptation loss over ``s_names``; returns the loss.

    ``phi`` is held fixed; pass ``None`` to ascend the plain denoising loss.
    With ``basis`` (see :func:`local_basis`) each FiLM pair is stepped
    along that direction only.
    """
    s_names = list(s_names)
    if not s_names:
        raise ImmaError("gradient_ascent_step: empty parameter selector")
    t, eps = dm.draw_noise(rng, len(batch), sched)
    loss, grads = ad.grad(
        lambda: adp.adaptation_loss(
            theta, phi, batch, token, t, eps, sched, track_theta=True, theta_overlap=theta_overlap
        ),
        theta.select(s_names),
    )
    if not np.isfinite(loss):
        raise ImmaError("upper loss is not finite; lower the upper learning rate")
    if basis is None:
        ad.adam_update(theta, grads, state, alpha, maximize=True)
        return loss
    coef = ParamStore()
    gz = {}
    for w, b in _film_pairs(s_names):
        g = np.concatenate([grads[w], grads[b][None]], axis=0)
        gz[w] = basis @ g
        coef[w] = np.zeros(g.shape[1])
    ad.adam_update(coef, gz, state, alpha, maximize=True)
    for w, b in _film_pairs(s_names):
        dz = coef[w].data
        theta[w] = theta[w].data + np.outer(basis[:-1], dz)
        theta[b] = theta[b].data + basis[-1] * dz
    return loss


def _inner_steps(theta, phi, batch, token, config, lr, sched, rng, state):
    names = phi.trainable
    for _ in range(config.inner_steps):
        t, eps = dm.draw_noise(rng, len(batch), sched)
        _, grads = ad.grad(
            lambda: adp.adaptation_loss(theta, phi, batch, token, t, eps, sched),
            phi.params.select(names),
        )
        if config.inner_optimizer == "adam":
            ad.adam_update(phi.params, grads, state, lr)
        else:
            ad.sgd_update(phi.params, grads, lr)
    t, eps = dm.draw_noise(rng, len(batch), sched)
    return float(adp.adaptation_loss(theta, phi, batch, token, t, eps, sched).data)


def immunize(model: ParamStore, points, config: ImmaConfig = None, sched=None):
    """Return (immunized ParamStore, ImmunizationTrace).

    ``points`` is the target concept's training pool.  The adaptation
    variables are discarded at the end; only base weights in S and in the
    method's overlap set can differ from ``model``.
    """
    config = config or ImmaConfig()
    sched = sched or dm.schedule_linear()
    points = np.asarray(getattr(points, "train", points), dtype=np.float32)
    if len(points) == 0:
        raise ImmaError("immunize: empty training set")
    missing = [n for n in config.s_names if n not in model]
    if missing:
        raise ImmaError(f"S names not in the model: {missing}")
    theta = model.copy()
    imma_token = config.imma_token
    if config.method.new_token and imma_token is None:
        imma_token = dm.n_rows(model)
    phi = adp.init_adapter(config.method, theta, seed=config.seed, token=imma_token)
    token = imma_token if config.method.new_token else config.target_row
    adp.token_embedding(theta, phi, token, 0)  # rejects unknown tokens up front
    lr = config.method.lr if config.inner_lr is None else config.inner_lr
    rng = np.random.default_rng([config.seed, 19])
    upper_state = AdamState()
    inner_state = AdamState()
    b_up = config.upper_batch_size or config.batch_size
    basis = local_basis(model, config.target_row) if config.local else None
    # without line 7 theta and phi are separate copies: phi keeps its own
    # overlap values and theta's overlap entries receive no upper gradient
    shared = not config.no_overlap_assign
    trace = ImmunizationTrace()
    for i in range(1, config.iterations + 1):
        x_a = points[rng.integers(0, len(points), config.batch_size)]
        x_i = points[rng.integers(0, len(points), b_up)]
        if config.direct_max:
            up = gradient_ascent_step(
                theta, phi, x_i, config.s_names, upper_state, config.alpha, token, sched, rng, basis=basis
            )
            trace.append(i, None, up)
            continue
        if config.no_warm_start:
            phi = adp.init_adapter(config.method, theta, seed=config.seed * 100003 + i, token=imma_token)
            inner_state = AdamState()
        elif shared:
            # the overlap set is shared storage: phi sees the current base values
            adp.sync_overlap(phi, theta)
        inner = _inner_steps(theta, phi, x_a, token, config, lr, sched, rng, inner_state)
        if shared:
            for n in phi.overlap_names:
                theta.assign(n, phi.params[n].data)
        up = gradient_ascent_step(
            theta, phi, x_i, config.s_names, upper_state, config.alpha, token, sched, rng,
            theta_overlap=shared, basis=basis,
        )
        trace.append(i, inner, up)
        if i % 100 == 0:
            log.debug("imma iter %d inner %.4f upper %.4f", i, inner, up)
    return theta, trace
