"""Concept erasure: steer a concept's noise prediction onto the null token's."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as dm
from . import metrics as mt
from .autodiff import AdamState, ParamStore


@dataclass
class ErasureConfig:
    target_row: int
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    train_names: tuple = dm.FILM_NAMES
    guidance: float = 0.25  # negative guidance: push past the null prediction, away from the concept

    def __post_init__(self):
        if self.target_row == dm.NULL_ROW:
            raise ValueError("the null token cannot be erased")
        if self.target_row < 0:
            raise ValueError(f"invalid target row {self.target_row}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not self.train_names:
            raise ValueError("erasure needs at least one trainable tensor")


def erasure_gap(params, points, row, sched, seed=0, null_params=None) -> float:
    """mean ||eps(x_t, row) - eps_ref(x_t, null)||^2 over noised ``points``.

    ``null_params`` supplies the null-token prediction (defaults to ``params``).
    """
    rng = np.random.default_rng([seed, 13])
    points = np.asarray(points, dtype=np.float32)
    t, eps = dm.draw_noise(rng, len(points), sched)
    x_t = dm.q_sample(points, t, eps, sched)
    a = dm.forward(params, x_t, t, np.full(len(points), row)).data
    b = dm.forward(null_params or params, x_t, t, np.zeros(len(points), dtype=np.int64)).data
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def erase(model: ParamStore, points, config: ErasureConfig, sched=None, history=None, preserve=()) -> ParamStore:
    """Fine-tune ``config.train_names`` so the target row predicts like the frozen null row.

    ``preserve`` is an optional sequence of (row, points) pairs whose
    predictions are anchored to the frozen model; the null row is always
    anchored on the target's own noised points.
    """
    sched = sched or dm.schedule_linear()
    if config.target_row >= dm.n_rows(model):
        raise ValueError(f"target row {config.target_row} outside the embedding table")
    points = np.asarray(getattr(points, "train", points), dtype=np.float32)
    missing = [n for n in config.train_names if n not in model]
    if missing:
        raise ValueError(f"unknown parameters in train_names: {missing}")
    frozen = model.copy()
    params = model.copy()
    rng = np.random.default_rng([config.seed, 17])
    state = AdamState()
    names = list(config.train_names)
    bs = config.batch_size
    target = np.full(bs, config.target_row)
    null = np.zeros(bs, dtype=np.int64)
    keep = [(int(r), np.asarray(getattr(x, "train", x), dtype=np.float32)) for r, x in preserve]
    for _ in range(config.steps):
        x0 = points[rng.integers(0, len(points), bs)]
        t, eps = dm.draw_noise(rng, bs, sched)
        x_t = dm.q_sample(x0, t, eps, sched)
        goal = dm.forward(frozen, x_t, t, null).data
        if config.guidance:
            cond = dm.forward(frozen, x_t, t, target).data
            goal = goal - config.guidance * (cond - goal)
        anchors = [(x_t, t, null, dm.forward(frozen, x_t, t, null).data)]
        if keep:
            which = rng.integers(0, len(keep), bs)
            xo = np.stack([keep[k][1][rng.integers(0, len(keep[k][1]))] for k in which])
            ro = np.array([keep[k][0] for k in which])
            to, eo = dm.draw_noise(rng, bs, sched)
            xo_t = dm.q_sample(xo, to, eo, sched)
            anchors.append((xo_t, to, ro, dm.forward(frozen, xo_t, to, ro).data))

        def loss_fn():
            pred = dm.forward(params, x_t, t, target)
            loss = ad.mean(ad.square(ad.sub(pred, ad.stop_gradient(goal))))
            for xa, ta, ra, ga in anchors:
                drift = ad.sub(dm.forward(params, xa, ta, ra), ad.stop_gradient(ga))
                loss = ad.add(loss, ad.mean(ad.square(drift)))
            return loss

        loss, grads = ad.grad(loss_fn, params.select(names))
        ad.adam_update(params, grads, state, config.lr)
        if history is not None:
            history.append(loss)
    return params


@dataclass
class SimilarityReport:
    rows: list = field(default_factory=list)  # dicts: concept, epoch, metric, value

    def add(self, concept, metric, value, epoch=-1, **extra):
        self.rows.append({"concept": concept, "epoch": epoch, "metric": metric, "value": value, **extra})

    def value(self, concept, metric, epoch=-1):
        for r in self.rows:
            if r["concept"] == concept and r["metric"] == metric and r["epoch"] == epoch:
                return r["value"]
        raise KeyError((concept, metric, epoch))


def erasure_report(base, erased, datasets, classifier, target, sched=None, n=512, seed=1234):
    """Per-concept similarity, accuracy, and SGR of the erased model relative to ``base``."""
    sched = sched or dm.schedule_linear()
    rep = SimilarityReport()
    for ds in datasets:
        row = ds.spec.concept_id
        xs_base = dm.sample(base, row, n, sched, seed)
        xs = xs_base if erased is base else dm.sample(erased, row, n, sched, seed)
        rep.add(ds.name, "accuracy", mt.concept_accuracy(xs, classifier, row))
        rep.add(ds.name, "accuracy_base", mt.concept_accuracy(xs_base, classifier, row))
        for metric in mt.METRICS:
            m_base = mt.similarity(ds.reference, xs_base, metric)
            m = mt.similarity(ds.reference, xs, metric)
            rep.add(ds.name, f"sim_{metric}", m)
            rep.add(ds.name, f"sgr_{metric}", mt.sgr(m_base, m))
    return rep
