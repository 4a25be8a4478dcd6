"""Sample-set similarities, gap ratios, and the concept classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import AdamState, ParamStore

ENERGY = "energy"
RBF_MMD = "rbf_mmd"
METRICS = (ENERGY, RBF_MMD)


def _points(X, label):
    X = np.asarray(X, dtype=np.float64).reshape(-1, 2)
    if len(X) == 0:
        raise ValueError(f"{label}: empty point set")
    return X


def _canonical(X, Y):
    # fixed argument order so that D(X, Y) == D(Y, X) bit for bit
    return (Y, X) if (len(X), X.tobytes()) > (len(Y), Y.tobytes()) else (X, Y)


def energy_distance(X, Y) -> float:
    """V-statistic energy distance 2E|x-y| - E|x-x'| - E|y-y'| (self-pairs included)."""
    X, Y = _canonical(_points(X, "energy_distance"), _points(Y, "energy_distance"))
    return float(2 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean())


def median_bandwidth(X, Y) -> float:
    Z = np.concatenate([X, Y])
    d = cdist(Z, Z)
    med = float(np.median(d[np.triu_indices(len(Z), 1)])) if len(Z) > 1 else 0.0
    return med if med > 0 else 1.0


def rbf_mmd2(X, Y, bandwidth=None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel."""
    X, Y = _canonical(_points(X, "rbf_mmd2"), _points(Y, "rbf_mmd2"))
    h = bandwidth or median_bandwidth(X, Y)

    def k(A, B):
        return np.exp(-cdist(A, B, "sqeuclidean") / (2 * h * h))

    return float(k(X, X).mean() + k(Y, Y).mean() - 2 * k(X, Y).mean())


def distance(X, Y, metric=ENERGY, bandwidth=None) -> float:
    if metric == ENERGY:
        return energy_distance(X, Y)
    if metric == RBF_MMD:
        return rbf_mmd2(X, Y, bandwidth)
    raise ValueError(f"unknown metric {metric!r}")


def similarity(X, Y, metric=ENERGY, bandwidth=None) -> float:
    """exp(-D): 1 for identical sets, decreasing in the distance."""
    return float(np.exp(-max(distance(X, Y, metric, bandwidth), 0.0)))


def sgr(m_ref_vs_noimma: float, m_ref_vs_imma: float) -> float:
    """Relative drop in reference similarity caused by immunization."""
    if m_ref_vs_noimma == 0:
        raise ZeroDivisionError("sgr: similarity without immunization is zero")
    return (m_ref_vs_noimma - m_ref_vs_imma) / m_ref_vs_noimma


def rsgr(m_other_pair: float, m_target_pair: float) -> float:
    """Gap between with/without-immunization agreement on another concept and on the target."""
    if m_other_pair == 0:
        raise ZeroDivisionError("rsgr: other-concept similarity is zero")
    return (m_other_pair - m_target_pair) / m_other_pair


# ---------------------------------------------------------------- classifier


@dataclass
class EvalClassifier:
    params: ParamStore
    classes: list = field(default_factory=list)  # concept names, in label order
    rows: list = field(default_factory=list)  # embedding row of each class
    validation_accuracy: float = float("nan")

    def logits(self, X):
        X = np.asarray(X, dtype=np.float32).reshape(-1, 2)
        p = self.params
        h = ad.silu(ad.affine(X, p["l0.w"], p["l0.b"]))
        return ad.affine(h, p["l1.w"], p["l1.b"])

    def predict(self, X) -> np.ndarray:
        return self.logits(X).data.argmax(axis=1)

    def label_of(self, concept):
        if isinstance(concept, str):
            return self.classes.index(concept)
        return self.rows.index(int(concept))


def train_classifier(datasets, steps=1500, hidden=32, lr=1e-2, seed=0) -> EvalClassifier:
    """Fit the 2 -> hidden -> C classifier on reference splits, validate on train splits."""
    rng = np.random.default_rng([seed, 11])
    C = len(datasets)
    p = ParamStore(
        {
            "l0.w": rng.normal(0, 1 / np.sqrt(2), (2, hidden)),
            "l0.b": np.zeros(hidden),
            "l1.w": rng.normal(0, 1 / np.sqrt(hidden), (hidden, C)),
            "l1.b": np.zeros(C),
        }
    )
    clf = EvalClassifier(
        p, [ds.name for ds in datasets], [ds.spec.concept_id for ds in datasets]
    )
    X = np.concatenate([ds.reference for ds in datasets])
    y = np.concatenate([np.full(len(ds.reference), k) for k, ds in enumerate(datasets)])
    state = AdamState()
    for _ in range(steps):
        _, grads = ad.grad(lambda: ad.softmax_cross_entropy(clf.logits(X), y), p)
        ad.adam_update(p, grads, state, lr)
    Xv = np.concatenate([ds.train for ds in datasets])
    yv = np.concatenate([np.full(len(ds.train), k) for k, ds in enumerate(datasets)])
    clf.validation_accuracy = float((clf.predict(Xv) == yv).mean())
    return clf


def concept_accuracy(samples, classifier: EvalClassifier, target) -> float:
    samples = np.asarray(samples).reshape(-1, 2)
    if len(samples) == 0:
        raise ValueError("concept_accuracy: empty sample set")
    return float((classifier.predict(samples) == classifier.label_of(target)).mean())


def similarity_curve(sampler, checkpoints, reference, metric=ENERGY, n=512, seed=1234):
    """epoch -> similarity of ``sampler(checkpoint, n, seed)`` samples to ``reference``.

    ``checkpoints`` is a sequence of (epoch, checkpoint) pairs ordered by epoch.
    """
    return {
        epoch: similarity(reference, sampler(ckpt, n, seed), metric)
        for epoch, ckpt in checkpoints
    }
