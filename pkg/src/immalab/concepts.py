"""Synthetic 2-D point-set concepts.

Each concept is a parametric shape plus isotropic Gaussian noise, clipped
to the [-3, 3] square.  Train and reference splits come from consecutive
draws of one generator stream, so they never share a point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOX = 3.0

PRETRAIN_CONCEPTS = (
    "ring",
    "small_ring",
    "two_moons",
    "spiral",
    "grid3x3",
    "cross",
    "segment",
    "blob",
)
HELDOUT_CONCEPTS = ("star", "s_curve", "box_outline", "two_rings", "pinwheel")
KINDS = PRETRAIN_CONCEPTS + HELDOUT_CONCEPTS

# Pretraining concepts occupy disjoint regions of the box so that a small
# classifier can tell them apart point by point; held-out concepts are
# centred and overlap them freely.
DEFAULT_PARAMS = {
    "ring": {"radius": 2.55, "noise": 0.06},
    "small_ring": {"radius": 0.5, "noise": 0.07},
    "two_moons": {"radius": 0.55, "cx": -1.05, "cy": 1.05, "noise": 0.08},
    "spiral": {"turns": 1.0, "radius": 0.65, "cx": 1.05, "cy": 1.05, "noise": 0.07},
    "grid3x3": {"spacing": 0.45, "cx": -1.05, "cy": -1.05, "noise": 0.07},
    "cross": {"half_length": 0.6, "cx": 1.05, "cy": -1.05, "noise": 0.08},
    "segment": {"half_length": 0.6, "cx": -2.42, "cy": 2.42, "noise": 0.1},
    "blob": {"cx": 2.4, "cy": -2.4, "noise": 0.15},
    "star": {"arms": 5.0, "radius": 2.0, "noise": 0.07},
    "s_curve": {"scale": 1.6, "noise": 0.07},
    "box_outline": {"half_side": 1.6, "noise": 0.06},
    "two_rings": {"radius": 0.8, "offset": 1.4, "noise": 0.06},
    "pinwheel": {"arms": 4.0, "radius": 2.2, "noise": 0.08},
}


class ConceptError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptSpec:
    kind: str
    concept_id: int = 0
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConceptError(f"unknown concept kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ConceptError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        if merged["noise"] <= 0:
            raise ConceptError(f"{self.kind}: noise must be > 0")
        object.__setattr__(self, "params", merged)


@dataclass
class ConceptDataset:
    spec: ConceptSpec
    train: np.ndarray
    reference: np.ndarray
    seed: int = 0

    @property
    def name(self):
        return self.spec.kind


# Shapes: each takes (rng, n, params) and returns an (n, 2) noiseless array
# centred at the origin; ``cx``/``cy`` translate it afterwards.


def _ring(rng, n, p):
    a = rng.uniform(0, 2 * np.pi, n)
    return p["radius"] * np.stack([np.cos(a), np.sin(a)], 1)


_small_ring = _ring


def _two_moons(rng, n, p):
    r = p["radius"]
    a = rng.uniform(0, np.pi, n)
    upper = rng.random(n) < 0.5
    x = np.where(upper, r * np.cos(a) - 0.5 * r, 0.5 * r - r * np.cos(a))
    y = np.where(upper, r * np.sin(a) - 0.25 * r, 0.25 * r - r * np.sin(a))
    return np.stack([x, y], 1)


def _spiral(rng, n, p):
    u = np.sqrt(rng.random(n))
    a = u * p["turns"] * 2 * np.pi
    r = p["radius"] * (0.15 + 0.85 * u)
    return np.stack([r * np.cos(a), r * np.sin(a)], 1)


def _grid3x3(rng, n, p):
    k = rng.integers(0, 9, n)
    s = p["spacing"]
    return np.stack([(k % 3 - 1) * s, (k // 3 - 1) * s], 1).astype(float)


def _cross(rng, n, p):
    t = rng.uniform(-p["half_length"], p["half_length"], n)
    horiz = rng.random(n) < 0.5
    return np.stack([np.where(horiz, t, 0.0), np.where(horiz, 0.0, t)], 1)


def _segment(rng, n, p):
    t = rng.uniform(-p["half_length"], p["half_length"], n)
    return np.stack([t, t], 1) / np.sqrt(2.0)


def _blob(rng, n, p):
    return np.zeros((n, 2))


def _star(rng, n, p):
    arms = int(p["arms"])
    k = rng.integers(0, arms, n)
    a = 2 * np.pi * k / arms + np.pi / 2
    t = rng.uniform(0, p["radius"], n)
    return np.stack([t * np.cos(a), t * np.sin(a)], 1)


def _s_curve(rng, n, p):
    t = rng.uniform(-1.5 * np.pi, 1.5 * np.pi, n)
    s = p["scale"]
    return np.stack([s * np.sin(t), s * np.sign(t) * (np.cos(t) - 1) / 2], 1)


def _box_outline(rng, n, p):
    h = p["half_side"]
    side = rng.integers(0, 4, n)
    t = rng.uniform(-h, h, n)
    x = np.select([side == 0, side == 1, side == 2], [t, t, -h], h)
    y = np.select([side == 0, side == 1, side == 2], [-h, h, t], t)
    return np.stack([x, y], 1)


def _two_rings(rng, n, p):
    a = rng.uniform(0, 2 * np.pi, n)
    c = np.where(rng.random(n) < 0.5, -p["offset"], p["offset"])
    return np.stack([c + p["radius"] * np.cos(a), p["radius"] * np.sin(a)], 1)


def _pinwheel(rng, n, p):
    arms = int(p["arms"])
    k = rng.integers(0, arms, n)
    t = rng.uniform(0.2, 1.0, n)
    a = 2 * np.pi * k / arms + 1.2 * t
    r = p["radius"] * t
    return np.stack([r * np.cos(a), r * np.sin(a)], 1)


_SHAPES = {
    "ring": _ring,
    "small_ring": _small_ring,
    "two_moons": _two_moons,
    "spiral": _spiral,
    "grid3x3": _grid3x3,
    "cross": _cross,
    "segment": _segment,
    "blob": _blob,
    "star": _star,
    "s_curve": _s_curve,
    "box_outline": _box_outline,
    "two_rings": _two_rings,
    "pinwheel": _pinwheel,
}


def draw(spec: ConceptSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise ConceptError(f"point count must be >= 0, got {n}")
    p = spec.params
    pts = _SHAPES[spec.kind](rng, n, p) + [p.get("cx", 0.0), p.get("cy", 0.0)]
    pts = pts + rng.normal(0.0, spec.params["noise"], (n, 2))
    return np.clip(pts, -BOX, BOX).astype(np.float32).reshape(n, 2)


def generate(spec: ConceptSpec, n_train=2048, n_ref=512, seed=0) -> ConceptDataset:
    if n_train < 0 or n_ref < 0:
        raise ConceptError("n_train and n_ref must be >= 0")
    rng = np.random.default_rng([seed, KINDS.index(spec.kind)])
    pts = draw(spec, n_train + n_ref, rng)
    return ConceptDataset(spec, pts[:n_train].copy(), pts[n_train:].copy(), seed)


def standard_specs(kinds=PRETRAIN_CONCEPTS, first_id=1):
    return [ConceptSpec(k, concept_id=first_id + i) for i, k in enumerate(kinds)]


def make_datasets(kinds=PRETRAIN_CONCEPTS, n_train=2048, n_ref=512, seed=0, first_id=1):
    return [generate(s, n_train, n_ref, seed) for s in standard_specs(kinds, first_id)]


# ----------------------------------------------------------------------- CSV


def write_points(points: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("x,y\n")
        for x, y in np.asarray(points, dtype=np.float32):
            fh.write(f"{x:.9g},{y:.9g}\n")


def read_points(path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return np.zeros((0, 2), dtype=np.float32)
        if [h.strip() for h in header] != ["x", "y"]:
            raise ConceptError(f"{path}:1: expected header 'x,y', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ConceptError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                raise ConceptError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
    return np.array(rows, dtype=np.float32).reshape(-1, 2)


def save_csv(ds: ConceptDataset, path):
    """Write ``<path>/train.csv`` and ``<path>/reference.csv``."""
    path = Path(path)
    write_points(ds.train, path / "train.csv")
    write_points(ds.reference, path / "reference.csv")


def load_csv(path, kind=None, concept_id=0) -> ConceptDataset:
    path = Path(path)
    kind = kind or path.name
    return ConceptDataset(
        ConceptSpec(kind, concept_id=concept_id),
        read_points(path / "train.csv"),
        read_points(path / "reference.csv"),
    )
