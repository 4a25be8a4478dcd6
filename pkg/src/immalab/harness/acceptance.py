"""Acceptance checks computed from protocol reports.

Each check returns a list of :class:`Verdict`; ``protocol --check`` exits
non-zero when any verdict fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import diffusion as dm
from .. import metrics as mt
from .report import Report


@dataclass
class Verdict:
    criterion: str
    passed: bool
    detail: str

    def line(self):
        return f"{self.criterion} {'PASS' if self.passed else 'FAIL'}: {self.detail}"


def _targets(report, method, metric):
    return sorted({r[0] for r in report.select(method=method, metric=metric)})


def _split(key):
    target, other = key.split("/", 1)
    return target, other


def split_half_ed(ref, n_splits=20, seed=0):
    """Energy distance between two random halves of ``ref``, averaged over splits.

    A single split varies by a factor of ten between draws on tight concepts,
    so one unlucky split could fail even samples from the true generator.
    """
    rng = np.random.default_rng(seed)
    half = len(ref) // 2
    eds = []
    for _ in range(n_splits):
        perm = rng.permutation(len(ref))
        eds.append(mt.energy_distance(ref[perm[:half]], ref[perm[half:]]))
    return float(np.mean(eds))


def check_pretrain(model, datasets, classifier, sched, n=512, seed=1234):
    """Per concept: ED(generated, reference) <= 2 x reference split-half ED, accuracy >= 0.90."""
    bad, worst_ratio, worst_acc = [], 0.0, 1.0
    for ds in datasets:
        ref = ds.reference
        floor = split_half_ed(ref)
        xs = dm.sample(model, ds.spec.concept_id, n, sched, seed)
        ratio = mt.energy_distance(xs, ref) / floor
        acc = mt.concept_accuracy(xs, classifier, ds.spec.concept_id)
        worst_ratio, worst_acc = max(worst_ratio, ratio), min(worst_acc, acc)
        if ratio > 2.0 or acc < 0.90:
            bad.append(ds.name)
    detail = f"max ED/split-half ED {worst_ratio:.2f} (<=2), min accuracy {worst_acc:.3f} (>=0.90)"
    return [Verdict("A2", not bad, detail + (f"; failing {bad}" if bad else ""))]


def check_erasure_from_relearn(report: Report):
    """Target accuracy <= 10% on each erased model, each other concept >= 80%."""
    worst_t, worst_o, bad = 0.0, 1.0, []
    for t in _targets(report, "A/lora", "accuracy"):
        acc_t = report.get(t, "A/lora", 0, "accuracy")
        others = [r[4] for r in report.select(method="erased", metric="accuracy") if _split(r[0])[0] == t]
        worst_t = max(worst_t, acc_t)
        worst_o = min([worst_o] + others)
        if acc_t > 0.10 or min(others) < 0.80:
            bad.append(t)
    ok = not bad
    return [Verdict("A3", ok, f"max erased target acc {worst_t:.3f} (<=0.10), min other acc {worst_o:.3f} (>=0.80)" + (f"; failing {bad}" if bad else ""))]


def check_relearn(report: Report):
    targets = _targets(report, "A/lora", "accuracy")
    acc_a = [report.last(t, "A/lora", "accuracy") for t in targets]
    ratio = [report.last(t, "A/lora", "sim_energy") / report.get(t, "pretrained", 0, "sim_energy") for t in targets]
    a4 = np.mean(acc_a) >= 0.60 and min(ratio) >= 0.8
    out = [
        Verdict(
            "A4",
            bool(a4),
            f"mean relearned acc {np.mean(acc_a):.3f} (>=0.60), min final/pre-erasure similarity {min(ratio):.3f} (>=0.8)",
        )
    ]
    acc_b = [report.last(t, "B/lora", "accuracy") for t in targets]
    acc_b3 = [report.get(t, "B/lora", 3, "accuracy") for t in targets if 3 in report.epochs(t, "B/lora", "accuracy")]
    sg = {m: [report.last(t, "lora", f"sgr_{m}") for t in targets] for m in mt.METRICS}
    both = sum(all(sg[m][k] > 0 for m in mt.METRICS) for k in range(len(targets)))
    mean_sgr = float(np.nanmean([v for m in mt.METRICS for v in sg[m]]))
    need = max(1, math.ceil(len(targets) * 7 / 8))
    a5 = np.mean(acc_b) <= 0.15 and both >= need and mean_sgr >= 0.10
    detail = (
        f"mean acc after relearning {np.mean(acc_b):.3f} (<=0.15; epoch 3: {np.mean(acc_b3) if acc_b3 else float('nan'):.3f}), "
        f"SGR>0 under both metrics on {both}/{len(targets)} (>={need}), mean SGR {mean_sgr:.3f} (>=0.10)"
    )
    out.append(Verdict("A5", bool(a5), detail))
    drops = []
    for t in targets:
        before = [r[4] for r in report.select(method="erased", metric="accuracy") if _split(r[0])[0] == t]
        after = [r[4] for r in report.select(method="immunized", metric="accuracy") if _split(r[0])[0] == t]
        drops.append(np.mean(before) - np.mean(after))
    out.append(
        Verdict(
            "A6a",
            bool(max(drops) <= 0.30),
            f"largest mean other-concept accuracy drop after immunization {100 * max(drops):.1f} pp (<=30)",
        )
    )
    return out


def check_personalize(report: Report):
    out = []
    methods = sorted({r[1] for r in report.rows if r[3].startswith("sgr_")})
    parts, ok = [], True
    for m in methods:
        targets = _targets(report, m, "sgr_energy")
        counts = {
            metric: sum(report.last(t, m, f"sgr_{metric}") > 0 for t in targets) for metric in mt.METRICS
        }
        need = max(1, math.ceil(len(targets) * 4 / 5))
        ok &= all(c >= need for c in counts.values())
        parts.append(f"{m} " + "/".join(f"{counts[x]}" for x in mt.METRICS) + f" of {len(targets)}")
    out.append(Verdict("A7", bool(ok and methods), "SGR>0 (energy/rbf_mmd): " + ", ".join(parts) + " (>=4 of 5 each)"))
    rs = [r[4] for r in report.rows if r[3].startswith("rsgr_")]
    pos = sum(v > 0 for v in rs)
    out.append(Verdict("A6b", pos * 2 > len(rs), f"RSGR>0 on {pos}/{len(rs)} (target, other, method, metric) cells (majority)"))
    return out


def check_ablation(report: Report):
    arms = ("full", "no_warm_start", "no_overlap_assign", "direct_max")

    def mean(arm, metric):
        return float(np.mean([r[4] for r in report.select(method=arm, metric=metric)]))

    ok, parts = True, []
    for m in mt.METRICS:
        other = {a: mean(a, f"other_sim_{m}") for a in arms}
        target = {a: mean(a, f"target_sim_{m}") for a in arms}
        i = min(other, key=other.get) == "direct_max"
        ii = target["no_overlap_assign"] > target["full"] and target["no_warm_start"] > target["full"]
        ok &= i and ii
        parts.append(
            f"[{m}] other sim " + " ".join(f"{a}={other[a]:.3f}" for a in arms)
            + "; target sim " + " ".join(f"{a}={target[a]:.3f}" for a in arms)
        )
    return [Verdict("A8", bool(ok), " | ".join(parts))]


def check_crossed(report: Report):
    cells = sorted({r[1] for r in report.rows})
    means = {}
    for c in cells:
        for m in mt.METRICS:
            vals = [r[4] for r in report.select(method=c, metric=f"sgr_{m}")]
            means[c, m] = float(np.nanmean(vals))
    off = [c for c in cells if c.split(">")[0] != c.split(">")[1]]
    ok = any(all(means[c, m] > 0 for m in mt.METRICS) for c in off)
    detail = ", ".join(f"{c}: " + "/".join(f"{means[c, m]:.3f}" for m in mt.METRICS) for c in cells)
    return [Verdict("A9", bool(ok and len(cells) == 4), f"mean SGR (energy/rbf_mmd) {detail}")]


def check_erasure_only(report: Report):
    bad = []
    targets = sorted({r[0] for r in report.select(method="erased", metric="gap_ratio")})
    for t in targets:
        acc_t = report.get(f"{t}/{t}", "erased", 0, "accuracy")
        others = [r[4] for r in report.select(method="erased", metric="accuracy") if _split(r[0])[0] == t and _split(r[0])[1] != t]
        if acc_t > 0.10 or min(others) < 0.80:
            bad.append(t)
    ratios = [report.get(t, "erased", 0, "gap_ratio") for t in targets]
    return [
        Verdict("A3", not bad, f"targets failing accuracy thresholds: {bad or 'none'}"),
        Verdict("erasure-gap", max(ratios) <= 0.1, f"max gap ratio {max(ratios):.3f} (<=0.1)"),
    ]


CHECKS = {
    "relearn": lambda r: check_erasure_from_relearn(r) + check_relearn(r),
    "personalize": check_personalize,
    "ablation": check_ablation,
    "crossed": check_crossed,
    "erasure-only": check_erasure_only,
}


def check(report: Report):
    return CHECKS[report.protocol](report)
