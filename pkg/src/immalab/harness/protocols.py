"""Experiment protocols: relearn, personalize, crossed, ablation, erasure-only.

Every protocol returns a :class:`Report`; rows are (concept, method, epoch,
metric, value).  ``method`` carries the branch: ``A/<m>`` is adaptation of
the non-immunized model, ``B/<m>`` adaptation after immunization.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path


from .. import adaptation as adp
from .. import concepts as cc
from .. import diffusion as dm
from .. import erasure as er
from .. import imma
from .. import metrics as mt
from . import checkpoint as ckpt
from . import config as cfgmod
from .report import Report

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class Lab:
    """Shared state of a run: data, schedule, pretrained model, classifier."""

    cfg: dict
    sched: dm.NoiseSchedule
    datasets: list
    heldout: list
    model: object = None
    classifier: mt.EvalClassifier = None
    timings: dict = field(default_factory=dict)

    def concept(self, name):
        for ds in self.datasets + self.heldout:
            if ds.name == name:
                return ds
        raise KeyError(name)

    @property
    def n_eval(self):
        return self.cfg["eval"]["n_samples"]


def schedule_from(cfg):
    s = cfg["schedule"]
    return dm.schedule_linear(s["T"], s["beta1"], s["betaT"])


def load_data(cfg):
    d = cfg["data"]
    pre = cc.make_datasets(cc.PRETRAIN_CONCEPTS, d["n_train"], d["n_ref"], d["seed"])
    held = cc.make_datasets(
        cc.HELDOUT_CONCEPTS, d["n_train"], d["n_ref"], d["seed"], first_id=len(pre) + 1
    )
    return pre, held


def train_config(cfg):
    return dm.TrainConfig(seed=cfg["seed"], **cfg["pretrain"])


def pretrain_model(cfg, datasets, sched):
    return dm.pretrain(datasets, train_config(cfg), sched)


def classifier_from(cfg, datasets):
    c = cfg["classifier"]
    return mt.train_classifier(datasets, steps=c["steps"], hidden=c["hidden"], lr=c["lr"], seed=cfg["seed"])


def save_classifier(clf, path):
    meta = {
        "role": "classifier",
        "classes": list(clf.classes),
        "rows": [int(r) for r in clf.rows],
        "validation_accuracy": clf.validation_accuracy,
    }
    return ckpt.save_checkpoint(clf.params, meta, path)


def load_classifier(path):
    store, meta = ckpt.load_checkpoint(path)
    if meta.get("role") != "classifier":
        raise ckpt.CheckpointError(f"{path}: role {meta.get('role')!r} is not a classifier")
    return mt.EvalClassifier(store, meta["classes"], meta["rows"], meta["validation_accuracy"])


def prepare(cfg, out=None) -> Lab:
    """Build the Lab; the pretrained model comes from cfg['checkpoint'] or is trained now."""
    sched = schedule_from(cfg)
    pre, held = load_data(cfg)
    lab = Lab(cfg, sched, pre, held)
    t0 = time.perf_counter()
    if cfg["checkpoint"]:
        path = Path(cfg["checkpoint"])
        if not path.exists():
            raise MissingArtifact(f"pretrained checkpoint not found: {path}")
        lab.model, meta = ckpt.load_checkpoint(path)
        if meta.get("role") != "pretrained":
            raise ckpt.CheckpointError(f"{path}: role {meta.get('role')!r}, expected 'pretrained'")
    else:
        lab.model = pretrain_model(cfg, pre, sched)
        if out is not None:
            ckpt.save_checkpoint(
                lab.model,
                {"role": "pretrained", "seed": cfg["seed"], "command": "protocol"},
                Path(out) / "pretrained.json",
            )
    lab.timings["pretrain"] = time.perf_counter() - t0
    lab.classifier = classifier_from(cfg, pre)
    return lab


# ------------------------------------------------------------------ helpers


def adapt_config(cfg, **kw):
    a = cfg["adapt"]
    return adp.AdaptConfig(epochs=a["epochs"], lr=a["lr"], batch_size=a["batch_size"], seed=cfg["seed"], **kw)


def imma_config(cfg, method: adp.AdaptMethod, **kw):
    c = dict(cfg["imma"])
    if c["upper_lr"] is None:
        c["upper_lr"] = cfg["upper_lr_by_method"].get(method.kind, 1e-4)
    return imma.ImmaConfig(method=method, seed=cfg["seed"], **c, **kw)


def erasure_config(cfg, row):
    e = dict(cfg["erasure"])
    e.pop("preserve")
    return er.ErasureConfig(target_row=row, seed=cfg["seed"], **e)


def _sims(reference, xs):
    return {m: mt.similarity(reference, xs, m) for m in mt.METRICS}


def _curve(lab, model, result, token, reference):
    """epoch -> (samples, {metric: similarity})."""
    out = {}
    for epoch, adapter in result.checkpoints:
        xs = adp.sample_adapted(model, adapter, token, lab.n_eval, lab.sched, lab.cfg["eval_seed"])
        out[epoch] = (xs, _sims(reference, xs))
    return out


def _final(result):
    return result.checkpoints[-1]


def erase_target(lab, ds):
    row = ds.spec.concept_id
    keep = [(o.spec.concept_id, o) for o in lab.datasets if o is not ds] if lab.cfg["erasure"]["preserve"] else ()
    return er.erase(lab.model, ds, erasure_config(lab.cfg, row), lab.sched, preserve=keep)


def other_accuracy(lab, model, skip, seed=None):
    seed = lab.cfg["eval_seed"] if seed is None else seed
    n = lab.cfg["eval"]["n_other"]
    return {
        o.name: mt.concept_accuracy(dm.sample(model, o.spec.concept_id, n, lab.sched, seed), lab.classifier, o.spec.concept_id)
        for o in lab.datasets
        if o.name != skip
    }


# ---------------------------------------------------------------- protocols


def run_erasure_only(lab: Lab, report: Report):
    for name in lab.cfg["targets"]:
        ds = lab.concept(name)
        row = ds.spec.concept_id
        erased = erase_target(lab, ds)
        gap0 = er.erasure_gap(lab.model, ds.reference, row, lab.sched)
        gap1 = er.erasure_gap(erased, ds.reference, row, lab.sched, null_params=lab.model)
        report.add(name, "erased", 0, "gap_ratio", gap1 / gap0 if gap0 else float("nan"))
        rep = er.erasure_report(lab.model, erased, lab.datasets, lab.classifier, row, lab.sched, lab.n_eval, lab.cfg["eval_seed"])
        for r in rep.rows:
            report.add(f"{name}/{r['concept']}", "erased", 0, r["metric"], r["value"])
    return report


def run_relearn(lab: Lab, report: Report):
    """erase -> (A) LoRA relearn; (B) immunize then LoRA relearn, same seeds."""
    cfg = lab.cfg
    method = adp.AdaptMethod(adp.LORA, new_token=False)
    for name in cfg["targets"]:
        t0 = time.perf_counter()
        ds = lab.concept(name)
        row = ds.spec.concept_id
        xs0 = dm.sample(lab.model, row, lab.n_eval, lab.sched, cfg["eval_seed"])
        report.add(name, "pretrained", 0, "accuracy", mt.concept_accuracy(xs0, lab.classifier, row))
        for m, v in _sims(ds.reference, xs0).items():
            report.add(name, "pretrained", 0, f"sim_{m}", v)
        erased = erase_target(lab, ds)
        theta, trace = imma.immunize(erased, ds, imma_config(cfg, method, target_row=row), lab.sched)
        report.add(name, "B/lora", 0, "upper_loss_first", trace.upper_losses()[0] if len(trace) else float("nan"))
        report.add(name, "B/lora", 0, "upper_loss_last", trace.upper_losses()[-1] if len(trace) else float("nan"))
        curves = {}
        for branch, model in (("A", erased), ("B", theta)):
            res = adp.adapt(model, adp.init_adapter(method, model, seed=cfg["seed"]), ds, adapt_config(cfg, token=row), lab.sched)
            curves[branch] = _curve(lab, model, res, row, ds.reference)
            for epoch, (xs, sims) in curves[branch].items():
                report.add(name, f"{branch}/lora", epoch, "accuracy", mt.concept_accuracy(xs, lab.classifier, row))
                for m, v in sims.items():
                    report.add(name, f"{branch}/lora", epoch, f"sim_{m}", v)
        for epoch in curves["A"]:
            for m in mt.METRICS:
                report.add(name, "lora", epoch, f"sgr_{m}", _sgr(curves["A"][epoch][1][m], curves["B"][epoch][1][m]))
        for stage, model in (("pretrained", lab.model), ("erased", erased), ("immunized", theta)):
            for other, acc in other_accuracy(lab, model, name).items():
                report.add(f"{name}/{other}", stage, 0, "accuracy", acc)
        log.info("relearn %s done in %.1fs", name, time.perf_counter() - t0)
    return report


def _sgr(m_a, m_b):
    return mt.sgr(m_a, m_b) if m_a > 0 else float("nan")


def _rsgr(m_other, m_target):
    return mt.rsgr(m_other, m_target) if m_other > 0 else float("nan")


def _tokens(lab):
    v_i = dm.n_rows(lab.model)
    v_a = v_i + 1
    if v_a == v_i:
        raise ValueError("adaptation and immunization tokens must differ")
    return v_i, v_a


def _personal(lab, model, method, ds, token, curve=False):
    ad0 = adp.init_adapter(method, model, seed=lab.cfg["seed"], token=token)
    res = adp.adapt(model, ad0, ds, adapt_config(lab.cfg), lab.sched)
    if curve:
        return _curve(lab, model, res, token, ds.reference)
    epoch, adapter = _final(res)
    xs = adp.sample_adapted(model, adapter, token, lab.n_eval, lab.sched, lab.cfg["eval_seed"])
    return {epoch: (xs, _sims(ds.reference, xs))}


def _immunize_for(lab, method, ds, v_i, **flags):
    theta, _ = imma.immunize(lab.model, ds, imma_config(lab.cfg, method, imma_token=v_i, **flags), lab.sched)
    return theta


def run_personalize(lab: Lab, report: Report):
    cfg = lab.cfg
    v_i, v_a = _tokens(lab)
    names = cfg["targets"]
    for kind in cfg["methods"]:
        method = adp.AdaptMethod(kind)
        base = {n: _personal(lab, lab.model, method, lab.concept(n), v_a, curve=True) for n in names}
        for j, name in enumerate(names):
            ds = lab.concept(name)
            other = lab.concept(names[(j + 1) % len(names)])
            theta = _immunize_for(lab, method, ds, v_i)
            cur = _personal(lab, theta, method, ds, v_a, curve=True)
            oth = _personal(lab, theta, method, other, v_a)
            for epoch in cur:
                for m in mt.METRICS:
                    report.add(name, f"A/{kind}", epoch, f"sim_{m}", base[name][epoch][1][m])
                    report.add(name, f"B/{kind}", epoch, f"sim_{m}", cur[epoch][1][m])
                    report.add(name, kind, epoch, f"sgr_{m}", _sgr(base[name][epoch][1][m], cur[epoch][1][m]))
            last = max(cur)
            xa, xb = base[name][last][0], cur[last][0]
            xao, xbo = base[other.name][last][0], oth[last][0]
            for m in mt.METRICS:
                m_t = mt.similarity(xa, xb, m)
                m_o = mt.similarity(xao, xbo, m)
                report.add(f"{name}/{other.name}", kind, last, f"pair_target_{m}", m_t)
                report.add(f"{name}/{other.name}", kind, last, f"pair_other_{m}", m_o)
                report.add(f"{name}/{other.name}", kind, last, f"rsgr_{m}", _rsgr(m_o, m_t))
    return report


def run_crossed(lab: Lab, report: Report):
    """2 x 2 grid: immunize with one method, adapt with the other (or the same)."""
    cfg = lab.cfg
    v_i, v_a = _tokens(lab)
    kinds = cfg["methods"]
    base = {}
    for kind_a in kinds:
        method_a = adp.AdaptMethod(kind_a)
        for name in cfg["targets"]:
            base[kind_a, name] = _personal(lab, lab.model, method_a, lab.concept(name), v_a)
    for kind_i in kinds:
        method_i = adp.AdaptMethod(kind_i)
        for name in cfg["targets"]:
            ds = lab.concept(name)
            theta = _immunize_for(lab, method_i, ds, v_i)
            for kind_a in kinds:
                cur = _personal(lab, theta, adp.AdaptMethod(kind_a), ds, v_a)
                (epoch, (_, sims_b)), = cur.items()
                sims_a = base[kind_a, name][epoch][1]
                cell = f"{kind_i}>{kind_a}"
                for m in mt.METRICS:
                    report.add(name, cell, epoch, f"sgr_{m}", _sgr(sims_a[m], sims_b[m]))
    return report


ARMS = ("full", "no_warm_start", "no_overlap_assign", "direct_max")


def run_ablation(lab: Lab, report: Report):
    """Four IMMA arms, each followed by target and other-concept adaptation."""
    cfg = lab.cfg
    v_i, v_a = _tokens(lab)
    method = adp.AdaptMethod(cfg["ablation_method"])
    names = cfg["targets"]
    digest = lab.model.digest()
    for j, name in enumerate(names):
        ds = lab.concept(name)
        other = lab.concept(names[(j + 1) % len(names)])
        for arm in ("none",) + ARMS:
            if lab.model.digest() != digest:
                raise RuntimeError("pretrained weights changed between ablation arms")
            if arm == "none":
                theta = lab.model
            else:
                flags = {} if arm == "full" else {arm: True}
                theta = _immunize_for(lab, method, ds, v_i, **flags)
            (epoch, (_, sims_t)), = _personal(lab, theta, method, ds, v_a).items()
            (_, (_, sims_o)), = _personal(lab, theta, method, other, v_a).items()
            for m in mt.METRICS:
                report.add(f"{name}/{other.name}", arm, epoch, f"target_sim_{m}", sims_t[m])
                report.add(f"{name}/{other.name}", arm, epoch, f"other_sim_{m}", sims_o[m])
    return report


RUNNERS = {
    "relearn": run_relearn,
    "personalize": run_personalize,
    "crossed": run_crossed,
    "ablation": run_ablation,
    "erasure-only": run_erasure_only,
}


def run(cfg, out=None, lab=None) -> Report:
    """Run ``cfg['protocol']``; with ``out`` the config and report CSV are written there."""
    out = out or cfg.get("out")
    rid = cfgmod.run_id(cfg)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfgmod.dumps(cfg), encoding="utf-8", newline="\n")
    if lab is None:
        lab = prepare(cfg, out)
    else:
        # reuse the trained model and classifier; only protocol settings may differ
        lab = Lab(cfg, lab.sched, lab.datasets, lab.heldout, lab.model, lab.classifier, lab.timings)
    report = Report(rid, cfg["protocol"])
    RUNNERS[cfg["protocol"]](lab, report)
    if out is not None:
        report.to_csv(out / "report.csv")
    return report
