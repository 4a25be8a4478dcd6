"""Command-line entry point: ``immalab <subcommand> [--config --seed --out --ckpt]``.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 acceptance
check failed (``protocol --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import adaptation as adp
from .. import concepts as cc
from .. import diffusion as dm
from .. import imma
from .. import metrics as mt
from . import acceptance
from . import checkpoint as ckpt
from . import config as cfgmod
from . import protocols as P
from .report import Report, summarize

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("immalab")


def _cfg(args, **over):
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise cfgmod.ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise cfgmod.ConfigError(f"{path}: config must be a JSON object")
    raw.update({k: v for k, v in over.items() if v is not None})
    if args.seed is not None:
        raw["seed"] = args.seed
    return cfgmod.resolve(raw)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_ckpt(args):
    if not args.ckpt:
        raise cfgmod.ConfigError("--ckpt is required for this command")
    return args.ckpt


def _one_target(cfg):
    if not cfg["targets"]:
        raise cfgmod.ConfigError("no target concept configured")
    return cfg["targets"][0]


def _command(args):
    return " ".join(["immalab"] + sys.argv[1:]) if sys.argv else args.cmd


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    cfg = _cfg(args)
    out = _out(args, "data")
    pre, held = P.load_data(cfg)
    for ds in pre + held:
        cc.save_csv(ds, out / ds.name)
    print(f"wrote {len(pre) + len(held)} concepts to {out}")


def cmd_pretrain(args):
    cfg = _cfg(args)
    out = _out(args, "runs/pretrain")
    pre, _ = P.load_data(cfg)
    sched = P.schedule_from(cfg)
    history = []
    model = dm.pretrain(pre, P.train_config(cfg), sched, history=history)
    meta = {"role": "pretrained", "seed": cfg["seed"], "command": _command(args)}
    path = ckpt.save_checkpoint(model, meta, out / "pretrained.json")
    P.save_classifier(P.classifier_from(cfg, pre), out / "classifier.json")
    (out / "config.json").write_text(cfgmod.dumps(cfg), encoding="utf-8", newline="\n")
    print(f"pretrained: loss {history[0]:.4f} -> {history[-1]:.4f}; wrote {path}")


def _load_role(path, *roles):
    store, meta = ckpt.load_checkpoint(path)
    if meta.get("role") not in roles:
        raise cfgmod.ConfigError(f"{path}: role {meta.get('role')!r}, expected one of {roles}")
    return store, meta


def cmd_erase(args):
    cfg = _cfg(args, protocol="erasure-only")
    model, _ = _load_role(_need_ckpt(args), "pretrained")
    target = _one_target(cfg)
    out = _out(args, f"runs/erase-{target}")
    lab = P.Lab(cfg, P.schedule_from(cfg), *P.load_data(cfg), model=model)
    erased = P.erase_target(lab, lab.concept(target))
    meta = {"role": "erased", "target": target, "seed": cfg["seed"], "command": _command(args)}
    print(f"wrote {ckpt.save_checkpoint(erased, meta, out / 'erased.json')}")


def cmd_immunize(args):
    cfg = _cfg(args)
    model, meta0 = _load_role(_need_ckpt(args), "pretrained", "erased")
    kind = (cfg["methods"] or [adp.LORA])[0]
    target = meta0.get("target") or _one_target(cfg)
    out = _out(args, f"runs/immunize-{target}")
    pre, held = P.load_data(cfg)
    lab = P.Lab(cfg, P.schedule_from(cfg), pre, held, model=model)
    ds = lab.concept(target)
    if target in cc.PRETRAIN_CONCEPTS and kind == adp.LORA:
        method = adp.AdaptMethod(adp.LORA, new_token=False)
        config = P.imma_config(cfg, method, target_row=ds.spec.concept_id)
    else:
        method = adp.AdaptMethod(kind)
        config = P.imma_config(cfg, method, imma_token=dm.n_rows(model))
    theta, trace = imma.immunize(model, ds, config, lab.sched)
    trace.to_csv(out / "trace.csv")
    meta = {"role": "immunized", "method": kind, "target": target, "seed": cfg["seed"], "command": _command(args)}
    print(f"wrote {ckpt.save_checkpoint(theta, meta, out / 'immunized.json')}")


def cmd_adapt(args):
    cfg = _cfg(args)
    model, meta0 = _load_role(_need_ckpt(args), "pretrained", "erased", "immunized")
    kind = (cfg["methods"] or [adp.LORA])[0]
    target = meta0.get("target") or _one_target(cfg)
    out = _out(args, f"runs/adapt-{target}")
    pre, held = P.load_data(cfg)
    lab = P.Lab(cfg, P.schedule_from(cfg), pre, held, model=model)
    ds = lab.concept(target)
    if target in cc.PRETRAIN_CONCEPTS and kind == adp.LORA:
        method, token = adp.AdaptMethod(adp.LORA, new_token=False), ds.spec.concept_id
    else:
        method, token = adp.AdaptMethod(kind), dm.n_rows(model) + 1
    adapter = adp.init_adapter(method, model, seed=cfg["seed"], token=token if method.new_token else None)
    res = adp.adapt(model, adapter, ds, P.adapt_config(cfg, token=token), lab.sched)
    meta = {
        "role": "adapter",
        "method": kind,
        "target": target,
        "seed": cfg["seed"],
        "command": _command(args),
        "token": int(token),
        "rank": method.rank,
        "layers": list(method.layers),
        "new_token": method.new_token,
        "train_token": method.train_token,
        "overlap_names": list(res.adapter.overlap_names),
        "token_ids": [int(t) for t in res.adapter.token_ids],
        "base_rows": res.adapter.base_rows,
        "base_digest": res.adapter.base_digest,
    }
    path = ckpt.save_checkpoint(res.adapter.params, meta, out / "adapter.json")
    print(f"adapted {target} with {kind}: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; wrote {path}")


def load_adapter(path):
    store, meta = _load_role(path, "adapter")
    method = adp.AdaptMethod(
        meta["method"], rank=meta["rank"], layers=tuple(meta["layers"]),
        new_token=meta["new_token"], train_token=meta["train_token"],
    )
    adapter = adp.AdapterSet(
        method, store, tuple(meta["overlap_names"]), tuple(meta["token_ids"]), meta["base_rows"], meta["base_digest"]
    )
    return adapter, meta


def cmd_eval(args):
    """Similarity and accuracy of one checkpoint (optionally with an adapter) on its target."""
    cfg = _cfg(args)
    paths = _need_ckpt(args).split(",")
    model, meta = ckpt.load_checkpoint(paths[0])
    pre, held = P.load_data(cfg)
    lab = P.Lab(cfg, P.schedule_from(cfg), pre, held, model=model)
    rep = Report(cfgmod.run_id(cfg), "eval")
    adapter = None
    if len(paths) > 1:
        adapter, ameta = load_adapter(paths[1])
        target, token = ameta["target"], ameta["token"]
    else:
        target = meta.get("target") or _one_target(cfg)
        token = lab.concept(target).spec.concept_id
        if target not in cc.PRETRAIN_CONCEPTS:
            raise cfgmod.ConfigError(f"{target} has no embedding row; pass an adapter checkpoint too")
    ds = lab.concept(target)
    xs = adp.sample_adapted(model, adapter, token, lab.n_eval, lab.sched, cfg["eval_seed"])
    for m in mt.METRICS:
        rep.add(target, meta.get("role", ""), 0, f"sim_{m}", mt.similarity(ds.reference, xs, m))
    if target in cc.PRETRAIN_CONCEPTS:
        clf = P.classifier_from(cfg, pre)
        rep.add(target, meta.get("role", ""), 0, "accuracy", mt.concept_accuracy(xs, clf, target))
    if args.out:
        rep.to_csv(_out(args, ".") / "eval.csv")
    for r in rep.rows:
        print(",".join(str(x) for x in r))


def cmd_protocol(args):
    cfg = _cfg(args, checkpoint=args.ckpt)
    out = _out(args, cfg.get("out") or f"runs/{cfg['protocol']}")
    cfg["out"] = str(out)
    report = P.run(cfg, out)
    print(f"run {report.run_id}: {len(report)} rows -> {out / 'report.csv'}")
    if args.check:
        verdicts = acceptance.check(report)
        for v in verdicts:
            print(v.line())
        if not all(v.passed for v in verdicts):
            return EXIT_CHECK
    return EXIT_OK


def cmd_report(args):
    if not args.reports:
        raise cfgmod.ConfigError("report needs at least one report.csv")
    merged = None
    for path in args.reports:
        rep = Report.from_csv(path)
        for method, metric, mean, n in summarize(rep):
            print(f"{rep.protocol},{method},{metric},mean={mean:.4f},n={n}")
        if args.check and rep.protocol in acceptance.CHECKS:
            for v in acceptance.check(rep):
                print(v.line())
        merged = rep if merged is None else merged
        if rep is not merged:
            merged.rows += rep.rows
    if args.out:
        out = merged.to_csv(_out(args, ".") / "merged.csv")
        print(f"wrote {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "erase": cmd_erase,
    "immunize": cmd_immunize,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "protocol": cmd_protocol,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="immalab", description="Model immunization desk lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="training seed override")
        p.add_argument("--out", help="output directory")
        p.add_argument("--ckpt", help="input checkpoint (eval: model[,adapter])")
        if name in ("protocol", "report"):
            p.add_argument("--check", action="store_true", help="evaluate acceptance criteria")
        if name == "report":
            p.add_argument("reports", nargs="*", help="report.csv files")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args) or EXIT_OK
    except (cfgmod.ConfigError, imma.ImmaError, adp.AdapterError, cc.ConceptError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ckpt.CheckpointError) as e:
        print(f"missing: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
