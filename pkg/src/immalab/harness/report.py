"""Long-form CSV reports: run_id,protocol,concept,method,epoch,metric,value."""

from __future__ import annotations

import csv
import math
from pathlib import Path

COLUMNS = ["run_id", "protocol", "concept", "method", "epoch", "metric", "value"]


class ReportError(ValueError):
    pass


def fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


class Report:
    def __init__(self, run_id="", protocol=""):
        self.run_id = run_id
        self.protocol = protocol
        self.rows = []  # (concept, method, epoch, metric, value)

    def add(self, concept, method, epoch, metric, value):
        self.rows.append((str(concept), str(method), int(epoch), str(metric), float(value)))

    def __len__(self):
        return len(self.rows)

    def get(self, concept, method, epoch, metric):
        for r in self.rows:
            if r[:4] == (concept, method, epoch, metric):
                return r[4]
        raise KeyError((concept, method, epoch, metric))

    def select(self, concept=None, method=None, epoch=None, metric=None):
        want = (concept, method, epoch, metric)
        return [r for r in self.rows if all(w is None or w == x for w, x in zip(want, r))]

    def epochs(self, concept, method, metric):
        return sorted(r[2] for r in self.select(concept, method, None, metric))

    def last(self, concept, method, metric):
        eps = self.epochs(concept, method, metric)
        if not eps:
            raise KeyError((concept, method, metric))
        return self.get(concept, method, eps[-1], metric)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for concept, method, epoch, metric, value in self.rows:
                w.writerow([self.run_id, self.protocol, concept, method, epoch, metric, fmt(value)])
        return path

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"report not found: {path}")
        rep = None
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != COLUMNS:
                raise ReportError(f"{path}:1: expected header {','.join(COLUMNS)}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(COLUMNS):
                    raise ReportError(f"{path}:{lineno}: expected {len(COLUMNS)} columns")
                rid, protocol, concept, method, epoch, metric, value = row
                if rep is None:
                    rep = cls(rid, protocol)
                try:
                    rep.add(concept, method, int(epoch), metric, float(value))
                except ValueError:
                    raise ReportError(f"{path}:{lineno}: bad epoch or value") from None
        return rep or cls()


def summarize(report: Report) -> list:
    """(method, metric, mean over concepts at each concept's final epoch, n) for SGR-type metrics."""
    acc = {}
    for concept, method, _, metric, _ in report.rows:
        if metric.startswith(("sgr_", "rsgr_")):
            acc.setdefault((method, metric), set()).add(concept)
    out = []
    for (method, metric), concepts in sorted(acc.items()):
        vals = [report.last(c, method, metric) for c in sorted(concepts)]
        vals = [v for v in vals if not math.isnan(v)]
        out.append((method, metric, sum(vals) / len(vals) if vals else float("nan"), len(vals)))
    return out
