"""Shared fixtures.

The expensive pieces (the pretrained model and one report per protocol) are
session-scoped so the acceptance suite and the model-dependent oracle tests
pay for them once.  Verdict lines are collected and repeated in the
terminal summary.
"""

import time

import pytest

from immalab.harness import config as cfgmod
from immalab.harness import protocols as P

VERDICTS = []
TIMINGS = {}


def record(verdict):
    VERDICTS.append(verdict.line())
    print(verdict.line())
    return verdict


@pytest.fixture(scope="session")
def suite_clock():
    return time.perf_counter()


@pytest.fixture(scope="session")
def lab():
    """Default pretraining from scratch; its wall time feeds A2."""
    cfg = cfgmod.resolve({})
    t0 = time.perf_counter()
    lab = P.prepare(cfg)
    TIMINGS["pretrain"] = time.perf_counter() - t0
    return lab


@pytest.fixture(scope="session")
def protocol_report(lab, tmp_path_factory):
    cache = {}

    def get(name, **over):
        key = (name, repr(sorted(over.items())))
        if key not in cache:
            cfg = cfgmod.resolve({"protocol": name, **over})
            out = tmp_path_factory.mktemp(name.replace("-", "_"))
            t0 = time.perf_counter()
            cache[key] = (P.run(cfg, out, lab=lab), out)
            TIMINGS[key] = time.perf_counter() - t0
        return cache[key]

    return get


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
