"""Random composite graphs over the autodiff primitives, for gradient checks."""

import numpy as np

from immalab import autodiff as ad

UNARY = ("silu", "square", "scale", "affine", "affine")
BINARY = ("add", "sub", "mul", "concat")


def random_graph(seed, max_depth=6, max_width=16, max_rows=4):
    """Return (params, loss_fn) for a random graph of depth <= max_depth.

    The graph is a fixed plan of ops drawn once from ``seed``; ``loss_fn``
    replays it, so it is deterministic given the parameters.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_rows + 1))
    params = {}
    plan = []

    def new(shape, scale=1.0):
        name = f"p{len(params)}"
        params[name] = rng.normal(0, scale, shape)
        return name

    width = int(rng.integers(2, max_width + 1))
    if rng.random() < 0.3:
        table = new((5, width))
        idx = rng.integers(0, 5, n)
        plan.append(("gather", table, idx))
    else:
        plan.append(("leaf", new((n, width))))
    depth = int(rng.integers(1, max_depth + 1))
    for _ in range(depth - 1):
        op = rng.choice(UNARY + BINARY)
        if op == "square" and plan[-1][0] == "square":
            # (u^2)^2 has gradient 4u^3; near u = 0 the step-1e-3 central
            # difference error (4 h^2 u) swamps it in relative terms
            op = "silu"
        if op == "affine":
            out = int(rng.integers(2, max_width + 1))
            plan.append(("affine", new((width, out), 1 / np.sqrt(width)), new((out,), 0.1)))
            width = out
        elif op == "scale":
            plan.append(("scale", float(rng.normal())))
        elif op in ("silu", "square"):
            plan.append((op,))
        elif op == "concat":
            extra = int(rng.integers(1, max_width + 1))
            if width + extra > max_width:
                plan.append(("silu",))
                continue
            plan.append(("concat", new((n, extra))))
            width += extra
        else:
            plan.append((op, new((n, width))))
    head = rng.choice(["mean", "sum", "xent"])
    labels = rng.integers(0, width, n)
    store = ad.ParamStore(params)

    def loss_fn(p):
        h = None
        for step in plan:
            kind = step[0]
            if kind == "leaf":
                h = p[step[1]]
            elif kind == "gather":
                h = ad.gather_rows(p[step[1]], step[2])
            elif kind == "affine":
                h = ad.affine(h, p[step[1]], p[step[2]])
            elif kind == "scale":
                h = ad.scale(h, step[1])
            elif kind == "silu":
                h = ad.silu(h)
            elif kind == "square":
                h = ad.square(h)
            elif kind == "concat":
                h = ad.concat([h, p[step[1]]])
            else:
                h = getattr(ad, kind)(h, p[step[1]])
        if head == "mean":
            return ad.mean(h)
        if head == "sum":
            return ad.sum_all(h)
        return ad.softmax_cross_entropy(h, labels)

    return store, loss_fn
