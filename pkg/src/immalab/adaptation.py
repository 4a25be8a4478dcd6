"""Adaptation methods: token inversion, subset fine-tuning and low-rank adapters.

An :class:`AdapterSet` holds the adaptation variables as a ParamStore with
the naming scheme

* ``token.<id>``           a new 1 x EMBED_DIM embedding row,
* ``<layer>.lora_A/B``     low-rank factors of an affine layer,
* ``film.*``               in-place copies of base weights (the overlap set).

Overlap entries share their names with the base parameters they replace, so
writing them back into the model is a plain name-wise copy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as dm
from .autodiff import AdamState, ParamStore

log = logging.getLogger(__name__)

TOKEN_INVERSION = "token_inversion"
SUBSET_FINETUNE = "subset_finetune"
LORA = "lora"
METHODS = (TOKEN_INVERSION, SUBSET_FINETUNE, LORA)

DEFAULT_LR = {TOKEN_INVERSION: 5e-2, SUBSET_FINETUNE: 1e-3, LORA: 1e-2}
DEFAULT_LORA_LAYERS = ("trunk.0", "trunk.1")


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptMethod:
    kind: str
    rank: int = 4
    layers: tuple = ()
    new_token: bool = True
    train_token: bool | None = None

    def __post_init__(self):
        if self.kind not in METHODS:
            raise AdapterError(f"unknown adaptation method {self.kind!r}")
        if not self.layers:
            layers = {
                LORA: DEFAULT_LORA_LAYERS,
                SUBSET_FINETUNE: dm.FILM_NAMES,
                TOKEN_INVERSION: (),
            }[self.kind]
            object.__setattr__(self, "layers", tuple(layers))
        if self.kind == TOKEN_INVERSION and not self.new_token:
            raise AdapterError("token inversion needs a new token")
        if self.train_token is None:
            # LoRA keeps its placeholder token fixed, as DreamBooth-LoRA does
            object.__setattr__(self, "train_token", self.kind != LORA)

    @classmethod
    def named(cls, kind, **kw):
        return cls(kind, **kw)

    @property
    def lr(self):
        return DEFAULT_LR[self.kind]


@dataclass
class AdapterSet:
    method: AdaptMethod
    params: ParamStore
    overlap_names: tuple = ()
    token_ids: tuple = ()
    base_rows: int = 0
    base_digest: str = ""

    def copy(self) -> "AdapterSet":
        return AdapterSet(
            self.method,
            self.params.copy(),
            self.overlap_names,
            self.token_ids,
            self.base_rows,
            self.base_digest,
        )

    @property
    def trainable(self) -> list:
        """Names optimized by the adaptation (phi minus any frozen placeholder token)."""
        frozen = set() if self.method.train_token else {f"token.{i}" for i in self.token_ids}
        return [n for n in self.params if n not in frozen]

    def lora_delta(self, layer) -> np.ndarray:
        return self.params[f"{layer}.lora_A"].data @ self.params[f"{layer}.lora_B"].data


def init_adapter(method: AdaptMethod, model: ParamStore, seed=0, token=None) -> AdapterSet:
    """Fresh adaptation variables whose effect on the base model is exactly zero."""
    rng = np.random.default_rng([seed, 3])
    phi = {}
    overlap = ()
    if method.kind == LORA:
        for layer in method.layers:
            w = f"{layer}.w"
            if w not in model:
                raise AdapterError(f"LoRA layer {layer!r} not found in the model")
            n, d = model[w].shape
            if not 1 <= method.rank < min(n, d):
                raise AdapterError(
                    f"LoRA rank {method.rank} violates 1 <= r < min({n}, {d}) for {layer}"
                )
            phi[f"{layer}.lora_A"] = rng.normal(0, 0.01, (n, method.rank))
            phi[f"{layer}.lora_B"] = np.zeros((method.rank, d))
    elif method.kind == SUBSET_FINETUNE:
        missing = [n for n in method.layers if n not in model]
        if missing:
            raise AdapterError(f"subset fine-tuning names not in the model: {missing}")
        overlap = tuple(sorted(method.layers))
        for n in overlap:
            phi[n] = model[n].data
    token_ids = ()
    base_rows = dm.n_rows(model)
    if method.new_token:
        tok = base_rows if token is None else int(token)
        if tok < base_rows:
            raise AdapterError(f"token {tok} collides with an existing embedding row")
        phi[f"token.{tok}"] = rng.normal(0, 0.01, (1, dm.EMBED_DIM))
        token_ids = (tok,)
    return AdapterSet(method, ParamStore(phi), overlap, token_ids, base_rows, model.digest())


def sync_overlap(adapter: AdapterSet, model: ParamStore):
    """Copy the model's current values of the overlap set into the adapter."""
    for n in adapter.overlap_names:
        adapter.params[n] = model[n].data


def effective_weights(model, adapter, track_theta=False, theta_overlap=False):
    """name -> Tensor view of the adapted network.

    Base tensors only carry gradients when ``track_theta`` is set.  With
    ``theta_overlap`` the model's own overlap values are used instead of the
    adapter's copies.
    """
    w = {n: (model[n] if track_theta else ad.stop_gradient(model[n])) for n in model}
    if adapter is None:
        return w
    if adapter.method.kind == LORA:
        for layer in adapter.method.layers:
            delta = ad.matmul(adapter.params[f"{layer}.lora_A"], adapter.params[f"{layer}.lora_B"])
            w[f"{layer}.w"] = ad.add(w[f"{layer}.w"], delta)
    if not theta_overlap:
        for n in adapter.overlap_names:
            w[n] = adapter.params[n]
    return w


def token_embedding(w, adapter, token, n) -> ad.Tensor:
    rows = np.zeros(n, dtype=np.int64)
    key = f"token.{token}"
    if adapter is not None and key in adapter.params:
        return ad.gather_rows(adapter.params[key], rows)
    if not 0 <= token < w["embed"].shape[0]:
        raise AdapterError(f"unknown token {token}")
    return ad.gather_rows(w["embed"], rows + token)


def effective_forward(model, adapter, x_t, t, token, track_theta=False, theta_overlap=False):
    w = effective_weights(model, adapter, track_theta, theta_overlap)
    e = token_embedding(w, adapter, token, len(x_t))
    return dm.denoise(w, x_t, t, e)


def adaptation_loss(model, adapter, x0, token, t, eps, sched, track_theta=False, theta_overlap=False):
    """The denoising loss of the adapted model on clean points ``x0``."""

    def predict(x, tt):
        return effective_forward(model, adapter, x, tt, token, track_theta, theta_overlap)

    return dm.noise_loss(predict, x0, t, eps, sched)


def default_token(adapter: AdapterSet, token=None):
    if token is not None:
        return token
    if adapter.token_ids:
        return adapter.token_ids[0]
    raise AdapterError("no token given and the adapter introduces none")


@dataclass
class AdaptConfig:
    epochs: int = 20
    lr: float | None = None
    batch_size: int = 128
    seed: int = 0
    token: int | None = None
    steps: int | None = None  # overrides epochs when set; no per-epoch checkpoints then

    def __post_init__(self):
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("epochs/steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdaptResult:
    adapter: AdapterSet
    checkpoints: list = field(default_factory=list)  # (epoch, AdapterSet)
    losses: list = field(default_factory=list)


def adapt(model, adapter: AdapterSet, points, config: AdaptConfig = None, sched=None) -> AdaptResult:
    """Minimize the adapted denoising loss over the adapter's trainable variables.

    ``points`` is the concept's training pool.  One epoch is one pass over
    it in shuffled mini-batches; a snapshot is kept before the first epoch
    and after every epoch.
    """
    config = config or AdaptConfig()
    sched = sched or dm.schedule_linear()
    points = np.asarray(getattr(points, "train", points), dtype=np.float32)
    token = default_token(adapter, config.token)
    lr = adapter.method.lr if config.lr is None else config.lr
    adapter = adapter.copy()
    names = adapter.trainable
    rng = np.random.default_rng([config.seed, 5])
    state = AdamState()
    result = AdaptResult(adapter, [(0, adapter.copy())])
    per_epoch = max(1, -(-len(points) // config.batch_size))
    total = config.steps if config.steps is not None else config.epochs * per_epoch
    if len(points) == 0 and total:
        raise ValueError("adapt: empty training set")
    order = np.empty(0, dtype=np.int64)
    for step in range(total):
        k = step % per_epoch
        if k == 0:
            order = rng.permutation(len(points))
        idx = order[k * config.batch_size : (k + 1) * config.batch_size]
        x0 = points[idx]
        t, eps = dm.draw_noise(rng, len(x0), sched)
        loss, grads = ad.grad(
            lambda: adaptation_loss(model, adapter, x0, token, t, eps, sched),
            adapter.params.select(names),
        )
        ad.adam_update(adapter.params, grads, state, lr)
        result.losses.append(loss)
        if config.steps is None and k == per_epoch - 1:
            result.checkpoints.append(((step + 1) // per_epoch, adapter.copy()))
    return result


def merge(model: ParamStore, adapter: AdapterSet) -> ParamStore:
    """Fold the adapter into a new ParamStore.

    Token rows are appended to the embedding table at their token ids (any
    gap below an id is filled with zero rows).  The adapter must have been
    initialized against ``model``; merging into an already merged store
    would add the low-rank update twice and is rejected.
    """
    if adapter.method.kind == TOKEN_INVERSION and not adapter.token_ids:
        raise AdapterError("token-inversion adapter without a token cannot be merged")
    if model.digest() != adapter.base_digest:
        raise AdapterError(
            "adapter was initialized against a different model (merging twice double-adds the update)"
        )
    out = model.copy()
    if adapter.method.kind == LORA:
        for layer in adapter.method.layers:
            out[f"{layer}.w"] = model[f"{layer}.w"].data + adapter.lora_delta(layer)
    for n in adapter.overlap_names:
        out[n] = adapter.params[n].data
    if adapter.token_ids:
        table = model["embed"].data
        rows = max(adapter.token_ids) + 1
        new = np.zeros((rows, table.shape[1]), dtype=table.dtype)
        new[: len(table)] = table
        for tok in adapter.token_ids:
            new[tok] = adapter.params[f"token.{tok}"].data[0]
        out["embed"] = new
    return out


def sample_adapted(model, adapter, token, n, sched=None, seed=0):
    sched = sched or dm.schedule_linear()

    def predict(x, t):
        return effective_forward(model, adapter, x, t, token).data

    return dm.sample_with(predict, n, sched, seed)
