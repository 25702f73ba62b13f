"""Partial Prompt Suppression objectives and the adapter training loop.

PPS: the adapted model, driven on instruction i of the full prompt, must
reproduce the frozen model's velocity for the prompt with instruction i
removed. SPPS treats the whole prompt as one instruction and targets the
empty (or neutral-instruction) prompt instead.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import GSTLORA, STLORA, Adapter, bind, init_adapter
from .autodiff import Tensor
from .mmdit import EditorModel, TrainingError, encode_batch, flatten_grids
from .prompt import EMPTY
from .world import make_dataset

log = logging.getLogger(__name__)

PPS = "pps"
SPPS = "spps"
NULL_EMPTY = "empty"
NULL_NEUTRAL = "neutral"


# ----------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params: list, grads: list, state: AdamState, lr: float,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """One AdamW update of the arrays in ``params`` (in place)."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params: list, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step([p.data for p in self.params], grads, self.state, self.lr,
                       self.betas, self.eps, self.weight_decay)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

@dataclass
class Hyperparams:
    lr: float = 1e-4
    batch_size: int = 8
    iterations: int = 1000
    seed: int = 0
    objective: str = SPPS
    spps_null: str = NULL_EMPTY
    rank: int = 16
    weight_decay: float = 0.0
    ks: tuple = (1, 2, 3)
    dataset_size: int = 2048

    def __post_init__(self):
        self.ks = tuple(self.ks)
        if self.lr <= 0 or self.iterations < 1 or self.batch_size < 1:
            raise ValueError("lr > 0, iterations >= 1 and batch_size >= 1 required")
        if self.objective not in (PPS, SPPS):
            raise ValueError(f"objective must be {PPS!r} or {SPPS!r}")
        if self.spps_null not in (NULL_EMPTY, NULL_NEUTRAL):
            raise ValueError(f"spps_null must be {NULL_EMPTY!r} or {NULL_NEUTRAL!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


def default_hyperparams(mode: str, **overrides) -> Hyperparams:
    """Iteration/batch defaults per adapter mode (STLoRA 1000 x 8, GSTLoRA 300 x 4)."""
    base = {STLORA: dict(iterations=1000, batch_size=8), GSTLORA: dict(iterations=300, batch_size=4)}[mode]
    base.update(overrides)
    return Hyperparams(**base)


def noisy_latent(noise: np.ndarray, x_orig: np.ndarray, t) -> np.ndarray:
    """Z = (1 - t) * noise + t * X_orig; ``t`` is a scalar or one value per example."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (np.ndim(noise) - t.ndim))
    return (1.0 - t) * noise + t * x_orig


@dataclass
class TrainBatch:
    x_orig: np.ndarray  # [B, N, C]
    prompts: list
    noise: np.ndarray
    t: np.ndarray
    targets: list

    def __post_init__(self):
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValueError("t must lie in [0, 1]")
        if len(self.targets) != len(self.prompts):
            raise ValueError("one target instruction per example")


def suppression_targets(model: EditorModel, batch: TrainBatch, objective: str = PPS,
                        null_prompt=EMPTY) -> tuple:
    """Frozen target velocity v* and the prompts/targets driving the adapted pass."""
    if objective == SPPS:
        prompts = [p.collapsed() for p in batch.prompts]
        targets = [0 if len(p) else None for p in prompts]
        ablated = [null_prompt for _ in prompts]
    else:
        prompts = list(batch.prompts)
        targets = list(batch.targets)
        ablated = [p.without(i) for p, i in zip(prompts, targets)]
    z = noisy_latent(batch.noise, batch.x_orig, batch.t)
    ids_ab, _ = encode_batch(ablated, model.config)
    with ad.no_grad():
        v_star = model.forward(z, batch.x_orig, ids_ab, batch.t).data
    return v_star, prompts, targets, z


def batch_loss(model: EditorModel, adapter, batch: TrainBatch, objective: str = PPS, null_prompt=EMPTY) -> Tensor:
    """Mean squared gap between the adapted full-prompt velocity and v*."""
    for p, i in zip(batch.prompts, batch.targets):
        if objective == PPS and not 0 <= i < len(p):
            raise IndexError(f"target {i} out of range for K={len(p)}")
    v_star, prompts, targets, z = suppression_targets(model, batch, objective, null_prompt)
    ids, spans = encode_batch(prompts, model.config)
    binding = None
    if adapter is not None:
        settings = [[] if i is None else [(i, 1.0)] for i in targets]
        binding = bind(adapter, model.config, spans, settings)
    v_hat = model.forward(z, batch.x_orig, ids, batch.t, binding)
    return ad.mse(v_hat, Tensor(v_star))


def _single(Z, X_orig, t):
    z, x = flatten_grids(Z), flatten_grids(X_orig)
    return z, x, np.array([float(t)])


def pps_loss(model: EditorModel, adapter, Z, X_orig, prompt, i: int, t: float) -> Tensor:
    """PPS loss of one example. Z and X_orig are [H, W, C] grids."""
    if not 0 <= i < len(prompt):
        raise IndexError(f"target {i} out of range for K={len(prompt)}")
    z, x, tt = _single(Z, X_orig, t)
    ids_ab, _ = encode_batch([prompt.without(i)], model.config)
    with ad.no_grad():
        v_star = model.forward(z, x, ids_ab, tt).data
    ids, spans = encode_batch([prompt], model.config)
    binding = bind(adapter, model.config, spans, [[(i, 1.0)]]) if adapter is not None else None
    return ad.mse(model.forward(z, x, ids, tt, binding), Tensor(v_star))


def spps_loss(model: EditorModel, adapter, Z, X_orig, prompt, t: float, null_prompt=EMPTY) -> Tensor:
    """SPPS loss of one example: whole prompt as one instruction vs ``null_prompt``."""
    z, x, tt = _single(Z, X_orig, t)
    single = prompt.collapsed()
    ids_ab, _ = encode_batch([null_prompt], model.config)
    with ad.no_grad():
        v_star = model.forward(z, x, ids_ab, tt).data
    ids, spans = encode_batch([single], model.config)
    settings = [[(0, 1.0)] if len(single) else []]
    binding = bind(adapter, model.config, spans, settings) if adapter is not None else None
    return ad.mse(model.forward(z, x, ids, tt, binding), Tensor(v_star))


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def draw_batch(examples: list, rng: np.random.Generator, batch_size: int) -> TrainBatch:
    idx = rng.integers(0, len(examples), size=batch_size)
    chosen = [examples[i] for i in idx]
    x = flatten_grids([e.x_orig for e in chosen])
    noise = rng.standard_normal(x.shape)
    t = rng.uniform(0.0, 1.0, size=batch_size)
    targets = [int(rng.integers(0, len(e.prompt))) if len(e.prompt) else 0 for e in chosen]
    return TrainBatch(x, [e.prompt for e in chosen], noise, t, targets)


def fixed_batches(examples: list, seed: int, batch_size: int = 16) -> list:
    """Deterministic held-out batches (noise, t and targets frozen by ``seed``)."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        x = flatten_grids([e.x_orig for e in chunk])
        out.append(TrainBatch(x, [e.prompt for e in chunk], rng.standard_normal(x.shape),
                              rng.uniform(0.0, 1.0, size=len(chunk)),
                              [int(rng.integers(0, len(e.prompt))) if len(e.prompt) else 0 for e in chunk]))
    return out


def evaluate_loss(model: EditorModel, adapter, batches: list, objective: str = PPS, null_prompt=EMPTY) -> float:
    """Example-weighted mean loss; ``adapter=None`` gives the zero-adapter baseline."""
    total, n = 0.0, 0
    with ad.no_grad():
        for b in batches:
            total += float(batch_loss(model, adapter, b, objective, null_prompt).data) * len(b.prompts)
            n += len(b.prompts)
    return total / max(n, 1)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, step, loss, targets, t_mean):
        self.rows.append({"step": step, "loss": loss, "target_index": ";".join(map(str, targets)), "t_mean": t_mean})

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "target_index", "t_mean"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "loss": repr(r["loss"]), "t_mean": repr(r["t_mean"])})


def resolve_null(world, spps_null: str):
    return world.neutral_prompt() if spps_null == NULL_NEUTRAL else EMPTY


def train_adapter(model: EditorModel, world, mode: str, hp: Hyperparams, examples: list | None = None,
                  adapter: Adapter | None = None, callback=None) -> tuple:
    """Train a fresh adapter against the frozen model; returns (adapter, TrainLog).

    Raises :class:`TrainingError` (carrying the last good step) on a non-finite loss.
    """
    model.set_trainable(False)
    if examples is None:
        examples = make_dataset(world, hp.dataset_size, hp.seed + 1, ks=hp.ks)
    if any(len(e.prompt) == 0 for e in examples) and hp.objective == PPS:
        examples = [e for e in examples if len(e.prompt)]
    adapter = adapter or init_adapter(model.config, mode, hp.rank, hp.seed)
    null = resolve_null(world, hp.spps_null)
    opt = AdamW(adapter.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    tlog = TrainLog()
    for step in range(hp.iterations):
        batch = draw_batch(examples, rng, hp.batch_size)
        try:
            loss = batch_loss(model, adapter, batch, hp.objective, null)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            for p in adapter.parameters():
                if not np.isfinite(p.data).all():
                    raise ad.NonFiniteError("adapter weights became non-finite")
        except ad.NonFiniteError as e:
            last = tlog.rows[-1]["step"] if tlog.rows else -1
            raise TrainingError(f"non-finite loss at step {step} (last good step {last}): {e}", last, tlog.losses) from e
        tlog.append(step, float(loss.data), batch.targets, float(np.mean(batch.t)))
        if callback is not None:
            callback(step, float(loss.data))
        if (step + 1) % 100 == 0:
            log.info("adapter step %d loss %.6f", step + 1, np.mean(tlog.losses[-100:]))
    return adapter, tlog
