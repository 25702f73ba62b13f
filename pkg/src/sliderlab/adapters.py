"""Selective-token low-rank adapters (STLoRA / GSTLoRA).

A projection ``y = W x + b`` gains ``alpha * B A x`` on the selected rows only.
STLoRA selects the text rows of one instruction's span; GSTLoRA selects every
row (text and image). Unselected rows are copied from the base output, so they
are bit-identical to the frozen model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mmdit import PROJECTIONS, ModelConfig, linear

STLORA = "stlora"
GSTLORA = "gstlora"
MODES = (STLORA, GSTLORA)
DEFAULT_RANK = 16


@dataclass
class LowRankPair:
    A: Tensor  # [r, d_in]
    B: Tensor  # [d_out, r]
    layer_key: str

    @property
    def delta_w(self) -> np.ndarray:
        return self.B.data @ self.A.data


@dataclass
class Adapter:
    mode: str
    rank: int
    pairs: dict
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def parameters(self) -> list:
        return [t for p in self.pairs.values() for t in (p.A, p.B)]

    def state_dict(self) -> dict:
        out = {}
        for key, p in self.pairs.items():
            out[f"{key}.lora_A"] = p.A.data.copy()
            out[f"{key}.lora_B"] = p.B.data.copy()
        return out

    @classmethod
    def from_state_dict(cls, state: dict, mode: str, config: ModelConfig) -> "Adapter":
        keys = eligible_keys(config)
        expected = {f"{k}.{s}" for k in keys for s in ("lora_A", "lora_B")}
        if set(state) != expected:
            raise ValueError(f"adapter tensors do not match config: "
                             f"missing={sorted(expected - set(state))} unknown={sorted(set(state) - expected)}")
        rank = state[f"{keys[0]}.lora_A"].shape[0]
        pairs = {}
        for k in keys:
            dout, din = config.proj_shape(k.rsplit(".", 1)[1])
            A, B = state[f"{k}.lora_A"], state[f"{k}.lora_B"]
            if A.shape != (rank, din) or B.shape != (dout, rank):
                raise ValueError(f"{k}: adapter shapes {A.shape}/{B.shape} do not fit ({dout}, {din}) at rank {rank}")
            pairs[k] = LowRankPair(Tensor(A, True), Tensor(B, True), k)
        return cls(mode, rank, pairs)


def eligible_keys(config: ModelConfig) -> list:
    return [f"blocks.{l}.{p}" for l in range(config.L) for p in PROJECTIONS]


def init_adapter(config: ModelConfig, mode: str = GSTLORA, rank: int = DEFAULT_RANK, seed: int = 0) -> Adapter:
    """One pair per eligible projection; B = 0 so the adapter starts as identity."""
    rng = np.random.default_rng(seed)
    pairs = {}
    for key in eligible_keys(config):
        dout, din = config.proj_shape(key.rsplit(".", 1)[1])
        if not 1 <= rank <= min(din, dout):
            raise ValueError(f"rank {rank} invalid for {key} with shape ({dout}, {din})")
        A = rng.normal(0.0, 1.0 / np.sqrt(din), size=(rank, din))
        pairs[key] = LowRankPair(Tensor(A, True), Tensor(np.zeros((dout, rank)), True), key)
    return Adapter(mode, rank, pairs)


@dataclass(frozen=True)
class ScaledAdapter:
    """A view applying ``alpha * dW`` at every layer; weights are shared, not copied."""

    adapter: Adapter
    alpha: float

    @property
    def mode(self):
        return self.adapter.mode

    @property
    def pairs(self):
        return self.adapter.pairs


def scale_adapter(adapter: Adapter, alpha: float) -> ScaledAdapter:
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    base = adapter.adapter if isinstance(adapter, ScaledAdapter) else adapter
    return ScaledAdapter(base, alpha)


def alpha_from_strength(beta: float) -> float:
    """User-facing edit strength beta maps to adapter scale alpha = 1 - beta."""
    return 1.0 - float(beta)


def _delta(x: Tensor, pair: LowRankPair, batch: int = 1) -> Tensor:
    return linear(linear(x, pair.A, None, batch), pair.B, None, batch)


def project(x: Tensor, W: Tensor, b: Tensor | None, pair: LowRankPair, groups, batch: int = 1) -> Tensor:
    """Base projection of rows ``x`` plus selective low-rank updates.

    ``groups`` is a sequence of (row indices, alpha); row sets must be disjoint.
    ``batch`` splits the rows into that many equal examples for the dense products.
    """
    base = linear(x, W, b, batch)
    active = [(np.asarray(r, dtype=np.int64).reshape(-1), float(a)) for r, a in groups]
    active = [(r, a) for r, a in active if a != 0.0 and r.size]
    if not active:
        return base
    M = x.shape[0]
    for r, _ in active:
        if r.min() < 0 or r.max() >= M:
            raise IndexError("selected row out of range")
    if len(active) == 1 and active[0][0].size == M and np.array_equal(active[0][0], np.arange(M)):
        return base + ad.scale(_delta(x, pair, batch), active[0][1])
    rows = np.concatenate([r for r, _ in active])
    alphas = np.concatenate([np.full(r.size, a) for r, a in active])[:, None]
    d = ad.mul(_delta(ad.embed_lookup(x, rows), pair), Tensor(alphas))
    return ad.scatter_rows(base, ad.embed_lookup(base, rows) + d, rows)


def apply(W: Tensor, pair: LowRankPair, alpha: float, tokens: Tensor, mode: str, selected=None,
          bias: Tensor | None = None) -> Tensor:
    """Project ``tokens`` [M, d_in] through W with the adapter on the selected rows.

    GSTLoRA ignores ``selected`` and adapts every row.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    M = tokens.shape[0]
    rows = np.arange(M) if mode == GSTLORA else np.asarray(sorted(selected or ()), dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= M):
        raise IndexError("selected index out of range")
    return project(tokens, W, bias, pair, [(rows, alpha)])


def token_indices(prompt, i: int) -> list:
    """Token positions of instruction ``i`` in the packed prompt (never pads)."""
    if not 0 <= i < len(prompt):
        raise IndexError(f"instruction {i} out of range for K={len(prompt)}")
    s, e = prompt.spans()[i]
    return list(range(s, e + 1))


class Binding:
    """Row groups for one packed batch, handed to the model's projections."""

    def __init__(self, adapter: Adapter, groups: list, batch: int = 1):
        self.adapter = adapter
        self.groups = groups
        self.batch = batch

    def project(self, key: str, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
        pair = self.adapter.pairs.get(key)
        if pair is None:
            return linear(x, W, b, self.batch)
        return project(x, W, b, pair, self.groups, self.batch)


def bind(adapter, config: ModelConfig, spans: list, settings: list) -> Binding:
    """Translate per-example [(instruction, alpha), ...] into packed-row groups.

    ``spans[b]`` are the instruction spans of example b. A ScaledAdapter
    multiplies every alpha by its own scale. GSTLoRA takes one setting per
    example and adapts all of that example's rows.
    """
    mult = 1.0
    if isinstance(adapter, ScaledAdapter):
        mult, adapter = adapter.alpha, adapter.adapter
    S, off, T = config.seq_len, config.text_offset, config.T
    if len(settings) != len(spans):
        raise ValueError("one settings list per example")
    by_alpha: dict = {}
    for b, (ex_spans, ex_settings) in enumerate(zip(spans, settings)):
        seen = set()
        for i, alpha in ex_settings:
            if not 0 <= i < len(ex_spans):
                raise IndexError(f"unknown instruction index {i} (K={len(ex_spans)})")
            if i in seen:
                raise ValueError(f"instruction {i} set twice")
            seen.add(i)
            a = float(alpha) * mult
            if adapter.mode == GSTLORA:
                if len(ex_settings) > 1:
                    raise ValueError("GSTLoRA drives a single slider per example")
                rows = b * S + np.arange(S)
            else:
                s, e = ex_spans[i]
                if e >= T:
                    raise ValueError("span exceeds text length")
                rows = b * S + off + np.arange(s, e + 1)
            by_alpha.setdefault(a, []).append(rows)
    groups = [(np.concatenate(r), a) for a, r in by_alpha.items()]
    return Binding(adapter, groups, len(spans))
