"""Instruction-token interpolation toward the padding embedding.

At the input of each chosen block, the rows of the target instruction's span
are replaced by ``(1 - beta) * row + beta * pad_row``, where ``pad_row`` is the
current embedding of the first pad position. beta = 0 keeps the instruction,
beta = 1 erases it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .mmdit import EditorModel, sample_batch
from .world import attribute_scores


@dataclass(frozen=True)
class InterventionSpec:
    target: int
    beta: float
    layers: tuple | None = None  # None = every block

    def __post_init__(self):
        _check_beta(self.beta)
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))

    def check_layers(self, n_blocks: int):
        if self.layers is not None and any(not 0 <= l < n_blocks for l in self.layers):
            raise ValueError(f"layers {self.layers} outside 0..{n_blocks - 1}")


def _check_beta(beta):
    if not np.isfinite(beta) or not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta={beta} outside [0, 1]")


def interpolate_span(y: np.ndarray, span, pad_row: np.ndarray, beta: float) -> np.ndarray:
    """Return a copy of ``y`` [T, d] with rows start..end (inclusive) pulled toward ``pad_row``."""
    _check_beta(beta)
    start, end = span
    if end < start:
        raise ValueError("empty span")
    out = np.array(y, dtype=np.float64, copy=True)
    if beta == 0.0:
        return out
    out[start:end + 1] = (1.0 - beta) * out[start:end + 1] + beta * np.asarray(pad_row)
    return out


def make_text_hook(config, target: int, betas, layers=None):
    """Hook factory for :func:`sample_batch`; ``betas[b]`` applies to example b."""
    betas = [float(b) for b in betas]
    for b in betas:
        _check_beta(b)
    chosen = None if layers is None else set(layers)
    off, T = config.text_offset, config.T

    def factory(spans):
        if len(spans) != len(betas):
            raise ValueError("one beta per example")
        plan = []
        for b, (ex_spans, beta) in enumerate(zip(spans, betas)):
            if not 0 <= target < len(ex_spans):
                raise IndexError(f"target {target} out of range for K={len(ex_spans)}")
            n_real = ex_spans[-1][1] + 1
            if n_real >= T:
                raise ValueError("prompt fills T; no pad row to interpolate toward")
            if beta != 0.0:
                plan.append((b, ex_spans[target], off + n_real, beta))

        def hook(block, h: Tensor) -> Tensor:
            if not plan or (chosen is not None and block not in chosen):
                return h
            data = h.data.copy()
            for b, (s, e), pad_pos, beta in plan:
                data[b, off:] = interpolate_span(data[b, off:], (s, e), data[b, pad_pos], beta)
            return Tensor(data)

        return hook

    return factory


@dataclass
class SweepPoint:
    beta: float
    grid: np.ndarray
    scores: np.ndarray  # every atom's probe


def intervention_sweep(model: EditorModel, world, X_orig, prompt, target: int, betas, steps: int,
                       seed: int, layers=None) -> list:
    """One deterministic sample per beta (shared noise seed) with probe scores attached."""
    betas = [float(b) for b in betas]
    for b in betas:
        _check_beta(b)
    if layers is not None:
        InterventionSpec(target, 0.0, layers).check_layers(model.config.L)
    if not 0 <= target < len(prompt):
        raise IndexError(f"target {target} out of range for K={len(prompt)}")
    B = len(betas)
    xo = np.broadcast_to(np.asarray(X_orig, dtype=np.float64), (B,) + tuple(np.shape(X_orig)))
    hook = make_text_hook(model.config, target, betas, layers)
    grids = sample_batch(model, xo, [prompt] * B, steps, [seed] * B, text_hook=hook)
    return [SweepPoint(b, g, attribute_scores(g, world)) for b, g in zip(betas, grids)]
