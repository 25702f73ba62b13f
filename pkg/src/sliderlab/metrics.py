"""Continuity, extrapolation and disentanglement over slider sweeps.

Scores come from the world's analytic probes, not from VLM similarity;
disentanglement uses background RMS distance plus non-target probe drift in
place of ArcFace/LPIPS/DINO distances. Reports label these substitutions.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import GSTLORA
from .mmdit import EditorModel, encode_batch, euler_sample, flatten_grids, trajectory_noise
from .prompt import EMPTY
from .world import attribute_scores

CHI2_EPS = 1e-9
SATURATED = "saturated"
DEGENERATE = "saturated-degenerate"
OK = "ok"
SUBSTITUTIONS = {
    "score": "analytic attribute probe (stands in for VLM similarity)",
    "disentanglement": "background RMS + non-target probe drift (stands in for ArcFace/LPIPS/DINO)",
}


@dataclass
class Trajectory:
    alphas: np.ndarray
    scores: np.ndarray
    grids: np.ndarray | None = None
    all_scores: np.ndarray | None = None  # [delta, M] every atom's probe
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.alphas.shape != self.scores.shape or self.alphas.ndim != 1:
            raise ValueError("alphas and scores must be matching 1-D sequences")
        if self.alphas.size >= 2 and np.any(np.diff(self.alphas) <= 0):
            raise ValueError("alphas must be strictly increasing")


@dataclass
class ContinuityResult:
    value: float
    chi2: float
    dof: int
    status: str
    counts: np.ndarray
    eps: float = CHI2_EPS

    def to_dict(self) -> dict:
        return {"value": self.value, "chi2": self.chi2, "dof": self.dof, "status": self.status,
                "eps": self.eps, "counts": self.counts.astype(int).ravel().tolist()}


def _normalise(x: np.ndarray, value_range=None) -> tuple:
    lo, hi = (x.min(), x.max()) if value_range is None else value_range
    if hi - lo <= 1e-12:
        return np.zeros_like(x), True
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0), False


def _chi2(counts: np.ndarray, n: int) -> float:
    E = n / counts.size
    return float(np.sum((counts - E) ** 2) / E)


def continuity(scores, value_range=None, eps: float = CHI2_EPS) -> ContinuityResult:
    """Inverse reduced chi-square of the min-max normalised scores over delta equal bins.

    ``value_range`` replaces the per-trajectory min/max, for normalising
    several methods jointly. A constant trajectory puts all mass in one bin
    and is flagged ``saturated-degenerate``; a perfectly uniform one has
    chi2 = 0, value dof/eps, and is flagged ``saturated``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    delta = s.size
    if delta < 2:
        raise ValueError("continuity needs at least two scores")
    u, flat = _normalise(s, value_range)
    bins = np.minimum((u * delta).astype(np.int64), delta - 1)
    counts = np.bincount(bins, minlength=delta).astype(np.float64)
    chi2 = _chi2(counts, delta)
    dof = delta - 1
    status = DEGENERATE if flat else (SATURATED if chi2 == 0.0 else OK)
    return ContinuityResult(dof / (chi2 + eps), chi2, dof, status, counts, eps)


@dataclass
class GridSweep:
    """Score tuples on a complete delta^gamma lattice of slider settings.

    ``scores`` has shape (delta,) * gamma + (gamma,): the probe of the atom
    driven by each axis.
    """

    alphas: np.ndarray
    scores: np.ndarray
    grids: np.ndarray | None = None
    all_scores: np.ndarray | None = None
    atoms: tuple = ()

    @property
    def gamma(self) -> int:
        return self.scores.shape[-1]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        g = self.scores.shape[-1]
        if g not in (1, 2, 3) or self.scores.ndim != g + 1:
            raise ValueError("scores must have shape (delta,)*gamma + (gamma,) with gamma in 1..3")
        delta = self.scores.shape[0]
        if any(n != delta for n in self.scores.shape[:-1]):
            raise ValueError("incomplete lattice")
        if not np.isfinite(self.scores).all():
            raise ValueError("incomplete lattice (non-finite entries)")


def continuity_grid(sweep: GridSweep, eps: float = CHI2_EPS) -> ContinuityResult:
    """gamma-dimensional histogram analogue of :func:`continuity`."""
    g = sweep.gamma
    pts = sweep.scores.reshape(-1, g)
    if g == 1:
        return continuity(pts[:, 0], eps=eps)
    n = pts.shape[0]
    delta = sweep.scores.shape[0]
    per_axis = delta
    while per_axis ** g > n:
        per_axis -= 1
    idx, flat_any = [], False
    for k in range(g):
        u, flat = _normalise(pts[:, k])
        flat_any |= flat
        idx.append(np.minimum((u * per_axis).astype(np.int64), per_axis - 1))
    cells = np.ravel_multi_index(tuple(idx), (per_axis,) * g)
    counts = np.bincount(cells, minlength=per_axis ** g).astype(np.float64)
    chi2 = _chi2(counts, n)
    dof = per_axis ** g - 1
    status = DEGENERATE if flat_any else (SATURATED if chi2 == 0.0 else OK)
    return ContinuityResult(dof / (chi2 + eps), chi2, dof, status, counts.reshape((per_axis,) * g), eps)


def extrapolation(scores) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("extrapolation of an empty sequence")
    return float(s.max())


def disentanglement(X_orig, grids, target: int, world, reference=None, exclude=()) -> float:
    """Mean over the trajectory of background RMS change + mean |non-target probe drift|.

    Background = every pixel outside the target atom's slot (and outside the
    slots of atoms in ``exclude``). Drift is measured against ``reference``
    (default ``X_orig``). Lower is better; 0 for pure analytic edits of the target.
    """
    X_orig = np.asarray(X_orig, dtype=np.float64)
    ref = X_orig if reference is None else np.asarray(reference, dtype=np.float64)
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == X_orig.ndim:
        grids = grids[None]
    keep = np.ones(X_orig.shape, dtype=bool)
    for a in (target, *exclude):
        keep &= ~world.atoms[a].mask(X_orig.shape)
    others = [a for a in range(world.n_atoms) if a != target]
    ref_probe = attribute_scores(ref, world)
    total = 0.0
    for g in grids:
        bg = float(np.sqrt(np.mean((g[keep] - ref[keep]) ** 2))) if keep.any() else 0.0
        drift = float(np.mean(np.abs(attribute_scores(g, world)[others] - ref_probe[others]))) if others else 0.0
        total += bg + drift
    return total / len(grids)


def cross_talk(sweep: GridSweep, all_scores: np.ndarray | None = None) -> float:
    """Off-axis probe change relative to on-axis change, averaged over lattice lines.

    For each axis k and each line of the lattice along k, compare the range of
    the other driven atoms' probes with the range of atom k's probe.
    """
    s = sweep.scores
    g = sweep.gamma
    if g < 2:
        raise ValueError("cross-talk needs gamma >= 2")
    on, off = [], []
    for k in range(g):
        moved = np.moveaxis(s, k, -2)  # [..., delta(k), gamma]
        lines = moved.reshape(-1, moved.shape[-2], g)
        for line in lines:
            on.append(np.ptp(line[:, k]))
            off.extend(np.ptp(line[:, j]) for j in range(g) if j != k)
    return float(np.mean(off) / max(np.mean(on), 1e-12))


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------

def _probe_column(grids, world, atom):
    return attribute_scores(grids, world)[:, atom]


def slider_sweep(model: EditorModel, adapter, world, X_orig, prompt, target: int, alphas, steps: int,
                 seed: int, keep_grids: bool = True) -> Trajectory:
    """Sample once per alpha with a shared noise seed; score the target atom's probe."""
    if not 0 <= target < len(prompt):
        raise IndexError(f"unknown target instruction {target}")
    alphas = np.asarray(alphas, dtype=np.float64)
    B = alphas.size
    from .mmdit import sample_batch
    xo = np.broadcast_to(np.asarray(X_orig, dtype=np.float64), (B,) + np.shape(X_orig))
    grids = sample_batch(model, xo, [prompt] * B, steps, [seed] * B, adapter,
                         [[(target, float(a))] for a in alphas])
    probes = attribute_scores(grids, world)
    atom = prompt.labels[target]
    return Trajectory(alphas, probes[:, atom], grids if keep_grids else None, probes,
                      {"method": f"slider-{adapter.mode}", "atom": int(atom), "seed": int(seed)})


def explicit_cfg_sweep(model: EditorModel, world, X_orig, prompt, ws, steps: int, seed: int,
                       target: int = 0, keep_grids: bool = True, counter: list | None = None) -> Trajectory:
    """Explicit guidance: v = v_uncond + w (v_cond - v_uncond), two forwards per step.

    The unconditional branch uses the empty prompt. w = 1 and w = 0 return
    the conditional / unconditional velocity exactly.
    """
    ws = np.asarray(ws, dtype=np.float64)
    B = ws.size
    cfg = model.config
    xo = np.broadcast_to(np.asarray(X_orig, dtype=np.float64), (B,) + np.shape(X_orig))
    xf = flatten_grids(xo)
    ids_c, _ = encode_batch([prompt] * B, cfg)
    ids_u, _ = encode_batch([EMPTY] * B, cfg)
    w = ws[:, None, None]

    def velocity(z, t):
        with ad.no_grad():
            vc = model.forward(z, xf, ids_c, t).data
            vu = model.forward(z, xf, ids_u, t).data
        if counter is not None:
            counter.append(2)
        v = vu + w * (vc - vu)
        v[ws == 1.0] = vc[ws == 1.0]
        v[ws == 0.0] = vu[ws == 0.0]
        return v

    noise = np.stack([trajectory_noise(seed, xo.shape[1:])] * B)
    grids = euler_sample(velocity, flatten_grids(noise), steps).reshape(xo.shape)
    probes = attribute_scores(grids, world)
    atom = prompt.labels[target]
    return Trajectory(ws, probes[:, atom], grids if keep_grids else None, probes,
                      {"method": "explicit-cfg", "atom": int(atom), "seed": int(seed)})


def slider_grid_sweep(model: EditorModel, adapter, world, X_orig, prompt, alphas, steps: int, seed: int,
                      keep_grids: bool = False, chunk: int = 64) -> GridSweep:
    """All delta^gamma combinations of per-instruction alphas (STLoRA)."""
    if adapter.mode == GSTLORA and len(prompt) > 1:
        raise ValueError("GSTLoRA drives one slider; use STLoRA for multi-instruction grids")
    from .mmdit import sample_batch
    alphas = np.asarray(alphas, dtype=np.float64)
    g, delta = len(prompt), alphas.size
    combos = list(itertools.product(range(delta), repeat=g))
    grids = []
    for s in range(0, len(combos), chunk):
        part = combos[s:s + chunk]
        xo = np.broadcast_to(np.asarray(X_orig, dtype=np.float64), (len(part),) + np.shape(X_orig))
        settings = [[(i, float(alphas[c[i]])) for i in range(g)] for c in part]
        grids.append(sample_batch(model, xo, [prompt] * len(part), steps, [seed] * len(part), adapter, settings))
    grids = np.concatenate(grids)
    probes = attribute_scores(grids, world)
    atoms = tuple(prompt.labels)
    lattice = probes[:, list(atoms)].reshape((delta,) * g + (g,))
    return GridSweep(alphas, lattice, grids.reshape((delta,) * g + grids.shape[1:]) if keep_grids else None,
                     probes.reshape((delta,) * g + (world.n_atoms,)), atoms)


def joint_range(*trajectories) -> tuple:
    """Common (min, max) for cross-method normalisation."""
    allv = np.concatenate([np.asarray(t.scores).ravel() for t in trajectories])
    return float(allv.min()), float(allv.max())
