"""Procedural edit world.

Each edit atom owns one (channel, region) slot of the latent grid and writes a
single linear statistic there; its probe reads that statistic back. Clean
backgrounds are smooth random fields with every atom statistic projected out,
so probes return exactly 0 on them and exactly ``s`` after an edit of
strength ``s``. Slots are pixel-disjoint, hence edits commute bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prompt import Prompt

KINDS = ("channel-shift", "region-scale", "gradient-tilt", "pattern-blend")
PAD_ID = 0
# region-scale multiplies the slot by (1 + SCALE_GAIN * s); keep it positive
SCALE_GAIN = 0.5
S_MAX = 1.0


@dataclass(frozen=True)
class WorldSpec:
    n_atoms: int = 4
    tokens_per_atom: int = 3
    grid: tuple = (8, 8, 3)
    regions: tuple = (2, 2)
    amplitude: float = 1.0
    background_sigma: float = 1.0 / 3.0
    n_waves: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "regions", tuple(int(r) for r in self.regions))
        H, W, C = self.grid
        rh, rw = self.regions
        if min(self.grid) < 1 or self.n_atoms < 1 or self.tokens_per_atom < 1:
            raise ValueError("world sizes must be positive")
        if H % rh or W % rw:
            raise ValueError(f"regions {self.regions} must tile grid {self.grid}")

    @property
    def vocab_size(self) -> int:
        # pad + M atoms + one neutral ("keep the image the same") atom
        return 1 + (self.n_atoms + 1) * self.tokens_per_atom

    @property
    def capacity(self) -> int:
        return self.grid[2] * self.regions[0] * self.regions[1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for k in ("grid", "regions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class EditAtom:
    index: int
    kind: str
    channel: int
    rows: tuple  # (start, stop)
    cols: tuple
    token_ids: tuple
    template: np.ndarray = field(repr=False, compare=False)  # slot-shaped direction the probe reads

    @property
    def slot(self):
        return (slice(*self.rows), slice(*self.cols), self.channel)

    def mask(self, grid_shape) -> np.ndarray:
        m = np.zeros(grid_shape, dtype=bool)
        m[self.slot] = True
        return m


@dataclass
class EditWorld:
    spec: WorldSpec
    atoms: list
    neutral_tokens: tuple

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def prompt(self, atoms, neutral_at: int | None = None) -> Prompt:
        """Prompt listing ``atoms`` in order; optionally insert the neutral atom."""
        instr, labels = [], []
        for a in atoms:
            if not 0 <= a < self.n_atoms:
                raise IndexError(f"unknown atom {a}")
            instr.append(self.atoms[a].token_ids)
            labels.append(int(a))
        if neutral_at is not None:
            instr.insert(neutral_at, self.neutral_tokens)
            labels.insert(neutral_at, -1)
        return Prompt(tuple(instr), tuple(labels))

    def neutral_prompt(self) -> Prompt:
        return Prompt((self.neutral_tokens,), (-1,))

    def background(self, rng: np.random.Generator) -> np.ndarray:
        return clean_background(self, rng)


def _templates(kind: str, h: int, w: int, amp: float) -> np.ndarray:
    if kind == "channel-shift":
        return np.full((h, w), amp)
    if kind == "gradient-tilt":
        return amp * np.tile(np.linspace(-1.0, 1.0, w), (h, 1))
    if kind == "pattern-blend":
        yy, xx = np.mgrid[0:h, 0:w]
        return amp * np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    if kind == "region-scale":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        r2 = ((yy - cy) / max(h / 2, 1)) ** 2 + ((xx - cx) / max(w / 2, 1)) ** 2
        return amp * np.exp(-r2)
    raise ValueError(f"unknown effect kind {kind!r}")


def gen_world(spec: WorldSpec) -> EditWorld:
    """Place ``spec.n_atoms`` atoms on distinct (channel, region) slots."""
    if spec.n_atoms > spec.capacity:
        raise ValueError(f"{spec.n_atoms} atoms exceed the {spec.capacity} disjoint slots of grid {spec.grid}")
    H, W, C = spec.grid
    rh, rw = spec.regions
    bh, bw = H // rh, W // rw
    rng = np.random.default_rng(spec.seed)
    slots = [(c, i, j) for c in range(C) for i in range(rh) for j in range(rw)]
    # spread atoms over channels first so each one owns a distinct colour where possible
    order = rng.permutation(len(slots))
    chosen, used_channels = [], set()
    for k in order:
        c = slots[k][0]
        if c not in used_channels or len(used_channels) == C:
            chosen.append(slots[k])
            used_channels.add(c)
        if len(chosen) == spec.n_atoms:
            break
    for k in order:
        if len(chosen) == spec.n_atoms:
            break
        if slots[k] not in chosen:
            chosen.append(slots[k])
    kinds = [KINDS[i % len(KINDS)] for i in rng.permutation(spec.n_atoms)]
    n = spec.tokens_per_atom
    atoms = []
    for a, ((c, i, j), kind) in enumerate(zip(chosen, kinds)):
        atoms.append(EditAtom(
            index=a,
            kind=kind,
            channel=c,
            rows=(i * bh, (i + 1) * bh),
            cols=(j * bw, (j + 1) * bw),
            token_ids=tuple(range(1 + a * n, 1 + (a + 1) * n)),
            template=_templates(kind, bh, bw, spec.amplitude),
        ))
    neutral = tuple(range(1 + spec.n_atoms * n, 1 + (spec.n_atoms + 1) * n))
    return EditWorld(spec, atoms, neutral)


def clean_background(world: EditWorld, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency field with every atom's probed statistic removed."""
    spec = world.spec
    H, W, C = spec.grid
    yy, xx = np.mgrid[0:H, 0:W]
    X = np.zeros((H, W, C))
    for c in range(C):
        f = np.zeros((H, W))
        for _ in range(spec.n_waves):
            u, v = rng.integers(0, 2, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            f += rng.normal() * np.cos(2 * np.pi * (u * yy / H + v * xx / W) + phase)
        f -= f.mean()
        std = f.std()
        X[..., c] = spec.background_sigma * (f / std if std > 0 else f)
    for atom in world.atoms:
        tpl = atom.template
        patch = X[atom.slot]
        X[atom.slot] = patch - (np.sum(patch * tpl) / np.sum(tpl * tpl)) * tpl
    return X


def apply_effect(X: np.ndarray, atom: EditAtom, s: float) -> np.ndarray:
    """Edit ``X`` with ``atom`` at strength ``s`` (negative = opposite direction)."""
    s = float(s)
    if s < -S_MAX:
        raise ValueError(f"strength {s} below -{S_MAX}")
    out = np.array(X, dtype=np.float64, copy=True)
    if s == 0.0:
        return out
    patch = out[atom.slot]
    tpl = atom.template
    if atom.kind == "pattern-blend":
        out[atom.slot] = (1.0 - s) * patch + s * tpl
    elif atom.kind == "region-scale":
        out[atom.slot] = (1.0 + SCALE_GAIN * s) * patch + s * tpl
    else:
        out[atom.slot] = patch + s * tpl
    return out


def attribute_score(X: np.ndarray, atom: EditAtom) -> float:
    """Read back the atom's edit strength from a grid."""
    tpl = atom.template
    return float(np.sum(np.asarray(X)[atom.slot] * tpl) / np.sum(tpl * tpl))


def attribute_scores(X: np.ndarray, world: EditWorld) -> np.ndarray:
    """Probe every atom; works on a single grid or a leading batch axis."""
    X = np.asarray(X)
    if X.ndim == 4:
        return np.stack([attribute_scores(x, world) for x in X])
    return np.array([attribute_score(X, a) for a in world.atoms])


@dataclass
class Example:
    x_orig: np.ndarray
    prompt: Prompt
    x_edit: np.ndarray
    atoms: tuple


def sample_example(world: EditWorld, K: int, seed: int, neutral: bool = False) -> Example:
    """Clean background plus ``K`` distinct atoms applied at strength 1."""
    if not 0 <= K <= world.n_atoms:
        raise ValueError(f"K={K} outside [0, {world.n_atoms}]")
    rng = np.random.default_rng(seed)
    x = clean_background(world, rng)
    atoms = tuple(int(a) for a in rng.choice(world.n_atoms, size=K, replace=False))
    edited = x
    for a in atoms:
        edited = apply_effect(edited, world.atoms[a], 1.0)
    neutral_at = int(rng.integers(0, K + 1)) if neutral else None
    return Example(x, world.prompt(atoms, neutral_at), edited, atoms)


def make_dataset(world: EditWorld, n: int, seed: int, ks=(0, 1, 2, 3), neutral_rate: float = 0.0) -> list:
    """``n`` examples; K uniform over ``ks`` (clipped to the atom count)."""
    rng = np.random.default_rng(seed)
    ks = [k for k in ks if k <= world.n_atoms]
    seeds = rng.integers(0, 2 ** 63 - 1, size=n)
    out = []
    for s in seeds:
        sub = np.random.default_rng(int(s))
        k = int(sub.choice(ks))
        out.append(sample_example(world, k, int(sub.integers(0, 2 ** 63 - 1)), neutral=bool(sub.random() < neutral_rate)))
    return out


def export_dataset(examples: list, spec: WorldSpec, seed: int, path) -> None:
    """Write ``<path>.sled`` (tensors) and ``<path>.json`` (manifest)."""
    from .archive import write_archive

    path = Path(path)
    maxk = max([len(e.prompt) for e in examples] + [1])
    labels = np.full((len(examples), maxk), -2.0)
    for i, e in enumerate(examples):
        labels[i, :len(e.prompt)] = e.prompt.labels or ()
    tensors = {
        "x_orig": np.stack([e.x_orig for e in examples]),
        "x_edit": np.stack([e.x_edit for e in examples]),
        "labels": labels,
    }
    manifest = {"world": spec.to_dict(), "seed": seed, "count": len(examples), "max_instructions": maxk}
    write_archive(path.with_suffix(".sled"), tensors, meta={"kind": "dataset"})
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def import_dataset(path) -> tuple:
    """Inverse of :func:`export_dataset`; returns (world, examples, manifest)."""
    from .archive import read_archive

    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    tensors, _ = read_archive(path.with_suffix(".sled"))
    world = gen_world(WorldSpec.from_dict(manifest["world"]))
    examples = []
    for xo, xe, lab in zip(tensors["x_orig"], tensors["x_edit"], tensors["labels"]):
        seq = [int(v) for v in lab if v > -2]
        neutral_at = seq.index(-1) if -1 in seq else None
        atoms = tuple(a for a in seq if a >= 0)
        examples.append(Example(xo, world.prompt(atoms, neutral_at), xe, atoms))
    return world, examples, manifest


def eval_case(world: EditWorld, atoms, seed: int) -> tuple:
    """Held-out (X_orig, prompt) for sweeps: a fresh background and the given atoms.

    The background stream is keyed apart from :func:`make_dataset` seeds.
    """
    x = clean_background(world, np.random.default_rng([int(seed), 0xE7A1]))
    return x, world.prompt(tuple(int(a) for a in atoms))
