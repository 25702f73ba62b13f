"""Miniature dual-stream MMDiT editor trained with flow matching.

Token layout per example (one pixel = one token)::

    [ noisy Z (N rows) | conditioning X_orig (N rows) | text (T rows) ]

Both image groups share the input projection and one learned positional
table and are told apart by an additive stream-type embedding. Text tokens
carry no positional embedding, so every ``<pad>`` row stays identical at
every depth. All rows go through one joint attention per block; the two
streams keep separate layer-norm affines but share the six projections
(q, k, v, o, ff1, ff2), which are the adapter-eligible set.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompt import EMPTY, Prompt
from .world import PAD_ID

log = logging.getLogger(__name__)

PROJECTIONS = ("q", "k", "v", "o", "ff1", "ff2")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    L: int = 4
    heads: int = 4
    T: int = 24
    vocab: int = 16
    grid: tuple = (8, 8, 3)
    ff_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if min(self.d, self.L, self.heads, self.T, self.vocab, self.ff_mult, *self.grid) < 1:
            raise ValueError("model config sizes must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def n_pixels(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def seq_len(self) -> int:
        return 2 * self.n_pixels + self.T

    @property
    def text_offset(self) -> int:
        return 2 * self.n_pixels

    def proj_shape(self, name: str) -> tuple:
        """(d_out, d_in) of a block projection."""
        h = self.d * self.ff_mult
        return {"ff1": (h, self.d), "ff2": (self.d, h)}.get(name, (self.d, self.d))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass
class TextTokens:
    ids: np.ndarray
    spans: list
    pad_id: int = PAD_ID
    embeddings: Tensor | None = None

    @property
    def n_real(self) -> int:
        return sum(e - s + 1 for s, e in self.spans)


@dataclass
class ImageTokens:
    tokens: np.ndarray  # [N, C]
    grid_shape: tuple

    @classmethod
    def from_grid(cls, grid) -> "ImageTokens":
        g = np.asarray(grid, dtype=np.float64)
        return cls(g.reshape(-1, g.shape[-1]), g.shape)

    def to_grid(self) -> np.ndarray:
        return self.tokens.reshape(self.grid_shape)


def encode_prompt(prompt: Prompt, config: ModelConfig, model: "EditorModel | None" = None) -> TextTokens:
    """Pack instruction tokens left-aligned and pad to ``config.T``."""
    tau = prompt.n_tokens
    if tau > config.T:
        raise ValueError(f"prompt has {tau} tokens, more than T={config.T}")
    ids = np.full(config.T, PAD_ID, dtype=np.int64)
    flat = [t for ins in prompt.instructions for t in ins]
    for t in flat:
        if t == PAD_ID or not 0 <= t < config.vocab:
            raise ValueError(f"unknown token id {t}")
    ids[:tau] = flat
    emb = ad.embed_lookup(model.params["embed.token"], ids) if model is not None else None
    return TextTokens(ids, prompt.spans(), PAD_ID, emb)


def timestep_features(t, d: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; shape [B, d]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.geomspace(1.0, 200.0, d // 2)
    args = t * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if feats.shape[1] < d:
        feats = np.pad(feats, ((0, 0), (0, d - feats.shape[1])))
    return feats


def init_params(config: ModelConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    d, C, N = config.d, config.grid[2], config.n_pixels

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    p = {
        "embed.token": normal((config.vocab, d), 1.0),
        "embed.pos": normal((N, d), 1.0),
        "embed.stream": normal((3, d), 0.5),
        "in.weight": normal((d, C), 1.0 / np.sqrt(C)),
        "in.bias": np.zeros(d),
        "time.weight": normal((d, d), 1.0 / np.sqrt(d)),
        "time.bias": np.zeros(d),
    }
    resid = 1.0 / np.sqrt(2 * config.L)
    for l in range(config.L):
        pre = f"blocks.{l}"
        for name in PROJECTIONS:
            dout, din = config.proj_shape(name)
            std = 1.0 / np.sqrt(din) * (resid if name in ("o", "ff2") else 1.0)
            p[f"{pre}.{name}.weight"] = normal((dout, din), std)
            p[f"{pre}.{name}.bias"] = np.zeros(dout)
        for norm in ("attn", "ff"):
            for stream in ("img", "txt"):
                p[f"{pre}.norm_{norm}_{stream}.gain"] = np.ones(d)
                p[f"{pre}.norm_{norm}_{stream}.bias"] = np.zeros(d)
    p["out.norm.gain"] = np.ones(d)
    p["out.norm.bias"] = np.zeros(d)
    p["out.weight"] = normal((C, d), 0.02)
    p["out.bias"] = np.zeros(C)
    return p


class EditorModel:
    """Parameters plus the forward pass. Weights are plain leaf tensors."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        raw = init_params(config) if params is None else params
        expected = init_params_shapes(config)
        if set(raw) != set(expected):
            missing, extra = set(expected) - set(raw), set(raw) - set(expected)
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)} unknown={sorted(extra)}")
        for k, shape in expected.items():
            if tuple(np.shape(raw[k])) != shape:
                raise ValueError(f"{k}: shape {np.shape(raw[k])} != {shape}")
        self.params = {k: Tensor(np.array(raw[k], dtype=np.float64), requires_grad=False) for k in expected}

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    # ------------------------------------------------------------------
    def _norm(self, h: Tensor, key: str) -> Tensor:
        p, off = self.params, self.config.text_offset
        n = ad.layernorm(h)
        img = n[:, :off] * p[f"{key}_img.gain"] + p[f"{key}_img.bias"]
        txt = n[:, off:] * p[f"{key}_txt.gain"] + p[f"{key}_txt.bias"]
        return ad.concat([img, txt], axis=1)

    def _proj(self, x: Tensor, block: int, name: str, binding, batch: int) -> Tensor:
        W = self.params[f"blocks.{block}.{name}.weight"]
        b = self.params[f"blocks.{block}.{name}.bias"]
        if binding is not None:
            return binding.project(f"blocks.{block}.{name}", x, W, b)
        return linear(x, W, b, batch)

    def block_forward(self, h: Tensor, block: int, binding=None) -> Tensor:
        """One joint block on the packed [B, S, d] sequence."""
        cfg = self.config
        B, S, d = h.shape
        nh, dh = cfg.heads, d // cfg.heads
        pre = f"blocks.{block}"
        a = ad.reshape(self._norm(h, f"{pre}.norm_attn"), (B * S, d))
        q, k, v = (self._proj(a, block, n, binding, B) for n in ("q", "k", "v"))

        def heads(x):
            return ad.transpose(ad.reshape(x, (B, S, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads(ad.scale(q, 1.0 / np.sqrt(dh))), heads(k), heads(v)
        att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B * S, d))
        h = h + ad.reshape(self._proj(o, block, "o", binding, B), (B, S, d))
        f = ad.reshape(self._norm(h, f"{pre}.norm_ff"), (B * S, d))
        f = self._proj(ad.gelu(self._proj(f, block, "ff1", binding, B)), block, "ff2", binding, B)
        return h + ad.reshape(f, (B, S, d))

    def embed(self, z: np.ndarray, x_orig: np.ndarray, ids: np.ndarray, t) -> Tensor:
        p = self.params
        B = z.shape[0]
        win = ad.transpose(p["in.weight"])
        pos = p["embed.pos"]
        stream = p["embed.stream"]
        noisy = ad.matmul(Tensor(z), win) + p["in.bias"] + pos + stream[0:1]
        cond = ad.matmul(Tensor(x_orig), win) + p["in.bias"] + pos + stream[1:2]
        text = ad.embed_lookup(p["embed.token"], ids) + stream[2:3]
        h = ad.concat([noisy, cond, text], axis=1)
        # broadcast product instead of matmul: a [1, d] @ [d, d] product takes BLAS's gemv path and
        # rounds differently from the batched gemm, which would make B=1 samples differ from B>1
        d = self.config.d
        feats = Tensor(timestep_features(np.broadcast_to(t, (B,)), d).reshape(B, d, 1))
        wt = ad.reshape(ad.transpose(p["time.weight"]), (1, d, d))
        temb = ad.reduce_sum(ad.mul(feats, wt), axis=1) + p["time.bias"]
        return h + ad.reshape(temb, (B, 1, self.config.d))

    def forward(self, z, x_orig, ids, t, binding=None, text_hook=None) -> Tensor:
        """Velocity for the noisy rows.

        z, x_orig: [B, N, C] flattened grids; ids: [B, T] token ids; t: scalar or [B].
        ``binding`` routes eligible projections through adapters; ``text_hook(block, h)``
        may rewrite the packed sequence at each block input (inference only).
        """
        cfg = self.config
        z = np.asarray(z, dtype=np.float64)
        x_orig = np.asarray(x_orig, dtype=np.float64)
        ids = np.asarray(ids, dtype=np.int64)
        if z.shape != x_orig.shape:
            raise ValueError(f"grid mismatch: Z {z.shape} vs X_orig {x_orig.shape}")
        if z.ndim != 3 or z.shape[1:] != (cfg.n_pixels, cfg.grid[2]):
            raise ValueError(f"expected [B, {cfg.n_pixels}, {cfg.grid[2]}] tokens, got {z.shape}")
        if ids.shape != (z.shape[0], cfg.T):
            raise ValueError(f"ids shape {ids.shape} != {(z.shape[0], cfg.T)}")
        tt = np.asarray(t, dtype=np.float64)
        if np.any(tt < 0) or np.any(tt > 1):
            raise ValueError("t must lie in [0, 1]")
        h = self.embed(z, x_orig, ids, t)
        for l in range(cfg.L):
            if text_hook is not None:
                h = text_hook(l, h)
            h = self.block_forward(h, l, binding)
        N = cfg.n_pixels
        p = self.params
        out = ad.layernorm(h[:, :N]) * p["out.norm.gain"] + p["out.norm.bias"]
        return ad.matmul(out, ad.transpose(p["out.weight"])) + p["out.bias"]

    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())


def linear(x: Tensor, W: Tensor, b: Tensor | None, batch: int) -> Tensor:
    """x [B*S, d_in] -> x W^T + b, multiplied one example at a time.

    OpenBLAS switches kernels with the row count, so a single [B*S, d] gemm
    rounds a given row differently depending on B. Per-example products keep
    every sample bit-identical whatever batch it is drawn in.
    """
    M, din = x.shape
    out = ad.matmul(ad.reshape(x, (batch, M // batch, din)), ad.transpose(W))
    out = ad.reshape(out, (M, W.shape[0]))
    return out if b is None else out + b


def init_params_shapes(config: ModelConfig) -> dict:
    d, C, N = config.d, config.grid[2], config.n_pixels
    shapes = {
        "embed.token": (config.vocab, d), "embed.pos": (N, d), "embed.stream": (3, d),
        "in.weight": (d, C), "in.bias": (d,), "time.weight": (d, d), "time.bias": (d,),
        "out.norm.gain": (d,), "out.norm.bias": (d,), "out.weight": (C, d), "out.bias": (C,),
    }
    for l in range(config.L):
        for name in PROJECTIONS:
            dout, din = config.proj_shape(name)
            shapes[f"blocks.{l}.{name}.weight"] = (dout, din)
            shapes[f"blocks.{l}.{name}.bias"] = (dout,)
        for norm in ("attn", "ff"):
            for stream in ("img", "txt"):
                shapes[f"blocks.{l}.norm_{norm}_{stream}.gain"] = (d,)
                shapes[f"blocks.{l}.norm_{norm}_{stream}.bias"] = (d,)
    return shapes


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------
# batching helpers
# ----------------------------------------------------------------------

def flatten_grids(grids) -> np.ndarray:
    g = np.asarray(grids, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    return g.reshape(g.shape[0], -1, g.shape[-1])


def encode_batch(prompts, config: ModelConfig) -> tuple:
    enc = [encode_prompt(p, config) for p in prompts]
    return np.stack([e.ids for e in enc]), [e.spans for e in enc]


def predict_velocity(model: EditorModel, Z, X_orig, prompt: Prompt, t: float,
                     adapter=None, target: int | None = None, alpha: float = 1.0) -> np.ndarray:
    """Velocity for one example as an [N, C] array."""
    Z = ImageTokens.from_grid(Z) if not isinstance(Z, ImageTokens) else Z
    X = ImageTokens.from_grid(X_orig) if not isinstance(X_orig, ImageTokens) else X_orig
    if Z.grid_shape != X.grid_shape:
        raise ValueError(f"grid mismatch {Z.grid_shape} vs {X.grid_shape}")
    ids, spans = encode_batch([prompt], model.config)
    binding = None
    if adapter is not None:
        from .adapters import bind
        settings = [[] if target is None else [(target, alpha)]]
        binding = bind(adapter, model.config, spans, settings)
    with ad.no_grad():
        v = model.forward(Z.tokens[None], X.tokens[None], ids, t, binding)
    return v.data[0]


def euler_sample(velocity, noise: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dz/dt = velocity(z, t) from t=0 (noise) to t=1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(noise, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        z = z + dt * velocity(z, k * dt)
    return z


def trajectory_noise(seed: int, grid_shape) -> np.ndarray:
    # separate stream from backgrounds drawn with the same integer seed
    return np.random.default_rng([int(seed), 0x5EED]).standard_normal(tuple(grid_shape))


def sample_batch(model: EditorModel, x_orig, prompts, steps: int, seeds, adapter=None,
                 settings=None, text_hook=None) -> np.ndarray:
    """Sample B edits at once. ``settings[b]`` lists (instruction, alpha) for example b."""
    cfg = model.config
    xo = np.asarray(x_orig, dtype=np.float64)
    if xo.ndim == 3:
        xo = xo[None]
    B = xo.shape[0]
    prompts = list(prompts)
    seeds = [int(s) for s in np.broadcast_to(np.asarray(seeds), (B,))]
    if len(prompts) != B:
        raise ValueError("one prompt per example")
    ids, spans = encode_batch(prompts, cfg)
    binding = None
    if adapter is not None and settings is not None:
        from .adapters import bind
        binding = bind(adapter, cfg, spans, settings)
    xf = flatten_grids(xo)
    noise = np.stack([trajectory_noise(s, xo.shape[1:]) for s in seeds])
    hook = text_hook(spans) if text_hook is not None else None

    def velocity(z, t):
        with ad.no_grad():
            return model.forward(z, xf, ids, t, binding, hook).data

    z = euler_sample(velocity, flatten_grids(noise), steps)
    return z.reshape(xo.shape)


def sample_edit(model: EditorModel, X_orig, prompt: Prompt, steps: int, adapter_settings=(),
                adapter=None, seed: int = 0, alpha_range=(-0.5, 1.25), extrapolate: bool = False) -> np.ndarray:
    """Edit one grid with per-instruction slider settings [(instruction, alpha), ...]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    for i, a in adapter_settings:
        if not 0 <= i < len(prompt):
            raise IndexError(f"unknown instruction index {i}")
        if not extrapolate and not alpha_range[0] <= a <= alpha_range[1]:
            raise ValueError(f"alpha {a} outside {alpha_range}; pass extrapolate=True")
    settings = [list(adapter_settings)] if adapter_settings else None
    return sample_batch(model, X_orig, [prompt], steps, [seed], adapter, settings)[0]


# ----------------------------------------------------------------------
# pretraining
# ----------------------------------------------------------------------

@dataclass
class PretrainParams:
    lr: float = 1e-3
    batch_size: int = 16
    iterations: int = 3000
    seed: int = 0
    loss_threshold: float = 0.05
    dataset_size: int = 4096
    ks: tuple = (0, 1, 2, 3)
    neutral_rate: float = 0.2
    warmup: int = 100
    log_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainParams":
        d = dict(d)
        if "ks" in d:
            d["ks"] = tuple(d["ks"])
        return cls(**d)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, msg, step: int, losses: list):
        super().__init__(msg)
        self.step = step
        self.losses = losses


@dataclass
class PretrainResult:
    model: EditorModel
    losses: list
    final_loss: float
    reached_threshold: bool
    extra: dict = field(default_factory=dict)


def flow_matching_loss(model: EditorModel, x_orig, x_edit, ids, t, noise) -> Tensor:
    """mean ||v(Z, t) - (X_edit - noise)||^2 with Z = (1 - t) noise + t X_edit."""
    tt = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
    z = (1.0 - tt) * noise + tt * x_edit
    v = model.forward(z, x_orig, ids, np.asarray(t).reshape(-1))
    return ad.mse(v, Tensor(x_edit - noise))


def pretrain_base(dataset, config: ModelConfig, hp: PretrainParams, model: EditorModel | None = None,
                  callback=None) -> PretrainResult:
    """Flow-matching pretraining on (X_orig, prompt, X_edit) examples.

    The final loss is the mean over the last ``log_every`` steps. Raises
    :class:`TrainingError` on a non-finite loss; ``reached_threshold`` reports
    whether that mean fell below ``hp.loss_threshold``.
    """
    from .pps import AdamW

    model = model or EditorModel(config)
    model.set_trainable(True)
    rng = np.random.default_rng(hp.seed)
    data = list(dataset)
    xo_all = flatten_grids([e.x_orig for e in data])
    xe_all = flatten_grids([e.x_edit for e in data])
    ids_all, _ = encode_batch([e.prompt for e in data], config)
    opt = AdamW(list(model.params.values()), lr=hp.lr)
    losses = []
    try:
        for step in range(hp.iterations):
            idx = rng.integers(0, len(data), size=hp.batch_size)
            noise = rng.standard_normal(xo_all[idx].shape)
            t = rng.uniform(0.0, 1.0, size=hp.batch_size)
            loss = flow_matching_loss(model, xo_all[idx], xe_all[idx], ids_all[idx], t, noise)
            opt.zero_grad()
            ad.backward(loss)
            opt.lr = hp.lr * min(1.0, (step + 1) / max(hp.warmup, 1))
            opt.step()
            losses.append(float(loss.data))
            if callback is not None:
                callback(step, losses[-1])
            if hp.log_every and (step + 1) % hp.log_every == 0:
                log.info("pretrain step %d loss %.5f", step + 1, np.mean(losses[-hp.log_every:]))
    except ad.NonFiniteError as e:
        model.set_trainable(False)
        raise TrainingError(f"non-finite values at step {len(losses)}: {e}", len(losses), losses) from e
    model.set_trainable(False)
    window = losses[-max(1, min(hp.log_every or 1, len(losses))):]
    final = float(np.mean(window)) if window else float("nan")
    return PretrainResult(model, losses, final, final < hp.loss_threshold)


def empty_prompt() -> Prompt:
    return EMPTY
