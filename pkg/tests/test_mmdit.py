import numpy as np
import pytest

from sliderlab import autodiff as ad
from sliderlab.adapters import GSTLORA, STLORA, init_adapter
from sliderlab.mmdit import (EditorModel, ModelConfig, PretrainParams, encode_batch, encode_prompt, flatten_grids,
                             predict_velocity, pretrain_base, sample_batch, sample_edit, timestep_features)
from sliderlab.prompt import EMPTY, Prompt
from sliderlab.world import PAD_ID, clean_background, make_dataset


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def reference_forward(p, cfg, z, x, ids, t):
    """Straight-line numpy forward of one example, written independently of the model code."""
    N, off = cfg.n_pixels, cfg.text_offset
    rows = []
    for i in range(N):
        rows.append(p["in.weight"] @ z[i] + p["in.bias"] + p["embed.pos"][i] + p["embed.stream"][0])
    for i in range(N):
        rows.append(p["in.weight"] @ x[i] + p["in.bias"] + p["embed.pos"][i] + p["embed.stream"][1])
    for tok in ids:
        rows.append(p["embed.token"][tok] + p["embed.stream"][2])
    h = np.array(rows)
    h = h + (p["time.weight"] @ timestep_features([t], cfg.d)[0] + p["time.bias"])
    dh = cfg.d // cfg.heads

    def norm(h, key):
        out = np.empty_like(h)
        out[:off] = _ln(h[:off], p[key + "_img.gain"], p[key + "_img.bias"])
        out[off:] = _ln(h[off:], p[key + "_txt.gain"], p[key + "_txt.bias"])
        return out

    def lin(v, key):
        return v @ p[key + ".weight"].T + p[key + ".bias"]

    for l in range(cfg.L):
        pre = f"blocks.{l}"
        a = norm(h, pre + ".norm_attn")
        q, k, v = lin(a, pre + ".q"), lin(a, pre + ".k"), lin(a, pre + ".v")
        heads = []
        for j in range(cfg.heads):
            sl = slice(j * dh, (j + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            s = np.exp(s - s.max(1, keepdims=True))
            heads.append((s / s.sum(1, keepdims=True)) @ v[:, sl])
        h = h + lin(np.concatenate(heads, 1), pre + ".o")
        f = norm(h, pre + ".norm_ff")
        h = h + lin(_gelu(lin(f, pre + ".ff1")), pre + ".ff2")
    out = _ln(h[:N], p["out.norm.gain"], p["out.norm.bias"])
    return out @ p["out.weight"].T + p["out.bias"]


def test_forward_matches_reference(world, tiny_model):
    cfg = tiny_model.config
    rng = np.random.default_rng(0)
    p = tiny_model.state_dict()
    prompt = world.prompt((1, 3))
    ids, _ = encode_batch([prompt], cfg)
    for t in (0.0, 0.37, 1.0):
        z = rng.standard_normal((1, cfg.n_pixels, 3))
        x = rng.standard_normal((1, cfg.n_pixels, 3))
        got = tiny_model.forward(z, x, ids, t).data[0]
        want = reference_forward(p, cfg, z[0], x[0], ids[0], t)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_encode_prompt_layout():
    cfg = ModelConfig(T=16)
    tt = encode_prompt(EMPTY, cfg)
    assert tt.spans == [] and np.all(tt.ids == PAD_ID)
    tt = encode_prompt(Prompt(((1, 2, 3), (4, 5, 6))), cfg)
    assert tt.spans == [(0, 2), (3, 5)]
    assert list(tt.ids[:6]) == [1, 2, 3, 4, 5, 6] and np.all(tt.ids[6:] == PAD_ID)
    full = encode_prompt(Prompt((tuple(range(1, 17)),)), ModelConfig(T=16, vocab=17))
    assert full.spans == [(0, 15)] and PAD_ID not in full.ids


def test_encode_prompt_errors():
    with pytest.raises(ValueError):
        encode_prompt(Prompt((tuple(range(1, 18)),)), ModelConfig(T=16, vocab=40))
    with pytest.raises(ValueError):
        encode_prompt(Prompt(((99,),)), ModelConfig())


def test_velocity_shape_and_determinism(world, tiny_model):
    X = clean_background(world, np.random.default_rng(1))
    Z = np.random.default_rng(2).standard_normal(X.shape)
    prompt = world.prompt((0,))
    v1 = predict_velocity(tiny_model, Z, X, prompt, 0.5)
    v2 = predict_velocity(tiny_model, Z, X, prompt, 0.5)
    assert v1.shape == (64, 3)
    assert np.array_equal(v1, v2)


def test_grid_mismatch(world, tiny_model):
    X = clean_background(world, np.random.default_rng(1))
    with pytest.raises(ValueError):
        predict_velocity(tiny_model, X[:4], X, world.prompt((0,)), 0.5)


def test_pad_rows_identical_at_every_depth(world, tiny_model):
    cfg = tiny_model.config
    ids, spans = encode_batch([world.prompt((0, 2))], cfg)
    rng = np.random.default_rng(3)
    z, x = rng.standard_normal((2, 1, cfg.n_pixels, 3))
    seen = []

    def hook(block, h):
        seen.append(h.data[0, cfg.text_offset + 6:].copy())
        return h

    tiny_model.forward(z, x, ids, 0.3, text_hook=hook)
    for rows in seen:
        assert np.all(rows == rows[0])


@pytest.mark.parametrize("mode", [STLORA, GSTLORA])
def test_fresh_and_alpha_zero_adapter_are_base(world, tiny_model, mode):
    cfg = tiny_model.config
    ad_ = init_adapter(cfg, mode, rank=2, seed=0)
    rng = np.random.default_rng(4)
    for p in ad_.parameters():
        p.data = rng.standard_normal(p.shape)
    X = clean_background(world, rng)
    prompt = world.prompt((1,))
    base = sample_edit(tiny_model, X, prompt, steps=3, seed=9)
    at0 = sample_edit(tiny_model, X, prompt, steps=3, seed=9, adapter=ad_, adapter_settings=[(0, 0.0)])
    assert np.array_equal(base, at0)
    at1 = sample_edit(tiny_model, X, prompt, steps=3, seed=9, adapter=ad_, adapter_settings=[(0, 1.0)])
    assert not np.array_equal(base, at1)


def test_sample_edit_errors(world, tiny_model):
    X = clean_background(world, np.random.default_rng(0))
    prompt = world.prompt((1,))
    ad_ = init_adapter(tiny_model.config, STLORA, rank=2)
    with pytest.raises(ValueError):
        sample_edit(tiny_model, X, prompt, steps=0)
    with pytest.raises(IndexError):
        sample_edit(tiny_model, X, prompt, 2, [(1, 0.5)], ad_)
    with pytest.raises(ValueError):
        sample_edit(tiny_model, X, prompt, 2, [(0, 2.0)], ad_)
    sample_edit(tiny_model, X, prompt, 2, [(0, 2.0)], ad_, extrapolate=True)


def test_step_refinement_converges(world, tiny_model):
    # an untrained model oscillates in t through the high timestep frequencies; damp them
    tiny_model.params["time.weight"].data = 0.01 * tiny_model.params["time.weight"].data
    X = clean_background(world, np.random.default_rng(6))
    prompt = world.prompt((2,))
    runs = {n: sample_edit(tiny_model, X, prompt, steps=n, seed=1) for n in (1, 4, 8, 16, 32, 64)}
    assert np.all(np.isfinite(runs[1])) and not np.array_equal(runs[1], runs[64])
    gaps = [np.linalg.norm(runs[2 * n] - runs[n]) for n in (4, 8, 16, 32)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_batched_sampling_matches_single(world, tiny_model):
    rng = np.random.default_rng(7)
    Xs = [clean_background(world, rng) for _ in range(3)]
    prompts = [world.prompt((0,)), world.prompt((1, 2)), EMPTY]
    batch = sample_batch(tiny_model, np.stack(Xs), prompts, 3, [0, 1, 2])
    for i in range(3):
        single = sample_batch(tiny_model, Xs[i], [prompts[i]], 3, [i])[0]
        assert np.array_equal(batch[i], single)


def test_pretrain_deterministic_and_learns(world):
    cfg = ModelConfig(d=16, L=1, heads=2, vocab=world.spec.vocab_size)
    data = make_dataset(world, 1, seed=0, ks=(1,))
    hp = PretrainParams(iterations=150, batch_size=4, lr=3e-3, warmup=10, log_every=50)
    r1 = pretrain_base(data, cfg, hp)
    r2 = pretrain_base(data, cfg, hp)
    assert r1.losses == r2.losses
    windows = [np.mean(r1.losses[i:i + 50]) for i in (0, 50, 100)]
    assert windows[0] > windows[1] > windows[2]
    for k, v in r1.model.state_dict().items():
        assert np.array_equal(v, r2.model.state_dict()[k])


def test_model_rejects_bad_params(tiny_config):
    p = EditorModel(tiny_config).state_dict()
    p.pop("out.bias")
    with pytest.raises(ValueError):
        EditorModel(tiny_config, p)


def test_flatten_roundtrip():
    g = np.arange(2 * 8 * 8 * 3, dtype=float).reshape(2, 8, 8, 3)
    assert flatten_grids(g).shape == (2, 64, 3)
    with ad.no_grad():
        pass
