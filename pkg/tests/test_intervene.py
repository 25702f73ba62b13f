import numpy as np
import pytest

from sliderlab.intervene import InterventionSpec, interpolate_span, intervention_sweep, make_text_hook
from sliderlab.mmdit import encode_batch, sample_batch
from sliderlab.world import clean_background


def test_interpolate_endpoints_and_midpoint():
    y = np.arange(12.0).reshape(4, 3)
    pad = np.array([100.0, 100.0, 100.0])
    assert np.array_equal(interpolate_span(y, (1, 2), pad, 0.0), y)
    out = interpolate_span(y, (1, 2), pad, 1.0)
    assert np.all(out[1:3] == pad) and np.array_equal(out[[0, 3]], y[[0, 3]])
    mid = interpolate_span(np.array([[2.0, 4.0]]), (0, 0), np.zeros(2), 0.5)
    assert np.array_equal(mid, [[1.0, 2.0]])


def test_interpolate_errors():
    with pytest.raises(ValueError):
        interpolate_span(np.zeros((3, 2)), (2, 1), np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        interpolate_span(np.zeros((3, 2)), (0, 1), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        InterventionSpec(0, -0.1)
    with pytest.raises(ValueError):
        InterventionSpec(0, 0.5, (0, 9)).check_layers(2)


def test_hook_touches_only_span(world, tiny_model):
    cfg = tiny_model.config
    prompt = world.prompt((0, 1))
    ids, spans = encode_batch([prompt], cfg)
    hook = make_text_hook(cfg, 1, [0.7])(spans)
    rng = np.random.default_rng(0)
    z, x = rng.standard_normal((2, 1, cfg.n_pixels, 3))
    h = tiny_model.embed(z, x, ids, 0.5)
    out = hook(0, h).data
    s, e = spans[0][1]
    off = cfg.text_offset
    changed = np.any(out[0] != h.data[0], axis=1)
    assert set(np.flatnonzero(changed)) == set(range(off + s, off + e + 1))
    np.testing.assert_allclose(out[0, off + s], 0.3 * h.data[0, off + s] + 0.7 * h.data[0, off + 6], atol=1e-15)


def test_beta_zero_is_plain_sampling(world, tiny_model):
    X = clean_background(world, np.random.default_rng(1))
    prompt = world.prompt((2,))
    pts = intervention_sweep(tiny_model, world, X, prompt, 0, [0.0, 0.5], steps=3, seed=4)
    plain = sample_batch(tiny_model, np.stack([X, X]), [prompt] * 2, 3, [4, 4])[0]
    assert np.array_equal(pts[0].grid, plain)
    assert not np.array_equal(pts[1].grid, plain)


def test_sweep_shape_and_errors(world, tiny_model):
    X = clean_background(world, np.random.default_rng(2))
    prompt = world.prompt((1,))
    pts = intervention_sweep(tiny_model, world, X, prompt, 0, np.linspace(0, 1, 5), steps=2, seed=0)
    assert len(pts) == 5 and all(np.all(np.isfinite(p.scores)) for p in pts)
    with pytest.raises(ValueError):
        intervention_sweep(tiny_model, world, X, prompt, 0, [1.2], steps=2, seed=0)
    with pytest.raises(IndexError):
        intervention_sweep(tiny_model, world, X, prompt, 1, [0.5], steps=2, seed=0)
    with pytest.raises(ValueError):
        intervention_sweep(tiny_model, world, X, prompt, 0, [0.5], steps=2, seed=0, layers=[5])


def test_layer_subset(world, tiny_model):
    X = clean_background(world, np.random.default_rng(3))
    prompt = world.prompt((3,))
    all_l = intervention_sweep(tiny_model, world, X, prompt, 0, [0.5], 2, 0)[0].grid
    first = intervention_sweep(tiny_model, world, X, prompt, 0, [0.5], 2, 0, layers=[0])[0].grid
    assert not np.array_equal(all_l, first)
    # beta=1 at the first block turns the span into pad rows, which stay pads at every depth
    all_1 = intervention_sweep(tiny_model, world, X, prompt, 0, [1.0], 2, 0)[0].grid
    first_1 = intervention_sweep(tiny_model, world, X, prompt, 0, [1.0], 2, 0, layers=[0])[0].grid
    assert np.array_equal(all_1, first_1)
