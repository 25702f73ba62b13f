import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sliderlab.adapters import GSTLORA, STLORA, init_adapter
from sliderlab.metrics import (CHI2_EPS, DEGENERATE, OK, SATURATED, GridSweep, Trajectory, continuity,
                               continuity_grid, cross_talk, disentanglement, explicit_cfg_sweep, extrapolation,
                               joint_range, slider_grid_sweep, slider_sweep)
from sliderlab.mmdit import sample_batch
from sliderlab.prompt import EMPTY
from sliderlab.world import apply_effect, clean_background


def test_concentrated_delta15():
    r = continuity(np.zeros(15))
    assert r.chi2 == 210.0 and r.dof == 14
    assert abs(r.value - 14 / 210) < 1e-12
    assert r.status == DEGENERATE


def test_uniform_is_saturated():
    r = continuity(np.arange(15.0))
    assert r.chi2 == 0.0 and r.status == SATURATED
    assert r.value == pytest.approx(14 / CHI2_EPS)


def test_continuity_hand_value():
    # 5 scores, normalised [0, .1, .2, .9, 1] -> bins 0,0,1,4,4 -> counts [2,1,0,0,2]
    r = continuity([0.0, 0.1, 0.2, 0.9, 1.0])
    assert list(r.counts) == [2, 1, 0, 0, 2]
    assert r.chi2 == 1 + 0 + 1 + 1 + 1 and r.status == OK
    assert r.value == pytest.approx(4 / 4)


def test_continuity_needs_two():
    with pytest.raises(ValueError):
        continuity([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(0.1, 10), st.floats(-5, 5))
def test_continuity_affine_invariant(xs, a, b):
    x = np.array(xs)
    if np.ptp(x) < 1e-6:
        return
    r1, r2 = continuity(x), continuity(a * x + b)
    # bin edges may flip by one ulp; compare counts of the interior only when exact
    if np.array_equal(r1.counts, r2.counts):
        assert r1.value == r2.value


def test_grid_reduces_to_1d():
    s = np.random.default_rng(0).uniform(size=15)
    g = continuity_grid(GridSweep(np.linspace(0, 1, 15), s[:, None]))
    assert g.value == continuity(s).value


def test_grid_ramp_beats_constant_axis():
    d = 7
    a = np.linspace(0, 1, d)
    ramp = np.stack(np.meshgrid(a, a, indexing="ij"), -1)
    flat = ramp.copy()
    flat[..., 1] = 0.3
    r_ramp = continuity_grid(GridSweep(a, ramp))
    r_flat = continuity_grid(GridSweep(a, flat))
    assert r_ramp.status == SATURATED
    assert r_flat.value < r_ramp.value


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSweep(np.arange(3.0), np.zeros((3, 2, 2)))
    with pytest.raises(ValueError):
        GridSweep(np.arange(3.0), np.full((3, 3, 2), np.nan))


def test_extrapolation():
    assert extrapolation([0.1, 0.9, 0.4]) == 0.9
    assert extrapolation([0.3] * 4) == 0.3
    with pytest.raises(ValueError):
        extrapolation([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0, 3))
def test_extrapolation_properties(xs, bump):
    x = np.array(xs)
    assert extrapolation(x[::-1]) == extrapolation(x)
    assert extrapolation(x + bump) >= extrapolation(x)


def test_disentanglement_oracles(world):
    X = clean_background(world, np.random.default_rng(0))
    target = world.atoms[1]
    pure = [apply_effect(X, target, s) for s in np.linspace(-0.5, 1.25, 8)]
    assert disentanglement(X, pure, 1, world) == 0.0
    other = world.atoms[2]
    leaky = [apply_effect(g, other, 0.3) for g in pure]
    assert disentanglement(X, leaky, 1, world) > 0.0
    # probe term alone: 0.3 on one of three other atoms
    probe_only = disentanglement(X, leaky, 1, world, exclude=(2,))
    assert probe_only == pytest.approx(0.3 / 3)
    same = [X] * 4
    assert disentanglement(X, same, 1, world) == 0.0


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], [1.0])


def test_cross_talk():
    a = np.linspace(0, 1, 5)
    clean = np.stack(np.meshgrid(a, a, indexing="ij"), -1)
    assert cross_talk(GridSweep(a, clean)) == 0.0
    leak = clean.copy()
    leak[..., 1] += 0.1 * leak[..., 0]
    assert 0 < cross_talk(GridSweep(a, leak)) < 0.2
    with pytest.raises(ValueError):
        cross_talk(GridSweep(a, a[:, None]))


def test_cfg_endpoints_and_two_forwards(world, tiny_model):
    X = clean_background(world, np.random.default_rng(1))
    prompt = world.prompt((0,))
    calls = []
    tr = explicit_cfg_sweep(tiny_model, world, X, prompt, [0.0, 0.5, 1.0], steps=3, seed=2, counter=calls)
    cond = sample_batch(tiny_model, np.stack([X, X]), [prompt] * 2, 3, [2, 2])[0]
    unc = sample_batch(tiny_model, np.stack([X, X]), [EMPTY] * 2, 3, [2, 2])[0]
    assert np.array_equal(tr.grids[2], cond)
    assert np.array_equal(tr.grids[0], unc)
    assert sum(calls) == 2 * 3


def test_slider_alpha0_equals_cfg_w1(world, tiny_model):
    X = clean_background(world, np.random.default_rng(3))
    prompt = world.prompt((2,))
    a = init_adapter(tiny_model.config, GSTLORA, 2)
    for p in a.parameters():
        p.data = p.data + 0.3
    sl = slider_sweep(tiny_model, a, world, X, prompt, 0, [0.0, 1.0], steps=3, seed=5)
    cf = explicit_cfg_sweep(tiny_model, world, X, prompt, [0.5, 1.0], steps=3, seed=5)
    assert np.array_equal(sl.grids[0], cf.grids[1])
    assert sl.meta["atom"] == 2
    with pytest.raises(IndexError):
        slider_sweep(tiny_model, a, world, X, prompt, 1, [0.0], 2, 0)


def test_grid_sweep_shapes(world, tiny_model):
    X = clean_background(world, np.random.default_rng(4))
    prompt = world.prompt((0, 3))
    a = init_adapter(tiny_model.config, STLORA, 2)
    gs = slider_grid_sweep(tiny_model, a, world, X, prompt, [0.0, 0.5, 1.0], steps=2, seed=0, chunk=4)
    assert gs.scores.shape == (3, 3, 2) and gs.atoms == (0, 3)
    # a fresh adapter has dW = 0: the whole lattice is the base sample
    assert np.ptp(gs.scores[..., 0]) == 0.0
    with pytest.raises(ValueError):
        slider_grid_sweep(tiny_model, init_adapter(tiny_model.config, GSTLORA, 2), world, X, prompt, [0.0], 2, 0)


def test_joint_range():
    t1 = Trajectory([0.0, 1.0], [0.2, 0.5])
    t2 = Trajectory([0.0, 1.0], [-0.1, 0.4])
    assert joint_range(t1, t2) == (-0.1, 0.5)
