import sys

import numpy as np
import pytest

from sliderlab.mmdit import EditorModel, ModelConfig
from sliderlab.world import WorldSpec, gen_world


@pytest.fixture
def world():
    return gen_world(WorldSpec())


@pytest.fixture
def tiny_config(world):
    return ModelConfig(d=8, L=2, heads=2, T=16, vocab=world.spec.vocab_size, seed=1)


@pytest.fixture
def tiny_model(tiny_config):
    # perturb zero-initialised biases/affines so every parameter matters
    m = EditorModel(tiny_config)
    rng = np.random.default_rng(5)
    for k, t in m.params.items():
        if k.endswith(("bias", "gain")):
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    m.params["out.weight"].data = rng.normal(0, 0.5, m.params["out.weight"].shape)
    return m


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
