"""Walk through one slider end to end.

1. build the toy edit world and a base editor (load ``--base`` or pretrain a short one)
2. train a GSTLoRA adapter with the SPPS objective
3. sweep alpha for each atom and print probe scores next to explicit CFG

    python3 demos/slider_walkthrough.py --base .acceptance_cache/base-<hash>.sled
"""
import argparse
import logging

import numpy as np

from sliderlab.adapters import GSTLORA
from sliderlab.checkpoint import load_checkpoint
from sliderlab.metrics import continuity, explicit_cfg_sweep, slider_sweep
from sliderlab.mmdit import ModelConfig, PretrainParams, pretrain_base
from sliderlab.pps import default_hyperparams, train_adapter
from sliderlab.world import WorldSpec, eval_case, gen_world, make_dataset


def bar(v, width=24):
    n = int(round(np.clip(v, 0, 1.5) / 1.5 * width))
    return "#" * n + "." * (width - n)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--base", help="model checkpoint; omit to pretrain a quick one")
    p.add_argument("--iterations", type=int, default=300, help="adapter iterations")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    world = gen_world(WorldSpec())
    if args.base:
        model = load_checkpoint(args.base, "model")
    else:
        # a short run: edits will be weak but the mechanics are the same
        data = make_dataset(world, 512, args.seed, neutral_rate=0.2)
        model = pretrain_base(data, ModelConfig(vocab=world.spec.vocab_size),
                              PretrainParams(iterations=400, log_every=100)).model
    model.set_trainable(False)

    hp = default_hyperparams(GSTLORA, seed=args.seed, iterations=args.iterations, ks=(1, 2))
    adapter, tlog = train_adapter(model, world, GSTLORA, hp)
    print(f"\nadapter loss: first 20 steps {np.mean(tlog.losses[:20]):.4f}, last 20 {np.mean(tlog.losses[-20:]):.4f}")

    alphas = np.linspace(-0.5, 1.25, 15)
    for atom in range(world.n_atoms):
        X, prompt = eval_case(world, (atom,), args.seed)
        tr = slider_sweep(model, adapter, world, X, prompt, 0, alphas, 32, args.seed)
        cfg_scores = explicit_cfg_sweep(model, world, X, prompt, 1.0 - alphas[::-1], 32, args.seed).scores[::-1]
        print(f"\natom {atom} ({world.atoms[atom].kind}): probe score along the slider")
        print(f"{'alpha':>7} {'slider':>7}  {'':24}  {'cfg':>7}")
        for a, s, c in zip(alphas, tr.scores, cfg_scores):
            print(f"{a:7.3f} {s:7.3f}  {bar(s)}  {c:7.3f}")
        print(f"continuity: slider {continuity(tr.scores).value:.3f}, explicit CFG {continuity(cfg_scores).value:.3f}")


if __name__ == "__main__":
    main()
