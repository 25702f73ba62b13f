"""sliderlab command line: pretrain, train-adapter, sweep, interp, report.

Exit codes: 0 ok, 1 usage or I/O error, 2 pretraining budget exhausted
above the loss threshold, 3 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adapters import GSTLORA, STLORA
from .archive import ArchiveError, write_archive
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, ConfigError, dump_config, load_config
from .intervene import intervention_sweep
from .metrics import (DEGENERATE, SUBSTITUTIONS, continuity, continuity_grid, cross_talk,
                      disentanglement, explicit_cfg_sweep, extrapolation, joint_range, slider_grid_sweep,
                      slider_sweep)
from .mmdit import ModelConfig, TrainingError, pretrain_base
from .pps import train_adapter
from .world import eval_case, gen_world, make_dataset

log = logging.getLogger("sliderlab")

EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_NUMERIC = 0, 1, 2, 3
CSV_FIELDS = ["method", "gamma", "seed", "alpha", "atom", "score"]


class CliError(Exception):
    pass


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def _guard(paths, force: bool):
    for p in paths:
        if Path(p).exists() and not force:
            raise CliError(f"{p} exists; pass --force to overwrite")


def _write_text(path, text: str):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _floats(text: str, name: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--{name} must be a comma-separated list of numbers") from None
    if not vals or not all(np.isfinite(vals)):
        raise CliError(f"--{name} needs at least one finite value")
    return vals


def _load_model(path, cfg: Config):
    model = load_checkpoint(path, expect="model")
    if model.config != cfg.model_config:
        raise CliError(f"{path}: checkpoint model config does not match the config file")
    return model


def _load_adapter(path, cfg: Config):
    if path is None:
        raise CliError("--adapter is required for slider sweeps")
    if not Path(path).exists():
        raise CliError(f"adapter checkpoint {path} not found")
    from .checkpoint import checkpoint_meta
    meta = checkpoint_meta(path)
    try:
        same = ModelConfig.from_dict(meta["config"]) == cfg.model_config
    except (KeyError, TypeError, ValueError):
        same = False
    if not same:
        raise CliError(f"{path}: adapter was trained for a different model config")
    return load_checkpoint(path, expect="adapter")


def _alpha_key(alpha) -> str:
    return ";".join(repr(float(a)) for a in np.atleast_1d(alpha))


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "score": repr(float(r["score"]))})
    return buf.getvalue()


def _continuity_dict(scores, value_range=None) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        return {"value": None, "status": DEGENERATE, "reason": "fewer than two slider settings"}
    return continuity(s, value_range).to_dict()


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_init_config(args) -> int:
    text = dump_config(Config())
    if args.out is None:
        sys.stdout.write(text)
        return EXIT_OK
    _guard([args.out], args.force)
    _write_text(args.out, text)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    manifest_path, loss_path = out.with_suffix(".json"), out.with_suffix(".loss.csv")
    _guard([out, manifest_path, loss_path], args.force)
    world = gen_world(cfg.world_spec)
    hp = cfg.pretrain_params
    data = make_dataset(world, hp.dataset_size, cfg.seed, ks=hp.ks, neutral_rate=hp.neutral_rate)
    try:
        res = pretrain_base(data, cfg.model_config, hp)
    except TrainingError as e:
        log.error("pretraining diverged at step %d: %s", e.step, e)
        return EXIT_NUMERIC
    manifest = {"command": "pretrain", "config_hash": cfg.hash(), "seed": cfg.seed,
                "final_loss": res.final_loss, "loss_threshold": hp.loss_threshold,
                "reached_threshold": bool(res.reached_threshold), "iterations": len(res.losses)}
    save_checkpoint(res.model, out, extra={"config_hash": cfg.hash(), "final_loss": res.final_loss})
    _write_text(loss_path, "step,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(res.losses)))
    _write_text(manifest_path, _dump_json(manifest))
    if not res.reached_threshold:
        log.warning("final loss %.5f above threshold %.5f after %d steps", res.final_loss, hp.loss_threshold,
                    len(res.losses))
        return EXIT_BUDGET
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    manifest_path, loss_path = out.with_suffix(".json"), out.with_suffix(".loss.csv")
    _guard([out, manifest_path, loss_path], args.force)
    model = _load_model(args.base, cfg)
    world = gen_world(cfg.world_spec)
    hp = cfg.train.hyperparams(args.mode, cfg.seed, objective=args.objective)
    try:
        adapter, tlog = train_adapter(model, world, args.mode, hp)
    except TrainingError as e:
        log.error("adapter training diverged; last good step %d: %s", e.step, e)
        return EXIT_NUMERIC
    save_checkpoint(adapter, out, config=model.config, extra={"config_hash": cfg.hash()})
    tlog.write_csv(loss_path)
    final = float(np.mean(tlog.losses[-min(100, len(tlog.losses)):]))
    manifest = {"command": "train-adapter", "config_hash": cfg.hash(), "seed": cfg.seed, "mode": args.mode,
                "objective": hp.objective, "iterations": hp.iterations, "batch_size": hp.batch_size,
                "lr": hp.lr, "final_loss": final}
    _write_text(manifest_path, _dump_json(manifest))
    return EXIT_OK


def sweep_report(cfg: Config, model, adapter, gamma: int, alphas, with_cfg: bool = False) -> tuple:
    """Run the configured sweeps; returns (report dict, csv rows, named grids)."""
    world = gen_world(cfg.world_spec)
    alphas = np.asarray(alphas, dtype=np.float64)
    if gamma > world.n_atoms:
        raise CliError(f"gamma={gamma} exceeds the {world.n_atoms} atoms of the world")
    if np.any(np.diff(alphas) <= 0):
        raise CliError("--alphas must be strictly increasing")
    if gamma > 1 and adapter.mode != STLORA:
        raise CliError("multi-slider sweeps need an STLoRA adapter")
    steps = cfg.eval.steps
    method = f"slider-{adapter.mode}"
    cases, rows, grids = [], [], {}
    for seed in cfg.eval.seeds:
        for atoms in itertools.combinations(range(world.n_atoms), gamma):
            X, prompt = eval_case(world, atoms, seed)
            tag = f"seed{seed}/atoms{'-'.join(map(str, atoms))}"
            if gamma == 1:
                a = atoms[0]
                tr = slider_sweep(model, adapter, world, X, prompt, 0, alphas, steps, seed)
                case = {"seed": seed, "atoms": list(atoms), "method": method,
                        "continuity": _continuity_dict(tr.scores),
                        "extrapolation": extrapolation(tr.scores),
                        "disentanglement": disentanglement(X, tr.grids, a, world)}
                grids[f"{method}/{tag}"] = tr.grids
                rows += [{"method": method, "gamma": 1, "seed": seed, "alpha": _alpha_key(al), "atom": a,
                          "score": sc} for al, sc in zip(alphas, tr.scores)]
                if with_cfg:
                    ws = 1.0 - alphas[::-1]
                    cf = explicit_cfg_sweep(model, world, X, prompt, ws, steps, seed)
                    cf_scores = cf.scores[::-1]  # back to the alpha order
                    cf_grids = cf.grids[::-1]
                    rng = joint_range(tr, cf) if alphas.size >= 2 else None
                    case["cfg"] = {"ws": (1.0 - alphas).tolist(), "continuity": _continuity_dict(cf_scores),
                                   "extrapolation": extrapolation(cf_scores),
                                   "disentanglement": disentanglement(X, cf_grids, a, world)}
                    case["joint_continuity"] = {"slider": _continuity_dict(tr.scores, rng),
                                                "explicit-cfg": _continuity_dict(cf_scores, rng)}
                    grids[f"explicit-cfg/{tag}"] = np.ascontiguousarray(cf_grids)
                    rows += [{"method": "explicit-cfg", "gamma": 1, "seed": seed, "alpha": _alpha_key(al),
                              "atom": a, "score": sc} for al, sc in zip(alphas, cf_scores)]
            else:
                gs = slider_grid_sweep(model, adapter, world, X, prompt, alphas, steps, seed, keep_grids=True)
                lattice = gs.grids.reshape((-1,) + gs.grids.shape[gamma:])
                case = {"seed": seed, "atoms": list(atoms), "method": method,
                        "continuity": continuity_grid(gs).to_dict() if alphas.size >= 2 else
                        {"value": None, "status": DEGENERATE, "reason": "fewer than two slider settings"},
                        "cross_talk": cross_talk(gs) if alphas.size >= 2 else None,
                        "extrapolation": {str(a): extrapolation(gs.scores[..., k]) for k, a in enumerate(atoms)}}
                grids[f"{method}/{tag}"] = lattice
                for idx in itertools.product(range(alphas.size), repeat=gamma):
                    key = _alpha_key(alphas[list(idx)])
                    for k, a in enumerate(atoms):
                        rows.append({"method": method, "gamma": gamma, "seed": seed, "alpha": key, "atom": a,
                                     "score": gs.scores[idx + (k,)]})
            cases.append(case)
    report = {"command": "sweep", "config_hash": cfg.hash(), "seed": cfg.seed, "gamma": gamma,
              "alphas": alphas.tolist(), "steps": steps, "seeds": list(cfg.eval.seeds),
              "adapter_mode": adapter.mode, "substitutions": SUBSTITUTIONS,
              "continuity_eps": 1e-9, "normalisation": "per-trajectory min-max; joint_continuity uses the "
                                                       "min-max over both methods", "cases": cases}
    return report, rows, grids


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    prefix = Path(args.out)
    paths = [prefix.with_suffix(s) for s in (".json", ".csv", ".grids.sled")]
    _guard(paths, args.force)
    model = _load_model(args.base, cfg)
    adapter = _load_adapter(args.adapter, cfg)
    gamma = args.gamma or cfg.eval.gamma
    alphas = _floats(args.alphas, "alphas") if args.alphas else cfg.eval.alphas(gamma)
    report, rows, grids = sweep_report(cfg, model, adapter, gamma, alphas, args.with_cfg)
    _write_text(paths[0], _dump_json(report))
    _write_text(paths[1], _csv(rows))
    write_archive(paths[2], grids, meta={"kind": "grids", "config_hash": cfg.hash()})
    return EXIT_OK


def interp_report(cfg: Config, model, target: int, betas, layers=None) -> tuple:
    world = gen_world(cfg.world_spec)
    if not 0 <= target < world.n_atoms:
        raise CliError(f"--target {target} is not an atom of the world")
    for b in betas:
        if not 0.0 <= b <= 1.0:
            raise CliError(f"beta {b} outside [0, 1]")
    entries, grids = [], {}
    for seed in cfg.eval.seeds:
        X, prompt = eval_case(world, (target,), seed)
        pts = intervention_sweep(model, world, X, prompt, 0, betas, cfg.eval.steps, seed, layers)
        for p in pts:
            entries.append({"seed": seed, "beta": p.beta, "target_score": float(p.scores[target]),
                            "scores": [float(s) for s in p.scores]})
        grids[f"interp/seed{seed}/atoms{target}"] = np.stack([p.grid for p in pts])
    report = {"command": "interp", "config_hash": cfg.hash(), "seed": cfg.seed, "target": target,
              "betas": [float(b) for b in betas], "layers": None if layers is None else list(layers),
              "steps": cfg.eval.steps, "substitutions": {"score": SUBSTITUTIONS["score"]}, "entries": entries}
    return report, grids


def cmd_interp(args) -> int:
    cfg = load_config(args.config)
    prefix = Path(args.out)
    paths = [prefix.with_suffix(".json"), prefix.with_suffix(".grids.sled")]
    _guard(paths, args.force)
    betas = _floats(args.betas, "betas")
    layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    model = _load_model(args.base, cfg)
    report, grids = interp_report(cfg, model, args.target, betas, layers)
    _write_text(paths[0], _dump_json(report))
    write_archive(paths[1], grids, meta={"kind": "grids", "config_hash": cfg.hash()})
    return EXIT_OK


def cmd_report(args) -> int:
    """Summarise a sweep JSON: mean metrics per atom (or atom tuple)."""
    try:
        rep = json.loads(Path(args.input).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read report {args.input}: {e}") from None
    if rep.get("command") != "sweep":
        raise CliError("report expects a sweep JSON")
    by = {}
    for c in rep["cases"]:
        by.setdefault(tuple(c["atoms"]), []).append(c)
    out = [f"# gamma={rep['gamma']} steps={rep['steps']} seeds={rep['seeds']} config={rep['config_hash']}",
           "# score: " + rep["substitutions"]["score"]]
    for atoms, cs in sorted(by.items()):
        vals = [c["continuity"]["value"] for c in cs if c["continuity"]["value"] is not None]
        line = f"atoms={','.join(map(str, atoms))} continuity={np.mean(vals):.6g}" if vals else \
            f"atoms={','.join(map(str, atoms))} continuity={DEGENERATE}"
        if "cfg" in cs[0]:
            cv = [c["cfg"]["continuity"]["value"] for c in cs if c["cfg"]["continuity"]["value"] is not None]
            if cv:
                line += f" cfg_continuity={np.mean(cv):.6g}"
        if "cross_talk" in cs[0] and cs[0]["cross_talk"] is not None:
            line += f" cross_talk={np.mean([c['cross_talk'] for c in cs]):.4g}"
        out.append(line)
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sliderlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a config with every default filled in")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("pretrain", help="flow-matching pretraining of the base editor")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-adapter", help="train a slider adapter on a frozen base")
    s.add_argument("--config", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--mode", choices=[STLORA, GSTLORA], default=GSTLORA)
    s.add_argument("--objective", choices=["pps", "spps"])
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train_adapter)

    s = sub.add_parser("sweep", help="slider sweeps with continuity / extrapolation / disentanglement")
    s.add_argument("--config", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--adapter")
    s.add_argument("--gamma", type=int, choices=[1, 2, 3])
    s.add_argument("--alphas", help="comma-separated, strictly increasing")
    s.add_argument("--with-cfg", action="store_true", help="add the explicit-CFG baseline (gamma=1)")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("interp", help="instruction-token interpolation toward padding")
    s.add_argument("--config", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--target", type=int, required=True, help="atom index")
    s.add_argument("--betas", required=True, help="comma-separated values in [0, 1]")
    s.add_argument("--layers", help="comma-separated block indices (default: all)")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("report", help="summarise a sweep report")
    s.add_argument("input")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ConfigError, ArchiveError, OSError, ValueError, IndexError) as e:
        print(f"sliderlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
