"""Command line entry point: train, eval, sample, entropy, export-viz.

One JSON config file drives every command.  Unknown keys are rejected
with the offending line number so typos do not silently fall back to
defaults.  Output-directory precedence: --out flag, then the
SO3FLOW_OUT environment variable, then the config's out_dir.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, hopfviz, metrics, so3, targets, training
from .metrics import metric_record, symmetry_set_for_target
from .model import FlowModel
from .training import TrainConfig, TrainingAborted

DEFAULT_EVAL_SAMPLES = 4096

_TOP_KEYS = {"seed", "out_dir", "target", "model", "train", "grids"}
_TARGET_KEYS = {"kind", "kappa", "mode"}
_MODEL_KEYS = {"blocks", "components", "widths", "conditional",
               "composition", "affine_parameterization", "init"}
_TRAIN_KEYS = {"lr", "batch_size", "steps", "milestones", "decay_factor",
               "clip_norm", "checkpoint_interval", "dataset_size",
               "val_fraction"}
_GRID_KEYS = {"target", "audit", "viz"}

_MODEL_DEFAULTS = {"blocks": 6, "components": 16, "widths": None,
                   "conditional": False, "composition": "both",
                   "affine_parameterization": "raw", "init": "identity"}
_GRID_DEFAULTS = {"target": 500_000, "audit": 500_000, "viz": 30_000}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config loading

def _line_of(raw, key):
    for i, line in enumerate(raw.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return 0


def _check_keys(raw, path, section, mapping, allowed):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: section {section!r} must be an object")
    for key in mapping:
        if key not in allowed:
            raise ConfigError(
                f"{path}:{_line_of(raw, key)}: unknown key {key!r} "
                f"in {section}")


def load_config(path):
    """Parse and validate a run config; returns the resolved dict."""
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e

    _check_keys(raw, path, "top level", cfg, _TOP_KEYS)
    target = cfg.get("target")
    if target is None:
        raise ConfigError(f"{path}: missing required section 'target'")
    _check_keys(raw, path, "target", target, _TARGET_KEYS)
    if "kind" not in target:
        raise ConfigError(f"{path}:{_line_of(raw, 'target')}: "
                          "target needs a 'kind'")
    _check_keys(raw, path, "model", cfg.get("model", {}), _MODEL_KEYS)
    _check_keys(raw, path, "train", cfg.get("train", {}), _TRAIN_KEYS)
    _check_keys(raw, path, "grids", cfg.get("grids", {}), _GRID_KEYS)

    resolved = {
        "seed": int(cfg.get("seed", 0)),
        "out_dir": cfg.get("out_dir", "run"),
        "target": {"kind": target["kind"],
                   "kappa": float(target.get("kappa", 40.0)),
                   "mode": target.get("mode")},
        "model": {**_MODEL_DEFAULTS, **cfg.get("model", {})},
        "train": dict(cfg.get("train", {})),
        "grids": {**_GRID_DEFAULTS, **cfg.get("grids", {})},
    }
    try:
        # surface value errors (bad kind, negative lr, ...) as config errors
        _train_config(resolved)
        if resolved["target"]["kind"] not in targets.KINDS:
            raise ValueError(f"target kind must be one of {targets.KINDS}")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return resolved


def _train_config(cfg):
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _grid(n):
    if n == 500_000:
        return targets._default_grid()   # shared module cache
    return so3.fibonacci_hopf_grid(n)


def build_target(cfg):
    t = cfg["target"]
    mode = None
    if t["mode"] is not None:
        q = np.asarray(t["mode"], dtype=np.float64)
        mode = so3.quat_to_matrix(q / np.linalg.norm(q))
    return targets.make_target(t["kind"], t["kappa"], mode=mode,
                               grid=_grid(cfg["grids"]["target"]))


def build_model(cfg):
    m = cfg["model"]
    cond = m["conditional"]
    cond_dim = int(cond) if cond else 0
    return FlowModel(n_blocks=m["blocks"], n_components=m["components"],
                     cond_dim=cond_dim, composition=m["composition"],
                     affine_parameterization=m["affine_parameterization"],
                     init=m["init"], seed=cfg["seed"], hidden=m["widths"])


# ---------------------------------------------------------------------------
# output plumbing

def _resolve_out(args, cfg):
    out = args.out or os.environ.get("SO3FLOW_OUT") or cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "version.txt"), "w") as fh:
        fh.write(f"so3flow {__version__}\n")
    return out


def _load_model(args, cfg):
    model = build_model(cfg)
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    try:
        training.load_checkpoint(args.checkpoint, model)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint: {e}") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return model


def _emit_reports(out, records):
    path = os.path.join(out, "reports.json")
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    for rec in records:
        print(json.dumps(rec))


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _resolve_out(args, cfg)
    target = build_target(cfg)
    model = build_model(cfg)
    training.train(model, target, _train_config(cfg), out_dir=out,
                   resume_from=args.checkpoint)
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _resolve_out(args, cfg)
    model = _load_model(args, cfg)
    target = build_target(cfg)
    tcfg = _train_config(cfg)
    _, val = training.make_dataset(target, tcfg.dataset_size, tcfg.seed,
                                   tcfg.val_fraction)
    rng = np.random.default_rng(cfg["seed"])
    n = args.n or DEFAULT_EVAL_SAMPLES
    samples, _ = model.sample(n, rng)
    audit_grid = _grid(cfg["grids"]["audit"])
    h_mc, h_se = metrics.mc_entropy(model, n, rng)
    records = [
        metric_record("avg_log_likelihood",
                      metrics.avg_log_likelihood(model, val), cfg),
        metric_record("target_entropy", targets.target_entropy(target), cfg),
        metric_record("spread_deg",
                      metrics.spread(samples, symmetry_set_for_target(target)),
                      cfg),
        metric_record("mc_entropy", h_mc, cfg, stderr=h_se),
        metric_record("quadrature_entropy",
                      metrics.quadrature_entropy(model, audit_grid), cfg),
        metric_record("normalization",
                      metrics.normalization_audit(model, audit_grid), cfg),
    ]
    _emit_reports(out, records)
    return 0


def cmd_sample(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not args.n or args.n < 1:
        raise ConfigError("sample needs --n >= 1")
    out = _resolve_out(args, cfg)
    model = _load_model(args, cfg)
    rots, lp = model.sample(args.n, np.random.default_rng(cfg["seed"]))
    quats = so3.matrix_to_quat(rots)   # canonical sign by construction
    with open(os.path.join(out, "samples.jsonl"), "w") as fh:
        for q, l in zip(quats, lp):
            fh.write(json.dumps({"quat": q.tolist(), "log_prob": float(l)}))
            fh.write("\n")
    return 0


def cmd_entropy(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not args.n or args.n < 2:
        raise ConfigError("entropy needs --n >= 2")
    out = _resolve_out(args, cfg)
    model = _load_model(args, cfg)
    h, se = metrics.mc_entropy(model, args.n, np.random.default_rng(cfg["seed"]))
    _emit_reports(out, [metric_record("mc_entropy", h, cfg, stderr=se)])
    return 0


def cmd_export_viz(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _resolve_out(args, cfg)
    model = _load_model(args, cfg) if args.checkpoint else None
    path = os.path.join(out, "viz.jsonl")
    if args.n:
        # sample mode: n draws, uniform weight 1/n
        rng = np.random.default_rng(cfg["seed"])
        if model is not None:
            rots, _ = model.sample(args.n, rng)
        else:
            rots = targets.target_sample(build_target(cfg), args.n, rng)
        count = hopfviz.write_viz_jsonl(path, rots, 1.0 / args.n)
    else:
        # grid mode: weight is the density at each grid rotation
        grid = _grid(cfg["grids"]["viz"])
        rots = grid.rotations()
        if model is not None:
            dens = np.exp(model.log_prob(rots))
        else:
            dens = np.exp(targets.target_log_prob(build_target(cfg), rots))
        count = hopfviz.write_viz_jsonl(path, rots, dens)
    print(f"wrote {count} records to {path}")
    return 0


# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="so3flow",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"so3flow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    handlers = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
                "entropy": cmd_entropy, "export-viz": cmd_export_viz}
    for name, fn in handlers.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--n", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(handler=fn)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
