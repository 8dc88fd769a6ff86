"""Maximum-likelihood training: Adam, schedule, checkpoints, metrics.

The logged NLL at each step is computed on the untaped path before the
update, so a freshly initialized identity flow logs exactly 0.0 at step
0.  Checkpoints are single npz files written atomically; reloading one
and continuing reproduces the uninterrupted run bitwise.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .model import FlowModel
from .targets import TargetSpec, target_sample

CHECKPOINT_FORMAT_VERSION = 1
_DATASET_STREAM = 7          # seed-sequence tag for dataset draws


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient stopped the run."""


class NonFiniteGradientError(TrainingAborted):
    """Gradient blew up; message names the offending parameter."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    steps: int = 20_000
    milestones: tuple = ()
    decay_factor: float = 0.1
    seed: int = 0
    clip_norm: float = 10.0
    checkpoint_interval: int = 1000
    dataset_size: int = 400_000
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 0:
            raise ValueError("step count must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val fraction must be in [0, 1)")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint interval must be >= 1")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))

    def lr_at(self, step):
        drops = sum(1 for m in self.milestones if m <= step)
        return self.lr * self.decay_factor ** drops


def make_dataset(target, n, seed, val_fraction=0.1):
    """Draw n samples and split off the held-out tail: (train, val)."""
    rng = np.random.default_rng([seed, _DATASET_STREAM])
    rots = target_sample(target, n, rng)
    n_val = int(round(n * val_fraction))
    return rots[:n - n_val], rots[n - n_val:]


def nll_loss(model, rots, cond=None, tape=None):
    """-mean(log_prob) over the batch; Var when taped, float otherwise."""
    if ad._val(rots).shape[0] == 0:
        raise ValueError("batch must be nonempty")
    lp = model.log_prob(rots, tape=tape, cond=cond)
    return ad.sub(0.0, ad.mean(lp))


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def clip_global_norm(params, grads, max_norm):
    """Scale all gradients in place if their global L2 norm exceeds
    max_norm; below the threshold they are left untouched.  Returns the
    pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(grads[p] ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            grads[p] = grads[p] * scale
    return total


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction."""
    for p in params:
        if not np.all(np.isfinite(grads[p])):
            raise NonFiniteGradientError(f"non-finite gradient in {p.name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, p in enumerate(params):
        g = grads[p]
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, state, step, rng):
    """Atomic npz snapshot of parameters, moments, step, and rng state."""
    params = model.parameters()
    payload = {
        "format_version": np.int64(CHECKPOINT_FORMAT_VERSION),
        "arch": json.dumps(model.hyperparams),
        "step": np.int64(step),
        "adam_t": np.int64(state.t),
        "rng_state": json.dumps(rng.bit_generator.state),
    }
    for i, p in enumerate(params):
        payload[f"param:{p.name}"] = p.data
        payload[f"adam_m:{p.name}"] = state.m[i]
        payload[f"adam_v:{p.name}"] = state.v[i]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path, model, state=None):
    """Restore parameters (and optionally moments) from an npz snapshot.

    Returns (step, rng) with the rng rebuilt from the stored state.
    The stored architecture must match the model's.
    """
    with np.load(path, allow_pickle=False) as zf:
        version = int(zf["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {version}")
        arch = json.loads(str(zf["arch"]))
        stored = {k: v for k, v in arch.items() if k != "seed"}
        current = {k: v for k, v in model.hyperparams.items() if k != "seed"}
        if json.loads(json.dumps(stored)) != json.loads(json.dumps(current)):
            raise ValueError(
                f"checkpoint architecture {stored} != model {current}")
        params = model.parameters()
        for i, p in enumerate(params):
            p.data = zf[f"param:{p.name}"].copy()
            if state is not None:
                state.m[i] = zf[f"adam_m:{p.name}"].copy()
                state.v[i] = zf[f"adam_v:{p.name}"].copy()
        if state is not None:
            state.t = int(zf["adam_t"])
        step = int(zf["step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(zf["rng_state"]))
    return step, rng


# ---------------------------------------------------------------------------
# the loop

def _write_metrics(path, rows):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("step,nll,lr,wall_time_ms\n")
        for step, nll, lr, ms in rows:
            fh.write(f"{step},{nll!r},{lr!r},{ms!r}\n")
    os.replace(tmp, path)


def train(model, data, cfg, out_dir=None, cond=None, resume_from=None):
    """Minimize NLL over the dataset; returns (model, metrics rows).

    data may be an (N,3,3) rotation array or a TargetSpec, in which case
    a dataset of cfg.dataset_size is drawn and the held-out fraction set
    aside (regenerable via make_dataset with the same seed).  Metrics
    rows are (step, nll, lr, wall_time_ms); with out_dir set they are
    also streamed to metrics.csv beside periodic checkpoints.
    """
    if isinstance(data, TargetSpec):
        data, _ = make_dataset(data, cfg.dataset_size, cfg.seed,
                               cfg.val_fraction)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ValueError("training data must be a nonempty rotation batch")

    params = model.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume_from is not None:
        start, rng = load_checkpoint(resume_from, model, state)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def checkpoint(name, step):
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, name), model, state,
                            step, rng)
            _write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)

    metrics = []
    for step in range(start, cfg.steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, data.shape[0], cfg.batch_size)
        batch = data[idx]
        batch_cond = None if cond is None else cond[idx]

        logged = float(nll_loss(model, batch, cond=batch_cond))
        tape = Tape()
        loss = nll_loss(model, batch, cond=batch_cond, tape=tape)
        lr = cfg.lr_at(step)
        try:
            if not np.isfinite(loss.value):
                raise TrainingAborted(f"non-finite loss at step {step}")
            grads = backward(loss)
            clip_global_norm(params, grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
        except TrainingAborted:
            checkpoint("crash.npz", step)
            raise
        ms = (time.perf_counter() - t0) * 1000.0
        metrics.append((step, logged, lr, ms))
        if (step + 1) % cfg.checkpoint_interval == 0:
            checkpoint("checkpoint.npz", step + 1)

    checkpoint("checkpoint.npz", cfg.steps)
    return model, metrics
