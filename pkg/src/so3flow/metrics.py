"""Evaluation metrics: likelihood, spread, entropy, normalization.

All log densities are nats relative to normalized Haar (uniform = 0).
Spread follows the minimum-angle convention: for each sample, the
geodesic distance to its nearest equivalent ground-truth rotation,
averaged and reported in degrees.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import so3
from .targets import TargetSpec

NORMALIZATION_BAND = (0.95, 1.05)
MIN_AUDIT_GRID = 100_000
FIBER_STEP_DEG = 1.0         # fiber discretization; biases spread <= 0.5 deg


class SymmetrySet:
    """Finite set of equivalent ground-truth rotations.

    Continuous fibers (a free rotation about a body axis) enter through
    the fiber() constructor, discretized at one degree.
    """

    def __init__(self, rotations):
        rotations = np.asarray(rotations, dtype=np.float64)
        if rotations.ndim == 2:
            rotations = rotations[None]
        if rotations.shape[0] == 0:
            raise ValueError("symmetry set must be nonempty")
        so3.validate_rotation(rotations)
        self.rotations = rotations

    @classmethod
    def fiber(cls, base, body_axis, step_deg=FIBER_STEP_DEG):
        """All rotations sharing base's image of body_axis: base followed
        by every spin about the axis, discretized at step_deg."""
        angles = np.deg2rad(np.arange(0.0, 360.0, step_deg))
        spins = so3.rotation_about_axis(np.asarray(body_axis, float), angles)
        return cls(np.asarray(base, float) @ spins)

    def __len__(self):
        return self.rotations.shape[0]

    def is_closed_under(self, group, tol=1e-6):
        """True if right-composition by every group element permutes the
        set within tol (finite-set closure check)."""
        for g in group:
            moved = self.rotations @ g
            d = _pairwise_geodesic(moved, self.rotations)
            if np.max(d.min(axis=1)) > tol:
                return False
        return True


def symmetry_set_for_target(t: TargetSpec):
    """Ground-truth equivalence set implied by a target's kind."""
    e1 = np.array([1.0, 0.0, 0.0])
    if t.kind == "peak":
        return SymmetrySet(t.mode)
    if t.kind == "cube24":
        group = so3.chiral_octahedral_group()
        return SymmetrySet(np.stack([t.mode @ g for g in group]))
    if t.kind == "cone-cyclic":
        return SymmetrySet.fiber(t.mode, e1)
    fibers = [SymmetrySet.fiber(_frame_with_c1(t.mode, k), e1).rotations
              for k in range(3)]
    return SymmetrySet(np.concatenate(fibers, axis=0))


def _frame_with_c1(mode, k):
    """A rotation whose first column is the k-th column of mode."""
    cols = [mode[:, k], mode[:, (k + 1) % 3], mode[:, (k + 2) % 3]]
    return np.stack(cols, axis=-1)


def _pairwise_geodesic(a, b):
    """(N,3,3) x (M,3,3) -> (N,M) geodesic angles via the trace form."""
    tr = np.einsum("nij,mij->nm", a, b)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


# ---------------------------------------------------------------------------
# metrics

def avg_log_likelihood(model, rots, cond=None):
    """Mean model log density over a held-out set, in nats."""
    rots = np.asarray(rots, dtype=np.float64)
    if rots.shape[0] == 0:
        raise ValueError("test set must be nonempty")
    return float(np.mean(model.log_prob(rots, cond=cond)))


def spread(samples, gt: SymmetrySet, chunk=4096):
    """Mean minimum geodesic angle from each sample to the ground-truth
    set, in degrees."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    total = 0.0
    for start in range(0, samples.shape[0], chunk):
        d = _pairwise_geodesic(samples[start:start + chunk], gt.rotations)
        total += float(d.min(axis=1).sum())
    return np.degrees(total / samples.shape[0])


def mc_entropy(model, n, rng, cond=None):
    """Monte-Carlo entropy -mean(log_prob) over n flow samples.

    Returns (entropy, standard error).  The uniform model gives exactly
    (0, 0): every sampled log density is identically zero.
    """
    if n < 2:
        raise ValueError("entropy estimate needs n >= 2")
    _, lp = model.sample(n, rng, cond=cond)
    return -float(np.mean(lp)), float(np.std(lp, ddof=1) / np.sqrt(n))


def quadrature_entropy(model, grid, cond=None):
    """Grid-quadrature entropy -E[log p] of the learned density.

    The density is renormalized within the grid so the estimate is the
    entropy of what the grid actually sees, insulating the comparison
    with mc_entropy from any small normalization defect.
    """
    if grid.n < MIN_AUDIT_GRID:
        raise ValueError(f"quadrature grid needs >= {MIN_AUDIT_GRID} points")
    num = den = 0.0
    for _, rots in grid.rotation_chunks():
        if cond is None:
            lp = model.log_prob(rots)
        else:
            lp = model.log_prob(rots, cond=np.tile(cond, (rots.shape[0], 1)))
        p = np.exp(lp)
        num -= float(np.sum(p * lp))
        den += float(np.sum(p))
    return num / den


def normalization_audit(model, grid, cond=None):
    """Grid average of exp(log_prob); 1.0 means exactly normalized."""
    if grid.n < MIN_AUDIT_GRID:
        raise ValueError(f"audit grid needs >= {MIN_AUDIT_GRID} points")
    if cond is None:
        return grid.average(lambda rots: np.exp(model.log_prob(rots)))
    def f(rots):
        tiled = np.tile(cond, (rots.shape[0], 1))
        return np.exp(model.log_prob(rots, cond=tiled))
    return grid.average(f)


# ---------------------------------------------------------------------------
# reporting

def config_hash(config):
    """Stable short hash of a JSON-serializable config mapping."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def metric_record(name, value, config, stderr=None):
    """One JSON-ready report row."""
    rec = {"metric": name, "value": float(value),
           "config_hash": config_hash(config)}
    if stderr is not None:
        rec["stderr"] = float(stderr)
    return rec
