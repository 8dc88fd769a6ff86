"""The flow: alternating Mobius-coupling and quaternion-affine blocks.

The forward direction maps data rotations toward the uniform base
distribution; log densities follow the change of variables

    log p(x) = log p_base(z) + sum of per-layer logdets,

with log p_base = 0 by the convention that the Haar base density is the
constant 1 (densities are relative to the normalized Haar measure).
Representation conversions matrix <-> quaternion preserve that measure
and contribute nothing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import so3
from .layers import MobiusCouplingLayer, QuaternionAffineLayer

COMPOSITIONS = ("both", "mobius", "affine")


class FlowModel:
    """A chain of n_blocks blocks, each Mobius coupling then affine.

    composition drops one family for ablations.  init "identity" makes
    the whole flow the identity map (log_prob exactly 0 everywhere);
    "random" draws non-degenerate layers.
    """

    def __init__(self, n_blocks=6, n_components=16, cond_dim=0,
                 composition="both", affine_parameterization="raw",
                 init="identity", seed=0, hidden=None):
        if composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}")
        if n_blocks < 1:
            raise ValueError("need at least one block")
        self.hyperparams = dict(
            n_blocks=n_blocks, n_components=n_components, cond_dim=cond_dim,
            composition=composition,
            affine_parameterization=affine_parameterization,
            init=init, seed=seed,
            hidden=None if hidden is None else list(hidden))
        rng = np.random.default_rng(seed)
        self.blocks = []
        for i in range(n_blocks):
            mobius = affine = None
            if composition in ("both", "mobius"):
                mobius = MobiusCouplingLayer(
                    n_components, rng, cond_dim=cond_dim,
                    name=f"block{i:02d}.mobius", init=init, hidden=hidden)
            if composition in ("both", "affine"):
                affine = QuaternionAffineLayer(
                    rng, parameterization=affine_parameterization,
                    cond_dim=cond_dim, name=f"block{i:02d}.affine", init=init,
                    hidden=hidden)
            self.blocks.append((mobius, affine))

    def parameters(self):
        out = []
        for mobius, affine in self.blocks:
            if mobius is not None:
                out.extend(mobius.parameters())
            if affine is not None:
                out.extend(affine.parameters())
        return out

    # ------------------------------------------------------------------
    def _check_cond(self, rot_or_q, cond):
        cond_dim = self.hyperparams["cond_dim"]
        if cond_dim == 0:
            if cond is not None:
                raise ValueError("model is unconditional; cond must be None")
            return None
        cond = np.asarray(cond, dtype=np.float64)
        n = ad._val(rot_or_q).shape[0]
        if cond.shape != (n, cond_dim):
            raise ValueError(f"cond must have shape ({n}, {cond_dim})")
        return cond

    def forward_to_base(self, rot, tape=None, cond=None):
        """Data -> base: returns (z (B,3,3), logdet_sum (B,))."""
        single = np.ndim(ad._val(rot)) == 2
        if single:
            rot = ad.reshape(rot, (1, 3, 3)) if isinstance(rot, ad.Var) \
                else np.asarray(rot, dtype=np.float64)[None]
        so3.validate_rotation(ad._val(rot))
        cond = self._check_cond(rot, cond)

        logdet = np.zeros(ad._val(rot).shape[0])
        for mobius, affine in self.blocks:
            if mobius is not None:
                rot, ld = mobius.forward(rot, tape=tape, cond=cond)
                logdet = ad.add(logdet, ld)
            if affine is not None:
                if tape is None and affine._is_identity_config():
                    continue  # identity affine: skip the exact conversion round trip
                q = so3.matrix_to_quat(rot)
                q, ld = affine.forward(q, tape=tape, cond=cond)
                logdet = ad.add(logdet, ld)
                rot = so3.quat_to_matrix(q)
        if single:
            rot = ad.take(rot, 0) if isinstance(rot, ad.Var) else rot[0]
            logdet = ad.take(logdet, 0) if isinstance(logdet, ad.Var) else logdet[0]
        return rot, logdet

    def log_prob(self, rot, tape=None, cond=None):
        """Exact log density at rot, relative to normalized Haar."""
        _, logdet = self.forward_to_base(rot, tape=tape, cond=cond)
        return logdet

    # ------------------------------------------------------------------
    def inverse_from_base(self, z, cond=None):
        """Base -> data (arrays only): returns (x, log_prob at x)."""
        rot = np.asarray(z, dtype=np.float64)
        single = rot.ndim == 2
        if single:
            rot = rot[None]
        so3.validate_rotation(rot)
        cond = self._check_cond(rot, cond)

        log_prob = np.zeros(rot.shape[0])
        for mobius, affine in reversed(self.blocks):
            if affine is not None and not affine._is_identity_config():
                q = so3.matrix_to_quat(rot)
                q, ld = affine.inverse(q, cond=cond)
                log_prob += ld
                rot = so3.quat_to_matrix(q)
            if mobius is not None:
                rot, ld = mobius.inverse(rot, cond=cond)
                log_prob += ld
        if single:
            return rot[0], log_prob[0]
        return rot, log_prob

    def sample(self, n, rng, cond=None):
        """n exact samples with their log densities: (rots, log_probs)."""
        if n < 1:
            raise ValueError("sample size must be >= 1")
        z = so3.sample_uniform(rng, n)
        return self.inverse_from_base(z, cond=cond)


def best_sample(rotations, log_probs):
    """Highest-density sample; ties resolve to the lowest index."""
    rotations = np.asarray(rotations)
    log_probs = np.asarray(log_probs)
    if rotations.ndim != 3 or len(rotations) != len(log_probs) or len(log_probs) == 0:
        raise ValueError("need matching, non-empty sample and log_prob arrays")
    return rotations[int(np.argmax(log_probs))]
