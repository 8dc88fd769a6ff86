"""Project rotations to (direction, tilt) pairs for 2-sphere plots.

A rotation R is split as R = align(d) . spin_z(tilt) where d = R e_z,
align(d) is the minimal rotation taking e_z to d, and tilt is the
leftover spin about the body z-axis.  Records go to JSONL as
{dir, tilt, weight} for the offline renderer.
"""

from __future__ import annotations

import json

import numpy as np

from . import so3

_EZ = np.array([0.0, 0.0, 1.0])
_ANTIPODAL_EPS = 1e-12


def align_z(dirs):
    """Minimal rotations taking e_z to each unit direction.

    At d = -e_z the axis is ambiguous; the x-axis is used by convention.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    if single:
        dirs = dirs[None]
    axis = np.cross(np.broadcast_to(_EZ, dirs.shape), dirs)
    s = np.linalg.norm(axis, axis=-1)
    c = dirs[..., 2]
    angle = np.arctan2(s, c)
    degenerate = s < _ANTIPODAL_EPS
    axis = np.where(degenerate[..., None],
                    np.array([1.0, 0.0, 0.0]),
                    axis / np.where(degenerate, 1.0, s)[..., None])
    out = so3.rotation_from_tangent(angle[..., None] * axis)
    return out[0] if single else out


def hopf_project(rots):
    """(dirs, tilts) for a batch of rotations: dir = R e_z, tilt = the
    residual angle about the body z-axis, in (-pi, pi]."""
    rots = np.asarray(rots, dtype=np.float64)
    single = rots.ndim == 2
    if single:
        rots = rots[None]
    dirs = rots[:, :, 2]
    res = np.einsum("nji,njk->nik", align_z(dirs), rots)
    tilts = np.arctan2(res[:, 1, 0], res[:, 0, 0])
    if single:
        return dirs[0], float(tilts[0])
    return dirs, tilts


def hopf_reconstruct(dirs, tilts):
    """Inverse of hopf_project."""
    dirs = np.asarray(dirs, dtype=np.float64)
    tilts = np.atleast_1d(np.asarray(tilts, dtype=np.float64))
    spin = so3.rotation_about_axis(_EZ, tilts)
    out = np.atleast_3d(align_z(dirs)).reshape(-1, 3, 3) @ spin
    return out[0] if dirs.ndim == 1 else out


def viz_records(rots, weights):
    """One dict per rotation: {dir, tilt, weight}."""
    rots = np.asarray(rots, dtype=np.float64)
    if rots.ndim == 2:
        rots = rots[None]
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64),
                              (rots.shape[0],))
    dirs, tilts = hopf_project(rots)
    for d, t, w in zip(dirs, tilts, weights):
        yield {"dir": [float(d[0]), float(d[1]), float(d[2])],
               "tilt": float(t), "weight": float(w)}


def write_viz_jsonl(path, rots, weights):
    """Dump rotations as renderer-ready JSONL; returns the record count."""
    n = 0
    with open(path, "w") as fh:
        for rec in viz_records(rots, weights):
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n
