"""Rotation primitives: quaternions, matrices, Haar sampling, SO(3) grids.

Conventions
-----------
* Quaternions are scalar-first (w, x, y, z) unit 4-vectors.
* q and -q encode the same rotation.  Canonical sign: the first
  coordinate with magnitude > 1e-12 is positive.
* Rotation matrices are 3x3 with columns c1, c2, c3 = m[:, 0..2],
  orthonormal, det +1, c3 = c1 x c2.
* Batched inputs carry a leading batch axis: (n, 4) or (n, 3, 3).

Conversions are written with autodiff primitives, so they accept either
plain arrays or taped Vars; with array inputs they are ordinary numpy.
"""

from __future__ import annotations

from itertools import permutations, product

import numpy as np

from . import autodiff as ad
from .autodiff import Var

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

QUAT_NORM_TOL = 1e-6
ORTHONORMAL_TOL = 1e-6
SIGN_EPS = 1e-12


class NotARotationError(ValueError):
    """Input failed rotation-matrix validation."""


class NotAUnitQuaternionError(ValueError):
    """Input quaternion norm is too far from 1."""


# ---------------------------------------------------------------------------
# validation and canonical form

def validate_rotation(m, tol=ORTHONORMAL_TOL):
    """Raise NotARotationError unless m is orthonormal with det +1."""
    mv = np.asarray(ad._val(m), dtype=np.float64)
    if mv.shape[-2:] != (3, 3):
        raise NotARotationError(f"expected (..., 3, 3), got {mv.shape}")
    gram = np.einsum("...ji,...jk->...ik", mv, mv)
    dev = np.max(np.abs(gram - np.eye(3)))
    if dev > tol:
        raise NotARotationError(f"columns not orthonormal: |R^T R - I| = {dev:.3e}")
    d = np.linalg.det(mv)
    if np.min(d) < 0.0:
        raise NotARotationError("determinant is negative (improper rotation)")


def is_rotation(m, tol=ORTHONORMAL_TOL):
    try:
        validate_rotation(m, tol)
        return True
    except NotARotationError:
        return False


def canonical_signs(quats):
    """Sign factors (..., 1) that make the first non-negligible coord positive."""
    qv = np.asarray(ad._val(quats), dtype=np.float64)
    lead = np.argmax(np.abs(qv) > SIGN_EPS, axis=-1)
    picked = np.take_along_axis(qv, lead[..., None], axis=-1)
    return np.where(picked >= 0.0, 1.0, -1.0)


def canonicalize_quat(quats):
    """Flip signs so each quaternion is in canonical form."""
    return ad.mul(quats, canonical_signs(quats))


# ---------------------------------------------------------------------------
# conversions

def quat_to_matrix(q):
    """Unit quaternion(s) (..., 4) -> rotation matrix(es) (..., 3, 3).

    Inputs within 1e-6 of unit norm are renormalized; anything further
    off is rejected.  Exactly even under q -> -q (every matrix entry is
    a product of two quaternion coordinates).
    """
    qv = np.asarray(ad._val(q), dtype=np.float64)
    single = qv.ndim == 1
    if single:
        q = ad.reshape(q, (1, 4)) if isinstance(q, Var) else qv[None, :]
        qv = ad._val(q)
    norms = np.sqrt(np.sum(qv * qv, axis=-1))
    if np.max(np.abs(norms - 1.0)) > QUAT_NORM_TOL:
        raise NotAUnitQuaternionError(
            f"quaternion norm off by {np.max(np.abs(norms - 1.0)):.3e}")
    qn = ad.normalize(q)

    w = ad.take(qn, (Ellipsis, 0))
    x = ad.take(qn, (Ellipsis, 1))
    y = ad.take(qn, (Ellipsis, 2))
    z = ad.take(qn, (Ellipsis, 3))

    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)

    one = 1.0
    entries = [
        ad.sub(one, ad.mul(2.0, ad.add(yy, zz))),
        ad.mul(2.0, ad.sub(xy, wz)),
        ad.mul(2.0, ad.add(xz, wy)),
        ad.mul(2.0, ad.add(xy, wz)),
        ad.sub(one, ad.mul(2.0, ad.add(xx, zz))),
        ad.mul(2.0, ad.sub(yz, wx)),
        ad.mul(2.0, ad.sub(xz, wy)),
        ad.mul(2.0, ad.add(yz, wx)),
        ad.sub(one, ad.mul(2.0, ad.add(xx, yy))),
    ]
    flat = ad.stack(entries, axis=-1)
    m = ad.reshape(flat, flat.shape[:-1] + (3, 3)) if isinstance(flat, Var) \
        else flat.reshape(flat.shape[:-1] + (3, 3))
    if single:
        m = ad.take(m, 0) if isinstance(m, Var) else m[0]
    return m


# entry index pairs used by each extraction branch of matrix_to_quat:
# branch 0 pivots on w, 1 on x, 2 on y, 3 on z.
def _m2q_branch(entries, t, b):
    s = ad.sqrt(t)
    half = ad.mul(0.5, s)
    inv2s = ad.div(0.5, s)
    m01, m02, m10, m12, m20, m21 = entries
    if b == 0:
        return [half,
                ad.mul(ad.sub(m21, m12), inv2s),
                ad.mul(ad.sub(m02, m20), inv2s),
                ad.mul(ad.sub(m10, m01), inv2s)]
    if b == 1:
        return [ad.mul(ad.sub(m21, m12), inv2s),
                half,
                ad.mul(ad.add(m01, m10), inv2s),
                ad.mul(ad.add(m02, m20), inv2s)]
    if b == 2:
        return [ad.mul(ad.sub(m02, m20), inv2s),
                ad.mul(ad.add(m01, m10), inv2s),
                half,
                ad.mul(ad.add(m12, m21), inv2s)]
    return [ad.mul(ad.sub(m10, m01), inv2s),
            ad.mul(ad.add(m02, m20), inv2s),
            ad.mul(ad.add(m12, m21), inv2s),
            half]


def matrix_to_quat(m):
    """Rotation matrix(es) -> canonical-sign unit quaternion(s).

    Uses the largest of the four pivots 1+tr, 1+2*m_ii-tr per sample, so
    the square root argument is always >= 1 and no branch degenerates.
    Branch choice and sign are locally constant and are not
    differentiated through.
    """
    mv = np.asarray(ad._val(m), dtype=np.float64)
    single = mv.ndim == 2
    if single:
        m = ad.reshape(m, (1, 3, 3)) if isinstance(m, Var) else mv[None]
        mv = ad._val(m)
    validate_rotation(mv)

    def entry(i, j):
        return ad.take(m, (Ellipsis, i, j))

    m00, m01, m02 = entry(0, 0), entry(0, 1), entry(0, 2)
    m10, m11, m12 = entry(1, 0), entry(1, 1), entry(1, 2)
    m20, m21, m22 = entry(2, 0), entry(2, 1), entry(2, 2)
    tr = ad.add(ad.add(m00, m11), m22)
    pivots = [
        ad.add(1.0, tr),
        ad.sub(ad.add(1.0, ad.mul(2.0, m00)), tr),
        ad.sub(ad.add(1.0, ad.mul(2.0, m11)), tr),
        ad.sub(ad.add(1.0, ad.mul(2.0, m22)), tr),
    ]
    pivot_vals = np.stack([ad._val(t) for t in pivots], axis=-1)
    branch = np.argmax(pivot_vals, axis=-1)

    n = mv.shape[0]
    entries = (m01, m02, m10, m12, m20, m21)
    q = None
    for b in range(4):
        idx = np.nonzero(branch == b)[0]
        if idx.size == 0:
            continue
        sub_entries = [ad.gather(e, idx) for e in entries]
        sub_t = ad.gather(pivots[b], idx)
        comps = _m2q_branch(sub_entries, sub_t, b)
        part = ad.scatter(ad.stack(comps, axis=-1), idx, n)
        q = part if q is None else ad.add(q, part)

    q = canonicalize_quat(q)
    if single:
        q = ad.take(q, 0) if isinstance(q, Var) else q[0]
    return q


# ---------------------------------------------------------------------------
# metrics self and Haar sampling

def geodesic_distance(r1, r2):
    """Rotation angle (radians) of r1^T r2, batched over leading axes."""
    t = np.einsum("...ij,...ij->...", np.asarray(r1, float), np.asarray(r2, float))
    return np.arccos(np.clip((t - 1.0) * 0.5, -1.0, 1.0))


def quat_geodesic_distance(q1, q2):
    """Geodesic angle between rotations given as quaternions."""
    d = np.abs(np.sum(np.asarray(q1, float) * np.asarray(q2, float), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def random_quaternions(rng, n):
    """n Haar-uniform rotations as canonical-sign quaternions."""
    v = rng.standard_normal((n, 4))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * canonical_signs(v)


def sample_uniform(rng, n=1):
    """n Haar-uniform rotation matrices, (n, 3, 3)."""
    return quat_to_matrix(random_quaternions(rng, n))


# ---------------------------------------------------------------------------
# tangent space <-> rotations

def skew(v):
    """(..., 3) -> (..., 3, 3) antisymmetric matrix with skew(v) u = v x u."""
    v = np.asarray(v, float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_from_tangent(v):
    """Exponential map: axis-angle vector(s) (..., 3) -> rotation(s).

    Rodrigues formula with series fallbacks below theta = 1e-4 so the
    map is smooth through zero.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    t2 = theta * theta
    small = theta < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0,
                     (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    k = skew(v)
    k2 = k @ k
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2


def tangent_from_rotation(m):
    """Log map: rotation(s) -> axis-angle vector(s) with |v| <= pi."""
    q = np.asarray(matrix_to_quat(m), dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    # shortest representative: scalar part >= 0
    q = q * np.where(q[..., :1] >= 0.0, 1.0, -1.0)
    w = q[..., 0]
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-9
    factor = np.where(small, 2.0 / np.where(w == 0, 1.0, w),
                      angle / np.where(small, 1.0, s))
    out = factor[..., None] * vec
    return out[0] if single else out


def rotation_about_axis(axis, angles):
    """Rotations by `angles` (radians) about a fixed unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    return rotation_from_tangent(angles[:, None] * axis)


# ---------------------------------------------------------------------------
# finite subgroups

def chiral_octahedral_group():
    """The 24 rotation matrices of the cube/octahedron, fixed order."""
    mats = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for i in range(3):
                m[i, perm[i]] = signs[i]
            if np.linalg.det(m) > 0.5:
                mats.append(m)
    out = np.array(mats)
    assert out.shape == (24, 3, 3)
    return out


# ---------------------------------------------------------------------------
# equal-weight SO(3) quadrature grid

def balanced_grid_shape(n):
    """Lattice shape (n_base, n_fiber) with n_base * n_fiber >= n.

    The fiber count scales like sqrt(pi * n_base) so circle spacing
    matches the base sphere's point spacing.
    """
    if n < 1:
        raise ValueError("grid size must be >= 1")
    n_base = max(1, int(np.ceil((n / np.sqrt(np.pi)) ** (2.0 / 3.0))))
    n_fiber = max(1, int(np.ceil(np.sqrt(np.pi * n_base))))
    while n_base * n_fiber < n:
        n_base += 1
    return n_base, n_fiber


def hopf_to_quat(theta, phi, psi):
    """Hopf coordinates -> unit quaternion (w, x, y, z).

    theta, phi: colatitude / longitude of the base-sphere point;
    psi in [0, 2pi): position along the circle fiber.
    """
    ct, st = np.cos(theta / 2.0), np.sin(theta / 2.0)
    return np.stack([
        ct * np.cos(psi / 2.0),
        ct * np.sin(psi / 2.0),
        st * np.cos(phi + psi / 2.0),
        st * np.sin(phi + psi / 2.0),
    ], axis=-1)


def fibonacci_hopf_points(n_base, n_fiber, flat_idx):
    """Quaternions of lattice points by flat index (base-major order).

    Base points follow a spherical Fibonacci spiral (midpoint z rule,
    golden-angle longitudes); each base point carries n_fiber equally
    spaced, half-offset fiber angles.  Points are computable from the
    index alone, so arbitrarily fine grids never need materializing.
    """
    flat_idx = np.asarray(flat_idx)
    i = flat_idx // n_fiber
    j = flat_idx - i * n_fiber
    z = 1.0 - (2.0 * i + 1.0) / n_base
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.mod(i * GOLDEN_ANGLE, 2.0 * np.pi)
    psi = 2.0 * np.pi * (j + 0.5) / n_fiber
    q = hopf_to_quat(theta, phi, psi)
    return q * canonical_signs(q)


class SO3Grid:
    """Equal-weight quadrature grid on SO(3).

    points are stored as canonical quaternions; every point weighs
    exactly 1/n.  Rotation matrices are materialized in chunks on
    demand to keep memory flat.
    """

    def __init__(self, quats):
        self.quats = np.asarray(quats, dtype=np.float64)
        self.n = self.quats.shape[0]
        self.weight = 1.0 / self.n

    def rotations(self):
        return quat_to_matrix(self.quats)

    def rotation_chunks(self, chunk=100_000):
        for start in range(0, self.n, chunk):
            yield start, quat_to_matrix(self.quats[start:start + chunk])

    def average(self, fn, chunk=100_000):
        """Mean of fn(rotations) over the grid; fn maps (m,3,3) -> (m,)."""
        total = 0.0
        for _, rots in self.rotation_chunks(chunk):
            total += float(np.sum(fn(rots)))
        return total / self.n


def fibonacci_hopf_grid(n):
    """SO3Grid of at least n points on the Fibonacci-Hopf lattice."""
    n_base, n_fiber = balanced_grid_shape(n)
    total = n_base * n_fiber
    return SO3Grid(fibonacci_hopf_points(n_base, n_fiber, np.arange(total)))
