"""Invertible flow layers on SO(3).

Two layer families compose into one block:

* MobiusCouplingLayer -- acts on a rotation matrix by holding column c1
  fixed and rotating (c2, c3) about it.  The rotation angle comes from a
  convex combination of K sphere Mobius transformations of c2, each with
  a center perpendicular to c1, so the map stays a strictly monotone
  circle diffeomorphism with a closed-form log-determinant.
* QuaternionAffineLayer -- q -> W q / |W q| on the unit quaternion
  sphere, with log|det J| = log|det W| - 4 log|W q|.

forward() works on Vars (training) or arrays; inverse() is array-only
and is never differentiated through.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from . import so3
from .autodiff import DegenerateInputError, Parameter
from .mlp import DEFAULT_HIDDEN, Mlp

MOBIUS_RADIUS = 0.7          # strict bound on |omega|, below sqrt(2)/2
SPAN_TOL = 1e-8              # membership slack for signed_fiber_angle
CENTER_GAP = 1e-10           # minimum |c - omega| in mobius_point
DET_FLOOR = 1e-8             # |det W| below this is near-singular
DEFAULT_BISECT_TOL = 1e-7


class NearSingularError(ValueError):
    """Affine matrix determinant too close to zero."""


class NonBracketingError(RuntimeError):
    """Bisection bracket failed to straddle the target (should not happen)."""


# ---------------------------------------------------------------------------
# sphere Mobius transformation

def mobius_point(c, omega):
    """Mobius transformation of unit vector(s) c with center(s) omega.

        f(c) = (1 - |omega|^2) / |c - omega|^2 * (c - omega) - omega

    Maps the unit sphere to itself for |omega| < 1; fixes +/- omega_hat.
    Broadcasts, e.g. c (B, 1, 3) against omega (B, K, 3).
    """
    cv, ov = ad._val(c), ad._val(omega)
    cn = np.sqrt(np.sum(cv * cv, axis=-1))
    if np.max(np.abs(cn - 1.0)) > 1e-6:
        raise DegenerateInputError("mobius_point: c is not a unit vector")
    on2 = np.sum(ov * ov, axis=-1)
    if np.max(on2) >= 1.0:
        raise DegenerateInputError("mobius_point: |omega| must be < 1")
    gap2 = np.sum((cv - ov) ** 2, axis=-1)
    if np.min(gap2) < CENTER_GAP ** 2:
        raise DegenerateInputError("mobius_point: c coincides with omega")

    u = ad.sub(c, omega)
    uu = ad.dot(u, u, keepdims=True)
    scale = ad.div(ad.sub(1.0, ad.dot(omega, omega, keepdims=True)), uu)
    return ad.sub(ad.mul(scale, u), omega)


def mobius_tangent_action(c, omega, v):
    """J_omega(c) v: the Mobius Jacobian at c applied to a tangent v.

    J = s (I - 2 u u^T / |u|^2) with u = c - omega and
    s = (1 - |omega|^2)/|u|^2, assembled term by term.
    """
    u = ad.sub(c, omega)
    uu = ad.dot(u, u, keepdims=True)
    scale = ad.div(ad.sub(1.0, ad.dot(omega, omega, keepdims=True)), uu)
    reflect = ad.sub(v, ad.mul(2.0, ad.mul(u, ad.div(ad.dot(u, v, keepdims=True), uu))))
    return ad.mul(scale, reflect)


def mobius_inverse_point(cp, omega):
    """Closed-form inverse of mobius_point: f_omega^{-1} = f_{-omega}."""
    return mobius_point(cp, ad.mul(-1.0, omega) if isinstance(omega, ad.Var) else -np.asarray(omega))


def signed_fiber_angle(v, e_a, e_b, span_tol=SPAN_TOL):
    """atan2 angle of v in the oriented plane basis (e_a, e_b).

    v must lie in span{e_a, e_b} up to span_tol, else the angle is
    meaningless and a DegenerateInputError is raised.
    """
    x = ad.dot(v, e_a)
    y = ad.dot(v, e_b)
    vv, eav, ebv = ad._val(v), ad._val(e_a), ad._val(e_b)
    resid = vv - ad._val(x)[..., None] * eav - ad._val(y)[..., None] * ebv
    if np.max(np.sum(resid * resid, axis=-1)) > span_tol ** 2:
        raise DegenerateInputError("signed_fiber_angle: v outside the plane")
    return ad.atan2(y, x)


# ---------------------------------------------------------------------------
# Mobius coupling layer

class MobiusCouplingLayer:
    """Coupling layer: condition on column c1, rotate (c2, c3) about it.

    Two conditioner nets read c1 (plus an optional condition vector):
    omega_net emits K raw centers, projected perpendicular to c1 and
    shrunk into the radius-0.7 ball; weight_net emits K mixture logits.
    The layer rotates by theta' = sum_k alpha_k theta_k, where theta_k
    is the signed angle of the k-th Mobius image of c2.
    """

    def __init__(self, n_components, rng, cond_dim=0, name="mobius",
                 init="identity", hidden=None):
        if n_components < 1:
            raise ValueError("need at least one Mobius component")
        self.k = n_components
        self.cond_dim = cond_dim
        zero_last = init == "identity"
        in_dim = 3 + cond_dim
        hidden = DEFAULT_HIDDEN if hidden is None else tuple(hidden)
        self.omega_net = Mlp(in_dim, 3 * n_components, rng, hidden=hidden,
                             name=f"{name}.omega_net", zero_last=zero_last)
        self.weight_net = Mlp(in_dim, n_components, rng, hidden=hidden,
                              name=f"{name}.weight_net", zero_last=zero_last)
        # Fixed random frame per component.  With a zeroed output layer all
        # K heads would otherwise receive identical gradients forever (Adam
        # normalizes the alpha_k magnitudes away) and the mixture collapses
        # to a single effective component; rotating each head's raw output
        # by its own constant frame makes the gradient directions differ so
        # the components separate.  Output at init stays exactly zero.
        frames = so3.sample_uniform(
            np.random.default_rng(zlib.crc32(name.encode())), n_components)
        self._head_frames = np.zeros((3 * n_components, 3 * n_components))
        for k in range(n_components):
            self._head_frames[3 * k:3 * k + 3, 3 * k:3 * k + 3] = frames[k].T

    def parameters(self):
        return self.omega_net.parameters() + self.weight_net.parameters()

    def _is_identity_config(self):
        # omega-net output layer identically zero forces every omega to 0,
        # which makes the layer the identity map regardless of the weights
        w = self.omega_net.weights[-1].data
        b = self.omega_net.biases[-1].data
        return not (w.any() or b.any())

    def _conditioner(self, c1, cond, tape):
        """Centers (B, K, 3) perpendicular to c1 and weights (B, K)."""
        x = c1 if cond is None else ad.concat([c1, cond], axis=-1)
        b = ad._val(c1).shape[0]
        framed = ad.matmul(self.omega_net(x, tape), self._head_frames)
        raw = ad.reshape(framed, (b, self.k, 3))
        c1e = ad.reshape(c1, (b, 1, 3))
        perp = ad.sub(raw, ad.mul(c1e, ad.dot(c1e, raw, keepdims=True)))
        omega = ad.shrink_to_ball(perp, MOBIUS_RADIUS)
        alpha = ad.softmax(self.weight_net(x, tape))
        return omega, alpha

    def _angle_and_slope(self, c2, c3, omega, alpha):
        """Combined rotation angle (B,) and its derivative (B,) at input.

        The slope is sum_k alpha_k |J_k(c2) c3|: each component map's
        angular velocity at the input point, by the chain rule through
        the Mobius Jacobian.
        """
        b = ad._val(c2).shape[0]
        c2e = ad.reshape(c2, (b, 1, 3))
        c3e = ad.reshape(c3, (b, 1, 3))
        moved = mobius_point(c2e, omega)
        theta_k = signed_fiber_angle(moved, c2e, c3e)
        theta = ad.sum_(ad.mul(alpha, theta_k), axis=-1)
        jc3 = mobius_tangent_action(c2e, omega, c3e)
        slope = ad.sum_(ad.mul(alpha, ad.norm(jc3)), axis=-1)
        return theta, slope

    def forward(self, rot, tape=None, cond=None):
        """Rotation batch (B,3,3) -> (transformed batch, logdet (B,)).

        When every omega is structurally zero the map is the identity;
        the untaped path returns exact values then.  With a tape the
        literal ops always run so gradients exist at the identity point.
        """
        if tape is None and self._is_identity_config():
            return rot, np.zeros(ad._val(rot).shape[0])
        c1 = ad.take(rot, (Ellipsis, slice(None), 0))
        c2 = ad.take(rot, (Ellipsis, slice(None), 1))
        c3 = ad.take(rot, (Ellipsis, slice(None), 2))
        omega, alpha = self._conditioner(c1, cond, tape)
        theta, slope = self._angle_and_slope(c2, c3, omega, alpha)
        logdet = ad.log(slope)

        b = ad._val(c1).shape[0]
        ct = ad.reshape(ad.cos(theta), (b, 1))
        st = ad.reshape(ad.sin(theta), (b, 1))
        c2p = ad.add(ad.mul(ct, c2), ad.mul(st, c3))
        c3p = ad.cross(c1, c2p)
        return ad.stack([c1, c2p, c3p], axis=-1), logdet

    def inverse(self, rot_p, cond=None, tol=DEFAULT_BISECT_TOL):
        """Invert by bisection on the fiber angle; array-only.

        Returns (rot, logdet) with logdet the forward-direction value at
        the reconstructed input.  The residual phi + theta'(phi) is
        strictly increasing, so ceil(log2(pi/tol)) halvings pin the
        answer within tol.
        """
        rot_p = np.asarray(rot_p, dtype=np.float64)
        if self._is_identity_config():
            return rot_p, np.zeros(rot_p.shape[0])
        c1 = rot_p[..., :, 0]
        c2p = rot_p[..., :, 1]
        c3p = rot_p[..., :, 2]
        omega, alpha = self._conditioner(c1, cond, tape=None)

        def candidate(phi):
            cp, sp = np.cos(phi)[:, None], np.sin(phi)[:, None]
            return cp * c2p + sp * c3p, cp * c3p - sp * c2p

        def residual(phi):
            c2, c3 = candidate(phi)
            theta, _ = self._angle_and_slope(c2, c3, omega, alpha)
            return phi + theta

        n = rot_p.shape[0]
        lo = np.full(n, -np.pi / 2.0)
        hi = np.full(n, np.pi / 2.0)
        if np.any(residual(lo) >= 0.0) or np.any(residual(hi) <= 0.0):
            raise NonBracketingError("fiber angle not bracketed by (-pi/2, pi/2)")
        for _ in range(int(np.ceil(np.log2(np.pi / tol)))):
            mid = 0.5 * (lo + hi)
            below = residual(mid) < 0.0
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        phi = 0.5 * (lo + hi)

        c2, c3 = candidate(phi)
        _, slope = self._angle_and_slope(c2, c3, omega, alpha)
        rot = np.stack([c1, c2, c3], axis=-1)
        return rot, np.log(slope)


# ---------------------------------------------------------------------------
# quaternion affine layer

# flattened single-entry bases for building L (strictly lower) and U
# (strictly upper) from 6-vectors
_LOWER_IDX = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]
_UPPER_IDX = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _basis(indices):
    out = np.zeros((len(indices), 16))
    for row, (i, j) in enumerate(indices):
        out[row, 4 * i + j] = 1.0
    return out


_LOWER_BASIS = _basis(_LOWER_IDX)
_UPPER_BASIS = _basis(_UPPER_IDX)


def lu_compose(lower, upper, scale, perm=None):
    """W = P L (U + diag(scale)) for unit-lower L, strictly-upper U.

    scale entries must be nonzero; log|det W| is then sum log|scale|.
    """
    lv, uv, sv = ad._val(lower), ad._val(upper), ad._val(scale)
    if lv.shape != (4, 4) or uv.shape != (4, 4) or np.shape(sv) != (4,):
        raise ValueError("lu_compose expects 4x4 factors and a 4-vector scale")
    if not np.allclose(np.triu(lv), np.eye(4)):
        raise ValueError("lower factor must be unit lower-triangular")
    if not np.allclose(np.tril(uv), 0.0):
        raise ValueError("upper factor must be strictly upper-triangular")
    if np.min(np.abs(sv)) == 0.0:
        raise ValueError("scale entries must be nonzero")
    if perm is None:
        perm = np.eye(4)
    pv = np.asarray(perm, dtype=np.float64)
    if not (np.array_equal(pv @ pv.T, np.eye(4)) and
            np.array_equal(np.sort(np.abs(pv).sum(axis=0)), np.ones(4))):
        raise ValueError("perm must be a permutation matrix")

    s_mat = ad.mul(ad.reshape(scale, (4, 1)) if isinstance(scale, ad.Var)
                   else np.reshape(sv, (4, 1)), np.eye(4))
    w = ad.matmul(lower, ad.add(upper, s_mat))
    if not np.array_equal(pv, np.eye(4)):
        w = ad.matmul(pv, w)
    return w


class QuaternionAffineLayer:
    """q -> W q / |W q| with exact log|det J| = log|det W| - 4 log|W q|.

    W can be a raw 4x4 parameter, an LU factorization with positive
    diagonal scales (log|det W| = sum of the scale logs), or, with
    cond_dim > 0, the output of a conditioner net offset by the
    identity.  Every variant starts exactly at W = I.
    """

    def __init__(self, rng, parameterization="raw", cond_dim=0,
                 name="affine", init="identity", hidden=None):
        if parameterization not in ("raw", "lu"):
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.parameterization = parameterization
        self.cond_dim = cond_dim
        self.name = name
        noise = 0.0 if init == "identity" else 0.1
        if cond_dim > 0:
            hidden = DEFAULT_HIDDEN if hidden is None else tuple(hidden)
            self.net = Mlp(cond_dim, 16, rng, hidden=hidden,
                           name=f"{name}.net",
                           zero_last=init == "identity")
            self.params = []
        elif parameterization == "raw":
            w0 = np.eye(4) + noise * rng.standard_normal((4, 4))
            self.w = Parameter(f"{name}.w", w0)
            self.params = [self.w]
        else:
            self.lower_vec = Parameter(f"{name}.lower",
                                       noise * rng.standard_normal(6))
            self.upper_vec = Parameter(f"{name}.upper",
                                       noise * rng.standard_normal(6))
            self.log_scale = Parameter(f"{name}.log_scale",
                                       noise * rng.standard_normal(4))
            self.perm = np.eye(4)
            self.params = [self.lower_vec, self.upper_vec, self.log_scale]

    def parameters(self):
        if self.cond_dim > 0:
            return self.net.parameters()
        return list(self.params)

    def _is_identity_config(self):
        if self.cond_dim > 0:
            w = self.net.weights[-1].data
            b = self.net.biases[-1].data
            return not (w.any() or b.any())
        if self.parameterization == "raw":
            return np.array_equal(self.w.data, np.eye(4))
        return not (self.lower_vec.data.any() or self.upper_vec.data.any()
                    or self.log_scale.data.any()
                    or not np.array_equal(self.perm, np.eye(4)))

    def _matrix_and_logdet(self, tape, cond):
        """W (4,4) or (B,4,4) plus log|det W| (scalar or (B,))."""
        def p(param):
            return tape.param(param) if tape is not None else param.data

        if self.cond_dim > 0:
            if cond is None:
                raise ValueError(f"{self.name}: conditional layer needs cond")
            b = ad._val(cond).shape[0]
            w = ad.add(ad.reshape(self.net(cond, tape), (b, 4, 4)), np.eye(4))
            det = ad.det(w)
        elif self.parameterization == "raw":
            w = p(self.w)
            det = ad.det(w)
        else:
            lower = ad.add(ad.reshape(
                ad.matmul(ad.reshape(p(self.lower_vec), (1, 6)), _LOWER_BASIS),
                (4, 4)), np.eye(4))
            upper = ad.reshape(
                ad.matmul(ad.reshape(p(self.upper_vec), (1, 6)), _UPPER_BASIS),
                (4, 4))
            scale = ad.exp(p(self.log_scale))
            w = lu_compose(lower, upper, scale, self.perm)
            return w, ad.sum_(p(self.log_scale))

        if np.min(np.abs(ad._val(det))) < DET_FLOOR:
            raise NearSingularError(f"{self.name}: |det W| < {DET_FLOOR}")
        return w, ad.log_abs(det)

    def forward(self, q, tape=None, cond=None):
        """Unit quaternion batch (B,4) -> (transformed batch, logdet (B,)).

        W exactly the identity short-circuits on the untaped path (same
        rationale as the Mobius layer).
        """
        if tape is None and self._is_identity_config():
            return q, np.zeros(ad._val(q).shape[0])
        w, log_det_w = self._matrix_and_logdet(tape, cond)
        wq = ad.matvec(w, q)
        n = ad.norm(wq)
        b = ad._val(q).shape[0]
        qp = ad.div(wq, ad.reshape(n, (b, 1)))
        logdet = ad.sub(log_det_w, ad.mul(4.0, ad.log(n)))
        return qp, logdet

    def inverse(self, qp, cond=None):
        """Array-only inverse; logdet is the forward value at the output."""
        qp = np.asarray(qp, dtype=np.float64)
        if self._is_identity_config():
            return qp, np.zeros(qp.shape[0])
        w, log_det_w = self._matrix_and_logdet(None, cond)
        w_inv = np.linalg.inv(w)
        wq = np.einsum("...ij,...j->...i", w_inv, qp)
        n = np.linalg.norm(wq, axis=-1)
        q = wq / n[:, None]
        # |W q| for the reconstructed q is 1/n, so -4 log|W q| = +4 log n
        logdet = log_det_w + 4.0 * np.log(n)
        return q, logdet
