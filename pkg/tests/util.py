"""Shared test helpers: finite differences and comparison utilities."""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def trapezoid(y, x):
    dx = np.diff(x)
    return float(np.sum((y[1:] + y[:-1]) * 0.5 * dx))


def matrix_fisher_exact_log_z(kappa):
    """log of E_Haar[exp(kappa * tr R)], via the exact 1-D angle integral.

    Under Haar measure the rotation angle t has density (1 - cos t)/pi
    on [0, pi] and tr R = 1 + 2 cos t, so
    Z = (1/pi) int exp(kappa (1 + 2 cos t)) (1 - cos t) dt.
    Evaluated in shifted form for numerical range.
    """
    t = np.linspace(0.0, np.pi, 400_001)
    f = np.exp(kappa * (2.0 * np.cos(t) - 2.0)) * (1.0 - np.cos(t)) / np.pi
    return 3.0 * kappa + np.log(trapezoid(f, t))


def so3_tangent_logdet_fd(f, rot, h=1e-5):
    """FD log|det| of the tangent map of f: SO(3) -> SO(3) at rot.

    Central differences in exponential charts at the input and output;
    chart distortion is O(h^2) and cancels to leading order.
    """
    from so3flow import so3

    base_out = f(rot)
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        rp = f(rot @ so3.rotation_from_tangent(e))
        rm = f(rot @ so3.rotation_from_tangent(-e))
        d = (so3.tangent_from_rotation(base_out.T @ rp)
             - so3.tangent_from_rotation(base_out.T @ rm)) / (2.0 * h)
        cols.append(d)
    return float(np.log(np.abs(np.linalg.det(np.stack(cols, axis=-1)))))


def _s3_tangent_basis(q):
    """Rows: 3 orthonormal tangent vectors at unit q in R^4."""
    idx = np.argsort(np.abs(q))[:3]
    basis = []
    for i in idx:
        v = np.zeros(4)
        v[i] = 1.0
        v = v - np.dot(v, q) * q
        for b in basis:
            v = v - np.dot(v, b) * b
        basis.append(v / np.linalg.norm(v))
    return np.stack(basis)


def s3_tangent_logdet_fd(g, q, h=1e-5):
    """FD log|det| of the tangent map of g: S^3 -> S^3 at unit q."""
    q = np.asarray(q, dtype=np.float64)
    basis_in = _s3_tangent_basis(q)
    q_out = g(q)
    basis_out = _s3_tangent_basis(q_out)
    cols = []
    for t in basis_in:
        qp = np.cos(h) * q + np.sin(h) * t
        qm = np.cos(h) * q - np.sin(h) * t
        cols.append(basis_out @ (g(qp) - g(qm)) / (2.0 * h))
    return float(np.log(np.abs(np.linalg.det(np.stack(cols, axis=-1)))))


def cone_exact_log_z(kappa):
    """log of E_Haar[exp(kappa * a . (R e1))] for any unit axis a.

    tr((kappa a e1^T)^T R) = kappa a . c1 with c1 uniform on S^2, so
    Z = int_{-1}^{1} e^{kappa u} du / 2 = sinh(kappa)/kappa.
    """
    return kappa + np.log((1.0 - np.exp(-2.0 * kappa)) / (2.0 * kappa))
