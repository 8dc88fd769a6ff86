"""Synthetic rotation targets for training and evaluation.

Every target is a mixture of matrix-Fisher components, unnormalized
density exp(tr(F^T R)), normalized by quadrature on a Fibonacci-Hopf
grid.  Log densities follow the uniform-density-zero convention used
across the package: F = 0 gives log p = 0 everywhere.

Kinds:

* peak        -- one component, F = kappa * R0 (sharp unimodal)
* cube24      -- 24 equal components F = kappa * R0 G_i over the chiral
                 octahedral group (cube symmetry)
* cone-cyclic -- F = kappa * a e1^T: density depends only on the first
                 column, so mass is uniform along each fiber
* line3       -- equal mixture of three cone-cyclic components whose
                 axes are the columns of R0
"""

from __future__ import annotations

import numpy as np

from . import so3

KINDS = ("peak", "cube24", "cone-cyclic", "line3")

MIN_NORM_GRID = 100_000      # quadrature floor for normalizers / entropy
ENVELOPE_FACTOR = 1.05       # rejection envelope = grid max * this
FALLBACK_ACCEPTANCE = 1e-3   # below this, switch to lattice sampling
FALLBACK_SPACING = 0.25      # lattice spacing / target sigma
FALLBACK_FLOOR = 1_000_000
FALLBACK_CAP = 200_000_000
_LATTICE_CHUNK = 1 << 19
_REF_LATTICE_N = 500_000

_default_grid_cache = None


def _default_grid():
    global _default_grid_cache
    if _default_grid_cache is None:
        _default_grid_cache = so3.fibonacci_hopf_grid(500_000)
    return _default_grid_cache


def _require_grid(grid):
    if grid.n < MIN_NORM_GRID:
        raise ValueError(f"quadrature grid needs >= {MIN_NORM_GRID} points")


class MatrixFisher:
    """exp(tr(F^T R)) with a lazily computed log normalizing constant."""

    def __init__(self, f):
        self.f = np.asarray(f, dtype=np.float64)
        if self.f.shape != (3, 3):
            raise ValueError("parameter matrix must be 3x3")
        self.log_norm = None


def _batched_log_norms(fs, grid):
    """log of the grid average of exp(tr(F_c^T R)), one entry per F_c.

    Single pass with per-chunk max subtraction; chunk partials combine
    under the global max, so the result matches a whole-grid
    logsumexp without materializing it.
    """
    fs = np.asarray(fs, dtype=np.float64)
    best = np.full(len(fs), -np.inf)
    parts = []
    for _, rots in grid.rotation_chunks():
        t = np.einsum("cij,nij->cn", fs, rots)
        m = t.max(axis=1)
        parts.append((m, np.exp(t - m[:, None]).sum(axis=1)))
        best = np.maximum(best, m)
    total = np.zeros(len(fs))
    for m, s in parts:
        total += s * np.exp(m - best)
    return best + np.log(total) - np.log(grid.n)


def compute_log_norm(f, grid):
    """log Z of exp(tr(F^T R)) against normalized Haar, by quadrature."""
    _require_grid(grid)
    return float(_batched_log_norms(np.asarray(f, np.float64)[None], grid)[0])


def fisher_log_prob(mf, rots):
    """Normalized log density of one component at rotation(s)."""
    if mf.log_norm is None:
        raise RuntimeError("log_norm not computed; call compute_log_norm first")
    rots = np.asarray(rots, dtype=np.float64)
    single = rots.ndim == 2
    t = np.einsum("ij,nij->n", mf.f, rots[None] if single else rots)
    out = t - mf.log_norm
    return float(out[0]) if single else out


class TargetSpec:
    """A normalized mixture target plus cached sampler state."""

    def __init__(self, kind, kappa, weights, components, mode):
        self.kind = kind
        self.kappa = float(kappa)
        weights = np.asarray(weights, dtype=np.float64)
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        self.weights = weights / weights.sum()
        self.components = components
        self.mode = np.asarray(mode, dtype=np.float64)
        # stacked parameters and per-component log(w_c) - log Z_c for
        # vectorized mixture evaluation
        self._fs = np.stack([c.f for c in components])
        self._offsets = np.log(self.weights) - np.array(
            [c.log_norm for c in components])
        self.grid_log_max = None
        self._lattice = None


def make_target(kind, kappa, mode=None, grid=None):
    """Build a normalized target of the given kind and concentration."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if not kappa > 0:
        raise ValueError("concentration must be positive")
    mode = np.eye(3) if mode is None else np.asarray(mode, dtype=np.float64)
    so3.validate_rotation(mode)
    grid = _default_grid() if grid is None else grid
    _require_grid(grid)

    e1 = np.array([1.0, 0.0, 0.0])
    if kind == "peak":
        fs = [kappa * mode]
    elif kind == "cube24":
        fs = [kappa * (mode @ g) for g in so3.chiral_octahedral_group()]
    elif kind == "cone-cyclic":
        fs = [kappa * np.outer(mode[:, 0], e1)]
    else:
        fs = [kappa * np.outer(mode[:, k], e1) for k in range(3)]
    fs = np.stack(fs)

    # every kind's components are left-rotations of one matrix, so their
    # normalizers agree exactly by Haar invariance; sharing the averaged
    # estimate keeps the mixture's symmetry instead of breaking it at
    # the per-component quadrature error
    sv = np.linalg.svd(fs, compute_uv=False)
    assert np.max(np.abs(sv - sv[0])) < 1e-9 * max(1.0, kappa)
    shared = float(np.mean(_batched_log_norms(fs, grid)))

    components = []
    for f in fs:
        mf = MatrixFisher(f)
        mf.log_norm = shared
        components.append(mf)
    weights = np.full(len(fs), 1.0 / len(fs))
    spec = TargetSpec(kind, kappa, weights, components, mode)

    peak = -np.inf
    for _, rots in grid.rotation_chunks():
        peak = max(peak, float(np.max(target_log_prob(spec, rots))))
    spec.grid_log_max = peak
    return spec


def target_log_prob(t, rots):
    """Mixture log density at rotation(s): logsumexp over components."""
    rots = np.asarray(rots, dtype=np.float64)
    single = rots.ndim == 2
    r = rots[None] if single else rots
    lp = np.einsum("cij,nij->cn", t._fs, r) + t._offsets[:, None]
    m = lp.max(axis=0)
    out = m + np.log(np.exp(lp - m).sum(axis=0))
    return float(out[0]) if single else out


def target_entropy(t, grid=None):
    """-E[log p] under the target, by grid quadrature.

    The inner average is taken against the quadrature mass of p itself,
    so a small normalization defect cancels instead of leaking in.
    """
    grid = _default_grid() if grid is None else grid
    _require_grid(grid)
    sum_p = 0.0
    sum_plogp = 0.0
    for _, rots in grid.rotation_chunks():
        lp = target_log_prob(t, rots)
        p = np.exp(lp)
        sum_p += float(p.sum())
        sum_plogp += float((p * lp).sum())
    return -sum_plogp / sum_p


# ---------------------------------------------------------------------------
# sampling

def target_sample(t, n, rng, batch_cap=1_000_000):
    """n exact-ish samples from the target as rotation matrices.

    Uniform-proposal rejection against an envelope of grid max density
    times 1.05.  If the predicted acceptance rate falls below 1e-3 the
    sampler switches to a categorical draw over an implicit fine
    lattice (spacing a fixed fraction of the target's local width)
    followed by a tangent-space Gaussian jitter of half the lattice
    nearest-neighbor distance.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if t.grid_log_max is None:
        raise RuntimeError("target has no grid density maximum cached")
    log_env = t.grid_log_max + np.log(ENVELOPE_FACTOR)
    if np.exp(-log_env) < FALLBACK_ACCEPTANCE:
        return _lattice_sample(t, n, rng)

    out = []
    need = n
    while need > 0:
        m = int(min(batch_cap, max(2048, need * np.exp(log_env) * 1.25)))
        props = so3.sample_uniform(rng, m)
        lp = target_log_prob(t, props)
        kept = props[rng.random(m) < np.exp(lp - log_env)]
        out.append(kept[:need])
        need -= len(out[-1])
    return np.concatenate(out, axis=0)


def _fibonacci_numbers(limit):
    out = []
    a, b = 1, 2
    while a <= limit:
        out.append(a)
        a, b = b, a + b
    return out


def _lattice_nn_distance(n_base, n_fiber, probes=32):
    """Mean nearest-neighbor rotation distance, estimated by probing.

    Candidate neighbors sit at fiber offsets +-1 and at base offsets of
    Fibonacci numbers (the spiral's neighbor structure), so a handful
    of exact distance evaluations per probe point suffices.
    """
    total = n_base * n_fiber
    offsets = [1, -1, n_fiber - 1, -(n_fiber - 1)]
    for f in _fibonacci_numbers(n_base):
        for d in (-1, 0, 1):
            offsets.extend((f * n_fiber + d, -(f * n_fiber) + d))
    offsets = np.unique([o for o in offsets if o != 0])
    idx = np.unique(np.linspace(0, total - 1, probes).astype(np.int64))
    points = so3.fibonacci_hopf_points(n_base, n_fiber, idx)
    dists = []
    for i, p in zip(idx, points):
        cand = i + offsets
        cand = cand[(cand >= 0) & (cand < total)]
        neighbors = so3.fibonacci_hopf_points(n_base, n_fiber, cand)
        dists.append(np.min(so3.quat_geodesic_distance(p[None], neighbors)))
    return float(np.mean(dists))


def _ensure_lattice(t):
    """Chunked mass table over an implicit fine lattice, built once."""
    if t._lattice is not None:
        return t._lattice
    s = np.linalg.svd(t._fs, compute_uv=False)
    sigma = 1.0 / np.sqrt(float(np.max(s[:, 0] + s[:, 1])))
    h_ref = _lattice_nn_distance(*so3.balanced_grid_shape(_REF_LATTICE_N))
    n_fine = _REF_LATTICE_N * (h_ref / (FALLBACK_SPACING * sigma)) ** 3
    n_fine = int(np.clip(n_fine, FALLBACK_FLOOR, FALLBACK_CAP))
    n_base, n_fiber = so3.balanced_grid_shape(n_fine)
    total = n_base * n_fiber

    log_mass = []
    for start in range(0, total, _LATTICE_CHUNK):
        idx = np.arange(start, min(start + _LATTICE_CHUNK, total))
        rots = so3.quat_to_matrix(
            so3.fibonacci_hopf_points(n_base, n_fiber, idx))
        lp = target_log_prob(t, rots)
        m = float(lp.max())
        log_mass.append(m + np.log(np.exp(lp - m).sum()))
    t._lattice = dict(
        shape=(n_base, n_fiber),
        log_mass=np.asarray(log_mass),
        jitter=0.5 * _lattice_nn_distance(n_base, n_fiber),
    )
    return t._lattice


def _lattice_sample(t, n, rng):
    lat = _ensure_lattice(t)
    n_base, n_fiber = lat["shape"]
    total = n_base * n_fiber
    lm = lat["log_mass"]
    probs = np.exp(lm - lm.max())
    probs /= probs.sum()
    counts = rng.multinomial(n, probs)

    picked = []
    for ci in np.nonzero(counts)[0]:
        start = ci * _LATTICE_CHUNK
        idx = np.arange(start, min(start + _LATTICE_CHUNK, total))
        quats = so3.fibonacci_hopf_points(n_base, n_fiber, idx)
        lp = target_log_prob(t, so3.quat_to_matrix(quats))
        p = np.exp(lp - lp.max())
        p /= p.sum()
        picked.append(quats[rng.choice(len(idx), size=counts[ci], p=p)])
    quats = np.concatenate(picked, axis=0)

    jitter = lat["jitter"] * rng.standard_normal((n, 3))
    rots = so3.quat_to_matrix(quats) @ so3.rotation_from_tangent(jitter)
    return rots[rng.permutation(n)]
