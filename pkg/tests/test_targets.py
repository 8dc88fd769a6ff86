"""Target distribution tests: normalizers, entropy, and samplers."""

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.stats import chi2

from so3flow import so3, targets
from so3flow.targets import (MatrixFisher, compute_log_norm, fisher_log_prob,
                             make_target, target_entropy, target_log_prob,
                             target_sample)

from util import cone_exact_log_z, matrix_fisher_exact_log_z


# ---------------------------------------------------------------------------
# normalizers

def test_zero_matrix_is_uniform(grid2):
    mf = MatrixFisher(np.zeros((3, 3)))
    mf.log_norm = compute_log_norm(mf.f, grid2)
    assert mf.log_norm == 0.0
    rng = np.random.default_rng(0)
    lp = fisher_log_prob(mf, so3.sample_uniform(rng, 100))
    np.testing.assert_array_equal(lp, 0.0)


def test_log_prob_requires_normalizer():
    mf = MatrixFisher(np.eye(3))
    with pytest.raises(RuntimeError):
        fisher_log_prob(mf, np.eye(3))


def test_log_norm_matches_angle_integral_oracle(grid5):
    for kappa, tol in ((5.0, 1e-3), (40.0, 1e-3), (400.0, 1e-2)):
        got = compute_log_norm(kappa * np.eye(3), grid5)
        assert abs(got - matrix_fisher_exact_log_z(kappa)) < tol


def test_cone_log_norm_matches_closed_form(grid5):
    a = np.array([0.0, 0.6, 0.8])
    got = compute_log_norm(40.0 * np.outer(a, [1.0, 0.0, 0.0]), grid5)
    assert abs(got - cone_exact_log_z(40.0)) < 1e-3


def test_log_norm_at_mode_value(grid5):
    # F = kappa I at R = I: log p = 3 kappa - log Z
    mf = MatrixFisher(5.0 * np.eye(3))
    mf.log_norm = compute_log_norm(mf.f, grid5)
    got = fisher_log_prob(mf, np.eye(3))
    assert got == pytest.approx(15.0 - matrix_fisher_exact_log_z(5.0), abs=1e-3)


def test_log_norm_grid_refinement(grid2, grid5):
    f = np.diag([5.0, 5.0, 5.0])
    assert abs(compute_log_norm(f, grid2) - compute_log_norm(f, grid5)) < 1e-2


def test_log_norm_haar_invariance(grid5):
    rng = np.random.default_rng(1)
    f = rng.standard_normal((3, 3)) * 3.0
    q = so3.sample_uniform(rng, 1)[0]
    assert abs(compute_log_norm(f, grid5) - compute_log_norm(q @ f, grid5)) < 1e-3


def test_small_grid_rejected():
    small = so3.fibonacci_hopf_grid(50_000)
    with pytest.raises(ValueError):
        compute_log_norm(np.eye(3), small)
    with pytest.raises(ValueError):
        make_target("peak", 1.0, grid=small)


def test_normalized_density_self_check(grid5, cone40):
    # quadrature of exp(log p) over the normalization grid itself
    mass = grid5.average(lambda r: np.exp(target_log_prob(cone40, r)))
    assert abs(mass - 1.0) < 0.01


# ---------------------------------------------------------------------------
# target construction

def test_make_target_validation(grid5):
    with pytest.raises(ValueError):
        make_target("blob", 1.0, grid=grid5)
    with pytest.raises(ValueError):
        make_target("peak", 0.0, grid=grid5)
    with pytest.raises(ValueError):
        make_target("peak", -3.0, grid=grid5)
    with pytest.raises(so3.NotARotationError):
        make_target("peak", 1.0, mode=np.eye(3) * 2.0, grid=grid5)


def test_component_inventory(peak400, cube40, cone40, line40):
    assert len(peak400.components) == 1
    assert len(cube40.components) == 24
    np.testing.assert_allclose(cube40.weights, np.full(24, 1.0 / 24))
    assert len(cone40.components) == 1
    assert len(line40.components) == 3


def test_single_component_target_matches_fisher(peak400):
    rng = np.random.default_rng(2)
    rots = so3.sample_uniform(rng, 50)
    expected = fisher_log_prob(peak400.components[0], rots)
    np.testing.assert_allclose(target_log_prob(peak400, rots), expected,
                               atol=1e-12)


def test_cone_constant_along_fiber(cone40):
    rng = np.random.default_rng(3)
    rots = so3.sample_uniform(rng, 50)
    spins = so3.rotation_about_axis(np.array([1.0, 0.0, 0.0]),
                                    rng.uniform(-np.pi, np.pi, 50))
    lp = target_log_prob(cone40, rots)
    lp_spun = target_log_prob(cone40, rots @ spins)
    assert np.max(np.abs(lp - lp_spun)) < 1e-9


def test_cube24_symmetry_invariance(cube40):
    rng = np.random.default_rng(4)
    rots = so3.sample_uniform(rng, 20)
    lp = target_log_prob(cube40, rots)
    for g in so3.chiral_octahedral_group():
        lp_g = target_log_prob(cube40, rots @ g)
        assert np.max(np.abs(lp - lp_g)) < 1e-6


def test_uniform_limit(grid2):
    t = make_target("cube24", 1e-6, grid=grid2)
    rng = np.random.default_rng(5)
    lp = target_log_prob(t, so3.sample_uniform(rng, 200))
    assert np.max(np.abs(lp)) < 1e-4


def test_nonidentity_mode(grid2):
    rng = np.random.default_rng(6)
    mode = so3.sample_uniform(rng, 1)[0]
    t = make_target("peak", 40.0, mode=mode, grid=grid2)
    # the mode rotation carries the highest density
    others = so3.sample_uniform(rng, 100)
    assert target_log_prob(t, mode) > np.max(target_log_prob(t, others))


def test_all_targets_integrate_to_one(audit_grid, peak400, cube40, cone40,
                                      line40):
    for t in (peak400, cube40, cone40, line40):
        mass = audit_grid.average(lambda r: np.exp(target_log_prob(t, r)))
        assert abs(mass - 1.0) < 0.01, t.kind


# ---------------------------------------------------------------------------
# entropy

def test_entropy_uniform_is_zero(grid2):
    t = make_target("peak", 1e-6, grid=grid2)
    assert abs(target_entropy(t, grid2)) < 1e-4


def test_entropy_peak_strongly_negative(peak400, grid5):
    assert target_entropy(peak400, grid5) < -5.0


def test_entropy_symmetry_decomposition(cube40, grid5):
    single = make_target("peak", 40.0, grid=grid5)
    gap = target_entropy(cube40, grid5) - target_entropy(single, grid5)
    assert abs(gap - np.log(24.0)) < 0.05


def test_entropy_grid_refinement(cube40, grid2, grid5):
    assert abs(target_entropy(cube40, grid2)
               - target_entropy(cube40, grid5)) < 0.05


# ---------------------------------------------------------------------------
# sampling

def test_sample_count_validated(cone40):
    with pytest.raises(ValueError):
        target_sample(cone40, 0, np.random.default_rng(0))


def test_sampler_uniform_limit_moments(grid2):
    t = make_target("cone-cyclic", 1e-6, grid=grid2)
    s = target_sample(t, 50_000, np.random.default_rng(7))
    so3.validate_rotation(s)
    # E[tr R] = 0 under Haar with Var[tr R] = 1
    assert abs(np.trace(s, axis1=1, axis2=2).mean()) < 3.0 / np.sqrt(50_000)


def test_sampler_cone_first_moment(cone40):
    s = target_sample(cone40, 100_000, np.random.default_rng(8))
    got = np.mean(s[:, :, 0] @ cone40.mode[:, 0])
    expected = 1.0 / np.tanh(40.0) - 1.0 / 40.0
    assert abs(got - expected) < 5e-4


def test_sampler_deterministic(cone40):
    a = target_sample(cone40, 500, np.random.default_rng(9))
    b = target_sample(cone40, 500, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_peak_sampler_uses_lattice_and_matches_quadrature(peak400, grid5):
    # predicted acceptance is far below the rejection threshold
    assert np.exp(-(peak400.grid_log_max + np.log(1.05))) < 1e-3
    s = target_sample(peak400, 10_000, np.random.default_rng(10))
    assert peak400._lattice is not None
    so3.validate_rotation(s)
    got = target_log_prob(peak400, s).mean()
    expected = -target_entropy(peak400, grid5)
    assert abs(got - expected) < 0.1
    a = target_sample(peak400, 300, np.random.default_rng(11))
    b = target_sample(peak400, 300, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_sampler_chi_square_against_quadrature(cone40, grid5):
    n = 100_000
    s = target_sample(cone40, n, np.random.default_rng(12))
    centers = so3.fibonacci_hopf_grid(256)
    # nearest-center assignment must respect the antipodal identification
    tree = cKDTree(np.vstack([centers.quats, -centers.quats]))
    k = centers.n

    expected = np.zeros(k)
    for start in range(0, grid5.n, 100_000):
        q = grid5.quats[start:start + 100_000]
        lp = target_log_prob(cone40, so3.quat_to_matrix(q))
        idx = tree.query(q)[1] % k
        np.add.at(expected, idx, np.exp(lp) / grid5.n)
    expected /= expected.sum()

    obs = np.zeros(k)
    idx = tree.query(so3.matrix_to_quat(s))[1] % k
    np.add.at(obs, idx, 1.0)

    keep = expected > 0.01
    exp_counts = np.append(n * expected[keep], n * expected[~keep].sum())
    obs_counts = np.append(obs[keep], obs[~keep].sum())
    stat = np.sum((obs_counts - exp_counts) ** 2 / exp_counts)
    dof = len(exp_counts) - 1
    assert stat < chi2.ppf(0.999, dof), (stat, dof)
