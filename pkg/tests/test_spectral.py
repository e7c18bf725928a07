import numpy as np
import pytest

from qdiff.augmented import assemble_L, fibre_overlap, transform_initial
from qdiff.errors import (
    BranchCollision,
    DegenerateZero,
    FitUnstable,
    GapTooSmall,
    NotPositiveDefinite,
    SingularRestriction,
)
from qdiff.harness import load_config
from qdiff.lattice import DensityMatrixInit, HoppingKernel, LatticeConfig
from qdiff.spectral import (
    _mean_zero_basis,
    continuity_residual,
    decay_rate_check,
    deflated_semigroup,
    diffusion_at,
    diffusion_profile,
    eigen_branch,
    fibre_split,
    fit_decay_rate,
    fourier_interpolate,
    gap_lower_bound,
    hessian_closed_form,
    hessian_fd,
    numerical_range_sample,
    riesz_projection_contour,
    schur_coercivity_bound,
    schur_complement,
    spectrum_split,
    system_gap_bound,
    tracking_radius,
)
from qdiff.system import PeriodicSystem

R1_DELTA0 = 0.2471823  # δ_numeric(0) on R1, frozen from an eigvals run
R1_D0 = 3.97297 / 2


def _r1(rate=1.0, U=(1.0, 0.0, -1.0), h=None):
    return PeriodicSystem.jiggling(LatticeConfig(1, 3), h or HoppingKernel.nearest_neighbour(1), list(U), rate)


def _schur_oracle(system, p, z):
    """Γ(z) = z + [P₀(L - z)⁻¹P₀]⁻¹, valid because P₀ṼP₀ = 0 and K̃ kills ran P₀."""
    L = assemble_L(system, np.zeros(system.cfg.d), p).matrix
    n, M = system.dim, system.M
    R = np.linalg.inv(L - z * np.eye(n))
    G = np.kron(np.eye(system.cfg.cell_size), np.ones((M, 1)))
    C = G.T @ (system.weights[:, None] * (R @ G))
    return z * np.eye(system.cfg.cell_size) + np.linalg.inv(C)


@pytest.mark.parametrize("name", ["r1", "d2n3"])
@pytest.mark.parametrize("z", [-0.3, -0.1 + 0.4j])
def test_schur_complement_against_resolvent(name, z, request):
    system = request.getfixturevalue(name)
    p = np.full(system.cfg.d, 0.37)
    gamma = schur_complement(system, p, z).matrix
    assert np.max(np.abs(gamma - _schur_oracle(system, p, z))) < 1e-10


@pytest.mark.parametrize("name", ["r1", "d2n3"])
def test_schur_coercive_on_complement(name, request, rng):
    system = request.getfixturevalue(name)
    c = system.constants()
    bound = schur_coercivity_bound(c["T"], c["chi"], c["h_sup"], c["V_norm"])
    for p in rng.uniform(0, 2 * np.pi / system.cfg.N, size=(8, system.cfg.d)):
        S = schur_complement(system, p)
        assert np.max(np.abs(S.matrix[0])) < 1e-13 and np.max(np.abs(S.matrix[:, 0])) < 1e-13
        assert np.linalg.eigvalsh(S.real_part()[1:, 1:]).min() >= bound


def test_schur_singular_at_restricted_eigenvalue(r1):
    L = assemble_L(r1, [0.0], [0.2]).matrix
    E = np.kron(np.eye(3), _mean_zero_basis(r1.model.mu))
    A = E.conj().T @ (r1.weights[:, None] * (L @ E))
    z0 = np.linalg.eigvals(A)[0]
    with pytest.raises(SingularRestriction):
        schur_complement(r1, [0.2], z0)


def test_gap_bound_regression(r1):
    assert system_gap_bound(r1) == pytest.approx(1 / 123, rel=1e-12)
    assert gap_lower_bound(0.0, 2 / 3, np.sqrt(8 / 9), 2.0, 2.0) == pytest.approx(1 / 123, rel=1e-14)


def test_gap_bound_with_doubled_rates():
    # T and χ both halve: (2/9) / ((1/3)(22²/9 + 8/9)) = 1/82
    assert system_gap_bound(_r1(rate=2.0)) == pytest.approx(1 / 82, rel=1e-12)


@pytest.mark.parametrize("name", ["r1", "d2n2", "d2n3"])
def test_spectrum_split_single_zero_above_bound(name, request, rng):
    system = request.getfixturevalue(name)
    bound = system_gap_bound(system)
    for p in rng.uniform(0, 2 * np.pi, size=(6, system.cfg.d)):
        split = spectrum_split(system, p, delta_bound=bound)
        assert split.zero_count == 1 and split.bound_holds


def test_spectrum_split_regression(r1):
    assert spectrum_split(r1, [0.0]).delta_numeric == pytest.approx(R1_DELTA0, abs=1e-6)


def test_constant_potential_gives_degenerate_zero():
    with pytest.raises(DegenerateZero):
        spectrum_split(_r1(U=(0.4, 0.4, 0.4)), [0.3])


def test_gap_too_small(r1):
    with pytest.raises(GapTooSmall):
        spectrum_split(r1, [0.0], delta_bound=10.0)
    assert not spectrum_split(r1, [0.0], delta_bound=10.0, check_bound=False).bound_holds


def test_branch_at_zero_momentum(r1):
    b = eigen_branch(r1, [0.0], [0.6])
    assert abs(b.E) < 1e-12
    assert np.max(np.abs(b.phi_R - r1.ground_vector())) < 1e-10
    assert np.max(np.abs(b.gradient)) < 1e-12


@pytest.mark.parametrize("name,k,p", [("r1", [0.4], [0.2]), ("d2n3", [0.3, -0.2], [0.5, 1.0])])
def test_branch_projection_properties(name, k, p, request):
    system = request.getfixturevalue(name)
    b = eigen_branch(system, k, p)
    assert np.max(np.abs(b.Q @ b.Q - b.Q)) < 1e-10
    assert np.linalg.matrix_rank(b.Q, tol=1e-8) == 1
    assert system.inner(b.phi_L, b.phi_R) == pytest.approx(1.0, abs=1e-10)
    L = assemble_L(system, k, p).matrix
    assert np.max(np.abs(L @ b.phi_R - b.E * b.phi_R)) < 1e-10
    contour = riesz_projection_contour(system, k, p, branch=b)
    assert np.max(np.abs(contour - b.Q)) < 1e-8


def test_branch_collision_at_large_k(r1):
    r = tracking_radius(r1, [0.0], [1.0], steps=200)
    assert r > 0.5
    with pytest.raises(BranchCollision):
        eigen_branch(r1, [r + 0.01], [0.0])


def test_taylor_ratio_real_part(r1):
    p = [0.0]
    H = hessian_closed_form(r1, p).reduced[0, 0]
    errs = [abs(eigen_branch(r1, [k], p).E.real - 0.5 * H * k**2) for k in (0.1, 0.05)]
    # parity at p = 0 makes Re E even in k, so the remainder is quartic
    assert 12 < errs[0] / errs[1] < 20


@pytest.mark.parametrize("name", ["r1", "d2n2", "d2n3"])
def test_hessian_forms_agree(name, request, rng):
    system = request.getfixturevalue(name)
    for p in rng.uniform(0, 2 * np.pi, size=(5, system.cfg.d)):
        forms = hessian_closed_form(system, p)
        assert forms.difference < 1e-9
        assert not forms.folds_to_origin


@pytest.mark.parametrize("p", [[0.0], [0.4], [1.9]])
def test_hessian_against_finite_differences(r1, p):
    closed = hessian_closed_form(r1, p).reduced
    fd = hessian_fd(r1, p)
    assert np.max(np.abs(fd.real - closed)) <= 1e-5 * np.max(np.abs(closed))
    assert np.max(np.abs(fd.imag)) < 1e-7
    assert np.max(np.abs(fd.gradient)) < 1e-8


def test_hessian_2d_against_finite_differences(d2n3):
    p = [0.3, 1.1]
    closed = hessian_closed_form(d2n3, p).reduced
    fd = hessian_fd(d2n3, p)
    assert np.max(np.abs(fd.real - closed)) <= 1e-5 * np.max(np.abs(closed))
    assert np.allclose(closed, closed.T)


def test_finite_difference_order(r1):
    p = [0.4]
    exact = hessian_closed_form(r1, p).reduced[0, 0]
    e1 = abs(hessian_fd(r1, p, step=0.04, richardson=False).real[0, 0] - exact)
    e2 = abs(hessian_fd(r1, p, step=0.02, richardson=False).real[0, 0] - exact)
    assert 3.5 < e1 / e2 < 4.5


def test_hops_folding_to_origin(caplog):
    h = HoppingKernel({(1,): 1.0, (-1,): 1.0, (3,): 0.2j, (-3,): -0.2j})
    system = _r1(h=h)
    p = [0.5]
    with caplog.at_level("WARNING"):
        forms = hessian_closed_form(system, p)
    assert forms.folds_to_origin
    assert "fold to the origin" in caplog.text
    assert np.max(np.abs(forms.folded_curvature.real)) < 1e-14
    fd = hessian_fd(system, p)
    assert np.max(np.abs(fd.imag - forms.folded_curvature.imag)) < 1e-6
    assert np.max(np.abs(fd.real - forms.reduced)) < 1e-5 * np.max(np.abs(forms.reduced))
    assert abs(eigen_branch(system, [0.0], p).gradient[0] - fd.gradient[0]) < 1e-8


def test_r1_profile():
    system = _r1()
    prof = diffusion_profile(system, 16)
    assert prof.min_eigenvalue() > 0
    assert prof.asymmetry() < 1e-10
    assert np.all(prof.delta_numeric >= prof.delta_bound)
    assert prof.D[0, 0, 0] == pytest.approx(R1_D0, rel=1e-5)
    rows = list(prof.rows())
    assert len(rows) == 16 and len(rows[0]) == len(prof.header())
    assert continuity_residual(system, 16) < 1e-6


def test_fourier_interpolation_is_exact_for_trig_polynomials():
    Mp, d = 8, 2
    idx = np.stack(np.meshgrid(np.arange(Mp), np.arange(Mp), indexing="ij"), -1).reshape(-1, 2)
    f = lambda s, n: 1 + np.cos(2 * np.pi * s[:, 0] / n) * np.sin(4 * np.pi * s[:, 1] / n)
    fine_idx = np.stack(np.meshgrid(np.arange(2 * Mp), np.arange(2 * Mp), indexing="ij"), -1).reshape(-1, 2)
    out = fourier_interpolate(f(idx, Mp), d, Mp, 2 * Mp)
    assert np.max(np.abs(out - f(fine_idx, 2 * Mp))) < 1e-13
    with pytest.raises(ValueError):
        fourier_interpolate(f(idx, Mp), d, Mp, 12)


def test_d2n2_profile_degenerates(d2n2):
    Dp, *_ = diffusion_at(d2n2, [0.0, 0.0], require_pd=False)
    assert np.max(np.abs(Dp)) < 1e-10
    with pytest.raises(NotPositiveDefinite):
        diffusion_at(d2n2, [0.0, 0.0])
    Dline, *_ = diffusion_at(d2n2, [0.0, 0.7], require_pd=False)
    assert abs(Dline[0, 0]) < 1e-10 and Dline[1, 1] > 0
    Doff, *_ = diffusion_at(d2n2, [0.6, 1.1])
    assert np.linalg.eigvalsh(Doff).min() > 0


def test_d2n3_profile_is_spd(d2n3):
    prof = diffusion_profile(d2n3, 4)
    assert prof.min_eigenvalue() > 0
    assert prof.asymmetry() < 1e-10
    assert np.max(prof.reduced_vs_schur) < 1e-9


def test_axis_hopping_not_positive_definite():
    system = load_config("d2_axis_hopping").system()
    with pytest.raises(NotPositiveDefinite):
        diffusion_at(system, [0.3, 0.4])


def test_profile_worker_independence(d2n3):
    a = diffusion_profile(d2n3, 4, workers=1)
    b = diffusion_profile(d2n3, 4, workers=3)
    assert np.array_equal(a.D, b.D)


def test_deflated_semigroup_at_zero_time(r1):
    L = assemble_L(r1, [0.3], [0.2]).matrix
    b = eigen_branch(r1, [0.3], [0.2], L=L)
    assert np.max(np.abs(deflated_semigroup(r1, L, b, 0.0) - (np.eye(r1.dim) - b.Q))) < 1e-12


@pytest.mark.parametrize("t", [0.5, 3.0, 10.0])
def test_fibre_split_adds_up(r1, t):
    k, p = [0.3], [0.2]
    rho = DensityMatrixInit.pure({(0,): 1 / np.sqrt(2), (1,): 1j / np.sqrt(2)})
    vec = transform_initial(rho, k, p, r1.cfg)
    split = fibre_split(r1, k, p, t, vec)
    total = fibre_overlap(r1, assemble_L(r1, k, p).matrix, t, vec)
    assert abs(split.leading + split.remainder - total) < 1e-12
    assert abs(split.remainder) <= split.remainder_norm + 1e-15


def test_decay_rate_matches_gap(r1):
    fit = decay_rate_check(r1, [0.3], [0.0])
    assert fit.ok
    assert np.all(np.diff(fit.norms) < 0)


def test_fit_unstable():
    with pytest.raises(FitUnstable):
        fit_decay_rate([1, 2, 3], [1.0, 2.0, 0.5])
    with pytest.raises(FitUnstable):
        fit_decay_rate([1, 2], [1.0, 0.0])
    assert fit_decay_rate([1, 2, 3], np.exp(-0.7 * np.array([1, 2, 3]))) == pytest.approx(0.7)


def test_numerical_range_sample(d2n3):
    c = d2n3.constants()
    vals = numerical_range_sample(d2n3, [0.4, 0.1], [1.0, 0.3], n=500)
    assert np.all(vals.real >= -1e-12)
    assert np.all(np.abs(vals.imag) <= 2 * c["h_sup"] + c["V_norm"] + c["gamma"] * vals.real + 1e-12)
