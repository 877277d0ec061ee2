import numpy as np
import pytest

from hmctransfer import (
    FlowSpec,
    IterationTrace,
    anharmonic_pair,
    assemble_kernel,
    assemble_transfer,
    build_grid,
    certify_rate,
    determinant_bounds,
    eigen_spectrum,
    hs_norm,
    iterate,
    kernel_apply,
    mass,
    random_density,
    standard_gaussian_pair,
    weighted_norm,
)
from hmctransfer.operator import TransferMatrix


def mehler_kernel(grid, t):
    """Hand-derived closed form for the standard Gaussian pair:
    K(q, Q) = f(q) N(q cos t, sin^2 t)(Q)."""
    c, s = np.cos(t), np.sin(t)
    q = grid.nodes[:, 0]
    f = grid.target_values
    return f[:, None] * np.exp(-0.5 * (q[None, :] - q[:, None] * c) ** 2 / s**2) / (
        np.sqrt(2 * np.pi) * s
    )


def test_kernel_matches_closed_form(gauss_kernel, gauss_grid):
    closed = mehler_kernel(gauss_grid, 0.7)
    sel = closed > 1e-9 * closed.max()
    rel = np.max(np.abs(gauss_kernel.values[sel] - closed[sel]) / closed[sel])
    assert rel < 1e-6


def test_kernel_row_integrals_reproduce_target(gauss_kernel, gauss_grid):
    # applying the kernel to the target itself integrates each row
    f = gauss_grid.target_values
    row = gauss_kernel.values @ gauss_grid.weights
    assert weighted_norm(row - f, gauss_grid) < 1e-7 * weighted_norm(f, gauss_grid)
    interior = np.abs(gauss_grid.nodes[:, 0]) <= 5.0
    assert np.max(np.abs(row[interior] - f[interior]) / f[interior]) < 1e-7


def test_kernel_symmetric_for_even_auxiliary(gauss_kernel):
    K = gauss_kernel.values
    sel = K > 1e-9 * K.max()
    sym = np.abs(K - K.T)
    assert np.max(sym[sel] / K[sel]) < 1e-6


def test_kernel_nonnegative(gauss_kernel):
    assert np.min(gauss_kernel.values) >= 0.0


def test_hs_norm_oracle(gauss_kernel, gauss_grid):
    oracle = 1.0 / np.sin(0.7) ** 2
    value = hs_norm(gauss_kernel, gauss_grid)
    assert abs(value - oracle) < 1e-3 * oracle
    both = (gauss_kernel.hs_norm_sq, gauss_kernel.hs_norm_sq_momentum)
    assert abs(both[0] - both[1]) < 1e-4 * both[0]


def test_hs_norm_bounded_by_determinant_cap(gauss_kernel, gauss_model):
    _, upper = determinant_bounds(gauss_model, 0.7)
    assert gauss_kernel.hs_norm_sq <= upper * (1 + 1e-6)


def test_hs_norm_near_quarter_period(gauss_grid, gauss_model):
    # the operator approaches the rank-one projection onto the target
    spec = FlowSpec(time=np.pi / 2, steps=1, method="exact_gaussian")
    field = assemble_kernel(gauss_grid, gauss_model, spec, momentum_nodes=1025)
    assert abs(field.hs_norm_sq - 1.0) < 1e-6
    T = assemble_transfer(gauss_grid, gauss_model, spec, 257)
    report = eigen_spectrum(T, gauss_grid, k=6)
    assert abs(report.eigenvalues[1]) < 1e-3


def test_hs_consistency_failure_detected(gauss_kernel, gauss_grid):
    from dataclasses import replace

    broken = replace(gauss_kernel, hs_norm_sq_momentum=gauss_kernel.hs_norm_sq * 1.01)
    with pytest.raises(ValueError, match="disagree"):
        hs_norm(broken, gauss_grid)


def test_kernel_agrees_with_direct_operator(gauss_kernel, gauss_T, gauss_grid):
    rng = np.random.default_rng(21)
    for _ in range(5):
        h = random_density(gauss_grid, rng)
        gap = np.max(np.abs(gauss_T.apply(h) - kernel_apply(gauss_kernel, gauss_grid, h)))
        assert gap < 1e-6 * np.max(np.abs(h))


def test_kernel_regime_validation(gauss_grid, gauss_model):
    spec = FlowSpec(time=3.2, steps=1, method="exact_gaussian")
    with pytest.raises(ValueError, match="conjugate"):
        assemble_kernel(gauss_grid, gauss_model, spec)


def test_spectrum_matches_mehler_eigenvalues(gauss_report):
    mehler = np.cos(0.7) ** np.arange(6)
    assert np.max(np.abs(gauss_report.eigenvalues[:6] - mehler)) < 1e-3
    assert gauss_report.rate_bound == pytest.approx(np.cos(0.7), abs=1e-3)
    assert gauss_report.gap == pytest.approx(1 - np.cos(0.7), abs=1e-3)


def test_spectrum_invariants(gauss_report):
    mu = gauss_report.eigenvalues
    assert abs(mu[0] - 1.0) < 1e-4
    assert np.max(np.abs(mu)) <= 1.0 + 1e-6
    assert mu.min() >= -1e-6  # Gaussian case: nonnegative spectrum
    assert gauss_report.multiplicity_check
    assert gauss_report.second_mass < 1e-6
    assert not gauss_report.gap_caveat
    assert not gauss_report.symmetrized_fallback
    assert gauss_report.symmetry_residual < 1e-6


def test_leading_vector_proportional_to_target(gauss_report, gauss_grid):
    f = gauss_grid.target_values
    fn = f / weighted_norm(f, gauss_grid)
    assert weighted_norm(gauss_report.leading_vector - fn, gauss_grid) < 1e-4


def test_hilbert_schmidt_identity(gauss_report, gauss_kernel):
    total = gauss_report.sum_squares
    assert abs(total - gauss_kernel.hs_norm_sq) < 1e-3 * gauss_kernel.hs_norm_sq
    # tail beyond the computed modes is negligible
    assert gauss_report.eigenvalues[-1] ** 2 < 1e-6


def test_symmetrization_fallback_and_spectrum_squares(gauss_T, gauss_Tadj, gauss_grid):
    corrupt = TransferMatrix(
        entries=gauss_T.entries + 1e-3 * np.triu(np.abs(gauss_T.entries)),
        grid=gauss_grid,
        meta=dict(gauss_T.meta),
    )
    with pytest.raises(ValueError, match="self-adjoint"):
        eigen_spectrum(corrupt, gauss_grid, k=4)
    report = eigen_spectrum(corrupt, gauss_grid, k=6, adjoint=gauss_Tadj)
    assert report.symmetrized_fallback
    # the symmetrization of the clean operator squares the eigenvalues
    from hmctransfer import symmetrize

    S = symmetrize(gauss_T, gauss_Tadj)
    rep_s = eigen_spectrum(S, gauss_grid, k=6)
    squares = np.cos(0.7) ** (2 * np.arange(6))
    assert np.max(np.abs(rep_s.eigenvalues - squares)) < 1e-3


def test_certificate_gaussian_rate(gauss_report, gauss_T, gauss_grid):
    q = gauss_grid.nodes[:, 0]
    bump = np.exp(-0.5 * (q - 1.3) ** 2 / 0.49)
    trace = iterate(gauss_T, bump, n_max=400, tol=1e-12)
    cert = certify_rate(gauss_report, trace)
    assert cert.passed
    assert abs(cert.rho_emp - np.cos(0.7)) < 0.02 * np.cos(0.7)
    assert cert.r_squared > 0.99


def test_certificate_trivial_for_fixed_point_start(gauss_report, gauss_T, gauss_grid):
    trace = iterate(gauss_T, gauss_grid.target_values, n_max=50, tol=1e-6)
    cert = certify_rate(gauss_report, trace)
    assert cert.trivially_converged
    assert cert.passed


def test_certificate_rejects_non_geometric_decay(gauss_report):
    n = np.arange(60)
    errors = np.exp(-0.1 * n) * (1.0 + 0.5 * (-1.0) ** n)
    trace = IterationTrace(
        steps=n,
        norms=errors,
        errors=errors,
        alpha=1.0,
        tol=1e-12,
        converged=False,
        anomaly=False,
        final=np.zeros(3),
    )
    cert = certify_rate(gauss_report, trace)
    assert not cert.passed
    assert cert.r_squared < 0.99


def test_certificate_anharmonic_internal_consistency(anh_report, anh_trace):
    cert = certify_rate(anh_report, anh_trace)
    assert cert.passed
    assert cert.mismatch < 0.02
    assert anh_report.gap_caveat  # no closed form: flag the discretization caveat


def test_anharmonic_kernel_consistency(anh_grid, anh_model, anh_spec, anh_T):
    field = assemble_kernel(anh_grid, anh_model, anh_spec, momentum_nodes=1025)
    value = hs_norm(field, anh_grid)
    assert abs(field.hs_norm_sq - field.hs_norm_sq_momentum) < 1e-4 * value
    rng = np.random.default_rng(31)
    h = random_density(anh_grid, rng)
    gap = np.max(np.abs(anh_T.apply(h) - kernel_apply(field, anh_grid, h)))
    assert gap < 1e-6 * np.max(np.abs(h))
    _, upper = determinant_bounds(anh_model, anh_spec.time)
    assert value <= upper * (1 + 1e-6)
