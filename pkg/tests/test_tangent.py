import numpy as np
import pytest
from scipy.linalg import expm

from hmctransfer import (
    FlowSpec,
    PhaseState,
    RunningAverages,
    TangentBlocks,
    anharmonic_pair,
    block_exponential,
    default_flow_spec,
    determinant_bounds,
    integrate_tangent,
    jacobian_determinants,
    spd_sqrt,
    sqrt_product,
    standard_gaussian_pair,
)
from hmctransfer.dynamics import flow_batch
from hmctransfer.tangent import SingularJacobianError, sinc, tangent_batch


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def test_gaussian_blocks_are_rotation():
    model = standard_gaussian_pair()
    t = 0.9
    spec = FlowSpec(time=t, steps=1, method="exact_gaussian")
    state = PhaseState(q=np.array([0.7]), p=np.array([-0.2]))
    _, blocks, averages = integrate_tangent(state, model, spec)
    assert blocks.dQdq[0, 0] == pytest.approx(np.cos(t), abs=1e-12)
    assert blocks.dQdp[0, 0] == pytest.approx(np.sin(t), abs=1e-12)
    assert blocks.dPdq[0, 0] == pytest.approx(-np.sin(t), abs=1e-12)
    assert blocks.dPdp[0, 0] == pytest.approx(np.cos(t), abs=1e-12)
    assert averages.Ubar == pytest.approx(np.eye(1))
    assert averages.Vbar == pytest.approx(np.eye(1))


def test_blocks_reduce_to_identity_at_short_time():
    model = anharmonic_pair(1.0, 0.5, 3.5)
    spec = FlowSpec(time=1e-12, steps=1, method="leapfrog")
    state = PhaseState(q=np.array([1.0]), p=np.array([0.5]))
    _, blocks, _ = integrate_tangent(state, model, spec)
    assert np.max(np.abs(blocks.matrix() - np.eye(2))) < 1e-10


def test_tangent_blocks_match_finite_differences():
    model = anharmonic_pair(1.0, 0.5, 3.5)
    spec = default_flow_spec(model, 0.3)
    rng = np.random.default_rng(11)
    eps = 1e-5
    for _ in range(50):
        state = PhaseState(q=rng.uniform(-1.5, 1.5, 1), p=rng.normal(size=1))
        _, blocks, _ = integrate_tangent(state, model, spec)
        jac = blocks.matrix()
        fd = np.zeros((2, 2))
        for col, (dq, dp) in enumerate([(eps, 0.0), (0.0, eps)]):
            Qp, Pp = flow_batch(state.q + dq, state.p + dp, model, spec)
            Qm, Pm = flow_batch(state.q - dq, state.p - dp, model, spec)
            fd[0, col] = (Qp - Qm)[0] / (2 * eps)
            fd[1, col] = (Pp - Pm)[0] / (2 * eps)
        assert np.max(np.abs(jac - fd)) < 1e-5 * np.max(np.abs(jac))


def test_spd_sqrt_basics():
    assert spd_sqrt(np.eye(3)) == pytest.approx(np.eye(3))
    assert spd_sqrt(np.diag([4.0, 9.0])) == pytest.approx(np.diag([2.0, 3.0]))
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = random_spd(rng, 4)
        s = spd_sqrt(m)
        assert np.linalg.norm(s @ s - m) < 1e-12 * np.linalg.norm(m)
        assert s == pytest.approx(s.T)


def test_spd_sqrt_reports_offending_eigenvalue():
    with pytest.raises(ValueError, match="eigenvalue"):
        spd_sqrt(np.diag([1.0, -2.0]))
    with pytest.raises(ValueError, match="symmetric"):
        spd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_sqrt_product():
    assert sqrt_product(np.eye(2), np.eye(2)) == pytest.approx(np.eye(2))
    assert sqrt_product(np.array([[1.0]]), np.array([[4.0]]))[0, 0] == pytest.approx(2.0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        v, u = random_spd(rng, 3), random_spd(rng, 3)
        a = sqrt_product(v, u)
        vu = v @ u
        assert np.linalg.norm(a @ a - vu) < 1e-10 * np.linalg.norm(vu)
        eigs = np.linalg.eigvals(a)
        assert np.all(np.abs(eigs.imag) < 1e-10 * np.abs(eigs.real))
        assert np.all(eigs.real > 0)


def test_block_exponential_identity_pair():
    t = 0.8
    blocks = block_exponential(RunningAverages(Ubar=np.eye(2), Vbar=np.eye(2), time=t))
    assert blocks.dQdq == pytest.approx(np.cos(t) * np.eye(2))
    assert blocks.dQdp == pytest.approx(np.sin(t) * np.eye(2))
    assert blocks.dPdq == pytest.approx(-np.sin(t) * np.eye(2))
    assert blocks.dPdp == pytest.approx(np.cos(t) * np.eye(2))


def test_block_exponential_scalar_case():
    t = 0.4
    blocks = block_exponential(
        RunningAverages(Ubar=np.array([[4.0]]), Vbar=np.array([[1.0]]), time=t)
    )
    assert blocks.dQdq[0, 0] == pytest.approx(np.cos(2 * t))
    assert blocks.dQdp[0, 0] == pytest.approx(np.sin(2 * t) / 2.0)
    assert blocks.dPdq[0, 0] == pytest.approx(-2.0 * np.sin(2 * t))
    assert blocks.dPdp[0, 0] == pytest.approx(np.cos(2 * t))
    assert blocks.det() == pytest.approx(1.0)


def test_block_exponential_matches_matrix_exponential():
    # independent oracle: exponentiate the generator [[0, tV], [-tU, 0]]
    rng = np.random.default_rng(2)
    for _ in range(5):
        u, v = random_spd(rng, 3), random_spd(rng, 3)
        t = 0.31
        blocks = block_exponential(RunningAverages(Ubar=u, Vbar=v, time=t))
        gen = np.zeros((6, 6))
        gen[:3, 3:] = t * v
        gen[3:, :3] = -t * u
        assert np.max(np.abs(blocks.matrix() - expm(gen))) < 1e-11
        assert blocks.det() == pytest.approx(1.0, abs=1e-10)


def test_closed_form_matches_integrated_tangent_for_gaussian():
    model = standard_gaussian_pair()
    spec = FlowSpec(time=0.7, steps=1, method="exact_gaussian")
    state = PhaseState(q=np.array([0.4]), p=np.array([1.1]))
    _, blocks, averages = integrate_tangent(state, model, spec)
    closed = block_exponential(averages)
    assert np.max(np.abs(blocks.matrix() - closed.matrix())) < 1e-8


def test_closed_form_discrepancy_for_anharmonic_is_reported_not_asserted():
    # non-commuting Hessian family: the closed form is only a diagnostic
    model = anharmonic_pair(1.0, 0.5, 3.5)
    spec = default_flow_spec(model, 0.3)
    state = PhaseState(q=np.array([1.4]), p=np.array([0.8]))
    _, blocks, averages = integrate_tangent(state, model, spec)
    closed = block_exponential(averages)
    gap = np.max(np.abs(blocks.matrix() - closed.matrix()))
    print(f"closed-form vs integrated tangent discrepancy (anharmonic): {gap:.3e}")
    assert np.isfinite(gap)


def test_jacobian_determinants_rotation():
    model = standard_gaussian_pair()
    spec = FlowSpec(time=0.7, steps=1, method="exact_gaussian")
    state = PhaseState(q=np.array([1.0]), p=np.array([0.0]))
    _, blocks, _ = integrate_tangent(state, model, spec)
    dq, dp = jacobian_determinants(blocks)
    assert dq == pytest.approx(1.0 / np.sin(0.7))
    assert dp == pytest.approx(1.0 / np.sin(0.7))


def test_jacobian_determinants_scalar_closed_form():
    t = 0.4
    blocks = block_exponential(
        RunningAverages(Ubar=np.array([[4.0]]), Vbar=np.array([[1.0]]), time=t)
    )
    dq, dp = jacobian_determinants(blocks)
    assert dq == pytest.approx(2.0 / np.sin(2 * t))
    assert dp == pytest.approx(1.0 / (2.0 * np.sin(2 * t)))


def test_jacobian_determinants_name_singular_block():
    blocks = TangentBlocks(
        dQdq=np.eye(1), dQdp=np.zeros((1, 1)), dPdq=-np.eye(1), dPdp=np.eye(1)
    )
    with pytest.raises(SingularJacobianError, match="dQdp"):
        jacobian_determinants(blocks)


def test_short_time_divergence_rate():
    model = standard_gaussian_pair()
    t = 1e-3
    spec = FlowSpec(time=t, steps=1, method="exact_gaussian")
    state = PhaseState(q=np.array([0.3]), p=np.array([0.2]))
    _, blocks, _ = integrate_tangent(state, model, spec)
    dq, _ = jacobian_determinants(blocks)
    assert abs(dq * t - 1.0) < 0.01


def test_determinant_bounds_values():
    model = standard_gaussian_pair()
    lower, upper = determinant_bounds(model, 0.7)
    assert lower == pytest.approx(1.0 / 0.49)
    assert upper == pytest.approx(1.0 / np.sin(0.7) ** 2)
    model2 = standard_gaussian_pair(dim=2)
    lower2, upper2 = determinant_bounds(model2, 0.7)
    assert lower2 == pytest.approx((1.0 / 0.49) ** 2)
    assert upper2 == pytest.approx((1.0 / np.sin(0.7) ** 2) ** 2)


def test_determinant_bounds_regime_error():
    model = standard_gaussian_pair()
    with pytest.raises(ValueError, match="regime"):
        determinant_bounds(model, np.pi / 2)


def test_gaussian_product_sits_at_the_upper_bound():
    model = standard_gaussian_pair()
    t = 0.7
    spec = FlowSpec(time=t, steps=1, method="exact_gaussian")
    lower, upper = determinant_bounds(model, t)
    _, blocks, _ = integrate_tangent(PhaseState(q=np.ones(1), p=np.ones(1)), model, spec)
    dq, dp = jacobian_determinants(blocks)
    assert lower - 1e-9 <= dq * dp <= upper * (1 + 1e-9)
    assert dq * dp == pytest.approx(upper)


def test_anharmonic_product_inside_bounds():
    model = anharmonic_pair(1.0, 0.5, 1.6)
    t = 0.3
    lower, upper = determinant_bounds(model, t)
    spec = default_flow_spec(model, t)
    rng = np.random.default_rng(42)
    # keep total energy below the boundary potential so trajectories stay
    # inside the domain where the declared curvature bounds hold
    u_edge = float(model.target.value(np.array([1.6])))
    qs, ps = [], []
    while len(qs) < 200:
        q = rng.uniform(-1.6, 1.6)
        p = rng.normal()
        if model.target.value(np.array([q])) + 0.5 * p**2 < 0.999 * u_edge:
            qs.append([q])
            ps.append([p])
    _, _, blocks, ubar, vbar = tangent_batch(np.array(qs), np.array(ps), model, spec)
    prod = 1.0 / (np.abs(blocks[1][:, 0, 0]) * np.abs(blocks[2][:, 0, 0]))
    assert prod.min() >= lower - 1e-9
    assert prod.max() <= upper + 1e-9
    assert ubar.min() >= model.lambda_min - 1e-12
    assert ubar.max() <= model.lambda_max + 1e-12


def test_full_jacobian_determinant_is_one():
    rng = np.random.default_rng(9)
    quartic = anharmonic_pair(1.0, 0.5, 3.5)
    qspec = default_flow_spec(quartic, 0.3)
    for _ in range(20):
        state = PhaseState(q=rng.uniform(-2, 2, 1), p=rng.normal(size=1))
        _, blocks, _ = integrate_tangent(state, quartic, qspec)
        assert abs(blocks.det() - 1.0) < 1e-12
    gauss = standard_gaussian_pair(dim=2)
    gspec = FlowSpec(time=0.6, steps=1, method="exact_gaussian")
    for _ in range(10):
        state = PhaseState(q=rng.normal(size=2), p=rng.normal(size=2))
        _, blocks, _ = integrate_tangent(state, gauss, gspec)
        assert abs(blocks.det() - 1.0) < 1e-10


def test_sinc_series_switchover():
    xs = np.array([0.0, 1e-6, 1e-4, 0.5, np.pi])
    vals = sinc(xs)
    assert vals[0] == 1.0
    assert vals[1] == pytest.approx(1.0 - 1e-12 / 6.0)
    assert vals[3] == pytest.approx(np.sin(0.5) / 0.5)
    assert abs(vals[4]) < 1e-15
