import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixedctl.elliptic import EllipticData, solve_lifted
from mixedctl.geometry import Tag, TimeGrid, build_geometry
from mixedctl.operators import assemble_mixed, dirichlet_laplacian_solve, h_minus1_inner
from mixedctl.parabolic import (ParabolicData, SchemeConfig, ThetaStepper, duality_residual, run_diagnostics,
                                solve_adjoint_J1, solve_adjoint_J2, solve_dual, solve_forward)


def zero_controls(geom, tg):
    rows = tg.n_steps + 1
    return np.zeros((rows, 2)), np.zeros((rows, geom.size(Tag.COLLAR)))


def smooth_controls(geom, tg):
    t = tg.times[:, None]
    u1 = np.sin(np.pi * t) * np.array([[1.0, 0.5]])
    u2 = np.sin(np.pi * t) * np.exp(-(geom.nodes(Tag.COLLAR)[None, :] - 0.5) ** 2)
    return u1, u2


def test_scheme_config_range():
    with pytest.raises(ValueError):
        SchemeConfig(theta=0.4)
    with pytest.raises(ValueError):
        SchemeConfig(theta=1.1)


def test_zero_data_zero_state(stiff16, unit16, grid8):
    traj = solve_forward(ParabolicData.zero(unit16, grid8), stiff16)
    assert np.all(traj.frames == 0)


def test_positivity_small(stiff16, unit16, grid8, rng):
    u1, u2 = zero_controls(unit16, grid8)
    data = ParabolicData(grid8, u1, u2, f=np.abs(rng.standard_normal((9, 15))), psi0=rng.random(15))
    assert solve_forward(data, stiff16).interior.min() >= 0


def test_frames_carry_controls(stiff16, unit16, grid8):
    u1, u2 = smooth_controls(unit16, grid8)
    traj = solve_forward(ParabolicData(grid8, u1, u2), stiff16)
    np.testing.assert_array_equal(traj.part(Tag.BOUNDARY), u1)
    np.testing.assert_array_equal(traj.part(Tag.COLLAR), u2)


def test_steady_state_limit(unit64, stiff64):
    tg = TimeGrid(10.0, 100)
    rows = tg.n_steps + 1
    nc = unit64.size(Tag.COLLAR)
    data = ParabolicData(tg, np.full((rows, 2), 0.5), np.full((rows, nc), 0.5))
    psi = solve_forward(data, stiff64).interior[-1]
    w = solve_lifted(EllipticData(np.zeros(63), [0.5, 0.5], np.full(nc, 0.5)), stiff64)
    assert np.abs(psi - w.values[unit64.interior_index]).max() <= 1e-6


def test_dual_zero_and_time_reversal(stiff16, unit16, grid8, rng):
    for theta in (1.0, 0.5):
        scheme = SchemeConfig(theta=theta)
        assert np.all(solve_dual(np.zeros((9, 15)), stiff16, scheme, grid8).frames == 0)
        eta = rng.standard_normal((9, 15))
        phi = solve_dual(eta, stiff16, scheme, grid8).interior
        u1, u2 = zero_controls(unit16, grid8)
        fwd = solve_forward(ParabolicData(grid8, u1, u2, f=eta[::-1]), stiff16, scheme).interior
        np.testing.assert_array_equal(phi, fwd[::-1])


def test_adjoint_J1_zero_and_sign(stiff16, unit16, grid8, rng):
    u1, u2 = smooth_controls(unit16, grid8)
    state = solve_forward(ParabolicData(grid8, u1, u2), stiff16)
    assert np.all(solve_adjoint_J1(state, state.interior, stiff16).frames == 0)
    zd1 = state.interior + np.abs(rng.standard_normal(state.interior.shape))
    assert solve_adjoint_J1(state, zd1, stiff16).interior.min() >= 0


def test_adjoint_J2_terminal_layer_and_decay(stiff16, unit16, grid8, rng):
    scheme = SchemeConfig()
    psi_T = rng.standard_normal(15)
    assert np.all(solve_adjoint_J2(psi_T, psi_T, stiff16, scheme, grid8).frames == 0)
    zd2 = rng.standard_normal(15)
    p = solve_adjoint_J2(psi_T, zd2, stiff16, scheme, grid8).interior
    r = psi_T - zd2
    np.testing.assert_allclose(p[-1], dirichlet_laplacian_solve(r, unit16), rtol=1e-13)
    assert h_minus1_inner(r, r, unit16) == pytest.approx(unit16.h * np.dot(p[-1], r), rel=1e-10)
    norms = np.linalg.norm(p, axis=1)
    assert np.all(np.diff(norms) >= -1e-14)  # nonincreasing as t decreases


@pytest.mark.parametrize("theta", [1.0, 0.5, 0.75])
def test_interior_duality_exact(theta, stiff16, unit16, grid8, rng):
    u1, u2 = zero_controls(unit16, grid8)
    f = rng.standard_normal((9, 15))
    eta = rng.standard_normal((9, 15))
    res = duality_residual(ParabolicData(grid8, u1, u2, f=f), eta, stiff16, SchemeConfig(theta=theta))
    scale = unit16.h * grid8.tau * np.abs(f).sum() * 1.0
    assert res <= 1e-10 * max(scale, 1.0)


def test_duality_trivial_cases(stiff16, unit16, grid8):
    u1, u2 = zero_controls(unit16, grid8)
    assert duality_residual(ParabolicData(grid8, u1, u2), np.ones((9, 15)), stiff16) <= 1e-10
    u1, u2 = smooth_controls(unit16, grid8)
    assert duality_residual(ParabolicData(grid8, u1, u2), np.zeros((9, 15)), stiff16) <= 1e-10


def test_duality_refinement():
    residuals = []
    for n in (32, 64, 128):
        g = build_geometry(0, 1, n, 0.5)
        tg = TimeGrid(1.0, n)
        u1, u2 = smooth_controls(g, tg)
        eta = np.sin(np.pi * g.nodes(Tag.INTERIOR))[None, :] * (1 + tg.times[:, None])
        residuals.append(duality_residual(ParabolicData(tg, u1, u2), eta, assemble_mixed(g, 0.5)))
    assert residuals[0] > residuals[1] > residuals[2]


def test_duality_rejects_initial_state(stiff16, unit16, grid8):
    u1, u2 = zero_controls(unit16, grid8)
    with pytest.raises(ValueError):
        duality_residual(ParabolicData(grid8, u1, u2, psi0=np.ones(15)), np.ones((9, 15)), stiff16)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), s=st.sampled_from([0.25, 0.5, 0.75]))
def test_contraction_and_energy(seed, s):
    g = build_geometry(0, 1, 16, 0.5)
    tg = TimeGrid(0.2, 10)
    stiff = assemble_mixed(g, s)
    u1, u2 = zero_controls(g, tg)
    psi0 = np.random.default_rng(seed).uniform(-1, 1, 15)
    psi = ThetaStepper(stiff, SchemeConfig(), tg).forward(ParabolicData(tg, u1, u2, psi0=psi0))
    sup = np.abs(psi).max(axis=1)
    energy = g.h * np.sum(psi ** 2, axis=1)
    assert np.all(np.diff(sup) <= 1e-14)
    assert np.all(np.diff(energy) <= 1e-14)


def test_run_diagnostics(stiff16, unit16, grid8, rng):
    u1, u2 = zero_controls(unit16, grid8)
    traj = solve_forward(ParabolicData(grid8, u1, u2, psi0=rng.random(15)), stiff16)
    d = run_diagnostics(traj)
    assert set(d) == {"time", "mass", "energy", "min", "sup"}
    assert all(len(v) == 9 for v in d.values())
    assert np.all(np.diff(d["mass"]) < 0)


def test_grid_mismatch(stiff16, unit16, grid8):
    other = TimeGrid(1.0, 8)
    stepper = ThetaStepper(stiff16, SchemeConfig(), grid8)
    with pytest.raises(ValueError):
        stepper.forward(ParabolicData.zero(unit16, other))
    with pytest.raises(ValueError):
        solve_dual(np.zeros((5, 15)), stiff16, SchemeConfig(), grid8)
