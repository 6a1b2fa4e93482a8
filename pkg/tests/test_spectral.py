import numpy as np
import pytest

from mixedctl.geometry import TimeGrid, build_geometry
from mixedctl.operators import assemble_mixed
from mixedctl.parabolic import SchemeConfig
from mixedctl.spectral import low_spectrum, semigroup_audit


def test_local_spectrum_matches_dirichlet():
    g = build_geometry(0, 1, 256, 0.5)
    rep = low_spectrum(assemble_mixed(g, None), k=3)
    j = np.arange(1, 4)
    assert np.all(np.abs(rep.eigenvalues / (j ** 2 * np.pi ** 2) - 1) <= 1e-2)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_mixed_above_local_and_positive(s, unit64):
    rep = low_spectrum(assemble_mixed(unit64, s), k=4)
    assert rep.eigenvalues[0] > rep.lambda1_local > 0
    assert np.all(np.diff(rep.eigenvalues) >= 0)
    assert rep.residuals.max() <= 1e-8
    gram = unit64.h * rep.eigenvectors @ rep.eigenvectors.T
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)


def test_sign_convention_reproducible(stiff64):
    a, b = low_spectrum(stiff64, k=5), low_spectrum(stiff64, k=5)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)
    for v in a.eigenvectors:
        first = v[np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())[0]]
        assert first > 0


def test_dense_path_for_tiny_grids(stiff16):
    rep = low_spectrum(stiff16, k=15)
    np.testing.assert_allclose(rep.eigenvalues, np.linalg.eigvalsh(stiff16.A_II), rtol=1e-12)
    with pytest.raises(ValueError):
        low_spectrum(stiff16, k=16)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_lambda1_converges_under_refinement(s):
    lam = [low_spectrum(assemble_mixed(build_geometry(0, 1, n, 0.5), s), k=1).eigenvalues[0]
           for n in (32, 64, 128, 256)]
    steps = np.abs(np.diff(lam))
    assert np.all(steps[1:] < steps[:-1])


def test_audit_implicit_euler_passes(stiff64):
    audit = semigroup_audit(stiff64, SchemeConfig(theta=1.0), TimeGrid(1.0, 50), trials=20, seed=3)
    assert audit.passed
    assert set(audit.results) == {"positivity", "linf_contraction", "energy_decay"}
    assert audit.spike["sup_decreasing"]
    assert np.isfinite(audit.spike["scaled_max"])


def test_audit_crank_nicolson_detects_violation(stiff64):
    audit = semigroup_audit(stiff64, SchemeConfig(theta=0.5), TimeGrid(1.0, 5), trials=10, seed=3)
    assert not audit.passed
    assert audit.results["linf_contraction"].worst_margin > 0


def test_audit_zero_trials(stiff16, grid8):
    audit = semigroup_audit(stiff16, SchemeConfig(), grid8, trials=0)
    assert audit.results == {} and audit.passed and audit.as_dict()["trials"] == 0


def test_audit_deterministic(stiff16, grid8):
    a = semigroup_audit(stiff16, SchemeConfig(), grid8, trials=5, seed=11).as_dict()
    b = semigroup_audit(stiff16, SchemeConfig(), grid8, trials=5, seed=11).as_dict()
    assert a == b
