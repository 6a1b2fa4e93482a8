"""Low spectrum of the interior operator and discrete semigroup audits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .geometry import TimeGrid
from .operators import MixedStiffness, assemble_mixed
from .parabolic import ParabolicData, SchemeConfig, ThetaStepper


class EigenSolverError(RuntimeError):
    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True, eq=False)
class SpectralReport:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # rows are h-orthonormal interior vectors
    residuals: np.ndarray
    lambda1_local: float

    def table(self) -> list[tuple[int, float, float]]:
        return [(j + 1, float(lam), float(r)) for j, (lam, r) in enumerate(zip(self.eigenvalues, self.residuals))]


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())
    return -v if v[nz[0]] < 0 else v


def low_spectrum(stiff: MixedStiffness, k: int = 6, tol: float = 1e-10) -> SpectralReport:
    """``k`` smallest eigenpairs by shift-invert Lanczos around zero.

    Eigenvectors are normalized to ``h * v.v = 1`` with their first
    significant component positive. Residuals are relative,
    ``||A v - lam v|| / (lam ||v||)``.
    """
    A, h = stiff.A_II, stiff.geom.h
    n = A.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}] (got {k})")
    if k >= n - 1:
        lam, vecs = linalg.eigh(A, subset_by_index=[0, k - 1])
    else:
        try:
            lam, vecs = eigsh(A, k=k, sigma=0.0, which="LM", tol=tol, maxiter=10 * n,
                              v0=np.ones(n))
        except ArpackNoConvergence as exc:
            raise EigenSolverError(f"eigensolver did not converge: {exc}",
                                   residuals=getattr(exc, "eigenvalues", None)) from exc
    order = np.argsort(lam)
    lam, vecs = lam[order], vecs[:, order]
    # One block inverse-iteration pass with Rayleigh-Ritz tightens residuals to rounding level.
    basis, _ = np.linalg.qr(linalg.cho_solve(linalg.cho_factor(A), vecs))
    lam, rot = linalg.eigh(basis.T @ A @ basis)
    refined = basis @ rot
    vecs = np.array([_fix_sign(refined[:, j]) / np.sqrt(h) for j in range(k)])
    res = np.array([np.linalg.norm(A @ v - l * v) / (abs(l) * np.linalg.norm(v)) for l, v in zip(lam, vecs)])
    if np.any(res > 1e-8):
        raise EigenSolverError(f"eigenpair residuals too large: {res.max():.3e}", residuals=res)
    local = stiff if stiff.order is None else assemble_mixed(stiff.geom, None)
    lam1_local = float(linalg.eigvalsh(local.A_II, subset_by_index=[0, 0])[0])
    return SpectralReport(lam, vecs, res, lam1_local)


@dataclass
class AuditResult:
    passed: bool
    worst_margin: float
    trials: int


@dataclass
class SemigroupAudit:
    trials: int
    results: dict = field(default_factory=dict)
    spike: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def as_dict(self) -> dict:
        out = {"trials": self.trials, "passed": self.passed}
        for name, r in self.results.items():
            out[name] = {"passed": r.passed, "worst_margin": r.worst_margin}
        if self.spike:
            out["spike"] = self.spike
        return out


def semigroup_audit(stiff: MixedStiffness, scheme: SchemeConfig, time_grid: TimeGrid, trials: int,
                    seed: int = 0, atol: float = 1e-12) -> SemigroupAudit:
    """Positivity, L-infinity contraction and energy decay over random initial data.

    Margins are the largest violation found (negative or zero means no violation).
    The spike probe records ``max|psi(t)| * sqrt(t)`` for a normalized discrete delta;
    it is a report, not a pass/fail check.
    """
    audit = SemigroupAudit(trials)
    if trials <= 0:
        return audit
    stepper = ThetaStepper(stiff, scheme, time_grid)
    geom = stiff.geom
    zero = ParabolicData.zero(geom, time_grid)
    n = stiff.n_unknowns
    seeds = np.random.SeedSequence(seed).spawn(trials)
    pos, contr, energy = -np.inf, -np.inf, -np.inf
    for ss in seeds:
        rng = np.random.default_rng(ss)
        psi0 = rng.random(n)
        psi = stepper.forward(ParabolicData(time_grid, zero.u1, zero.u2, psi0=psi0))
        pos = max(pos, float(-psi.min()))
        signed = stepper.forward(ParabolicData(time_grid, zero.u1, zero.u2, psi0=2 * psi0 - 1))
        sup = np.abs(signed).max(axis=1)
        contr = max(contr, float(np.max(np.diff(sup))))
        en = np.sum(signed ** 2, axis=1) * geom.h
        energy = max(energy, float(np.max(np.diff(en))))
    audit.results["positivity"] = AuditResult(pos <= atol, pos, trials)
    audit.results["linf_contraction"] = AuditResult(contr <= atol, contr, trials)
    audit.results["energy_decay"] = AuditResult(energy <= atol, energy, trials)

    spike0 = np.zeros(n)
    spike0[n // 2] = 1.0 / geom.h
    psi = stepper.forward(ParabolicData(time_grid, zero.u1, zero.u2, psi0=spike0))
    t = time_grid.times[1:]
    sup = np.abs(psi[1:]).max(axis=1)
    audit.spike = {
        "sup_decreasing": bool(np.all(np.diff(sup) <= atol)),
        "scaled_max": float(np.max(sup * np.sqrt(t))),
        "scaled_min": float(np.min(sup * np.sqrt(t))),
    }
    return audit
