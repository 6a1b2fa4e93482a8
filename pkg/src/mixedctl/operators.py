"""Discrete mixed operator ``-Laplacian + fractional Laplacian`` on a uniform 1D grid.

All operators here act pointwise (units 1/length^2): the L2 pairing of grid
functions is the rectangle rule with weight ``h`` per node, so the discrete
weak form of ``L w = f`` is ``h * A_II w = h * f``.

The fractional part uses the symmetrized second difference

    (-Delta)^s u(x) = C * int_0^inf (2u(x) - u(x+r) - u(x-r)) r^(-1-2s) dr

with ``u`` replaced by its piecewise-linear interpolant for ``r >= h`` and by
the quadratic ``(2u_i - u_{i+1} - u_{i-1}) r^2 / h^2`` for ``r < h``. Every
cell integral has a closed form, so the weights are positive and exactly
symmetric. Grid values beyond the collar are zero; their contribution enters
the diagonal as a tail term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import gamma

from .geometry import ConfigurationError, Geometry1D, GridFunction, Tag, TagMismatchError


@dataclass(frozen=True)
class FractionalOrder:
    s: float

    def __post_init__(self):
        if not 0.0 < float(self.s) < 1.0:
            raise ValueError(f"fractional order s must lie in (0, 1), got {self.s}")
        object.__setattr__(self, "s", float(self.s))

    @property
    def very_weak_valid(self) -> bool:
        return self.s <= 0.75


def _order(s) -> FractionalOrder:
    return s if isinstance(s, FractionalOrder) else FractionalOrder(s)


def kernel_constant(s) -> float:
    """Normalization constant ``C_{1,s}`` of the one-dimensional fractional Laplacian."""
    s = _order(s).s
    return s * 2.0 ** (2 * s) * gamma((2 * s + 1) / 2) / (math.sqrt(math.pi) * gamma(1 - s))


def getoor_constant(s) -> float:
    """Value of ``(-Delta)^s (1 - x^2)_+^s`` on ``(-1, 1)``."""
    s = _order(s).s
    return 2.0 ** (2 * s) * gamma(1 + s) * gamma(s + 0.5) / gamma(0.5)


def _power_step(k: np.ndarray, p: float) -> np.ndarray:
    """``((k+1)^p - k^p) / p`` for ``k >= 1``, with the ``p -> 0`` limit ``log(1 + 1/k)``."""
    lg = np.log1p(1.0 / k)
    if abs(p) < 1e-12:
        return lg
    return k ** p * np.expm1(p * lg) / p


@dataclass(frozen=True)
class KernelProfile:
    """Dimensionless cell integrals of ``r^(-1-2s)``, to be scaled by ``h^(-2s)``.

    ``near[k]`` is the hat weight on the nearer end of cell ``[k, k+1]``,
    ``far[k]`` the weight on the farther end (``far[0]`` is the quadratic
    near-field term). ``weights[j]`` is the total weight of offset ``j``.
    """

    s: float
    near: np.ndarray
    far: np.ndarray
    weights: np.ndarray

    def far_field(self, J: np.ndarray) -> np.ndarray:
        """Kernel mass beyond a truncation end ``J >= 1`` cells away, ``J^(-2s) / (2s)``.

        At ``J = 0`` (a row on the truncation end itself) the integral diverges;
        the hat-regularized value ``far[0] + 1 / (2s)`` is used instead.
        """
        J = np.asarray(J, dtype=float)
        safe = np.where(J > 0, J, 1.0)
        return np.where(J > 0, safe ** (-2 * self.s) / (2 * self.s), self.far[0] + 1.0 / (2 * self.s))


def kernel_profile(s, n: int) -> KernelProfile:
    s = _order(s).s
    k = np.arange(1, n + 1, dtype=float)
    i0 = _power_step(k, -2 * s)           # int_k^{k+1} r^(-1-2s) dr
    i1 = _power_step(k, 1 - 2 * s)        # int_k^{k+1} r^(-2s) dr
    near = np.concatenate([[np.nan], (1 + k) * i0 - i1])
    far = np.concatenate([[1.0 / (2 - 2 * s)], i1 - k * i0])
    weights = np.zeros(n + 1)
    weights[1:] = near[1:] + far[:-1]
    return KernelProfile(s, near, far, weights)


@dataclass(frozen=True, eq=False)
class MixedStiffness:
    geom: Geometry1D
    order: FractionalOrder | None
    C: float
    A_II: np.ndarray = field(repr=False)
    A_Ib: np.ndarray = field(repr=False)
    A_Ic: np.ndarray = field(repr=False)
    L_loc_II: np.ndarray = field(repr=False)
    L_loc_Ib: np.ndarray = field(repr=False)
    L_frac_II: np.ndarray = field(repr=False)
    L_frac_Ib: np.ndarray = field(repr=False)
    L_frac_Ic: np.ndarray = field(repr=False)
    tail: np.ndarray = field(repr=False)
    frac_full: np.ndarray | None = field(repr=False, default=None)
    profile: KernelProfile | None = field(repr=False, default=None)

    @property
    def s(self) -> float | None:
        return None if self.order is None else self.order.s

    @property
    def n_unknowns(self) -> int:
        return self.A_II.shape[0]

    def apply(self, u: GridFunction | np.ndarray) -> np.ndarray:
        """Interior values of the mixed operator applied to an extended-grid function."""
        vals = _extended_values(u, self.geom)
        g = self.geom
        return (self.A_II @ vals[g.interior_index] + self.A_Ib @ vals[g.boundary_index]
                + self.A_Ic @ vals[g.collar_index])

    def apply_fractional(self, u: GridFunction | np.ndarray) -> np.ndarray:
        """Fractional part (tail included) at every extended-grid node."""
        if self.frac_full is None:
            return np.zeros(self.geom.n_nodes)
        return self.frac_full @ _extended_values(u, self.geom)


def _extended_values(u, geom: Geometry1D) -> np.ndarray:
    if isinstance(u, GridFunction):
        if u.tag is not Tag.EXTENDED:
            raise TagMismatchError(f"expected an extended grid function, got {u.tag.value}")
        if u.geom is not geom:
            raise TagMismatchError("grid function lives on a different geometry")
        return u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (geom.n_nodes,):
        raise TagMismatchError(f"expected {geom.n_nodes} extended values, got shape {u.shape}")
    return u


def assemble_local(geom: Geometry1D) -> tuple[np.ndarray, np.ndarray]:
    """Second-difference stencil ``(-1, 2, -1) / h^2`` and its boundary coupling."""
    n = geom.n_interior - 1
    inv_h2 = 1.0 / geom.h ** 2
    L_II = (np.diag(np.full(n, 2.0 * inv_h2)) - np.diag(np.full(n - 1, inv_h2), 1)
            - np.diag(np.full(n - 1, inv_h2), -1))
    L_Ib = np.zeros((n, 2))
    L_Ib[0, 0] = -inv_h2
    L_Ib[-1, 1] = -inv_h2
    return L_II, L_Ib


def _fractional_full(geom: Geometry1D, order: FractionalOrder):
    if geom.n_collar < 1:
        raise ConfigurationError("fractional assembly needs at least one collar cell per side")
    N = geom.n_nodes
    profile = kernel_profile(order.s, N)
    scale = kernel_constant(order) * geom.h ** (-2 * order.s)
    W = linalg.toeplitz(profile.weights[:N])
    idx = np.arange(N)
    # Data vanish beyond the truncation ends, so the end nodes carry only the half hat
    # lying inside the grid and the far field is the exact integral past each end.
    half = profile.far[idx[1:] - 1]
    W[1:, 0] = W[0, 1:] = half
    W[:-1, -1] = W[-1, :-1] = half[::-1]
    W[0, 0] = W[-1, -1] = 0.0
    offdiag = scale * W
    tail = scale * (profile.far_field(idx) + profile.far_field(N - 1 - idx))
    full = -offdiag
    full[idx, idx] = offdiag.sum(axis=1) + tail
    return full, tail, profile


def assemble_fractional(geom: Geometry1D, s):
    """Fractional blocks ``(L_frac_II, L_frac_Ib, L_frac_Ic, tail)``.

    ``L_frac_II`` excludes the far-field tail, which is returned separately
    for the interior nodes.
    """
    order = _order(s)
    full, tail, _ = _fractional_full(geom, order)
    I, B, Cc = geom.interior_index, geom.boundary_index, geom.collar_index
    L_II = full[np.ix_(I, I)].copy()
    L_II[np.diag_indices_from(L_II)] -= tail[I]
    return L_II, full[np.ix_(I, B)], full[np.ix_(I, Cc)], tail[I]


def assemble_mixed(geom: Geometry1D, s=None, fractional: bool = True) -> MixedStiffness:
    """Mixed operator blocks. ``fractional=False`` (or ``s=None``) keeps the local part only."""
    L_II, L_Ib = assemble_local(geom)
    n, nc = L_II.shape[0], geom.size(Tag.COLLAR)
    if not fractional or s is None:
        zeros = np.zeros((n, n))
        return MixedStiffness(geom, None if s is None else _order(s), 0.0, L_II.copy(), L_Ib.copy(),
                              np.zeros((n, nc)), L_II, L_Ib, zeros, np.zeros((n, 2)),
                              np.zeros((n, nc)), np.zeros(n))
    order = _order(s)
    full, tail_ext, profile = _fractional_full(geom, order)
    I, B, Cc = geom.interior_index, geom.boundary_index, geom.collar_index
    tail = tail_ext[I]
    F_II = full[np.ix_(I, I)]
    L_frac_II = F_II.copy()
    L_frac_II[np.diag_indices_from(L_frac_II)] -= tail
    A_II = L_II + F_II
    return MixedStiffness(
        geom=geom, order=order, C=kernel_constant(order),
        A_II=A_II, A_Ib=L_Ib + full[np.ix_(I, B)], A_Ic=full[np.ix_(I, Cc)].copy(),
        L_loc_II=L_II, L_loc_Ib=L_Ib, L_frac_II=L_frac_II,
        L_frac_Ib=full[np.ix_(I, B)].copy(), L_frac_Ic=full[np.ix_(I, Cc)].copy(),
        tail=tail, frac_full=full, profile=profile)


# ---------------------------------------------------------------- pairings


@dataclass(frozen=True)
class H1NormReport:
    dirichlet_energy: float
    fractional_energy: float

    @property
    def total(self) -> float:
        return self.dirichlet_energy + self.fractional_energy


def bilinear_F(u, v, stiff: MixedStiffness) -> float:
    """Discrete fractional energy form over the extended grid plus far-field pairs."""
    geom = stiff.geom
    uu, vv = _extended_values(u, geom), _extended_values(v, geom)
    if stiff.frac_full is None:
        return 0.0
    offdiag = -stiff.frac_full.copy()
    np.fill_diagonal(offdiag, 0.0)
    du = uu[:, None] - uu[None, :]
    dv = vv[:, None] - vv[None, :]
    far = np.diag(stiff.frac_full) - offdiag.sum(axis=1)
    return float(geom.h * (0.5 * np.sum(offdiag * (du * dv)) + np.sum(far * (uu * vv))))


def dirichlet_energy(u, v, geom: Geometry1D) -> float:
    """``int_Omega u' v'`` with forward differences over the cells of the closed interval."""
    uu, vv = _extended_values(u, geom), _extended_values(v, geom)
    lo, hi = geom.boundary_index
    du = np.diff(uu[lo:hi + 1]) / geom.h
    dv = np.diff(vv[lo:hi + 1]) / geom.h
    return float(geom.h * np.sum(du * dv))


def h1_norm_report(u, stiff: MixedStiffness) -> H1NormReport:
    return H1NormReport(dirichlet_energy(u, u, stiff.geom), bilinear_F(u, u, stiff))


def _exterior_weights(stiff: MixedStiffness) -> np.ndarray:
    """Collar-by-closed-interval weights of the nonlocal normal derivative (unscaled)."""
    geom, prof = stiff.geom, stiff.profile
    col = geom.collar_index
    omega = np.concatenate([[geom.boundary_index[0]], geom.interior_index, [geom.boundary_index[1]]])
    J = np.abs(col[:, None] - omega[None, :])
    W = prof.weights[J]
    left = col < geom.boundary_index[0]
    # Boundary nodes carry only the half hat lying inside the interval.
    W[left, 0] = prof.near[J[left, 0]]
    W[left, -1] = prof.far[J[left, -1] - 1]
    W[~left, -1] = prof.near[J[~left, -1]]
    W[~left, 0] = prof.far[J[~left, 0] - 1]
    return W, omega


def nonlocal_normal_derivative(u, stiff: MixedStiffness) -> GridFunction:
    """``C int_Omega (u(x) - u(y)) |x - y|^(-1-2s) dy`` at each collar node, u piecewise linear."""
    geom = stiff.geom
    vals = _extended_values(u, geom)
    if stiff.profile is None:
        return GridFunction(geom, np.zeros(geom.size(Tag.COLLAR)), Tag.COLLAR)
    W, omega = _exterior_weights(stiff)
    scale = stiff.C * geom.h ** (-2 * stiff.s)
    uc = vals[geom.collar_index]
    out = scale * (W.sum(axis=1) * uc - W @ vals[omega])
    return GridFunction(geom, out, Tag.COLLAR)


def normal_derivative(u, geom: Geometry1D) -> GridFunction:
    """Outward normal derivative at both ends, second-order one-sided differences."""
    if geom.n_interior < 4:
        raise ConfigurationError("normal derivative stencil needs n_interior >= 4")
    vals = _extended_values(u, geom)
    lo, hi = geom.boundary_index
    h = geom.h
    left = -(-3 * vals[lo] + 4 * vals[lo + 1] - vals[lo + 2]) / (2 * h)
    right = (3 * vals[hi] - 4 * vals[hi - 1] + vals[hi - 2]) / (2 * h)
    return GridFunction(geom, [left, right], Tag.BOUNDARY)


def _interior_values(u, geom: Geometry1D) -> np.ndarray:
    if isinstance(u, GridFunction):
        if u.tag is not Tag.INTERIOR:
            raise TagMismatchError(f"expected an interior grid function, got {u.tag.value}")
        return u.values
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != geom.size(Tag.INTERIOR):
        raise TagMismatchError(f"expected {geom.size(Tag.INTERIOR)} interior values, got shape {u.shape}")
    return u


def dirichlet_laplacian_solve(rhs: np.ndarray, geom: Geometry1D) -> np.ndarray:
    """Solve ``-Delta_h rho = rhs`` with homogeneous Dirichlet data (tridiagonal SPD)."""
    n = geom.n_interior - 1
    inv_h2 = 1.0 / geom.h ** 2
    banded = np.empty((2, n))
    banded[0, 0] = 0.0
    banded[0, 1:] = -inv_h2
    banded[1, :] = 2.0 * inv_h2
    return linalg.solveh_banded(banded, rhs, check_finite=False)


def h_minus1_inner(u, v, geom: Geometry1D) -> float:
    """``<(-Delta_D)^-1 u, v>`` with the rectangle rule."""
    uu, vv = _interior_values(u, geom), _interior_values(v, geom)
    rho = dirichlet_laplacian_solve(uu, geom)
    return float(geom.h * np.dot(rho, vv))


def ibp_residual(phi, psi, stiff: MixedStiffness) -> float:
    """Defect of the nonlocal integration-by-parts identity on the grid.

    Left side: energy pairs with at least one interior node (far field included).
    Right side: ``int_Omega psi (-Delta)^s phi + int_collar psi N_s phi``.
    """
    geom = stiff.geom
    ph, ps = _extended_values(phi, geom), _extended_values(psi, geom)
    if stiff.frac_full is None:
        return 0.0
    h = geom.h
    I = geom.interior_index
    inside = np.zeros(geom.n_nodes, dtype=bool)
    inside[I] = True
    offdiag = -stiff.frac_full.copy()
    np.fill_diagonal(offdiag, 0.0)
    mask = inside[:, None] | inside[None, :]
    d_phi = ph[:, None] - ph[None, :]
    d_psi = ps[:, None] - ps[None, :]
    far = np.diag(stiff.frac_full) - offdiag.sum(axis=1)
    lhs = h * (0.5 * np.sum((offdiag * mask) * (d_phi * d_psi)) + np.sum(far[I] * ph[I] * ps[I]))
    rhs = h * np.dot(ps[I], (stiff.frac_full @ ph)[I])
    rhs += h * np.dot(ps[geom.collar_index], nonlocal_normal_derivative(ph, stiff).values)
    return float(abs(lhs - rhs))


# ---------------------------------------------------------------- diagnostics


def operator_diagnostics(stiff: MixedStiffness) -> dict:
    """Structural checks: symmetry, M-matrix sign pattern, row sums, extremal eigenvalues."""
    A = stiff.A_II
    off = A - np.diag(np.diag(A))
    violations = int(np.sum(off > 0) + np.sum(stiff.A_Ib > 0) + np.sum(stiff.A_Ic > 0)
                     + np.sum(np.diag(A) <= 0))
    rowsum = np.diag(A) + off.sum(axis=1) + stiff.A_Ib.sum(axis=1) + stiff.A_Ic.sum(axis=1)
    rel = np.abs(rowsum - stiff.tail) / np.abs(np.diag(A))
    eig = linalg.eigvalsh(A)
    eig_loc = linalg.eigvalsh(stiff.L_loc_II)
    return {
        "s": stiff.s,
        "n_interior": stiff.geom.n_interior,
        "n_collar": stiff.geom.n_collar,
        "kernel_constant": stiff.C,
        "symmetry_defect": float(np.max(np.abs(A - A.T))),
        "m_matrix_violations": violations,
        "row_sum_residual_max": float(rel.max()),
        "tail_min": float(stiff.tail.min()),
        "tail_max": float(stiff.tail.max()),
        "lambda_min": float(eig[0]),
        "lambda_max": float(eig[-1]),
        "lambda_min_local": float(eig_loc[0]),
    }


def export_coo(matrix: np.ndarray, path: str | Path) -> Path:
    """Write nonzero entries as ``row col value`` lines."""
    path = Path(path)
    rows, cols = np.nonzero(matrix)
    with path.open("w", newline="\n") as fh:
        for r, c in zip(rows, cols):
            fh.write(f"{r} {c} {matrix[r, c]:.17g}\n")
    return path
