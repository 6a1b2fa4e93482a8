"""Theta-scheme marches for the state, dual and adjoint equations.

Forward step (``P = I/tau + theta A``, ``Q = I/tau - (1 - theta) A``)::

    P psi^{m+1} = Q psi^m - B g^{m+theta} + f^{m+theta}

where ``B = [A_Ib, A_Ic]`` couples interior nodes to boundary/collar values
``g`` and ``x^{m+theta} = theta x^{m+1} + (1 - theta) x^m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .elliptic import SolverError
from .geometry import ConfigurationError, Tag, TimeGrid, Trajectory, TagMismatchError
from .operators import (MixedStiffness, dirichlet_laplacian_solve, nonlocal_normal_derivative,
                        normal_derivative)


@dataclass(frozen=True)
class SchemeConfig:
    theta: float = 1.0
    tol: float = 1e-10

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigurationError(f"theta must lie in [0.5, 1] (got {self.theta})")


@dataclass(frozen=True, eq=False)
class ParabolicData:
    """Time-indexed data, one row per time node ``t_0 .. t_M``."""

    time_grid: TimeGrid
    u1: np.ndarray
    u2: np.ndarray
    f: np.ndarray | None = None
    psi0: np.ndarray | None = None

    def __post_init__(self):
        rows = self.time_grid.n_steps + 1
        for name in ("u1", "u2", "f", "psi0"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.array(val, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            if name != "psi0" and (arr.ndim != 2 or arr.shape[0] != rows):
                raise TagMismatchError(f"{name} must have {rows} time rows, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.u1.shape[1] != 2:
            raise TagMismatchError("u1 needs two boundary values per time node")

    @classmethod
    def zero(cls, geom, time_grid: TimeGrid) -> "ParabolicData":
        rows = time_grid.n_steps + 1
        return cls(time_grid, np.zeros((rows, 2)), np.zeros((rows, geom.size(Tag.COLLAR))))


class ThetaStepper:
    """Factored theta-scheme operators for one stiffness, scheme and time grid."""

    def __init__(self, stiff: MixedStiffness, scheme: SchemeConfig, time_grid: TimeGrid):
        self.stiff = stiff
        self.scheme = scheme
        self.time_grid = time_grid
        tau, theta = time_grid.tau, scheme.theta
        n = stiff.n_unknowns
        self.P = np.eye(n) / tau + theta * stiff.A_II
        self.Q = np.eye(n) / tau - (1.0 - theta) * stiff.A_II
        try:
            self._chol = linalg.cho_factor(self.P, check_finite=False)
        except linalg.LinAlgError as exc:
            raise SolverError(f"theta-scheme matrix is not positive definite: {exc}") from exc

    @property
    def geom(self):
        return self.stiff.geom

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self._chol, rhs, check_finite=False)

    def couple(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        return self.stiff.A_Ib @ u1 + self.stiff.A_Ic @ u2

    def forward(self, data: ParabolicData) -> np.ndarray:
        """Interior states, shape ``(M + 1, n)``."""
        geom, M, theta = self.geom, self.time_grid.n_steps, self.scheme.theta
        if data.time_grid != self.time_grid:
            raise TagMismatchError("data and stepper use different time grids")
        if data.u2.shape[1] != geom.size(Tag.COLLAR):
            raise TagMismatchError("u2 does not match the collar size")
        n = self.stiff.n_unknowns
        psi = np.zeros((M + 1, n))
        if data.psi0 is not None:
            psi[0] = data.psi0
        drive = -(data.u1 @ self.stiff.A_Ib.T + data.u2 @ self.stiff.A_Ic.T)
        if data.f is not None:
            drive = drive + data.f
        for m in range(M):
            rhs = self.Q @ psi[m] + theta * drive[m + 1] + (1.0 - theta) * drive[m]
            psi[m + 1] = self.solve(rhs)
        return psi

    def dual(self, eta: np.ndarray, terminal: np.ndarray | None = None) -> np.ndarray:
        """Backward theta march of ``-phi_t + L phi = eta`` with homogeneous boundary/collar data."""
        M, theta = self.time_grid.n_steps, self.scheme.theta
        phi = np.zeros((M + 1, self.stiff.n_unknowns))
        if terminal is not None:
            phi[M] = terminal
        for m in range(M - 1, -1, -1):
            rhs = self.Q @ phi[m + 1] + theta * eta[m] + (1.0 - theta) * eta[m + 1]
            phi[m] = self.solve(rhs)
        return phi

    def transpose(self, loads: np.ndarray) -> np.ndarray:
        """Exact adjoint of :meth:`forward` with respect to the states ``psi^1 .. psi^M``.

        Given ``loads[m] = dPhi/dpsi^m`` returns multipliers with
        ``P lam^m = Q lam^{m+1} + loads[m]`` (``lam^{M+1} = 0``), ``m = M .. 0``.
        """
        M = self.time_grid.n_steps
        lam = np.zeros((M + 2, self.stiff.n_unknowns))
        for m in range(M, -1, -1):
            lam[m] = self.solve(self.Q @ lam[m + 1] + loads[m])
        return lam[:M + 1]

    def control_sensitivity(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``dPhi/du1`` and ``dPhi/du2`` per time node from forward multipliers ``lam``."""
        M, theta = self.time_grid.n_steps, self.scheme.theta
        mixed = np.zeros_like(lam)
        # u(t_0) only enters the first step through its explicit weight.
        mixed[1:] += theta * lam[1:]
        mixed[:M] += (1.0 - theta) * lam[1:]
        return -mixed @ self.stiff.A_Ib, -mixed @ self.stiff.A_Ic

    def trajectory(self, interior: np.ndarray, u1=None, u2=None) -> Trajectory:
        geom = self.geom
        frames = np.zeros((interior.shape[0], geom.n_nodes))
        frames[:, geom.interior_index] = interior
        if u1 is not None:
            frames[:, geom.boundary_index] = u1
        if u2 is not None:
            frames[:, geom.collar_index] = u2
        return Trajectory(geom, self.time_grid, frames)


def solve_forward(data: ParabolicData, stiff: MixedStiffness, scheme: SchemeConfig = SchemeConfig(),
                  stepper: ThetaStepper | None = None) -> Trajectory:
    stepper = stepper or ThetaStepper(stiff, scheme, data.time_grid)
    return stepper.trajectory(stepper.forward(data), data.u1, data.u2)


def solve_dual(eta: np.ndarray, stiff: MixedStiffness, scheme: SchemeConfig, time_grid: TimeGrid,
               terminal: np.ndarray | None = None, stepper: ThetaStepper | None = None) -> Trajectory:
    """Backward solve from ``phi(T) = terminal`` (zero by default); frames indexed forward in time."""
    stepper = stepper or ThetaStepper(stiff, scheme, time_grid)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (time_grid.n_steps + 1, stiff.n_unknowns):
        raise TagMismatchError(f"eta must have shape {(time_grid.n_steps + 1, stiff.n_unknowns)}")
    return stepper.trajectory(stepper.dual(eta, terminal))


def adjoint_J1(state: Trajectory, zd1: np.ndarray, stepper: ThetaStepper) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the tracking cost; returns ``(p, lam)`` on interior nodes.

    ``p`` solves ``P p^m = Q p^{m+1} + (zd1^m - psi^m)`` backward from ``p^{M+1} = 0``,
    which is the transposed forward march for the rectangle-rule misfit, so
    ``lam = -tau h p`` are the exact multipliers.
    """
    geom, grid = stepper.geom, stepper.time_grid
    zd1 = np.asarray(zd1, dtype=float)
    if zd1.shape != state.interior.shape:
        raise TagMismatchError(f"zd1 must have shape {state.interior.shape}, got {zd1.shape}")
    scale = grid.tau * geom.h
    lam = stepper.transpose(scale * (state.interior - zd1))
    return -lam / scale, lam


def adjoint_J2(state_T: np.ndarray, zd2: np.ndarray, stepper: ThetaStepper) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the final-time H^-1 cost; returns ``(p, lam)`` on interior nodes.

    ``p(T) = (-Delta_D)^-1 (psi(T) - zd2)`` exactly, ``P p^m = Q p^{m+1}`` below it.
    The exact multipliers satisfy ``lam^m = h P^-1 p^m``.
    """
    geom, M = stepper.geom, stepper.time_grid.n_steps
    state_T, zd2 = np.asarray(state_T, dtype=float), np.asarray(zd2, dtype=float)
    if state_T.shape != zd2.shape or state_T.shape != (stepper.stiff.n_unknowns,):
        raise TagMismatchError("final state and target must both be interior grid functions")
    rho = dirichlet_laplacian_solve(state_T - zd2, geom)
    loads = np.zeros((M + 1, rho.size))
    loads[M] = geom.h * rho
    lam = stepper.transpose(loads)
    p = lam @ stepper.P / geom.h
    p[M] = rho
    return p, lam


def solve_adjoint_J1(state: Trajectory, zd1: np.ndarray, stiff: MixedStiffness,
                     scheme: SchemeConfig = SchemeConfig()) -> Trajectory:
    stepper = ThetaStepper(stiff, scheme, state.time_grid)
    return stepper.trajectory(adjoint_J1(state, zd1, stepper)[0])


def solve_adjoint_J2(state_T: np.ndarray, zd2: np.ndarray, stiff: MixedStiffness, scheme: SchemeConfig,
                     time_grid: TimeGrid) -> Trajectory:
    stepper = ThetaStepper(stiff, scheme, time_grid)
    return stepper.trajectory(adjoint_J2(state_T, zd2, stepper)[0])


def theta_levels(values: np.ndarray, theta: float, forward: bool = True) -> np.ndarray:
    """Step-wise weighted levels: ``theta x^{m+1} + (1-theta) x^m`` (forward) or the mirrored dual weighting."""
    values = np.asarray(values, dtype=float)
    if forward:
        return theta * values[1:] + (1.0 - theta) * values[:-1]
    return theta * values[:-1] + (1.0 - theta) * values[1:]


def duality_residual(data: ParabolicData, eta: np.ndarray, stiff: MixedStiffness,
                     scheme: SchemeConfig = SchemeConfig(), terminal: np.ndarray | None = None) -> float:
    """Defect of the space-time transposition identity.

    ``int_Q psi eta = int_Q f phi - <psi(T), phi(T)> - int_Gamma u1 d_nu phi - int_Sigma u2 N_s phi``
    with ``phi`` the dual solution for ``eta`` and terminal value ``terminal``
    (zero by default). Time sums use the pairing under which the two marches are
    exact transposes: forward data at level ``m + theta`` meet ``phi^{m+1}`` and
    ``psi^m`` meets the dual forcing at its own weighted level. The interior part is
    therefore exact; what remains is the consistency error of ``d_nu`` and ``N_s``
    (plus an ``O(tau)`` term when ``terminal`` is given).
    """
    if data.psi0 is not None and np.any(data.psi0):
        raise ValueError("duality residual expects a zero initial state")
    grid, geom, h, tau = data.time_grid, stiff.geom, stiff.geom.h, data.time_grid.tau
    theta = scheme.theta
    stepper = ThetaStepper(stiff, scheme, grid)
    eta = np.asarray(eta, dtype=float)
    psi = stepper.forward(data)
    phi = stepper.dual(eta, terminal)
    lhs = tau * h * np.sum(psi[:-1] * theta_levels(eta, theta, forward=False))
    rhs = 0.0
    if data.f is not None:
        rhs += tau * h * np.sum(theta_levels(data.f, theta) * phi[1:])
    if terminal is not None:
        rhs -= h * np.dot(psi[-1], phi[-1])
    frames = stepper.trajectory(phi).frames
    u1, u2 = theta_levels(data.u1, theta), theta_levels(data.u2, theta)
    for m in range(grid.n_steps):
        dn = normal_derivative(frames[m + 1], geom).values
        ns = nonlocal_normal_derivative(frames[m + 1], stiff).values
        rhs -= tau * (np.dot(u1[m], dn) + h * np.dot(u2[m], ns))
    return float(abs(lhs - rhs))


def run_diagnostics(traj: Trajectory) -> dict:
    """Mass, energy, minimum and sup-norm histories over interior nodes."""
    psi, h = traj.interior, traj.geom.h
    return {
        "time": traj.time_grid.times,
        "mass": h * psi.sum(axis=1),
        "energy": h * np.sum(psi ** 2, axis=1),
        "min": psi.min(axis=1),
        "sup": np.abs(psi).max(axis=1),
    }
