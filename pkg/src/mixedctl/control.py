"""Boundary/exterior optimal control: costs, adjoint gradients, projected gradient descent.

Controls live at the time nodes ``t_0 .. t_M``. The control norm is

    ||(u1, u2)||^2 = sum_m tau (u1_l^2 + u1_r^2) + sum_m tau h sum_collar u2^2

and the tracking misfit uses the same rectangle rule, ``tau h`` per space-time node.
Gradients are Riesz representatives in this inner product, computed from the
transposed forward march, so they are exact for the discrete cost.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Tag, TimeGrid, Trajectory, TagMismatchError
from .operators import MixedStiffness, h_minus1_inner
from .parabolic import ParabolicData, SchemeConfig, ThetaStepper, adjoint_J1, adjoint_J2

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    J1 = "j1"
    J2 = "j2"


@dataclass(frozen=True, eq=False)
class ControlPair:
    time_grid: TimeGrid
    u1: np.ndarray
    u2: np.ndarray

    def __post_init__(self):
        rows = self.time_grid.n_steps + 1
        u1, u2 = np.array(self.u1, dtype=float), np.array(self.u2, dtype=float)
        if u1.shape != (rows, 2) or u2.ndim != 2 or u2.shape[0] != rows:
            raise TagMismatchError(f"controls need {rows} time rows (u1 {u1.shape}, u2 {u2.shape})")
        if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
            raise ValueError("controls must be finite")
        u1.setflags(write=False)
        u2.setflags(write=False)
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)

    @classmethod
    def zeros(cls, geom, time_grid: TimeGrid) -> "ControlPair":
        rows = time_grid.n_steps + 1
        return cls(time_grid, np.zeros((rows, 2)), np.zeros((rows, geom.size(Tag.COLLAR))))

    @classmethod
    def random(cls, geom, time_grid: TimeGrid, rng: np.random.Generator, scale: float = 1.0) -> "ControlPair":
        rows = time_grid.n_steps + 1
        return cls(time_grid, scale * rng.standard_normal((rows, 2)),
                   scale * rng.standard_normal((rows, geom.size(Tag.COLLAR))))

    def __add__(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(self.time_grid, self.u1 + other.u1, self.u2 + other.u2)

    def __sub__(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(self.time_grid, self.u1 - other.u1, self.u2 - other.u2)

    def scaled(self, a: float) -> "ControlPair":
        return ControlPair(self.time_grid, a * self.u1, a * self.u2)

    def inner(self, other: "ControlPair", h: float) -> float:
        tau = self.time_grid.tau
        return float(tau * np.sum(self.u1 * other.u1) + tau * h * np.sum(self.u2 * other.u2))

    def norm(self, h: float) -> float:
        return float(np.sqrt(self.inner(self, h)))


@dataclass(frozen=True)
class AdmissibleSet:
    """Box constraints; bounds are scalars or arrays broadcastable to the control shapes."""

    a1: object = -np.inf
    b1: object = np.inf
    a2: object = -np.inf
    b2: object = np.inf

    def __post_init__(self):
        if np.any(np.asarray(self.a1) > np.asarray(self.b1)) or np.any(np.asarray(self.a2) > np.asarray(self.b2)):
            raise ValueError("admissible set is empty: lower bound exceeds upper bound")

    @property
    def unbounded(self) -> bool:
        return all(np.all(np.isinf(np.asarray(v))) for v in (self.a1, self.b1, self.a2, self.b2))


def project(controls: ControlPair, adm: AdmissibleSet) -> ControlPair:
    return ControlPair(controls.time_grid, np.clip(controls.u1, adm.a1, adm.b1),
                       np.clip(controls.u2, adm.a2, adm.b2))


@dataclass(frozen=True, eq=False)
class CostSpec:
    variant: Variant
    beta: float
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.beta > 0:
            raise ValueError(f"beta must be positive (got {self.beta})")
        target = np.array(self.target, dtype=float)
        target.setflags(write=False)
        object.__setattr__(self, "target", target)


class ControlProblem:
    """Cost, state and gradient evaluation for one cost on one discretization."""

    def __init__(self, spec: CostSpec, stiff: MixedStiffness, time_grid: TimeGrid,
                 scheme: SchemeConfig = SchemeConfig()):
        self.spec = spec
        self.stiff = stiff
        self.geom = stiff.geom
        self.time_grid = time_grid
        self.stepper = ThetaStepper(stiff, scheme, time_grid)
        n = stiff.n_unknowns
        expected = (time_grid.n_steps + 1, n) if spec.variant is Variant.J1 else (n,)
        if spec.target.shape != expected:
            raise TagMismatchError(f"{spec.variant.value} target must have shape {expected}, "
                                   f"got {spec.target.shape}")

    def _check(self, controls: ControlPair):
        if controls.time_grid != self.time_grid or controls.u2.shape[1] != self.geom.size(Tag.COLLAR):
            raise TagMismatchError("controls do not match the problem grids")

    def state(self, controls: ControlPair) -> np.ndarray:
        self._check(controls)
        return self.stepper.forward(ParabolicData(self.time_grid, controls.u1, controls.u2))

    def misfit(self, psi: np.ndarray) -> float:
        h, tau = self.geom.h, self.time_grid.tau
        if self.spec.variant is Variant.J1:
            return 0.5 * tau * h * float(np.sum((psi - self.spec.target) ** 2))
        r = psi[-1] - self.spec.target
        return 0.5 * h_minus1_inner(r, r, self.geom)

    def cost(self, controls: ControlPair) -> tuple[float, np.ndarray]:
        psi = self.state(controls)
        return self.misfit(psi) + 0.5 * self.spec.beta * controls.norm(self.geom.h) ** 2, psi

    def gradient(self, controls: ControlPair, psi: np.ndarray | None = None) -> "Gradient":
        if psi is None:
            psi = self.state(controls)
        h, tau = self.geom.h, self.time_grid.tau
        traj = self.stepper.trajectory(psi, controls.u1, controls.u2)
        if self.spec.variant is Variant.J1:
            p, lam = adjoint_J1(traj, self.spec.target, self.stepper)
        else:
            p, lam = adjoint_J2(psi[-1], self.spec.target, self.stepper)
        d1, d2 = self.stepper.control_sensitivity(lam)
        flux = ControlPair(self.time_grid, d1 / tau, d2 / (tau * h))
        beta = self.spec.beta
        grad = ControlPair(self.time_grid, beta * controls.u1 + flux.u1, beta * controls.u2 + flux.u2)
        return Gradient(grad, flux, self.stepper.trajectory(p), psi)


@dataclass(frozen=True, eq=False)
class Gradient:
    """Reduced gradient ``beta u + flux``.

    ``flux`` holds the discrete adjoint boundary and exterior fluxes. For J1 it
    equals ``(d_nu p, N_s p)`` of the adjoint state; for J2, whose adjoint keeps
    ``p(T) = (-Delta_D)^-1 (psi(T) - zd2)``, it equals ``-(d_nu p, N_s p)``.
    """

    grad: ControlPair
    flux: ControlPair
    adjoint: Trajectory
    state: np.ndarray


def evaluate_cost(controls: ControlPair, spec: CostSpec, stiff: MixedStiffness,
                  scheme: SchemeConfig = SchemeConfig()) -> tuple[float, Trajectory]:
    prob = ControlProblem(spec, stiff, controls.time_grid, scheme)
    value, psi = prob.cost(controls)
    return value, prob.stepper.trajectory(psi, controls.u1, controls.u2)


def reduced_gradient(controls: ControlPair, spec: CostSpec, stiff: MixedStiffness,
                     scheme: SchemeConfig = SchemeConfig()) -> tuple[np.ndarray, np.ndarray, Trajectory]:
    g = ControlProblem(spec, stiff, controls.time_grid, scheme).gradient(controls)
    return g.grad.u1, g.grad.u2, g.adjoint


def vi_residual(controls: ControlPair, spec: CostSpec, adm: AdmissibleSet, stiff: MixedStiffness,
                scheme: SchemeConfig = SchemeConfig(), gradient: ControlPair | None = None) -> float:
    """Norm of the projected-gradient map ``u - P(u - g)``; zero iff the variational inequality holds."""
    if gradient is None:
        gradient = ControlProblem(spec, stiff, controls.time_grid, scheme).gradient(controls).grad
    return (controls - project(controls - gradient, adm)).norm(stiff.geom.h)


def projection_formula_residual(controls: ControlPair, flux: ControlPair, adm: AdmissibleSet,
                                beta: float, h: float) -> float:
    """Relative defect of ``u = P(-flux / beta)``."""
    target = project(flux.scaled(-1.0 / beta), adm)
    return (controls - target).norm(h) / max(1.0, target.norm(h))


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iters: int = 2000
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60


@dataclass(eq=False)
class OptimizationResult:
    controls: ControlPair
    state: Trajectory
    adjoint: Trajectory
    flux: ControlPair
    cost_history: np.ndarray
    grad_norm_history: np.ndarray
    step_history: np.ndarray
    vi_residual: float
    iterations: int
    converged: bool
    clamped: dict = field(default_factory=dict)


def clamped_fraction(controls: ControlPair, adm: AdmissibleSet) -> dict:
    """Fraction of control entries sitting on an active bound."""
    def frac(u, a, b):
        a, b = np.broadcast_to(a, u.shape), np.broadcast_to(b, u.shape)
        return float(np.mean((u <= a) | (u >= b)))
    return {"u1": frac(controls.u1, adm.a1, adm.b1), "u2": frac(controls.u2, adm.a2, adm.b2)}


def solve_control(spec: CostSpec, adm: AdmissibleSet, init: ControlPair, stiff: MixedStiffness,
                  scheme: SchemeConfig = SchemeConfig(), options: SolverOptions = SolverOptions(),
                  problem: ControlProblem | None = None) -> OptimizationResult:
    """Projected gradient descent with Armijo backtracking from ``gamma0 = 1 / beta``.

    Stops once the variational-inequality residual ``||u - P(u - g)||`` is below
    ``options.tol``. Hitting ``max_iters``, or an accepted step that no longer lowers
    the cost (rounding floor), returns ``converged=False``.
    """
    prob = problem or ControlProblem(spec, stiff, init.time_grid, scheme)
    h = stiff.geom.h
    gamma0 = 1.0 / spec.beta
    u = project(init, adm)
    J, psi = prob.cost(u)
    g = prob.gradient(u, psi)
    costs, gnorms, steps = [J], [g.grad.norm(h)], [0.0]
    converged = False
    it = 0
    while True:
        vi = (u - project(u - g.grad, adm)).norm(h)
        if vi <= options.tol:
            converged = True
            break
        if it >= options.max_iters:
            break
        gamma = gamma0
        for _ in range(options.max_backtracks):
            trial = project(u - g.grad.scaled(gamma), adm)
            J_trial, psi_trial = prob.cost(trial)
            decrease = g.grad.inner(u - trial, h)
            if J_trial <= J - options.armijo * decrease:
                break
            gamma *= options.backtrack
        else:
            log.warning("line search failed at iteration %d", it)
            break
        if J_trial >= J:
            log.warning("no cost decrease at iteration %d (vi residual %.3e)", it, vi)
            break
        u, J, psi = trial, J_trial, psi_trial
        g = prob.gradient(u, psi)
        it += 1
        costs.append(J)
        gnorms.append(g.grad.norm(h))
        steps.append(gamma)
    vi = (u - project(u - g.grad, adm)).norm(h)
    log.info("control solve: %d iterations, cost %.6e, vi residual %.3e", it, J, vi)
    return OptimizationResult(
        controls=u,
        state=prob.stepper.trajectory(psi, u.u1, u.u2),
        adjoint=g.adjoint,
        flux=g.flux,
        cost_history=np.array(costs),
        grad_norm_history=np.array(gnorms),
        step_history=np.array(steps),
        vi_residual=vi,
        iterations=it,
        converged=converged,
        clamped=clamped_fraction(u, adm),
    )


def finite_difference_check(prob: ControlProblem, u: ControlPair, direction: ControlPair,
                            eps: float = 1e-5) -> tuple[float, float, float]:
    """Central difference of the cost along ``direction`` against ``<gradient, direction>``.

    Returns ``(fd, adjoint, relative_error)``.
    """
    h = prob.geom.h
    fd = (prob.cost(u + direction.scaled(eps))[0] - prob.cost(u - direction.scaled(eps))[0]) / (2 * eps)
    ad = prob.gradient(u).grad.inner(direction, h)
    return fd, ad, abs(fd - ad) / max(abs(fd), abs(ad), np.finfo(float).tiny)


__all__ = [
    "AdmissibleSet", "ControlPair", "ControlProblem", "CostSpec", "Gradient", "OptimizationResult",
    "SolverOptions", "Variant", "clamped_fraction", "evaluate_cost", "finite_difference_check",
    "project", "projection_formula_residual", "reduced_gradient", "solve_control",
    "vi_residual",
]
