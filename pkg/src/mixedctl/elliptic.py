"""Stationary problem ``L w = f`` in the interval, ``w = g1`` on its ends, ``w = g2`` in the collar."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .geometry import GridFunction, Tag, assemble_extended
from .operators import MixedStiffness, nonlocal_normal_derivative, normal_derivative


class SolverError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


class VeryWeakRangeWarning(UserWarning):
    """The transposition theory behind very-weak solutions is only established for s <= 3/4."""


@dataclass(frozen=True, eq=False)
class EllipticData:
    f: np.ndarray
    g1: np.ndarray
    g2: np.ndarray

    def __post_init__(self):
        for name in ("f", "g1", "g2"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.g1.shape != (2,):
            raise ValueError("g1 needs exactly two boundary values")

    @classmethod
    def homogeneous(cls, f, geom) -> "EllipticData":
        return cls(f, np.zeros(2), np.zeros(geom.size(Tag.COLLAR)))

    @property
    def is_homogeneous(self) -> bool:
        return not np.any(self.g1) and not np.any(self.g2)

    def compatible(self, geom, rtol: float = 1e-12) -> bool:
        """Boundary values agree with the adjacent collar values at both ends."""
        nc = geom.n_collar
        inner = np.array([self.g2[nc - 1], self.g2[nc]])
        return bool(np.allclose(self.g1, inner, rtol=rtol, atol=rtol))

    def check_shapes(self, geom):
        if self.f.shape != (geom.size(Tag.INTERIOR),) or self.g2.shape != (geom.size(Tag.COLLAR),):
            raise ValueError("elliptic data do not match the geometry")


def _cholesky(stiff: MixedStiffness):
    try:
        return linalg.cho_factor(stiff.A_II, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SolverError(f"mixed stiffness is not positive definite: {exc}") from exc


def _solve(data: EllipticData, stiff: MixedStiffness) -> GridFunction:
    geom = stiff.geom
    data.check_shapes(geom)
    rhs = data.f - stiff.A_Ib @ data.g1 - stiff.A_Ic @ data.g2
    w = linalg.cho_solve(_cholesky(stiff), rhs, check_finite=False)
    residual = np.linalg.norm(stiff.A_II @ w - rhs)
    if residual > 1e-10 * max(np.linalg.norm(rhs), np.finfo(float).tiny):
        raise SolverError(f"linear solve residual {residual:.3e} too large")
    return GridFunction(geom, assemble_extended(geom, w, data.g1, data.g2), Tag.EXTENDED)


def solve_weak(data: EllipticData, stiff: MixedStiffness) -> GridFunction:
    """Homogeneous boundary and exterior data; returns the zero extension of the interior solve."""
    if not data.is_homogeneous:
        raise PreconditionError("solve_weak needs g1 = 0 and g2 = 0; use solve_lifted or solve_very_weak")
    return _solve(data, stiff)


def solve_lifted(data: EllipticData, stiff: MixedStiffness) -> GridFunction:
    if not data.compatible(stiff.geom):
        raise PreconditionError("boundary and exterior data are incompatible; use solve_very_weak")
    return _solve(data, stiff)


def solve_very_weak(data: EllipticData, stiff: MixedStiffness, allow_any_s: bool = False) -> GridFunction:
    """Same linear system as the lifted solve, with ``g1`` and ``g2`` imposed independently.

    For ``s > 3/4`` a :class:`VeryWeakRangeWarning` is issued unless ``allow_any_s`` is set;
    the discrete system itself is well posed for every ``s``.
    """
    if stiff.order is not None and not stiff.order.very_weak_valid and not allow_any_s:
        warnings.warn(f"s = {stiff.s} > 3/4: very-weak interpretation is outside the proved range",
                      VeryWeakRangeWarning, stacklevel=2)
    return _solve(data, stiff)


def smooth_test_functions(geom, count: int, rng: np.random.Generator, modes: int = 4) -> np.ndarray:
    """Random combinations of the first Dirichlet sine modes, zero off the interior."""
    x = geom.nodes(Tag.INTERIOR)
    xi = (x - geom.x_left) / (geom.x_right - geom.x_left)
    basis = np.sin(np.pi * np.outer(np.arange(1, modes + 1), xi))
    coeffs = rng.standard_normal((count, modes)) / np.arange(1, modes + 1) ** 2
    return coeffs @ basis


def transposition_residual(w: GridFunction, data: EllipticData, stiff: MixedStiffness,
                           test_count: int = 8, seed: int = 0, tests: np.ndarray | None = None) -> float:
    """Largest defect of the transposition identity over smooth interior test functions.

    Each test function ``phi`` vanishes on the boundary and collar; the defect is
    ``|<w, L phi> - <f, phi> + sum g1 d_nu phi + <g2, N_s phi>_collar|``.
    """
    geom, h = stiff.geom, stiff.geom.h
    if tests is None:
        tests = smooth_test_functions(geom, test_count, np.random.default_rng(seed))
    worst = 0.0
    w_int = w.values[geom.interior_index]
    for phi_int in np.atleast_2d(tests):
        phi = assemble_extended(geom, phi_int)
        lhs = h * np.dot(w_int, stiff.apply(phi))
        rhs = h * np.dot(data.f, phi_int)
        rhs -= np.dot(data.g1, normal_derivative(phi, geom).values)
        rhs -= h * np.dot(data.g2, nonlocal_normal_derivative(phi, stiff).values)
        worst = max(worst, abs(lhs - rhs))
    return float(worst)
