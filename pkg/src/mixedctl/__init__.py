"""Finite-difference solvers and optimal control for the mixed local/nonlocal operator -Laplace + (-Laplace)^s in 1D."""

__version__ = "0.1.0"
