"""Closed-form data expressions in ``x`` and ``t``, evaluated at grid nodes.

Grammar: numbers, ``x``, ``t``, ``pi``, ``e``, ``+ - * / **``, unary minus,
``sin cos exp sqrt log abs`` and ``ind(a, b)`` (indicator of ``a <= x <= b``).
"""

from __future__ import annotations

import ast
import math

import numpy as np

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "log": np.log, "abs": np.abs}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide,
           ast.Pow: np.power}


class ExpressionError(ValueError):
    pass


class Expression:
    def __init__(self, text):
        self.text = str(text)
        try:
            self._tree = ast.parse(self.text, mode="eval").body
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {self.text!r}: {exc.msg}") from None
        self._check(self._tree)

    def __repr__(self):
        return f"Expression({self.text!r})"

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"unsupported literal {node.value!r} in {self.text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in ("x", "t") and node.id not in _CONSTS:
                raise ExpressionError(f"unknown name {node.id!r} in {self.text!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"unsupported operator in {self.text!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            name = node.func.id
            if name == "ind":
                if len(node.args) != 2:
                    raise ExpressionError("ind(a, b) takes exactly two arguments")
            elif name not in _FUNCS or len(node.args) != 1:
                raise ExpressionError(f"unknown function {name!r} in {self.text!r}")
            for arg in node.args:
                self._check(arg)
        else:
            raise ExpressionError(f"unsupported syntax in {self.text!r}")

    def __call__(self, x, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        with np.errstate(all="ignore"):
            out = self._eval(self._tree, x, t)
        out = np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(x.shape, t.shape))
        if not np.all(np.isfinite(out)):
            raise ExpressionError(f"expression {self.text!r} is not finite on the grid")
        return np.array(out)

    def _eval(self, node, x, t):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return {"x": x, "t": t}.get(node.id, _CONSTS.get(node.id))
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, x, t), self._eval(node.right, x, t))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, x, t)
            return -val if isinstance(node.op, ast.USub) else val
        name = node.func.id
        if name == "ind":
            a, b = (self._eval(arg, x, t) for arg in node.args)
            return ((x >= a) & (x <= b)).astype(float)
        return _FUNCS[name](self._eval(node.args[0], x, t))


def space_time(expr: Expression, x: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Values on the tensor grid, shape ``(len(times), len(x))``."""
    return expr(np.asarray(x)[None, :], np.asarray(times)[:, None])
