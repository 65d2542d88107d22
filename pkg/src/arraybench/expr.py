"""Tiny vectorized expression evaluator for per-cell scalar expressions.

Expressions reference attribute names and evaluate over numpy columns.
Only a safe subset of Python expression syntax is admitted: arithmetic,
comparisons, boolean connectives, and a few math calls.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import SchemaError

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.true_divide,
    ast.FloorDiv: np.floor_divide,
    ast.Mod: np.mod,
    ast.Pow: np.power,
}

_CMPOPS = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
    ast.Eq: np.equal,
    ast.NotEq: np.not_equal,
}

_FUNCS = {
    "abs": np.abs,
    "sqrt": np.sqrt,
    "log": np.log,
    "exp": np.exp,
    "min": np.minimum,
    "max": np.maximum,
}


class Expr:
    """A compiled per-cell expression."""

    def __init__(self, text: str):
        self.text = text
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise SchemaError(f"bad expression {text!r}: {exc.msg}") from None
        self._tree = tree.body
        self.names = sorted(
            {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(_FUNCS))
        _check(self._tree)

    def __call__(self, columns: dict):
        """Evaluate over a dict of equally-sized numpy columns (or scalars)."""
        return _eval(self._tree, columns)

    def __repr__(self):
        return f"Expr({self.text!r})"


def _check(node):
    if isinstance(node, ast.Name):
        return
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float, bool)):
            raise SchemaError(f"non-numeric constant {node.value!r} in expression")
        return
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check(node.left)
        _check(node.right)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd, ast.Not)):
        _check(node.operand)
        return
    if isinstance(node, ast.Compare):
        if any(type(op) not in _CMPOPS for op in node.ops):
            raise SchemaError("unsupported comparison in expression")
        _check(node.left)
        for c in node.comparators:
            _check(c)
        return
    if isinstance(node, ast.BoolOp):
        for v in node.values:
            _check(v)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise SchemaError("unsupported function call in expression")
        for a in node.args:
            _check(a)
        return
    raise SchemaError(f"unsupported expression element {type(node).__name__}")


def _eval(node, env):
    if isinstance(node, ast.Name):
        try:
            return env[node.id]
        except KeyError:
            raise SchemaError(f"unknown attribute {node.id!r} in expression") from None
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        if isinstance(node.op, ast.USub):
            return np.negative(v)
        if isinstance(node.op, ast.Not):
            return np.logical_not(v)
        return v
    if isinstance(node, ast.Compare):
        left = _eval(node.left, env)
        out = None
        for op, comp in zip(node.ops, node.comparators):
            right = _eval(comp, env)
            part = _CMPOPS[type(op)](left, right)
            out = part if out is None else np.logical_and(out, part)
            left = right
        return out
    if isinstance(node, ast.BoolOp):
        parts = [_eval(v, env) for v in node.values]
        fn = np.logical_and if isinstance(node.op, ast.And) else np.logical_or
        out = parts[0]
        for p in parts[1:]:
            out = fn(out, p)
        return out
    if isinstance(node, ast.Call):
        args = [_eval(a, env) for a in node.args]
        return _FUNCS[node.func.id](*args)
    raise SchemaError(f"unsupported expression element {type(node).__name__}")


def as_expr(f) -> "Expr | None":
    """Coerce a string to Expr; pass callables and None through."""
    if f is None or callable(f):
        return f
    return Expr(str(f))
