"""Arithmetic expressions over ``x1 .. xM`` used to define custom transfer functions.

Grammar (a subset of Python expression syntax)::

    expr    := expr ("+" | "-") expr | expr "*" expr | "-" expr | "+" expr
             | NUMBER | VAR | CALL | "(" expr ")"
    VAR     := "x" DIGITS            (1-based argument index)
    CALL    := ("min" | "max") "(" expr ("," expr)+ ")" | "neg" "(" expr ")"

``str(Expression)`` renders the canonical form, and parsing that form again
yields an identical tree.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from functools import reduce

import numpy as np

from qbounds.errors import ParseError

_VAR = re.compile(r"x([1-9][0-9]*)$")
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply}


def _validate(node: ast.AST) -> int:
    """Check ``node`` against the grammar and return the largest argument index used."""
    if isinstance(node, ast.Expression):
        return _validate(node.body)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return max(_validate(node.left), _validate(node.right))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        return _validate(node.operand)
    if isinstance(node, ast.Constant) and type(node.value) in (int, float):
        if not np.isfinite(node.value):
            raise ParseError("literals must be finite")
        return 0
    if isinstance(node, ast.Name):
        m = _VAR.match(node.id)
        if not m:
            raise ParseError(f"unknown variable {node.id!r}; use x1, x2, ...")
        return int(m.group(1))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        name, nargs = node.func.id, len(node.args)
        if name in ("min", "max") and nargs >= 2 or name == "neg" and nargs == 1:
            return max(_validate(a) for a in node.args)
        raise ParseError(f"unsupported call {name}() with {nargs} argument(s)")
    raise ParseError(f"unsupported syntax: {ast.dump(node)[:60]}")


def _eval(node: ast.AST, args: tuple[np.ndarray, ...]) -> np.ndarray:
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, args), _eval(node.right, args))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, args)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Constant):
        return np.float64(node.value)
    if isinstance(node, ast.Name):
        return args[int(node.id[1:]) - 1]
    vals = [_eval(a, args) for a in node.args]
    if node.func.id == "neg":
        return -vals[0]
    return reduce(np.maximum if node.func.id == "max" else np.minimum, vals)


@dataclass(frozen=True, eq=False)
class Expression:
    text: str
    tree: ast.Expression
    arity: int

    def __call__(self, *args: np.ndarray) -> np.ndarray:
        if len(args) < self.arity:
            raise ParseError(f"expression uses x{self.arity} but got {len(args)} argument(s)")
        arrays = tuple(np.asarray(a, dtype=float) for a in args)
        shape = np.broadcast_shapes(*(a.shape for a in arrays))
        return np.broadcast_to(_eval(self.tree.body, arrays), shape).astype(float)

    def __str__(self) -> str:
        return self.text

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Expression) and self.text == other.text


def parse_expression(text: str) -> Expression:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"cannot parse expression {text!r}: {exc.msg}") from None
    arity = _validate(tree)
    if arity == 0:
        raise ParseError(f"expression {text!r} does not reference any argument")
    return Expression(ast.unparse(tree), tree, arity)
