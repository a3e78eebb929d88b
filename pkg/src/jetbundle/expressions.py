"""Scalar expression trees with a parenthesized prefix text form.

Grammar (see ``docs/expression_grammar.md``)::

    expr   := number | var | "(" op expr+ ")"
    var    := "x1" | "x2" | ... | "x" | "y" | "z"
    op     := add | sub | neg | mul | div | pow | exp | min | max | abs | sign

``x``, ``y``, ``z`` are aliases for ``x1``, ``x2``, ``x3``.  ``pow`` takes an
integer literal exponent.  ``sign`` is the sign indicator (-1, 0 or 1).

Jets are computed in three tiers: polynomial trees are differentiated
exactly; smooth trees (with ``div``, ``exp`` or negative powers) use
truncated Taylor arithmetic, also exact up to rounding; trees containing
``min``, ``max``, ``abs`` or ``sign`` use nested central differences with
step ``eps**(1/3) * max(1, |x_i|)`` and support orders up to 2 only.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce
from math import comb, factorial
from typing import Iterable, Sequence

import numpy as np

from .jets import (
    ContractError,
    Jet,
    alpha_factorials,
    index_of,
    jet_dim,
    jet_project,
    multi_indices,
    multiply_coeffs,
)

NARY = {"add", "mul", "min", "max"}
BINARY = {"sub", "div", "pow"}
UNARY = {"neg", "abs", "sign", "exp"}
NONSMOOTH = {"min", "max", "abs", "sign"}
OPS = NARY | BINARY | UNARY
ALIASES = {"x": 1, "y": 2, "z": 3}
_TOKEN = re.compile(r"\(|\)|[^\s()]+")
_VAR = re.compile(r"x(\d+)$")


class ExpressionError(ValueError):
    """Malformed expression text or unsupported use of an expression."""


class EvaluationError(ArithmeticError):
    """Evaluation failed, e.g. a division by zero at a given point."""


class UnsupportedDerivative(ExpressionError):
    """Derivatives of this order are not available for a non-polynomial expression."""


@dataclass(frozen=True)
class ScalarExpression:
    op: str
    args: tuple["ScalarExpression", ...] = ()
    value: float = 0.0
    index: int = 0

    # construction

    @classmethod
    def const(cls, v: float) -> "ScalarExpression":
        return cls("const", value=float(v))

    @classmethod
    def var(cls, i: int) -> "ScalarExpression":
        """Coordinate ``x_i`` (1-based)."""
        if i < 1:
            raise ExpressionError("variables are numbered from 1")
        return cls("var", index=i)

    @classmethod
    def parse(cls, text: str) -> "ScalarExpression":
        tokens = _TOKEN.findall(text)
        if not tokens:
            raise ExpressionError("empty expression")
        expr, pos = _parse(tokens, 0)
        if pos != len(tokens):
            raise ExpressionError(f"trailing tokens after position {pos}: {' '.join(tokens[pos:])}")
        return expr

    def __add__(self, other):
        return ScalarExpression("add", (self, _lift(other)))

    def __radd__(self, other):
        return ScalarExpression("add", (_lift(other), self))

    def __sub__(self, other):
        return ScalarExpression("sub", (self, _lift(other)))

    def __rsub__(self, other):
        return ScalarExpression("sub", (_lift(other), self))

    def __mul__(self, other):
        return ScalarExpression("mul", (self, _lift(other)))

    def __rmul__(self, other):
        return ScalarExpression("mul", (_lift(other), self))

    def __truediv__(self, other):
        return ScalarExpression("div", (self, _lift(other)))

    def __neg__(self):
        return ScalarExpression("neg", (self,))

    def __pow__(self, k: int):
        return ScalarExpression("pow", (self, ScalarExpression.const(int(k))))

    # text form

    def to_text(self) -> str:
        if self.op == "const":
            v = self.value
            return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)
        if self.op == "var":
            return f"x{self.index}"
        return "(" + " ".join([self.op] + [a.to_text() for a in self.args]) + ")"

    __str__ = to_text

    @property
    def n_vars(self) -> int:
        """Largest variable index used (0 for constants)."""
        if self.op == "var":
            return self.index
        return max((a.n_vars for a in self.args), default=0)

    # evaluation

    def evaluate(self, x: Sequence[float]) -> float:
        """Value at a single point; raises ``EvaluationError`` naming the failing node."""
        return float(self.evaluate_many(np.asarray(x, dtype=float)[None, :])[0])

    def evaluate_many(self, X) -> np.ndarray:
        """Vectorized evaluation at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n_vars > X.shape[1]:
            raise EvaluationError(f"expression uses x{self.n_vars} but points have {X.shape[1]} coordinates")
        with np.errstate(all="ignore"):
            out = self._eval(X)
        return np.broadcast_to(out, (X.shape[0],)).astype(float)

    def _eval(self, X: np.ndarray) -> np.ndarray:
        op = self.op
        if op == "const":
            return np.full(X.shape[0], self.value)
        if op == "var":
            return X[:, self.index - 1]
        vals = [a._eval(X) for a in self.args]
        if op == "add":
            return reduce(np.add, vals)
        if op == "mul":
            return reduce(np.multiply, vals)
        if op == "min":
            return reduce(np.minimum, vals)
        if op == "max":
            return reduce(np.maximum, vals)
        if op == "sub":
            return vals[0] - vals[1]
        if op == "neg":
            return -vals[0]
        if op == "abs":
            return np.abs(vals[0])
        if op == "exp":
            return np.exp(vals[0])
        if op == "sign":
            return np.sign(vals[0])
        if op == "div":
            bad = vals[1] == 0
            if np.any(bad):
                where = X[np.argmax(bad)]
                raise EvaluationError(f"division by zero in node {self.to_text()} at x = {where.tolist()}")
            return vals[0] / vals[1]
        if op == "pow":
            k = int(self.args[1].value)
            if k < 0 and np.any(vals[0] == 0):
                where = X[np.argmax(vals[0] == 0)]
                raise EvaluationError(f"division by zero in node {self.to_text()} at x = {where.tolist()}")
            return vals[0] ** float(k)
        raise ExpressionError(f"unknown operator {op}")

    # polynomial view

    def to_polynomial(self, n: int | None = None) -> "Polynomial | None":
        """Exact polynomial form, or ``None`` when a non-polynomial node occurs."""
        n = self.n_vars if n is None else n
        if self.n_vars > n:
            raise ExpressionError(f"expression uses x{self.n_vars} in dimension {n}")
        return _to_poly(self, n)

    def is_polynomial(self) -> bool:
        return self.to_polynomial() is not None


def _lift(v) -> ScalarExpression:
    return v if isinstance(v, ScalarExpression) else ScalarExpression.const(v)


def _parse(tokens: list[str], pos: int) -> tuple[ScalarExpression, int]:
    if pos >= len(tokens):
        raise ExpressionError("unexpected end of expression")
    tok = tokens[pos]
    if tok == ")":
        raise ExpressionError(f"unexpected ')' at token {pos}")
    if tok != "(":
        return _atom(tok), pos + 1
    if pos + 1 >= len(tokens):
        raise ExpressionError("unexpected end after '('")
    op = tokens[pos + 1]
    if op not in OPS:
        raise ExpressionError(f"unknown operator '{op}' at token {pos + 1}")
    pos += 2
    args = []
    while True:
        if pos >= len(tokens):
            raise ExpressionError(f"missing ')' for operator '{op}'")
        if tokens[pos] == ")":
            pos += 1
            break
        a, pos = _parse(tokens, pos)
        args.append(a)
    if op in UNARY and len(args) != 1:
        raise ExpressionError(f"'{op}' takes one argument, got {len(args)}")
    if op in BINARY and len(args) != 2:
        raise ExpressionError(f"'{op}' takes two arguments, got {len(args)}")
    if op in NARY and len(args) < 1:
        raise ExpressionError(f"'{op}' needs at least one argument")
    if op == "pow":
        e = args[1]
        if e.op != "const" or not e.value.is_integer():
            raise ExpressionError("pow exponent must be an integer literal")
    return ScalarExpression(op, tuple(args)), pos


def _atom(tok: str) -> ScalarExpression:
    if tok in ALIASES:
        return ScalarExpression.var(ALIASES[tok])
    mv = _VAR.match(tok)
    if mv:
        return ScalarExpression.var(int(mv.group(1)))
    try:
        v = float(tok)
    except ValueError:
        raise ExpressionError(f"bad token '{tok}'") from None
    if not np.isfinite(v):
        raise ExpressionError(f"non-finite constant '{tok}'")
    return ScalarExpression.const(v)


class Polynomial:
    """Sparse real polynomial: ``{exponent tuple: coefficient}``."""

    def __init__(self, n: int, terms: dict[tuple[int, ...], float] | None = None):
        self.n = n
        self.terms = {k: float(v) for k, v in (terms or {}).items() if v != 0.0}

    @classmethod
    def constant(cls, n: int, v: float) -> "Polynomial":
        return cls(n, {(0,) * n: v})

    @classmethod
    def variable(cls, n: int, i: int) -> "Polynomial":
        e = [0] * n
        e[i - 1] = 1
        return cls(n, {tuple(e): 1.0})

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def is_constant(self) -> bool:
        return all(sum(e) == 0 for e in self.terms)

    def constant_value(self) -> float:
        return self.terms.get((0,) * self.n, 0.0)

    def __add__(self, other: "Polynomial") -> "Polynomial":
        t = dict(self.terms)
        for k, v in other.terms.items():
            t[k] = t.get(k, 0.0) + v
        return Polynomial(self.n, t)

    def scale(self, s: float) -> "Polynomial":
        return Polynomial(self.n, {k: s * v for k, v in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        t: dict[tuple[int, ...], float] = {}
        for a, u in self.terms.items():
            for b, v in other.terms.items():
                k = tuple(i + j for i, j in zip(a, b))
                t[k] = t.get(k, 0.0) + u * v
        return Polynomial(self.n, t)

    def power(self, k: int) -> "Polynomial":
        out = Polynomial.constant(self.n, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def taylor_many(self, X, m: int) -> np.ndarray:
        """Coefficients ``d^alpha p(x)/alpha!`` for ``|alpha| <= m`` at each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = multi_indices(self.n, m)
        pos = index_of(self.n, m)
        out = np.zeros((X.shape[0], len(idx)))
        for beta, c in self.terms.items():
            for a in idx:
                if any(ai > bi for ai, bi in zip(a, beta)):
                    continue
                w = c
                for ai, bi in zip(a, beta):
                    w *= comb(bi, ai)
                mono = np.ones(X.shape[0])
                for j, (ai, bi) in enumerate(zip(a, beta)):
                    if bi > ai:
                        mono = mono * X[:, j] ** (bi - ai)
                out[:, pos[a]] += w * mono
        return out


def _to_poly(e: ScalarExpression, n: int) -> Polynomial | None:
    op = e.op
    if op == "const":
        return Polynomial.constant(n, e.value)
    if op == "var":
        return Polynomial.variable(n, e.index)
    if op == "exp":
        return None
    if op in NONSMOOTH:
        if len(e.args) == 1 and op in {"min", "max"}:
            return _to_poly(e.args[0], n)
        return None
    subs = [_to_poly(a, n) for a in e.args]
    if any(s is None for s in subs):
        return None
    if op == "add":
        return reduce(lambda a, b: a + b, subs)
    if op == "mul":
        return reduce(lambda a, b: a * b, subs)
    if op == "sub":
        return subs[0] + subs[1].scale(-1.0)
    if op == "neg":
        return subs[0].scale(-1.0)
    if op == "div":
        if subs[1].is_constant() and subs[1].constant_value() != 0.0:
            return subs[0].scale(1.0 / subs[1].constant_value())
        return None
    if op == "pow":
        k = int(e.args[1].value)
        return subs[0].power(k) if k >= 0 else None
    return None


def fd_step(x: float) -> float:
    """Central-difference step used for non-polynomial nodes."""
    return np.finfo(float).eps ** (1.0 / 3.0) * max(1.0, abs(x))


def _fd_taylor(e: ScalarExpression, x: np.ndarray, m: int) -> np.ndarray:
    n = len(x)
    if m > 2:
        raise UnsupportedDerivative(
            f"derivatives of order {m} > 2 are not supported for non-polynomial expression {e.to_text()}"
        )
    idx = multi_indices(n, m)
    out = np.zeros(len(idx))
    for k, a in enumerate(idx):
        dirs = [j for j, aj in enumerate(a) for _ in range(aj)]
        out[k] = _nested_central(e, x, dirs)
    return out / alpha_factorials(n, m)


def _nested_central(e: ScalarExpression, x: np.ndarray, dirs: list[int]) -> float:
    if not dirs:
        return e.evaluate(x)
    j, rest = dirs[0], dirs[1:]
    h = fd_step(x[j])
    xp, xm = x.copy(), x.copy()
    xp[j] += h
    xm[j] -= h
    return (_nested_central(e, xp, rest) - _nested_central(e, xm, rest)) / (2 * h)


def taylor_coefficients(e: ScalarExpression, x, m: int, n: int | None = None) -> np.ndarray:
    """``d^alpha e(x)/alpha!`` for ``|alpha| <= m`` in graded-lex order."""
    x = np.asarray(x, dtype=float)
    n = len(x) if n is None else n
    p = e.to_polynomial(n)
    if p is not None:
        return p.taylor_many(x[None, :], m)[0]
    e.evaluate(x)  # surfaces division-by-zero with the node name
    if not _has_nonsmooth(e):
        return _taylor_arith(e, x, m)
    return _fd_taylor(e, x, m)


def _has_nonsmooth(e: ScalarExpression) -> bool:
    return e.op in NONSMOOTH or any(_has_nonsmooth(a) for a in e.args)


def _taylor_arith(e: ScalarExpression, x: np.ndarray, m: int) -> np.ndarray:
    """Truncated Taylor arithmetic for smooth trees."""
    n = len(x)
    dim = jet_dim(n, m)

    def mul(a, b):
        return multiply_coeffs(a, b, n, m)

    def series(u, weights):
        # sum_k weights[k] u^k, u nilpotent (no constant term)
        out = np.zeros(dim)
        term = np.zeros(dim)
        term[0] = 1.0
        for w in weights:
            out = out + w * term
            term = mul(term, u)
        return out

    def recip(c):
        c0 = c[0]
        u = c.copy()
        u[0] = 0.0
        u /= c0
        return series(u, [(-1.0) ** k for k in range(m + 1)]) / c0

    def walk(node):
        op = node.op
        if op == "const":
            out = np.zeros(dim)
            out[0] = node.value
            return out
        if op == "var":
            out = np.zeros(dim)
            out[0] = x[node.index - 1]
            if m >= 1:
                out[1 + node.index - 1] = 1.0
            return out
        if op == "pow":
            k = int(node.args[1].value)
            base = walk(node.args[0])
            if k < 0:
                base, k = recip(base), -k
            out = np.zeros(dim)
            out[0] = 1.0
            for _ in range(k):
                out = mul(out, base)
            return out
        vals = [walk(a) for a in node.args]
        if op == "add":
            return reduce(np.add, vals)
        if op == "sub":
            return vals[0] - vals[1]
        if op == "neg":
            return -vals[0]
        if op == "mul":
            return reduce(mul, vals)
        if op == "div":
            return mul(vals[0], recip(vals[1]))
        if op == "exp":
            c = vals[0]
            u = c.copy()
            u[0] = 0.0
            return np.exp(c[0]) * series(u, [1.0 / factorial(k) for k in range(m + 1)])
        raise ExpressionError(f"operator {op} has no Taylor arithmetic")

    return walk(e)


def taylor_coefficients_many(e: ScalarExpression, X, m: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = e.to_polynomial(X.shape[1])
    if p is not None:
        return p.taylor_many(X, m)
    return np.array([taylor_coefficients(e, x, m) for x in X]).reshape(X.shape[0], jet_dim(X.shape[1], m))


def jet_from_expression(exprs: Iterable[ScalarExpression] | ScalarExpression, x, m: int) -> Jet:
    """The m-jet of the expression vector at ``x``; exact for polynomials."""
    if isinstance(exprs, ScalarExpression):
        exprs = [exprs]
    exprs = list(exprs)
    if not exprs:
        raise ContractError("need at least one component")
    x = tuple(float(v) for v in x)
    coeffs = np.array([taylor_coefficients(e, x, m) for e in exprs])
    return Jet(len(x), len(exprs), m, x, coeffs)


def parse_all(texts: Iterable[str]) -> list[ScalarExpression]:
    return [ScalarExpression.parse(t) for t in texts]


def jet_transport_error(
    F: Iterable[ScalarExpression] | ScalarExpression, x, y, m_hi: int, m_lo: int
) -> dict[tuple[int, ...], float]:
    """``|d^alpha (pi^{m_hi->m_lo} J_y F - J_x F)(x)|`` for each ``|alpha| <= m_lo``.

    The jet at ``y`` is re-expanded about ``x`` before truncation; entries are
    maxima over components.
    """
    if m_hi < m_lo:
        raise ContractError("m_hi must be at least m_lo")
    Jy = jet_from_expression(F, y, m_hi)
    Jx = jet_from_expression(F, x, m_lo)
    moved = jet_project(Jy.reexpand(tuple(float(v) for v in x)), m_lo)
    diff = np.abs(moved.coeffs - Jx.coeffs) * alpha_factorials(Jx.n, m_lo)
    worst = diff.max(axis=0)
    return {a: float(v) for a, v in zip(multi_indices(Jx.n, m_lo), worst)}
