"""Truncated Taylor polynomials (m-jets) and their arithmetic.

A jet of degree ``m`` in ``n`` variables with ``D`` components is stored as
the monomial coefficients of the polynomial about its basepoint, i.e. the
entry for multi-index ``alpha`` is ``d^alpha P(x) / alpha!``.

Multi-indices are ordered graded-lexicographically: first by total order,
then by descending exponent tuple, so for ``n = 2, m = 2`` the order is
``1, x1, x2, x1^2, x1 x2, x2^2``.  Every coefficient vector and matrix in
the package uses this order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product as iproduct
from math import comb, factorial
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called with incompatible arguments."""


@dataclass(frozen=True, order=False)
class MultiIndex:
    exponents: tuple[int, ...]

    def __post_init__(self):
        if any(e < 0 for e in self.exponents):
            raise ContractError("multi-index exponents must be nonnegative")

    @property
    def order(self) -> int:
        return sum(self.exponents)

    @property
    def n(self) -> int:
        return len(self.exponents)

    def sort_key(self):
        return (self.order, tuple(-e for e in self.exponents))

    def __lt__(self, other: "MultiIndex") -> bool:
        return self.sort_key() < other.sort_key()

    def factorial(self) -> int:
        out = 1
        for e in self.exponents:
            out *= factorial(e)
        return out


@lru_cache(maxsize=None)
def multi_indices(n: int, m: int) -> tuple[tuple[int, ...], ...]:
    """All exponent tuples with ``|alpha| <= m`` in graded-lex order."""
    if n < 0 or m < 0:
        raise ContractError("n and m must be nonnegative")
    out = []
    for k in range(m + 1):
        level = [a for a in iproduct(range(k, -1, -1), repeat=n) if sum(a) == k]
        level.sort(reverse=True)
        out.extend(level)
    return tuple(out)


def jet_dim(n: int, m: int) -> int:
    return comb(n + m, m)


@lru_cache(maxsize=None)
def index_of(n: int, m: int) -> dict[tuple[int, ...], int]:
    return {a: i for i, a in enumerate(multi_indices(n, m))}


@lru_cache(maxsize=None)
def _product_table(n: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index triples (i, j, k) with alpha_i + alpha_j = alpha_k, |alpha_k| <= m."""
    idx = multi_indices(n, m)
    pos = index_of(n, m)
    ii, jj, kk = [], [], []
    for i, a in enumerate(idx):
        for j, b in enumerate(idx):
            c = tuple(x + y for x, y in zip(a, b))
            k = pos.get(c)
            if k is not None:
                ii.append(i)
                jj.append(j)
                kk.append(k)
    return np.array(ii), np.array(jj), np.array(kk)


@lru_cache(maxsize=None)
def _shift_structure(n: int, m: int):
    """Pairs (alpha, beta) with beta >= alpha, with binomial and falling-factorial weights."""
    idx = multi_indices(n, m)
    rows, cols, binom, falling, powers = [], [], [], [], []
    for r, a in enumerate(idx):
        for c, b in enumerate(idx):
            if all(bi >= ai for ai, bi in zip(a, b)):
                rows.append(r)
                cols.append(c)
                bn, ff = 1, 1
                for ai, bi in zip(a, b):
                    bn *= comb(bi, ai)
                    ff *= factorial(bi) // factorial(bi - ai)
                binom.append(bn)
                falling.append(ff)
                powers.append(tuple(bi - ai for ai, bi in zip(a, b)))
    return (
        np.array(rows, dtype=int),
        np.array(cols, dtype=int),
        np.array(binom, dtype=float),
        np.array(falling, dtype=float),
        np.array(powers, dtype=int).reshape(len(rows), n),
    )


def _monomials(h: np.ndarray, powers: np.ndarray) -> np.ndarray:
    if powers.shape[1] == 0:
        return np.ones(powers.shape[0])
    return np.prod(h[None, :] ** powers, axis=1)


def shift_matrix(n: int, m: int, h) -> np.ndarray:
    """Matrix S with ``S @ c`` = coefficients of the same polynomial re-expanded about ``x + h``."""
    rows, cols, binom, _, powers = _shift_structure(n, m)
    h = np.asarray(h, dtype=float)
    dim = jet_dim(n, m)
    S = np.zeros((dim, dim))
    S[rows, cols] = binom * _monomials(h, powers)
    return S


def derivative_matrix(n: int, m: int, h) -> np.ndarray:
    """Matrix E with ``(E @ c)[alpha]`` = ``d^alpha P(x + h)`` for coefficients ``c`` at ``x``."""
    rows, cols, _, falling, powers = _shift_structure(n, m)
    h = np.asarray(h, dtype=float)
    dim = jet_dim(n, m)
    E = np.zeros((dim, dim))
    E[rows, cols] = falling * _monomials(h, powers)
    return E


@lru_cache(maxsize=None)
def alpha_factorials(n: int, m: int) -> np.ndarray:
    return np.array([MultiIndex(a).factorial() for a in multi_indices(n, m)], dtype=float)


@lru_cache(maxsize=None)
def alpha_orders(n: int, m: int) -> np.ndarray:
    return np.array([sum(a) for a in multi_indices(n, m)], dtype=int)


@dataclass(frozen=True, eq=False)
class Jet:
    """An element of P^(m)(R^n, R^D) based at ``basepoint``.

    ``coeffs`` has shape ``(D, C(n+m, m))``.
    """

    n: int
    D: int
    m: int
    basepoint: tuple[float, ...]
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(self.D, jet_dim(self.n, self.m))
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        bp = tuple(float(v) for v in self.basepoint)
        if len(bp) != self.n:
            raise ContractError(f"basepoint has {len(bp)} coordinates, expected {self.n}")
        object.__setattr__(self, "basepoint", bp)

    @classmethod
    def zero(cls, n: int, D: int, m: int, x) -> "Jet":
        return cls(n, D, m, tuple(x), np.zeros((D, jet_dim(n, m))))

    @classmethod
    def constant(cls, values: Sequence[float], n: int, m: int, x) -> "Jet":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        c = np.zeros((len(values), jet_dim(n, m)))
        c[:, 0] = values
        return cls(n, len(values), m, tuple(x), c)

    @classmethod
    def coordinate(cls, j: int, n: int, m: int, x) -> "Jet":
        """The scalar jet of ``y_j - x_j`` at ``x`` (zero when m = 0)."""
        c = np.zeros((1, jet_dim(n, m)))
        if m >= 1:
            e = [0] * n
            e[j] = 1
            c[0, index_of(n, m)[tuple(e)]] = 1.0
        return cls(n, 1, m, tuple(x), c)

    @property
    def vector(self) -> np.ndarray:
        """Flattened coefficients, component-major."""
        return self.coeffs.reshape(-1)

    def same_space(self, other: "Jet") -> bool:
        return (self.n, self.D, self.m, self.basepoint) == (other.n, other.D, other.m, other.basepoint)

    def with_vector(self, v) -> "Jet":
        return Jet(self.n, self.D, self.m, self.basepoint, np.asarray(v, dtype=float))

    def __add__(self, other: "Jet") -> "Jet":
        _check_same(self, other)
        return self.with_vector(self.vector + other.vector)

    def __sub__(self, other: "Jet") -> "Jet":
        _check_same(self, other)
        return self.with_vector(self.vector - other.vector)

    def __mul__(self, s: float) -> "Jet":
        return self.with_vector(float(s) * self.vector)

    __rmul__ = __mul__

    def __neg__(self) -> "Jet":
        return self.with_vector(-self.vector)

    def evaluate(self, z) -> np.ndarray:
        """Value of each component of the stored polynomial at ``z``."""
        h = np.asarray(z, dtype=float) - np.asarray(self.basepoint)
        idx = np.array(multi_indices(self.n, self.m), dtype=int).reshape(-1, self.n)
        return self.coeffs @ _monomials(h, idx)

    def reexpand(self, z) -> "Jet":
        """The same polynomial stored as a jet about ``z``."""
        h = np.asarray(z, dtype=float) - np.asarray(self.basepoint)
        S = shift_matrix(self.n, self.m, h)
        return Jet(self.n, self.D, self.m, tuple(z), self.coeffs @ S.T)

    def allclose(self, other: "Jet", rtol: float = 1e-12, atol: float = 0.0) -> bool:
        return self.same_space(other) and np.allclose(self.coeffs, other.coeffs, rtol=rtol, atol=atol)


def _check_same(P: Jet, Q: Jet) -> None:
    if not P.same_space(Q):
        raise ContractError("jets live in different spaces (n, D, m or basepoint differ)")


@lru_cache(maxsize=None)
def _multiplication_tensor(n: int, m: int) -> np.ndarray:
    """T[k, i, j] = 1 when alpha_i + alpha_j = alpha_k."""
    dim = jet_dim(n, m)
    ii, jj, kk = _product_table(n, m)
    T = np.zeros((dim, dim, dim))
    T[kk, ii, jj] = 1.0
    return T


def multiply_coeffs(a, b, n: int, m: int) -> np.ndarray:
    """Truncated product of coefficient arrays, broadcasting over leading axes."""
    return np.einsum("kij,...i,...j->...k", _multiplication_tensor(n, m), a, b)


def multiplication_matrix(scalar_coeffs: np.ndarray, n: int, m: int) -> np.ndarray:
    """Matrix of ``Q -> P (.) Q`` on one component, for scalar coefficients ``P``."""
    return _multiplication_tensor(n, m) @ np.asarray(scalar_coeffs, dtype=float)


def jet_multiply(P: Jet, Q: Jet) -> Jet:
    """Truncated product ``P (.)_x Q``; one factor must be scalar."""
    if (P.n, P.m, P.basepoint) != (Q.n, Q.m, Q.basepoint):
        raise ContractError("jet_multiply needs matching n, m and basepoint")
    if P.D != 1 and Q.D != 1:
        raise ContractError("jet_multiply needs a scalar factor")
    if P.D != 1:
        P, Q = Q, P
    M = multiplication_matrix(P.coeffs[0], P.n, P.m)
    return Jet(Q.n, Q.D, Q.m, Q.basepoint, Q.coeffs @ M.T)


def jet_project(P: Jet, m_target: int) -> Jet:
    """Drop coefficients of order above ``m_target``."""
    if m_target > P.m or m_target < 0:
        raise ContractError(f"cannot project degree {P.m} jet to degree {m_target}")
    k = jet_dim(P.n, m_target)
    return Jet(P.n, P.D, m_target, P.basepoint, P.coeffs[:, :k])


def jet_derivative_at(P: Jet, alpha, z, component: int = 0) -> float:
    """``d^alpha`` of the stored polynomial (one component) at an arbitrary point ``z``."""
    a = tuple(alpha.exponents if isinstance(alpha, MultiIndex) else alpha)
    if len(a) != P.n:
        raise ContractError("multi-index has the wrong length")
    if sum(a) > P.m:
        raise ContractError(f"|alpha| = {sum(a)} exceeds jet degree {P.m}")
    h = np.asarray(z, dtype=float) - np.asarray(P.basepoint)
    E = derivative_matrix(P.n, P.m, h)
    return float(E[index_of(P.n, P.m)[a]] @ P.coeffs[component])
