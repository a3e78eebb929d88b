"""Affine sets of jets, submodule closure, PSD minimization and matrix lifts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .jets import ContractError, Jet, jet_dim, multiplication_matrix

RANK_RTOL = 1e-10


class EmptyFiberError(ValueError):
    """A fiber taking part in a minimization is empty."""


class InternalConsistencyError(RuntimeError):
    """A numeric result violated an invariant by more than roundoff allows."""


def orthonormal_rows(V, rtol: float = RANK_RTOL, scale: float | None = None) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``V``.

    Singular values below ``rtol * scale`` are dropped; ``scale`` defaults to the
    largest singular value.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[None, :]
    if V.size == 0 or V.shape[0] == 0:
        return np.zeros((0, V.shape[1] if V.ndim == 2 else 0))
    _, s, Vt = np.linalg.svd(V, full_matrices=False)
    ref = s[0] if scale is None else max(scale, s[0] if s.size else 0.0)
    if ref == 0.0:
        return np.zeros((0, V.shape[1]))
    keep = s > rtol * ref
    return Vt[keep]


@dataclass(frozen=True, eq=False)
class AffineJetSet:
    """Either empty, or ``offset + span`` in coefficient space.

    ``span`` holds orthonormal rows; ``offset`` is orthogonal to them.
    """

    n: int
    D: int
    m: int
    basepoint: tuple[float, ...]
    is_empty: bool = False
    offset: np.ndarray = field(default=None, repr=False)
    span: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        size = self.size
        off = np.zeros(size) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(size)
        sp = np.zeros((0, size)) if self.span is None else np.asarray(self.span, dtype=float).reshape(-1, size)
        off.setflags(write=False)
        sp.setflags(write=False)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "span", sp)
        object.__setattr__(self, "basepoint", tuple(float(v) for v in self.basepoint))

    @property
    def size(self) -> int:
        return self.D * jet_dim(self.n, self.m)

    @property
    def dim(self) -> int:
        """Dimension of the homogeneous part (-1 for the empty set)."""
        return -1 if self.is_empty else self.span.shape[0]

    @classmethod
    def empty(cls, n: int, D: int, m: int, x) -> "AffineJetSet":
        return cls(n, D, m, tuple(x), is_empty=True)

    @classmethod
    def full(cls, n: int, D: int, m: int, x) -> "AffineJetSet":
        size = D * jet_dim(n, m)
        return cls(n, D, m, tuple(x), offset=np.zeros(size), span=np.eye(size))

    @classmethod
    def from_vectors(cls, n, D, m, x, offset, span_vectors, rtol: float = RANK_RTOL) -> "AffineJetSet":
        """Orthonormalize ``span_vectors`` and reduce ``offset`` to its minimal-norm representative."""
        size = D * jet_dim(n, m)
        U = orthonormal_rows(np.asarray(span_vectors, dtype=float).reshape(-1, size), rtol)
        off = np.asarray(offset, dtype=float).reshape(size)
        off = off - U.T @ (U @ off)
        return cls(n, D, m, tuple(x), offset=off, span=U)

    @classmethod
    def from_jets(cls, offset: Jet, span: Sequence[Jet], rtol: float = RANK_RTOL) -> "AffineJetSet":
        for s in span:
            if not s.same_space(offset):
                raise ContractError("span jets must share the offset's space")
        vecs = np.array([s.vector for s in span]).reshape(len(span), offset.vector.size)
        return cls.from_vectors(offset.n, offset.D, offset.m, offset.basepoint, offset.vector, vecs, rtol)

    @property
    def offset_jet(self) -> Jet:
        return Jet(self.n, self.D, self.m, self.basepoint, self.offset)

    @property
    def span_jets(self) -> list[Jet]:
        return [Jet(self.n, self.D, self.m, self.basepoint, v) for v in self.span]

    def homogeneous(self) -> "AffineJetSet":
        if self.is_empty:
            return self
        return AffineJetSet(self.n, self.D, self.m, self.basepoint, offset=np.zeros(self.size), span=self.span)

    def with_offset(self, offset) -> "AffineJetSet":
        if self.is_empty:
            raise ContractError("empty set has no offset")
        off = np.asarray(offset, dtype=float).reshape(self.size)
        off = off - self.span.T @ (self.span @ off)
        return AffineJetSet(self.n, self.D, self.m, self.basepoint, offset=off, span=self.span)

    def distance(self, v) -> float:
        """Euclidean distance in coefficient space (``inf`` for the empty set)."""
        if self.is_empty:
            return float("inf")
        v = v.vector if isinstance(v, Jet) else np.asarray(v, dtype=float).reshape(self.size)
        r = v - self.offset
        r = r - self.span.T @ (self.span @ r)
        return float(np.linalg.norm(r))

    def contains_set(self, other: "AffineJetSet", tol: float = 1e-8) -> bool:
        """Whether ``other`` is a subset, checked on its offset and spanning vectors."""
        if other.is_empty:
            return True
        if self.is_empty:
            return False
        if self.distance(other.offset) > tol:
            return False
        R = other.span - (other.span @ self.span.T) @ self.span
        return bool(np.all(np.linalg.norm(R, axis=1) <= tol)) if R.size else True

    def same_set(self, other: "AffineJetSet", tol: float = 1e-8) -> bool:
        return self.contains_set(other, tol) and other.contains_set(self, tol)

    def intersect_kernel(self, rows) -> "AffineJetSet":
        """Homogeneous part restricted to ``{v : rows @ v = 0}``, offset kept as is."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if self.is_empty or rows.size == 0:
            return self
        B = rows @ self.span.T
        W = null_space_rows(B)
        return AffineJetSet.from_vectors(
            self.n, self.D, self.m, self.basepoint, self.offset, W @ self.span if W.size else np.zeros((0, self.size))
        )


def null_space_rows(B, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal rows spanning the null space of ``B`` (acting on columns)."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    k = B.shape[1]
    if k == 0:
        return np.zeros((0, 0))
    if B.shape[0] == 0:
        return np.eye(k)
    _, s, Vt = np.linalg.svd(B, full_matrices=True)
    ref = s[0] if s.size else 0.0
    rank = int(np.sum(s > rtol * ref)) if ref > 0 else 0
    return Vt[rank:]


def membership(S: AffineJetSet, P: Jet, tol: float = 1e-8) -> bool:
    if S.is_empty:
        return False
    if (P.n, P.D, P.m) != (S.n, S.D, S.m):
        raise ContractError("jet and set dimensions differ")
    return S.distance(P) <= tol


def closure_rows(U: np.ndarray, n: int, D: int, m: int, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal rows of the smallest submodule containing the rows of ``U``."""
    dim = jet_dim(n, m)
    size = D * dim
    mults = []
    for j in range(n):
        c = np.zeros(dim)
        if m >= 1:
            c[1 + j] = 1.0
        mults.append(multiplication_matrix(c, n, m))
    basis = orthonormal_rows(np.asarray(U, dtype=float).reshape(-1, size), rtol)
    while True:
        if basis.shape[0] in (0, size):
            return basis
        blocks = basis.reshape(-1, D, dim)
        grown = [basis] + [(blocks @ T.T).reshape(-1, size) for T in mults]
        new = orthonormal_rows(np.vstack(grown), rtol, scale=1.0)
        if new.shape[0] == basis.shape[0]:
            return basis
        basis = new


def module_closure(span: Sequence[Jet], x, m: int, rtol: float = RANK_RTOL, n: int | None = None, D: int | None = None) -> AffineJetSet:
    """Smallest submodule of jet space at ``x`` containing ``span``."""
    x = tuple(float(v) for v in x)
    if span:
        n, D = span[0].n, span[0].D
        for s in span:
            if s.basepoint != x or s.m != m or (s.n, s.D) != (n, D):
                raise ContractError("all jets must be based at x with degree m")
        U = np.array([s.vector for s in span])
    else:
        n = len(x) if n is None else n
        D = 1 if D is None else D
        U = np.zeros((0, D * jet_dim(n, m)))
    rows = closure_rows(U, n, D, m, rtol)
    return AffineJetSet(n, D, m, x, offset=np.zeros(D * jet_dim(n, m)), span=rows)


@dataclass(frozen=True, eq=False)
class PSDQuadraticForm:
    """``v -> v^T Q v`` on a product of jet spaces.

    When built from a factor ``M`` (``Q = M^T M``) minimizations solve the
    least-squares problem on ``M`` directly.
    """

    matrix: np.ndarray
    factor: np.ndarray | None = None

    def __post_init__(self):
        Q = np.asarray(self.matrix, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ContractError("quadratic form matrix must be square")
        scale = max(1.0, float(np.max(np.abs(Q)))) if Q.size else 1.0
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * scale):
            raise ContractError("quadratic form matrix must be symmetric")
        object.__setattr__(self, "matrix", 0.5 * (Q + Q.T))

    @classmethod
    def from_factor(cls, M) -> "PSDQuadraticForm":
        M = np.asarray(M, dtype=float)
        return cls(M.T @ M, M)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, v) -> float:
        v = np.asarray(v, dtype=float)
        if self.factor is not None:
            r = self.factor @ v
            return float(r @ r)
        return float(v @ self.matrix @ v)

    def check_psd(self) -> bool:
        w = np.linalg.eigvalsh(self.matrix)
        return bool(w.size == 0 or w[0] >= -1e-9 * max(abs(w[-1]), 1e-300))


def min_psd_over_affine(
    Q: PSDQuadraticForm,
    blocks: Sequence[AffineJetSet | None],
    fixed: Mapping[int, Jet | np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Minimize ``Q`` over the product of the blocks, with some blocks fixed.

    Returns the clamped minimum and the minimizing coefficient vector of each block.
    """
    fixed = dict(fixed or {})
    sizes, centers, spans = [], [], []
    for b, S in enumerate(blocks):
        if b in fixed:
            v = fixed[b]
            v = v.vector if isinstance(v, Jet) else np.asarray(v, dtype=float).reshape(-1)
            sizes.append(v.size)
            centers.append(v)
            spans.append(np.zeros((0, v.size)))
            continue
        if S is None or S.is_empty:
            raise EmptyFiberError(f"empty fiber in block {b}")
        sizes.append(S.size)
        centers.append(S.offset)
        spans.append(S.span)
    if sum(sizes) != Q.dimension:
        raise ContractError(f"form has dimension {Q.dimension}, blocks total {sum(sizes)}")
    c = np.concatenate(centers) if centers else np.zeros(0)
    nfree = sum(s.shape[0] for s in spans)
    U = np.zeros((c.size, nfree))
    row = col = 0
    for sz, sp in zip(sizes, spans):
        U[row:row + sz, col:col + sp.shape[0]] = sp.T
        row += sz
        col += sp.shape[0]
    if Q.factor is not None:
        A = Q.factor @ U
        b = -(Q.factor @ c)
        z = np.linalg.lstsq(A, b, rcond=RANK_RTOL)[0] if nfree else np.zeros(0)
    else:
        G = U.T @ Q.matrix @ U
        g = -(U.T @ Q.matrix @ c)
        z = np.linalg.lstsq(G, g, rcond=RANK_RTOL)[0] if nfree else np.zeros(0)
    v = c + U @ z
    value = Q(v)
    scale = max(float(np.max(np.abs(Q.matrix))) * float(v @ v + c @ c), 1e-300) if Q.dimension else 1.0
    if value < 0:
        if value < -1e-9 * scale:
            raise InternalConsistencyError(f"PSD minimum {value} is below roundoff level")
        value = 0.0
    out, row = [], 0
    for sz in sizes:
        out.append(v[row:row + sz])
        row += sz
    return value, out


def range_projection(A, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthogonal projector onto the column space of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((A.shape[0], A.shape[0]))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((A.shape[0], A.shape[0]))
    Ur = U[:, s >= rtol * s[0]]
    return Ur @ Ur.T


def min_norm_lift(A, xi, rtol: float = RANK_RTOL) -> np.ndarray:
    """Least-norm ``eta`` with ``A eta = Pi(A) xi``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    xi = np.asarray(xi, dtype=float).reshape(A.shape[0])
    return np.linalg.pinv(A, rcond=rtol) @ (range_projection(A, rtol) @ xi)
