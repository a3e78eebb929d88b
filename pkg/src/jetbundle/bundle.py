"""Bundles over sampled domains, the Whitney form and Glaeser refinement."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .domain import SampledDomain, default_ladder, shells
from .expressions import ScalarExpression, taylor_coefficients_many
from .jets import (
    ContractError,
    Jet,
    _shift_structure,
    alpha_factorials,
    alpha_orders,
    jet_dim,
    multiply_coeffs,
)
from .subspace import (
    RANK_RTOL,
    AffineJetSet,
    EmptyFiberError,
    PSDQuadraticForm,
    closure_rows,
    min_psd_over_affine,
    orthonormal_rows,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RefineConfig:
    """Numeric knobs of the refinement limit test."""

    k_bar: int = 1
    l_star: int | None = None
    radii: tuple[float, ...] | None = None
    cap: int = 64
    decay_slope_min: float = 0.5
    ambiguous_slope_min: float = 0.1
    zero_tol: float = 1e-8
    kernel_tol: float = 1e-8
    bound_factor: float = 1e3
    min_levels: int = 3
    fit_levels: int = 3
    fit_rtol: float = 1e-8
    fit_order: int = 3
    rank_rtol: float = RANK_RTOL
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 1 <= self.k_bar <= 3:
            raise ContractError("k_bar must be 1, 2 or 3")
        if self.l_star is not None and self.l_star < 0:
            raise ContractError("l_star must be nonnegative")
        if self.fit_order < 0:
            raise ContractError("fit_order must be nonnegative")
        for name in ("cap", "min_levels", "fit_levels", "threads"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("zero_tol", "kernel_tol", "bound_factor", "rank_rtol"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.radii is not None:
            r = tuple(float(v) for v in self.radii)
            if not r or any(v <= 0 for v in r) or any(a <= b for a, b in zip(r, r[1:])):
                raise ContractError("radii must be positive and strictly descending")
            object.__setattr__(self, "radii", r)

    def ladder(self, dom: SampledDomain) -> list[float]:
        return list(self.radii) if self.radii is not None else default_ladder(dom.diameter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radii"] = None if self.radii is None else list(self.radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        d = dict(d)
        if d.get("radii") is not None:
            d["radii"] = tuple(d["radii"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)


def default_l_star(n: int, m: int, D: int) -> int:
    return 2 * D * jet_dim(n, m) + 3


@dataclass(frozen=True, eq=False)
class Bundle:
    domain: SampledDomain
    n: int
    m: int
    D: int
    fibers: tuple[AffineJetSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "fibers", tuple(self.fibers))
        if len(self.fibers) != len(self.domain):
            raise ContractError("one fiber per domain point required")
        for x, F in zip(self.domain.points, self.fibers):
            if (F.n, F.D, F.m) != (self.n, self.D, self.m):
                raise ContractError("fiber dimensions disagree with the bundle")
            if not np.array_equal(np.asarray(F.basepoint), x):
                raise ContractError("fiber basepoint differs from its domain point")

    @property
    def proper(self) -> bool:
        return not any(F.is_empty for F in self.fibers)

    @property
    def size(self) -> int:
        return self.D * jet_dim(self.n, self.m)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked offsets ``(N, S)`` and zero-padded span bases ``(N, S, dmax)``."""
        cached = self.__dict__.get("_arrays")
        if cached is None:
            S = self.size
            dmax = max([F.dim for F in self.fibers] + [0])
            offs = np.zeros((len(self.fibers), S))
            spans = np.zeros((len(self.fibers), S, dmax))
            for i, F in enumerate(self.fibers):
                if not F.is_empty:
                    offs[i] = F.offset
                    spans[i, :, : F.dim] = F.span.T
            cached = (offs, spans)
            object.__setattr__(self, "_arrays", cached)
        return cached

    def dims(self) -> list[int]:
        return [F.dim for F in self.fibers]

    def empty_points(self) -> list[int]:
        return [i for i, F in enumerate(self.fibers) if F.is_empty]

    def with_fibers(self, fibers) -> "Bundle":
        return Bundle(self.domain, self.n, self.m, self.D, tuple(fibers))

    def contains(self, other: "Bundle", tol: float = 1e-8) -> bool:
        """Fiberwise inclusion ``other <= self``."""
        return all(F.contains_set(G, tol) for F, G in zip(self.fibers, other.fibers))

    def same_as(self, other: "Bundle", tol: float = 1e-8) -> bool:
        return all(F.same_set(G, tol) for F, G in zip(self.fibers, other.fibers))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "m": self.m,
            "D": self.D,
            "fibers": [fiber_to_dict(x, F) for x, F in zip(self.domain.points, self.fibers)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def fiber_to_dict(x, F: AffineJetSet) -> dict:
    d = {"point": [float(v) for v in x]}
    if F.is_empty:
        d["empty"] = True
    else:
        d["offset_coeffs"] = [float(v) for v in F.offset]
        d["span_coeffs"] = [[float(v) for v in row] for row in F.span]
    return d


def bundle_from_dict(d: dict, domain: SampledDomain) -> Bundle:
    n, m, D = d["n"], d["m"], d["D"]
    fibers = []
    for x, f in zip(domain.points, d["fibers"]):
        if f.get("empty"):
            fibers.append(AffineJetSet.empty(n, D, m, x))
        else:
            fibers.append(AffineJetSet(n, D, m, tuple(x), offset=f["offset_coeffs"], span=f["span_coeffs"]))
    return Bundle(domain, n, m, D, tuple(fibers))


# Whitney form

def _batched_derivative_matrices(n: int, m: int, H: np.ndarray) -> np.ndarray:
    """``E[t]`` maps coefficients at ``x`` to ``d^alpha`` values at ``x + H[t]``."""
    rows, cols, _, falling, powers = _shift_structure(n, m)
    dim = jet_dim(n, m)
    T = H.shape[0]
    if n:
        mono = np.prod(H[:, None, :] ** powers[None, :, :], axis=2)
    else:
        mono = np.ones((T, len(rows)))
    E = np.zeros((T, dim, dim))
    E[:, rows, cols] = falling[None, :] * mono
    return E


def pair_blocks(xi, xj, n: int, m: int, D: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrices ``(Ai, Aj)`` with pair term ``|Ai ci + Aj cj|^2`` for coefficients based at ``xi``, ``xj``.

    Entries are ``d^alpha (P_i - P_j)(x_j) / |x_i - x_j|^(m - |alpha|)`` over all components.
    """
    Ai, Aj = pair_blocks_batched(np.asarray(xi, dtype=float)[None], np.asarray(xj, dtype=float)[None], n, m, D)
    return Ai[0], Aj[0]


def pair_blocks_batched(Xi: np.ndarray, Xj: np.ndarray, n: int, m: int, D: int):
    H = Xj - Xi
    dist = np.linalg.norm(H, axis=1)
    if np.any(dist == 0):
        raise ContractError("pair points must be distinct")
    w = dist[:, None] ** (-(m - alpha_orders(n, m))[None, :].astype(float))
    E = _batched_derivative_matrices(n, m, H) * w[:, :, None]
    F = np.diag(alpha_factorials(n, m))[None] * w[:, :, None]
    eye = np.eye(D)
    Ai = np.einsum("ab,tij->taibj", eye, E).reshape(len(H), D * E.shape[1], D * E.shape[2])
    Aj = -np.einsum("ab,tij->taibj", eye, F).reshape(Ai.shape)
    return Ai, Aj


def whitney_form(x0, P0: Jet, pts: Sequence, jets: Sequence[Jet], m: int) -> float:
    """Sum over pairs ``0 <= i < j <= k`` of the scaled jet mismatches, evaluated at ``x_j``.

    Coincident points follow the ``0^0 = 0`` convention: the pair contributes 0 when
    the mismatch vanishes and ``inf`` otherwise.
    """
    xs = [np.asarray(x0, dtype=float)] + [np.asarray(p, dtype=float) for p in pts]
    Ps = [P0] + list(jets)
    if len(xs) != len(Ps):
        raise ContractError("need one jet per point")
    n, D = P0.n, P0.D
    for x, P in zip(xs, Ps):
        if P.m != m or P.n != n or P.D != D:
            raise ContractError("jets must share n, D and the degree m")
        if not np.array_equal(np.asarray(P.basepoint), x):
            raise ContractError("each jet must be based at its point")
    total = 0.0
    for j in range(len(xs)):
        for i in range(j):
            if np.array_equal(xs[i], xs[j]):
                diff = Ps[i].vector - Ps[j].vector
                if np.any(diff != 0):
                    return math.inf
                continue
            Ai, Aj = pair_blocks(xs[i], xs[j], n, m, D)
            r = Ai @ Ps[i].vector + Aj @ Ps[j].vector
            total += float(r @ r)
    return total


def tuple_form_factor(points: np.ndarray, n: int, m: int, D: int) -> np.ndarray:
    """Factor ``M`` of the Whitney form on a point tuple: form(c) = |M c|^2, ``c`` stacked per point."""
    k1 = points.shape[0]
    S = D * jet_dim(n, m)
    blocks = []
    for j in range(k1):
        for i in range(j):
            Ai, Aj = pair_blocks(points[i], points[j], n, m, D)
            row = np.zeros((S, k1 * S))
            row[:, i * S:(i + 1) * S] = Ai
            row[:, j * S:(j + 1) * S] = Aj
            blocks.append(row)
    return np.vstack(blocks) if blocks else np.zeros((0, k1 * S))


def glaeser_min(B: Bundle, x0, P0: Jet, pts: Sequence[int]) -> float:
    """Minimum of the Whitney form over ``P_i`` in the fibers at the tuple ``pts`` (point indices)."""
    x0 = np.asarray(x0, dtype=float)
    points = np.vstack([x0[None], B.domain.points[list(pts)]])
    Q = PSDQuadraticForm.from_factor(tuple_form_factor(points, B.n, B.m, B.D))
    blocks = [None] + [B.fibers[i] for i in pts]
    for i in pts:
        if B.fibers[i].is_empty:
            raise EmptyFiberError(f"empty fiber at point {i}")
    value, _ = min_psd_over_affine(Q, blocks, {0: P0})
    return value


# refinement

@dataclass
class PointReport:
    index: int
    dim_before: int
    dim_after: int
    levels: list[float] = field(default_factory=list)
    envelope: list[float] = field(default_factory=list)
    slope: float | None = None
    status: str = "unchanged"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "dim_before": self.dim_before,
            "dim_after": self.dim_after,
            "levels": [float(v) for v in self.levels],
            "envelope": [float(v) for v in self.envelope],
            "slope": None if self.slope is None else float(self.slope),
            "status": self.status,
        }


@dataclass
class RefinementReport:
    iteration: int
    points: list[PointReport]
    proper: bool
    changed: int = 0

    @property
    def ambiguous(self) -> list[int]:
        return [p.index for p in self.points if p.status == "ambiguous"]

    @property
    def emptied(self) -> list[int]:
        return [p.index for p in self.points if p.status == "emptied"]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "proper": self.proper,
            "changed": self.changed,
            "points": [p.to_dict() for p in self.points],
        }


def _slope(levels: Sequence[float], values: Sequence[float], floor: float) -> float:
    """Least-squares slope of ``log(value)`` against ``log(radius)``."""
    x = np.log(np.asarray(levels, dtype=float))
    y = np.log(np.maximum(np.asarray(values, dtype=float), floor))
    if len(x) < 2 or np.ptp(x) == 0:
        return 0.0
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


class _PointProblem:
    """Per-tuple linear data ``(L_t, r_t)`` at one base point.

    For ``P0 = offset + span^T w`` the minimized Whitney form on tuple ``t`` is
    ``|L_t w - r_t|^2``.
    """

    def __init__(self, B: Bundle, i0: int, tuples: list[tuple[int, ...]]):
        F0 = B.fibers[i0]
        x0 = B.domain.points[i0]
        n, m, D = B.n, B.m, B.D
        S = B.size
        self.tuples = tuples
        T = len(tuples)
        d0 = F0.dim
        self.L = np.zeros((T, 0, d0))
        self.r = np.zeros((T, 0))
        if T == 0:
            return
        k = len(tuples[0])
        if k == 1:
            idx = np.array([t[0] for t in tuples])
            X1 = B.domain.points[idx]
            A0, A1 = pair_blocks_batched(np.repeat(x0[None], T, axis=0), X1, n, m, D)
            offs, spans = B.arrays()
            c = np.einsum("tij,j->ti", A0, F0.offset) + np.einsum("tij,tj->ti", A1, offs[idx])
            free = A1 @ spans[idx]
            G = A0 @ F0.span.T[None]
        else:
            G_list, c_list, free_list = [], [], []
            for t in tuples:
                pts = np.vstack([x0[None], B.domain.points[list(t)]])
                M = tuple_form_factor(pts, n, m, D)
                M0 = M[:, :S]
                cols = [M[:, (a + 1) * S:(a + 2) * S] for a in range(k)]
                G_list.append(M0 @ F0.span.T)
                c_list.append(M0 @ F0.offset + sum(Ca @ B.fibers[j].offset for Ca, j in zip(cols, t)))
                free_list.append(np.hstack([Ca @ B.fibers[j].span.T for Ca, j in zip(cols, t)]))
            width = max(f.shape[1] for f in free_list)
            free = np.zeros((T, G_list[0].shape[0], width))
            for t, f in enumerate(free_list):
                free[t, :, : f.shape[1]] = f
            G = np.array(G_list)
            c = np.array(c_list)
        # project out the free directions of the tuple fibers
        if free.shape[2]:
            Uf, s, _ = np.linalg.svd(free, full_matrices=False)
            smax = s.max(axis=1, keepdims=True)
            keep = (s > RANK_RTOL * np.maximum(smax, 1e-300)).astype(float)
            Uf = Uf * keep[:, None, :]
            G = G - Uf @ np.einsum("tji,tjk->tik", Uf, G)
            c = c - np.einsum("tij,tj->ti", Uf, np.einsum("tji,tj->ti", Uf, c))
        self.L = G
        self.r = -c

    def values(self, w: np.ndarray) -> np.ndarray:
        res = self.L @ w - self.r
        return np.sum(res * res, axis=1)

    def op_norms(self, V: np.ndarray) -> np.ndarray:
        """Per tuple, the largest ``|L_t v|^2`` over unit ``v`` in the row span of ``V``."""
        if V.shape[0] == 0:
            return np.zeros(len(self.tuples))
        LV = self.L @ V.T
        if V.shape[0] == 1:
            return np.sum(LV * LV, axis=(1, 2))
        gram = np.einsum("tij,tik->tjk", LV, LV)
        return np.linalg.eigvalsh(gram)[:, -1]


def _empties_accumulate(B: Bundle, levels: list, count: int) -> bool:
    """True if each of the finest ``count`` annuli holds a tuple touching an empty fiber."""
    sets = [set(lvl) for _, lvl in levels[-count:]]
    for a, s in enumerate(sets):
        ring = s - sets[a + 1] if a + 1 < len(sets) else s
        if not any(B.fibers[j].is_empty for t in ring for j in t):
            return False
    return True


def _level_best(prob: _PointProblem, members: list[np.ndarray], basis: np.ndarray, rtol: float) -> list[float]:
    """Per level, the largest tuple value at that level's own least-squares offset."""
    out = []
    for mem in members:
        L, r = prob.L[mem], prob.r[mem]
        if basis.shape[1]:
            A = (L @ basis).reshape(-1, basis.shape[1])
            z, *_ = np.linalg.lstsq(A, r.reshape(-1), rcond=rtol)
            res = L @ (basis @ z) - r
        else:
            res = -r
        out.append(float(np.max(np.sum(res * res, axis=1))))
    return out


def _level_max(per_tuple: np.ndarray, level_members: list[np.ndarray]) -> list[float]:
    return [float(per_tuple[mem].max()) for mem in level_members]


def _envelope(per_tuple: np.ndarray, level_members: list[np.ndarray]) -> list[float]:
    """Max over every sampled tuple within each radius (finer levels included)."""
    return np.maximum.accumulate(_level_max(per_tuple, level_members)[::-1])[::-1].tolist()


def refine_fiber(B: Bundle, x0, mode: str = "strong", cfg: RefineConfig | None = None) -> AffineJetSet:
    """Refined fiber at the domain point ``x0``."""
    cfg = cfg or RefineConfig()
    i0 = B.domain.index_of(x0)
    if i0 is None:
        raise ContractError("x0 is not a domain point")
    return _refine_point(B, i0, mode, cfg, cfg.ladder(B.domain))[0]


def _svd_square_v(A: np.ndarray):
    """SVD with a complete right factor but only as many left vectors as needed."""
    return np.linalg.svd(A, full_matrices=A.shape[0] < A.shape[1])


def _lexicographic_fit(Ls: list[np.ndarray], rs: list[np.ndarray], width: int, rtol: float) -> np.ndarray:
    """Least squares over groups of rows, last group first; earlier groups only
    pin down directions the later ones leave free."""
    z = np.zeros(width)
    free = np.eye(width)
    for L, r in zip(reversed(Ls), reversed(rs)):
        if free.shape[1] == 0:
            break
        Lm = L.reshape(-1, width)
        # rank is judged against the whole group operator: after restriction to the
        # free directions only numerical noise may remain
        ref = np.linalg.norm(Lm, 2) if Lm.size else 0.0
        if ref == 0:
            continue
        U, sv, Vt = _svd_square_v(Lm @ free)
        b = r.reshape(-1) - Lm @ z
        rank = int(np.sum(sv > rtol * ref))
        z = z + free @ (Vt[:rank].T @ ((U[:, :rank].T @ b) / sv[:rank]))
        free = free @ Vt[rank:].T
    return z


def _shift_matrices(n: int, m: int, H: np.ndarray) -> np.ndarray:
    """``S[t]`` re-expands Taylor coefficients at ``x`` about ``x + H[t]``."""
    rows, cols, binom, _, powers = _shift_structure(n, m)
    dim = jet_dim(n, m)
    mono = np.prod(H[:, None, :] ** powers[None, :, :], axis=2) if n else np.ones((len(H), len(rows)))
    S = np.zeros((len(H), dim, dim))
    S[:, rows, cols] = binom[None, :] * mono
    return S


def _fit_offset(B: Bundle, i0: int, groups: list[list[int]], kernel: np.ndarray, cfg: RefineConfig):
    """Offset coordinates ``w`` of the limit jet at ``x0`` from a local polynomial model.

    A polynomial of degree ``m + q`` whose m-jet at ``x0`` lies in the fiber is
    fitted so that its m-jets at the neighbors fall into their fibers (Whitney
    weights, finest group first). Sections that are polynomials of degree
    ``<= m + q`` are recovered exactly, so the estimate carries no O(r) bias.
    The largest ``q <= fit_order`` that determines ``w`` modulo ``kernel`` wins;
    ``None`` if no order does.
    """
    F0 = B.fibers[i0]
    x0 = B.domain.points[i0]
    n, m, D, d0 = B.n, B.m, B.D, F0.dim
    pm = jet_dim(n, m)
    offs, spans = B.arrays()
    comp = np.eye(d0) - kernel.T @ kernel if kernel.size else np.eye(d0)
    if not np.any(comp):
        return np.zeros(d0)
    groups = [np.array(g, dtype=int) for g in groups]
    allj = np.concatenate(groups)
    rho = float(np.max(np.linalg.norm(B.domain.points[allj] - x0, axis=1))) if allj.size else 0.0
    if rho == 0:
        return None
    for q in range(cfg.fit_order, -1, -1):
        pq = jet_dim(n, m + q)
        orders = alpha_orders(n, m + q)
        Ls, rs = [], []
        for g in groups:
            H = B.domain.points[g] - x0
            dist = np.linalg.norm(H, axis=1)
            S = _shift_matrices(n, m + q, H)[:, :pm, :]
            wts = alpha_factorials(n, m)[None, :] * dist[:, None] ** (-(m - alpha_orders(n, m))[None, :].astype(float))
            S = S * wts[:, :, None]
            S = S * (rho ** orders)[None, None, :]
            S[:, :, :pm] /= (rho ** orders[:pm])[None, None, :]
            eye = np.eye(D)
            low = np.einsum("ab,tij->taibj", eye, S[:, :, :pm]).reshape(len(g), D * pm, D * pm)
            high = np.einsum("ab,tij->taibj", eye, S[:, :, pm:]).reshape(len(g), D * pm, D * (pq - pm))
            W = np.repeat(wts, D, axis=0).reshape(len(g), D, pm).reshape(len(g), D * pm)
            L = np.concatenate([low @ F0.span.T, high], axis=2)
            r = W * offs[g] - low @ F0.offset
            fr = W[:, :, None] * spans[g]
            if fr.shape[2]:
                Uf, sv, _ = np.linalg.svd(fr, full_matrices=False)
                keep = (sv > RANK_RTOL * np.maximum(sv.max(axis=1, keepdims=True), 1e-300)).astype(float)
                Uf = Uf * keep[:, None, :]
                L = L - Uf @ np.einsum("tji,tjk->tik", Uf, L)
                r = r - np.einsum("tij,tj->ti", Uf, np.einsum("tji,tj->ti", Uf, r))
            Ls.append(L)
            rs.append(r)
        width = d0 + D * (pq - pm)
        A = np.concatenate([L.reshape(-1, width) for L in Ls])
        _, sv, Vt = _svd_square_v(A)
        rank = int(np.sum(sv > cfg.fit_rtol * sv[0])) if sv.size and sv[0] > 0 else 0
        null_w = Vt[rank:, :d0]
        if null_w.size and np.linalg.norm(null_w @ comp, 2) > 1e-6:
            continue
        return _lexicographic_fit(Ls, rs, width, cfg.fit_rtol)[:d0]
    return None



def _refine_point(B: Bundle, i0: int, mode: str, cfg: RefineConfig, radii: list[float]):
    F0 = B.fibers[i0]
    report = PointReport(i0, F0.dim, F0.dim)
    if F0.is_empty:
        report.status = "empty"
        return F0, report
    x0 = B.domain.points[i0]
    per_level = shells(B.domain, x0, radii, cfg.k_bar, cfg.cap, seed=cfg.seed + i0)
    raw = [(r, lvl) for r, lvl in zip(radii, per_level) if lvl]
    if len(raw) >= cfg.min_levels and _empties_accumulate(B, raw, cfg.fit_levels):
        # empty fibers at every one of the finest scales: no jet at x0 can be a limit
        report.status = "emptied"
        report.dim_after = -1
        report.levels = [r for r, _ in raw]
        return AffineJetSet.empty(B.n, B.D, B.m, x0), report
    # elsewhere, tuples touching empty fibers are dropped: those points carry no admissible jets
    per_level = [[t for t in lvl if not any(B.fibers[j].is_empty for j in t)] for lvl in per_level]
    populated = [(r, lvl) for r, lvl in zip(radii, per_level) if lvl]
    if len(populated) < cfg.min_levels:
        report.status = "vacuous" if not populated else "unresolved"
        report.levels = [r for r, _ in populated]
        return F0, report
    uniq: dict[tuple[int, ...], int] = {}
    for _, lvl in populated:
        for t in lvl:
            uniq.setdefault(t, len(uniq))
    tuples = list(uniq)
    members = [np.array([uniq[t] for t in lvl]) for _, lvl in populated]
    levels = [r for r, _ in populated]
    prob = _PointProblem(B, i0, tuples)
    fit = slice(max(0, len(levels) - cfg.fit_levels), len(levels))
    fit_levels = levels[fit]
    ambiguous = False

    def decays(env: list[float], tol: float) -> tuple[bool, bool, float]:
        s = _slope(fit_levels, env[fit], tol * 1e-3)
        if env[-1] <= tol:
            return True, False, s
        if s >= cfg.decay_slope_min:
            return True, False, s
        return False, s > cfg.ambiguous_slope_min, s

    # homogeneous part: directions of the fiber along which every tuple form vanishes in the limit
    d0 = F0.dim
    kernel = np.zeros((0, d0))
    if d0:
        fine = members[-1]
        Gsum = np.einsum("tij,tik->jk", prob.L[fine], prob.L[fine]) / len(fine)
        _, vecs = np.linalg.eigh(Gsum)
        cand = []
        for v in vecs.T:
            env = _envelope(prob.op_norms(v[None]), members)
            if decays(env, cfg.kernel_tol)[0]:
                cand.append(v)
        K = np.array(cand).reshape(-1, d0)
        while K.shape[0]:
            env = _envelope(prob.op_norms(K), members)
            if decays(env, cfg.kernel_tol)[0]:
                break
            worst = np.argmax([prob.op_norms(k[None])[members[-1]].max() for k in K])
            K = np.delete(K, worst, axis=0)
        kernel = K
    # close the kept directions under the module action
    span_rows = kernel @ F0.span if kernel.size else np.zeros((0, B.size))
    closed = closure_rows(span_rows, B.n, B.D, B.m, cfg.rank_rtol) if span_rows.shape[0] else span_rows
    kernel = orthonormal_rows(closed @ F0.span.T, cfg.rank_rtol, scale=1.0) if closed.shape[0] else kernel
    scale = max(1.0, float(np.max(np.sum(prob.r * prob.r, axis=1))))
    w = _fit_offset(B, i0, [sorted({j for t in lvl for j in t}) for _, lvl in populated], kernel, cfg)
    if w is None:
        w = _lexicographic_fit([prob.L[mem] for mem in members], [prob.r[mem] for mem in members], d0, cfg.fit_rtol)
    # verdict: the best value attainable at each scale must tend to zero
    per_level = _level_best(prob, members, np.eye(d0), cfg.fit_rtol)
    env = np.maximum.accumulate(per_level[::-1])[::-1].tolist()
    ok, amb, slope = decays(env, cfg.zero_tol * scale)
    report.levels = levels
    report.envelope = env
    report.slope = slope
    if ok and mode == "strong":
        # uniform bound: no blow-up of the per-level optima as tuples approach x0
        ok = per_level[-1] <= cfg.bound_factor * max(per_level[0], cfg.zero_tol * scale)
    if not ok and not amb:
        report.status = "emptied"
        report.dim_after = -1
        return AffineJetSet.empty(B.n, B.D, B.m, x0), report
    ambiguous |= amb and not ok
    new_offset = F0.offset + F0.span.T @ w
    new_span = kernel @ F0.span if kernel.size else np.zeros((0, B.size))
    out = AffineJetSet.from_vectors(B.n, B.D, B.m, x0, new_offset, new_span, cfg.rank_rtol)
    report.dim_after = out.dim
    if ambiguous:
        report.status = "ambiguous"
    else:
        report.status = "kept" if out.dim == F0.dim else "shrunk"
    return out, report


def refine(
    B: Bundle,
    mode: str = "strong",
    cfg: RefineConfig | None = None,
    only: Sequence[int] | None = None,
    iteration: int = 1,
) -> tuple[Bundle, RefinementReport]:
    """One refinement pass; ``only`` restricts recomputation to the given points."""
    if mode not in ("standard", "strong"):
        raise ContractError(f"unknown mode {mode}")
    cfg = cfg or RefineConfig()
    radii = cfg.ladder(B.domain)
    todo = range(len(B.domain)) if only is None else sorted(set(only))

    def work(i):
        return _refine_point(B, i, mode, cfg, radii)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(work, todo))
    else:
        results = [work(i) for i in todo]
    fibers = list(B.fibers)
    reports = {i: PointReport(i, F.dim, F.dim, status="skipped" if not F.is_empty else "empty") for i, F in enumerate(B.fibers)}
    changed = 0
    for i, (fiber, rep) in zip(todo, results):
        if fiber.dim != fibers[i].dim or not fiber.same_set(fibers[i], 1e-10):
            changed += 1
        fibers[i] = fiber
        reports[i] = rep
    out = B.with_fibers(fibers)
    rep = RefinementReport(iteration, [reports[i] for i in range(len(fibers))], out.proper, changed)
    return out, rep


def iterate_refine(
    B: Bundle,
    l_star: int | None = None,
    mode: str = "strong",
    cfg: RefineConfig | None = None,
    history: list | None = None,
) -> tuple[Bundle, list[RefinementReport]]:
    """Up to ``l_star`` passes, stopping at a fixed point.

    ``history`` (optional list) receives the input bundle and every iterate.

    After the first pass only points whose own fiber or some fiber within the
    largest ladder radius changed are recomputed; the result is identical to a
    full pass because the refined fiber depends only on that neighborhood.
    """
    cfg = cfg or RefineConfig()
    if l_star is None:
        l_star = cfg.l_star if cfg.l_star is not None else default_l_star(B.n, B.m, B.D)
    if l_star < 0:
        raise ContractError("l_star must be nonnegative")
    reports = []
    radii = cfg.ladder(B.domain)
    reach = radii[0] if radii else 0.0
    only = None
    if history is not None:
        history.append(B)
    for it in range(1, l_star + 1):
        new, rep = refine(B, mode, cfg, only=only, iteration=it)
        if history is not None:
            history.append(new)
        changed = [i for i in range(len(B.domain)) if new.fibers[i].dim != B.fibers[i].dim or not new.fibers[i].same_set(B.fibers[i], 1e-10)]
        reports.append(rep)
        B = new
        if not changed:
            break
        touched = set(changed)
        for i in changed:
            touched.update(B.domain.tree.query_ball_point(B.domain.points[i], reach))
        only = sorted(touched)
    return B, reports


def bundle_scalar_product(phi: ScalarExpression, B: Bundle) -> Bundle:
    """Multiply every offset by the m-jet of ``phi`` at its point; modules are unchanged."""
    if not B.proper:
        raise ContractError("scalar product needs a proper bundle")
    dim = jet_dim(B.n, B.m)
    phis = taylor_coefficients_many(phi, B.domain.points, B.m) if len(B.domain) else np.zeros((0, dim))
    fibers = []
    for F, c in zip(B.fibers, phis):
        off = multiply_coeffs(c[None, :], F.offset.reshape(B.D, dim), B.n, B.m).reshape(-1)
        fibers.append(F.with_offset(off))
    return B.with_fibers(fibers)
