"""Independent ground truth: the closed-form Epstein-Hochster criterion, a
global Whitney least-squares fit, and membership checks for explicit sections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import sympy
from scipy.sparse.linalg import spsolve

from .bundle import Bundle, _slope, pair_blocks_batched
from .domain import shells
from .expressions import ScalarExpression, jet_from_expression
from .jets import ContractError


class UnsupportedInputError(ContractError):
    """The oracle does not handle this input (e.g. a non-polynomial right side)."""


class OracleSizeError(ContractError):
    """The global fit would have too many unknowns."""


@dataclass(frozen=True)
class FitConfig:
    """Knobs of :func:`whitney_fit`."""

    fit_tol: float = 1e-6
    max_unknowns: int = 200_000
    cutoff_factor: float = 4.0
    radii: tuple[float, ...] | None = None
    cap: int = 64
    decay_slope_min: float = 0.5
    min_levels: int = 3
    fit_levels: int = 3
    neighbors: int = 16
    ridge: float = 1e-12
    weight_power: float = 2.0

    def __post_init__(self):
        for name in ("fit_tol", "cutoff_factor", "decay_slope_min", "ridge"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        for name in ("max_unknowns", "cap", "min_levels", "fit_levels", "neighbors"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.radii is not None:
            object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))


@dataclass
class OracleVerdict:
    solvable: bool
    method: str
    witness: str
    residual: float | None = None
    failures: list[int] = field(default_factory=list)
    jets: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("jets")
        return d


# closed-form criterion

EH_CONDITIONS = (
    ((0, 0, 0), "axis", "f ≠ 0 on z-axis"),
    ((1, 0, 0), "axis", "∂f/∂x ≠ 0 on z-axis"),
    ((0, 1, 0), "axis", "∂f/∂y ≠ 0 on z-axis"),
    ((1, 1, 0), "origin", "∂²f/∂x∂y ≠ 0 at origin"),
    ((1, 1, 1), "origin", "∂³f/∂x∂y∂z ≠ 0 at origin"),
)


def to_sympy(e: ScalarExpression, symbols: Sequence[sympy.Symbol]) -> sympy.Expr:
    """Exact sympy form of a polynomial-compatible expression tree."""
    if e.op == "const":
        return sympy.Rational(e.value)
    if e.op == "var":
        return symbols[e.index - 1]
    a = [to_sympy(c, symbols) for c in e.args]
    if e.op == "add":
        return sympy.Add(*a)
    if e.op == "mul":
        return sympy.Mul(*a)
    if e.op == "sub":
        return a[0] - a[1]
    if e.op == "neg":
        return -a[0]
    if e.op == "div":
        return a[0] / a[1]
    if e.op == "pow":
        return a[0] ** a[1]
    raise UnsupportedInputError(f"operator {e.op} has no polynomial form")


def eh_criterion(f: ScalarExpression) -> OracleVerdict:
    """Continuous solvability of ``x^2 F1 + y^2 F2 + x y z^2 F3 = f`` for polynomial ``f``.

    Solvable iff f, f_x and f_y vanish on the z-axis and f_xy, f_xyz vanish at
    the origin.  Derivatives are exact; the axis conditions are checked as
    polynomial identities in z.
    """
    if f.n_vars > 3:
        raise UnsupportedInputError("f must depend on x, y, z only")
    if not f.is_polynomial():
        raise UnsupportedInputError("f must be a polynomial")
    x, y, z = sympy.symbols("x y z")
    g = sympy.expand(to_sympy(f, (x, y, z)))
    for (a, b, c), where, text in EH_CONDITIONS:
        d = sympy.diff(g, x, a, y, b, z, c) if (a or b or c) else g
        d = d.subs({x: 0, y: 0})
        if where == "origin":
            d = d.subs(z, 0)
        if sympy.expand(d) != 0:
            return OracleVerdict(False, "eh_criterion", text)
    return OracleVerdict(True, "eh_criterion", "all five conditions hold")


# global Whitney fit


def _ladder(B: Bundle, cfg: FitConfig) -> list[float]:
    return list(cfg.radii) if cfg.radii is not None else B.domain.default_radii()


def fit_pairs(B: Bundle, cfg: FitConfig) -> np.ndarray:
    """Local point pairs ``(i, j)``, ``i < j``, coupled in the least-squares fit.

    All pairs closer than ``cutoff_factor`` times the median nearest-neighbor
    spacing, plus each point's ``neighbors`` nearest points.
    """
    dom = B.domain
    if len(dom) < 2:
        return np.zeros((0, 2), dtype=int)
    cutoff = cfg.cutoff_factor * float(np.median(dom.nearest_spacing()))
    near = dom.tree.query_pairs(cutoff, output_type="ndarray").reshape(-1, 2)
    k = min(cfg.neighbors + 1, len(dom))
    _, idx = dom.tree.query(dom.points, k=k)
    i = np.repeat(np.arange(len(dom)), k - 1)
    j = idx[:, 1:].ravel()
    knn = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
    return np.unique(np.vstack([near, knn]), axis=0)


def judge_pairs(B: Bundle, cfg: FitConfig) -> np.ndarray:
    """Fit pairs plus each point's multiscale shell neighbors on the radius ladder."""
    dom = B.domain
    radii = _ladder(B, cfg)
    extra = []
    for i in range(len(dom)):
        per_level = shells(dom, dom.points[i], radii, 1, cfg.cap)
        js = sorted({t[0] for lvl in per_level for t in lvl})
        extra.extend((min(i, j), max(i, j)) for j in js)
    allp = np.vstack([fit_pairs(B, cfg), np.array(extra, dtype=int).reshape(-1, 2)])
    return np.unique(allp, axis=0)


def whitney_fit(B: Bundle, cfg: FitConfig | None = None) -> OracleVerdict:
    """Fit one jet per point from its fiber, minimizing the Whitney pair terms.

    The optimization weights each pair term by ``1/|x_i - x_j|^weight_power``,
    so fine scales dominate.  The fitted section is then judged per
    point: the largest pair term within radius r of the point must tend to
    zero as r shrinks (log-log slope at least ``decay_slope_min`` over the
    finest ``fit_levels`` scales, or terminal value within ``fit_tol`` of the
    problem scale).
    """
    cfg = cfg or FitConfig()
    empty = B.empty_points()
    if empty:
        return OracleVerdict(False, "whitney_fit", f"empty fiber at point {empty[0]}", failures=empty)
    N, S = len(B.fibers), B.size
    unknowns = sum(B.dims())
    if unknowns > cfg.max_unknowns:
        raise OracleSizeError(
            f"{unknowns} unknowns exceed max_unknowns={cfg.max_unknowns}; sample the domain more coarsely"
        )
    offs, spans = B.arrays()
    dmax = spans.shape[2]
    scale = max(1.0, float(np.max(np.sum(offs * offs, axis=1))))
    pairs = fit_pairs(B, cfg)
    P = offs.copy()
    if len(pairs) and dmax:
        pts = B.domain.points
        Ai, Aj = pair_blocks_batched(pts[pairs[:, 0]], pts[pairs[:, 1]], B.n, B.m, B.D)
        w = 1.0 / np.linalg.norm(pts[pairs[:, 1]] - pts[pairs[:, 0]], axis=1) ** cfg.weight_power
        Gi = np.einsum("prs,psd->prd", Ai, spans[pairs[:, 0]]) * w[:, None, None]
        Gj = np.einsum("prs,psd->prd", Aj, spans[pairs[:, 1]]) * w[:, None, None]
        rhs = -(np.einsum("prs,ps->pr", Ai, offs[pairs[:, 0]]) + np.einsum("prs,ps->pr", Aj, offs[pairs[:, 1]]))
        rhs = (rhs * w[:, None]).reshape(-1)
        npairs = len(pairs)
        rows = np.broadcast_to((np.arange(npairs)[:, None] * S + np.arange(S))[:, :, None], (npairs, S, dmax))
        ci = np.broadcast_to((pairs[:, 0, None] * dmax + np.arange(dmax))[:, None, :], (npairs, S, dmax))
        cj = np.broadcast_to((pairs[:, 1, None] * dmax + np.arange(dmax))[:, None, :], (npairs, S, dmax))
        M = sp.coo_matrix(
            (np.concatenate([Gi.ravel(), Gj.ravel()]), (np.concatenate([rows.ravel()] * 2), np.concatenate([ci.ravel(), cj.ravel()]))),
            shape=(npairs * S, N * dmax),
        ).tocsr()
        MtM = (M.T @ M).tocsc()
        # ridge relative to each column, so weakly coupled coarse unknowns keep their fit
        diag = MtM.diagonal()
        ridge = cfg.ridge * np.maximum(diag, cfg.ridge * max(1.0, float(diag.max())))
        c = spsolve((MtM + sp.diags(ridge)).tocsc(), M.T @ rhs)
        P = offs + np.einsum("psd,pd->ps", spans, c.reshape(N, dmax))
    _, residual = _pair_terms(B, pairs, P)
    jpairs = judge_pairs(B, cfg)
    terms, _ = _pair_terms(B, jpairs, P)
    failures = _judge(B, jpairs, terms, scale, cfg)
    if failures:
        witness = f"pair terms do not decay at {len(failures)} point(s), first {failures[0]}"
    else:
        witness = "pair terms decay at every resolved point"
    return OracleVerdict(not failures, "whitney_fit", witness, residual / scale, failures, P)


def _pair_terms(B: Bundle, pairs: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, float]:
    """Raw Whitney term per pair and the scale-free mean Lipschitz residual."""
    if len(pairs) == 0:
        return np.zeros(0), 0.0
    pts = B.domain.points
    Ai, Aj = pair_blocks_batched(pts[pairs[:, 0]], pts[pairs[:, 1]], B.n, B.m, B.D)
    r = np.einsum("prs,ps->pr", Ai, P[pairs[:, 0]]) + np.einsum("prs,ps->pr", Aj, P[pairs[:, 1]])
    t = np.sum(r * r, axis=1)
    d2 = np.sum((pts[pairs[:, 1]] - pts[pairs[:, 0]]) ** 2, axis=1)
    return t, float(np.mean(t / d2))


def _judge(B: Bundle, pairs: np.ndarray, terms: np.ndarray, scale: float, cfg: FitConfig) -> list[int]:
    dom = B.domain
    radii = _ladder(B, cfg)
    if len(pairs) == 0:
        return []
    pts = dom.points
    dist = np.linalg.norm(pts[pairs[:, 1]] - pts[pairs[:, 0]], axis=1)
    ends = np.concatenate([pairs[:, 0], pairs[:, 1]])
    d2 = np.concatenate([dist, dist])
    t2 = np.concatenate([terms, terms])
    order = np.argsort(ends, kind="stable")
    ends, d2, t2 = ends[order], d2[order], t2[order]
    starts = np.searchsorted(ends, np.arange(len(dom) + 1))
    zero = cfg.fit_tol * scale
    failures = []
    for i in range(len(dom)):
        d, t = d2[starts[i] : starts[i + 1]], t2[starts[i] : starts[i + 1]]
        levels, env = [], []
        for r in radii:
            mask = d <= r
            if mask.any():
                levels.append(r)
                env.append(float(t[mask].max()))
        if len(levels) < cfg.min_levels:
            continue
        if env[-1] <= zero:
            continue
        k = max(0, len(levels) - cfg.fit_levels)
        if _slope(levels[k:], env[k:], zero * 1e-3) < cfg.decay_slope_min:
            failures.append(i)
    return failures


def verify_section(F: Sequence[ScalarExpression], B: Bundle, tol: float = 1e-8) -> bool:
    """True iff the jet of ``F`` lies in every fiber of ``B`` (distance within ``tol``)."""
    if len(F) != B.D:
        raise ContractError(f"section has {len(F)} components, bundle has {B.D}")
    for x, S in zip(B.domain.points, B.fibers):
        if S.is_empty:
            return False
        J = jet_from_expression(F, x, B.m)
        if S.distance(J) > tol * max(1.0, float(np.linalg.norm(J.vector))):
            return False
    return True
