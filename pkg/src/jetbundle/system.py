"""Linear systems ``sum_j A_ij F_j = f_i``: their bundles and the decision pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .bundle import Bundle, RefineConfig, RefinementReport, bundle_scalar_product, default_l_star, iterate_refine
from .domain import SampledDomain, StratumDescription, from_points, load, sample
from .expressions import EvaluationError, ScalarExpression, taylor_coefficients_many
from .jets import ContractError, jet_dim, multiply_coeffs
from .subspace import RANK_RTOL, AffineJetSet, min_norm_lift, range_projection

SCHEMA_VERSION = 1


class ProblemError(ValueError):
    """Invalid problem description."""


@dataclass(frozen=True)
class Tolerances:
    range_rel: float = 1e-9
    range_abs: float = 1e-12
    compat: float = 1e-8

    def to_dict(self) -> dict:
        return {"range_rel": self.range_rel, "range_abs": self.range_abs, "compat": self.compat}


@dataclass(frozen=True, eq=False)
class SystemSpec:
    n: int
    m: int
    N: int
    M: int
    A: tuple[tuple[ScalarExpression, ...], ...]
    f: tuple[ScalarExpression, ...]
    domain: SampledDomain
    config: RefineConfig = field(default_factory=RefineConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    tags: tuple[str, ...] = ()
    name: str = ""
    source: dict | None = None

    def __post_init__(self):
        if len(self.A) != self.N or any(len(row) != self.M for row in self.A):
            raise ProblemError(f"A must be {self.N} x {self.M}")
        if len(self.f) != self.N:
            raise ProblemError(f"f must have {self.N} entries")
        if self.domain.n != self.n:
            raise ProblemError(f"domain points have {self.domain.n} coordinates, expected {self.n}")
        for e in [e for row in self.A for e in row] + list(self.f):
            if e.n_vars > self.n:
                raise ProblemError(f"expression {e.to_text()} uses variables beyond x{self.n}")

    def with_f(self, f: Sequence[ScalarExpression]) -> "SystemSpec":
        return replace(self, f=tuple(f), source=None)

    def with_config(self, **kw) -> "SystemSpec":
        return replace(self, config=replace(self.config, **kw))

    def l_star(self) -> int:
        return self.config.l_star if self.config.l_star is not None else default_l_star(self.n, self.m, self.M)


def _eval_grid(spec: SystemSpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Avals = np.zeros((X.shape[0], spec.N, spec.M))
    for i, row in enumerate(spec.A):
        for j, e in enumerate(row):
            try:
                Avals[:, i, j] = e.evaluate_many(X)
            except EvaluationError as err:
                raise EvaluationError(f"A[{i}][{j}]: {err}") from err
    fvals = np.zeros((X.shape[0], spec.N))
    for i, e in enumerate(spec.f):
        try:
            fvals[:, i] = e.evaluate_many(X)
        except EvaluationError as err:
            raise EvaluationError(f"f[{i}]: {err}") from err
    return Avals, fvals


def _module_rows(Ax: np.ndarray, n: int, m: int, M: int, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal rows spanning ``{P : A(x) P(x) = 0}`` in coefficient space."""
    dim = jet_dim(n, m)
    _, s, Vt = np.linalg.svd(Ax, full_matrices=True)
    rank = int(np.sum(s >= rtol * s[0])) if s.size and s[0] > 0 else 0
    null = Vt[rank:]
    rows = []
    for v in null:
        r = np.zeros((M, dim))
        r[:, 0] = v
        rows.append(r.reshape(-1))
    for d in range(M):
        for a in range(1, dim):
            r = np.zeros((M, dim))
            r[d, a] = 1.0
            rows.append(r.reshape(-1))
    return np.array(rows).reshape(-1, M * dim)


def build_module(spec: SystemSpec, x) -> AffineJetSet:
    """``I(x)``: jets whose values lie in the kernel of ``A(x)``."""
    x = np.asarray(x, dtype=float)
    Avals, _ = _eval_grid(spec, x[None])
    rows = _module_rows(Avals[0], spec.n, spec.m, spec.M, spec.config.rank_rtol)
    size = spec.M * jet_dim(spec.n, spec.m)
    return AffineJetSet(spec.n, spec.M, spec.m, tuple(x), offset=np.zeros(size), span=rows)


@dataclass
class RangeCheck:
    residual: np.ndarray
    threshold: np.ndarray

    @property
    def failed(self) -> np.ndarray:
        return np.nonzero(self.residual > self.threshold)[0]


def build_bundle(spec: SystemSpec, return_range: bool = False):
    """Fibers ``T(x) f(x) + I(x)`` with constant-jet offsets; Empty where the range condition fails."""
    X = spec.domain.points
    Avals, fvals = _eval_grid(spec, X)
    dim = jet_dim(spec.n, spec.m)
    size = spec.M * dim
    rtol = spec.config.rank_rtol
    P, N, M = Avals.shape
    fibers = []
    if P:
        U, s, Vt = np.linalg.svd(Avals, full_matrices=True)
        k = min(N, M)
        smax = s[:, :1] if k else np.zeros((P, 1))
        keep = (s >= rtol * smax) & (smax > 0)
        rank = keep.sum(axis=1)
        Ur = U[:, :, :k] * keep[:, None, :]
        proj = np.einsum("pik,pk->pi", Ur, np.einsum("pik,pi->pk", Ur, fvals))
        residuals = np.linalg.norm(fvals - proj, axis=1)
        thresholds = np.maximum(spec.tolerances.range_rel * np.linalg.norm(fvals, axis=1), spec.tolerances.range_abs)
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        eta = np.einsum("pkj,pk->pj", Vt[:, :k, :], inv * np.einsum("pik,pi->pk", U[:, :, :k], proj))
        # derivative coordinates are always free; values are free along null(A(x))
        deriv = np.zeros((M * (dim - 1), size))
        deriv[np.arange(M * (dim - 1)), [d * dim + a for d in range(M) for a in range(1, dim)]] = 1.0
        for x, r, Vx, e, res, thr in zip(X, rank, Vt, eta, residuals, thresholds):
            if res > thr:
                fibers.append(AffineJetSet.empty(spec.n, spec.M, spec.m, x))
                continue
            vals = np.zeros((M - r, M, dim))
            vals[:, :, 0] = Vx[r:]
            off = np.zeros((M, dim))
            off[:, 0] = e
            span = np.vstack([vals.reshape(M - r, size), deriv])
            fibers.append(AffineJetSet(spec.n, spec.M, spec.m, x, offset=off.reshape(-1), span=span))
    else:
        residuals = thresholds = np.zeros(0)
    B = Bundle(spec.domain, spec.n, spec.m, spec.M, tuple(fibers))
    if return_range:
        return B, RangeCheck(np.asarray(residuals, dtype=float), np.asarray(thresholds, dtype=float))
    return B


@dataclass
class FailurePoint:
    index: int
    point: list[float]
    tag: str
    reason: str
    iteration: int

    def to_dict(self) -> dict:
        return {"index": self.index, "point": self.point, "tag": self.tag, "reason": self.reason, "iteration": self.iteration}

    @classmethod
    def from_dict(cls, d: dict) -> "FailurePoint":
        return cls(d["index"], list(d["point"]), d["tag"], d["reason"], d["iteration"])


@dataclass
class Decision:
    verdict: str
    failures: list[FailurePoint]
    trace: list[dict]
    ambiguous: list[int] = field(default_factory=list)
    iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.verdict not in ("solvable", "unsolvable", "inconclusive"):
            raise ContractError(f"unknown verdict {self.verdict}")
        if self.verdict == "unsolvable" and not self.failures:
            raise ContractError("an unsolvable verdict needs a failure point")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "verdict": self.verdict,
            "seed": self.seed,
            "iterations": self.iterations,
            "failures": [f.to_dict() for f in self.failures],
            "ambiguous": list(self.ambiguous),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Decision":
        return cls(
            d["verdict"],
            [FailurePoint.from_dict(f) for f in d["failures"]],
            d["trace"],
            list(d.get("ambiguous", [])),
            d.get("iterations", 0),
            d.get("seed", 0),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, Decision) and self.to_dict() == other.to_dict()


def _trace_entry(rep: RefinementReport, B: Bundle) -> dict:
    dims = B.dims()
    return {
        "iteration": rep.iteration,
        "proper": rep.proper,
        "changed": rep.changed,
        "emptied": rep.emptied,
        "ambiguous": rep.ambiguous,
        "dims": dims,
    }


def decide(spec: SystemSpec, mode: str = "strong", keep: dict | None = None) -> Decision:
    """Build the bundle, refine ``l*`` times and report solvability.

    ``keep`` (optional dict) receives every bundle iterate and the reports.
    """
    B0, rc = build_bundle(spec, return_range=True)
    pts = spec.domain.points
    tags = spec.domain.tags
    failures = [
        FailurePoint(int(i), pts[i].tolist(), tags[i], "range condition violated", 0) for i in rc.failed
    ]
    history: list[Bundle] = []
    B, reports = iterate_refine(B0, spec.l_star(), mode, spec.config, history)
    trace = [{"iteration": 0, "proper": B0.proper, "changed": 0, "emptied": [int(i) for i in rc.failed], "ambiguous": [], "dims": B0.dims()}]
    seen = set(int(i) for i in rc.failed)
    ambiguous: set[int] = set()
    Bi = B0
    for rep in reports:
        for i in rep.emptied:
            if i not in seen:
                seen.add(i)
                failures.append(FailurePoint(i, pts[i].tolist(), tags[i], "empty fiber after refinement", rep.iteration))
        ambiguous.update(rep.ambiguous)
        trace.append({"iteration": rep.iteration, "proper": rep.proper, "changed": rep.changed, "emptied": rep.emptied, "ambiguous": rep.ambiguous})
    if reports:
        trace[-1]["dims"] = B.dims()
    if keep is not None:
        keep["initial"] = B0
        keep["final"] = B
        keep["reports"] = reports
        keep["history"] = history
    if failures:
        verdict = "unsolvable"
    elif ambiguous:
        verdict = "inconclusive"
    else:
        verdict = "solvable"
    return Decision(verdict, failures, trace, sorted(ambiguous), len(reports), spec.config.seed)


def _pointwise_product(phi: ScalarExpression, B: Bundle) -> list[AffineJetSet | None]:
    dim = jet_dim(B.n, B.m)
    phis = taylor_coefficients_many(phi, B.domain.points, B.m)
    out = []
    for F, c in zip(B.fibers, phis):
        if F.is_empty:
            out.append(None)
            continue
        off = multiply_coeffs(c[None, :], F.offset.reshape(B.D, dim), B.n, B.m).reshape(-1)
        out.append(F.with_offset(off))
    return out


def fibers_agree(F: AffineJetSet, G: AffineJetSet, tol: float) -> bool:
    if F.is_empty or G.is_empty:
        return F.is_empty and G.is_empty
    scale = max(1.0, float(np.linalg.norm(F.offset)), float(np.linalg.norm(G.offset)))
    return F.same_set(G, tol * scale)


def scalar_compat_check(spec: SystemSpec, phi: ScalarExpression) -> bool:
    """Whether ``H_{phi f}`` and ``phi (.) H_f`` agree at every point where ``H_f`` is non-empty."""
    Hf = build_bundle(spec)
    phif = tuple(ScalarExpression("mul", (phi, e)) for e in spec.f)
    Hphif = build_bundle(spec.with_f(phif))
    prod = bundle_scalar_product(phi, Hf).fibers if Hf.proper else _pointwise_product(phi, Hf)
    tol = spec.tolerances.compat
    for P, G in zip(prod, Hphif.fibers):
        if P is None:
            continue
        if not fibers_agree(P, G, tol):
            return False
    return True


# problem files

def _parse_domain(d: dict, base: Path | None) -> SampledDomain:
    if "file" in d:
        p = Path(d["file"])
        if base is not None and not p.is_absolute():
            p = base / p
        return load(p)
    if "strata" in d:
        return sample([StratumDescription.from_dict(s) for s in d["strata"]])
    if "points" in d:
        return from_points(d["points"], d.get("tags"))
    raise ProblemError("domain needs one of: file, strata, points")


def spec_from_dict(d: dict, base: Path | None = None) -> SystemSpec:
    try:
        n, m, N, M = int(d["n"]), int(d["m"]), int(d["N"]), int(d["M"])
        A = tuple(tuple(ScalarExpression.parse(t) for t in row) for row in d["A"])
        f = tuple(ScalarExpression.parse(t) for t in d["f"])
        cfgd = dict(d.get("config", {}))
        tol = dict(cfgd.pop("tolerances", {}) or {})
        tol_fields = {k: tol.pop(k) for k in list(tol) if k in Tolerances.__dataclass_fields__}
        cfgd.update(tol)
        cfg = RefineConfig.from_dict(cfgd)
        domain = _parse_domain(d["domain"], base)
    except KeyError as err:
        raise ProblemError(f"missing field {err}") from err
    except (TypeError, ContractError) as err:
        raise ProblemError(str(err)) from err
    return SystemSpec(
        n, m, N, M, A, f, domain, cfg, Tolerances(**tol_fields), tuple(d.get("tags", [])), d.get("name", ""), d
    )


def load_problem(path) -> SystemSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ProblemError(f"cannot read {path}: {err.strerror}") from err
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise ProblemError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from err
    if not isinstance(d, dict):
        raise ProblemError(f"{path}: expected a JSON object")
    return spec_from_dict(d, path.parent)


def spec_to_dict(spec: SystemSpec) -> dict:
    """The problem as a dict; specs loaded from a file return their source unchanged."""
    if spec.source is not None:
        return spec.source
    cfg = spec.config.to_dict()
    cfg["tolerances"] = spec.tolerances.to_dict()
    return {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "tags": list(spec.tags),
        "n": spec.n,
        "m": spec.m,
        "N": spec.N,
        "M": spec.M,
        "A": [[e.to_text() for e in row] for row in spec.A],
        "f": [e.to_text() for e in spec.f],
        "domain": {"points": spec.domain.points.tolist(), "tags": list(spec.domain.tags)},
        "config": cfg,
    }
