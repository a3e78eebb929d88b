"""Sampled compact domains: strata, neighbor queries and file persistence."""
from __future__ import annotations

import itertools
import json
import re
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .expressions import EvaluationError, ScalarExpression

SCHEMA_VERSION = 1
DEDUP_TOL = 1e-12
DEFAULT_CAP = 64


class DomainError(ValueError):
    """Invalid domain description or contents."""


class DomainFileError(DomainError):
    """Malformed domain file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class StratumDescription:
    """A parametrized piece of the domain: ``box -> R^n`` given by expressions in ``x1..xd``.

    ``resolution`` is the number of grid nodes per parameter axis.
    """

    dim: int
    parametrization: tuple[ScalarExpression, ...]
    box: tuple[tuple[float, float], ...] = ()
    resolution: tuple[int, ...] = ()
    tag: str = ""

    @classmethod
    def point(cls, coords: Sequence[float], tag: str = "point") -> "StratumDescription":
        return cls(0, tuple(ScalarExpression.const(c) for c in coords), (), (), tag)

    @classmethod
    def box_grid(cls, n: int, lo: float, hi: float, res: int, tag: str = "grid") -> "StratumDescription":
        return cls(
            n,
            tuple(ScalarExpression.var(i + 1) for i in range(n)),
            tuple((float(lo), float(hi)) for _ in range(n)),
            tuple(int(res) for _ in range(n)),
            tag,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "StratumDescription":
        dim = int(d.get("dim", 0))
        par = tuple(ScalarExpression.parse(t) for t in d["parametrization"])
        box = tuple((float(a), float(b)) for a, b in d.get("box", []))
        res = d.get("resolution", [])
        res = tuple([int(res)] * dim) if isinstance(res, int) else tuple(int(r) for r in res)
        return cls(dim, par, box, res, d.get("tag", ""))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "parametrization": [e.to_text() for e in self.parametrization],
            "box": [list(b) for b in self.box],
            "resolution": list(self.resolution),
            "tag": self.tag,
        }

    def grid(self) -> np.ndarray:
        if self.dim == 0:
            return np.zeros((1, 0))
        if len(self.box) != self.dim or len(self.resolution) != self.dim:
            raise DomainError(f"stratum '{self.tag}': box and resolution must have {self.dim} entries")
        axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.box, self.resolution)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)

    def evaluate(self) -> np.ndarray:
        params = self.grid()
        cols = []
        for e in self.parametrization:
            try:
                if e.n_vars > self.dim:
                    raise EvaluationError(f"uses x{e.n_vars} with only {self.dim} parameters")
                cols.append(e.evaluate_many(params) if self.dim else np.full(1, e.evaluate([])))
            except EvaluationError as err:
                raise DomainError(f"stratum '{self.tag}': {err}") from err
        pts = np.stack(cols, axis=1)
        if not np.all(np.isfinite(pts)):
            raise DomainError(f"stratum '{self.tag}': parametrization is not finite on its box")
        return pts


@dataclass(frozen=True, eq=False)
class SampledDomain:
    points: np.ndarray
    tags: tuple[str, ...]
    tree: cKDTree = field(init=False, repr=False, compare=False)
    diameter: float = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2:
            raise DomainError("points must be a 2-d array")
        if len(self.tags) != pts.shape[0]:
            raise DomainError("one tag per point required")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "tree", cKDTree(pts) if pts.shape[0] else None)
        object.__setattr__(self, "diameter", _diameter(pts))
        object.__setattr__(self, "_shell_cache", {})

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def index_of(self, x, tol: float = DEDUP_TOL) -> int | None:
        d, i = self.tree.query(np.asarray(x, dtype=float))
        return int(i) if d <= tol else None

    def neighbors(self, i: int, r: float) -> np.ndarray:
        """Indices of points within ``r`` of point ``i`` (excluding ``i``), sorted."""
        idx = np.array(sorted(self.tree.query_ball_point(self.points[i], r)), dtype=int)
        return idx[idx != i]

    def nearest_spacing(self) -> np.ndarray:
        """Distance from each point to its nearest other point."""
        if len(self) < 2:
            return np.full(len(self), np.inf)
        d, _ = self.tree.query(self.points, k=2)
        return d[:, 1]

    def default_radii(self) -> list[float]:
        return default_ladder(self.diameter)

    def equals(self, other: "SampledDomain") -> bool:
        return (
            self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
            and self.tags == other.tags
        )


def default_ladder(diameter: float, j_lo: int = 2, j_hi: int = 10) -> list[float]:
    return [diameter * 2.0 ** (-j) for j in range(j_lo, j_hi + 1)]


def _diameter(pts: np.ndarray) -> float:
    if pts.shape[0] < 2:
        return 0.0
    cand = pts
    if pts.shape[0] > 64 and pts.shape[1] >= 2:
        try:
            cand = pts[ConvexHull(pts).vertices]
        except QhullError:
            cand = pts
    best = 0.0
    for start in range(0, cand.shape[0], 1024):
        block = cand[start:start + 1024]
        d2 = np.sum((block[:, None, :] - cand[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def from_points(points, tags: Sequence[str] | None = None) -> SampledDomain:
    """Build a domain from explicit points, dropping near-duplicates (first one wins)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tags = list(tags) if tags is not None else [""] * pts.shape[0]
    keep = _dedup(pts, np.zeros(pts.shape[0], dtype=int))
    return SampledDomain(pts[keep], tuple(tags[i] for i in keep))


def _dedup(pts: np.ndarray, priority: np.ndarray) -> list[int]:
    """Indices to keep: among near-duplicates the lowest priority value, then earliest, wins."""
    if pts.shape[0] == 0:
        return []
    pairs = cKDTree(pts).query_pairs(DEDUP_TOL, output_type="ndarray")
    drop = np.zeros(pts.shape[0], dtype=bool)
    for a, b in sorted(map(tuple, pairs), key=lambda p: min((priority[p[0]], p[0]), (priority[p[1]], p[1]))):
        if drop[a] or drop[b]:
            continue
        loser = b if (priority[a], a) < (priority[b], b) else a
        drop[loser] = True
    return np.nonzero(~drop)[0].tolist()


def sample(strata: Sequence[StratumDescription]) -> SampledDomain:
    """Union of the grid images of all strata, deduplicated.

    Where strata overlap, the point keeps the tag of the lowest-dimensional stratum.
    """
    if not strata:
        raise DomainError("at least one stratum is required")
    blocks, tags, prio = [], [], []
    for s in strata:
        p = s.evaluate()
        blocks.append(p)
        tags.extend([s.tag] * p.shape[0])
        prio.extend([s.dim] * p.shape[0])
    n_set = {b.shape[1] for b in blocks}
    if len(n_set) != 1:
        raise DomainError(f"strata map into different dimensions {sorted(n_set)}")
    pts = np.vstack(blocks)
    keep = _dedup(pts, np.array(prio))
    return SampledDomain(pts[keep], tuple(tags[i] for i in keep))


def _farthest_point_order(P: np.ndarray, x0: np.ndarray, count: int) -> list[int]:
    """Greedy farthest-point selection, seeded with the point nearest to ``x0``."""
    if P.shape[0] <= count:
        return list(range(P.shape[0]))
    def sq(p):
        diff = P - p
        return np.einsum("ij,ij->i", diff, diff)

    first = int(np.argmin(sq(x0)))
    chosen = [first]
    dist = sq(P[first])
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        np.minimum(dist, sq(P[nxt]), out=dist)
    return sorted(chosen)


def shells(
    dom: SampledDomain,
    x0,
    radii: Sequence[float],
    k: int = 1,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
) -> list[list[tuple[int, ...]]]:
    """Per radius, up to ``cap`` k-tuples of point indices within that radius of ``x0``.

    Tuple entries are pairwise distinct and distinct from ``x0``.  Single points
    are capped by farthest-point selection; larger tuples are enumerated in order
    and subsampled with a generator seeded by ``seed`` when they exceed the cap.
    """
    if k < 1:
        raise DomainError("tuple size must be at least 1")
    radii = [float(r) for r in radii]
    if k == 1:
        seed = 0  # farthest-point selection does not draw random numbers
    key = (tuple(np.asarray(x0, dtype=float).tolist()), tuple(radii), k, cap, seed)
    cache = dom._shell_cache
    if key not in cache:
        cache[key] = _shells(dom, x0, radii, k, cap, seed)
    return [list(lvl) for lvl in cache[key]]


def _shells(dom, x0, radii, k, cap, seed):
    if any(r <= 0 for r in radii) or any(a < b for a, b in zip(radii, radii[1:])):
        raise DomainError("radii must be positive and descending")
    x0 = np.asarray(x0, dtype=float)
    if not radii or len(dom) == 0:
        return [[] for _ in radii]
    cand = np.array(sorted(dom.tree.query_ball_point(x0, radii[0])), dtype=int)
    if cand.size:
        dist = np.linalg.norm(dom.points[cand] - x0, axis=1)
        mask = dist > DEDUP_TOL
        cand, dist = cand[mask], dist[mask]
    else:
        dist = np.zeros(0)
    out = []
    for level, r in enumerate(radii):
        inside = cand[dist <= r]
        if inside.size < k:
            out.append([])
            continue
        if k == 1:
            sel = _farthest_point_order(dom.points[inside], x0, cap)
            out.append([(int(inside[s]),) for s in sel])
            continue
        sub = inside
        if sub.size > cap:
            sel = _farthest_point_order(dom.points[sub], x0, cap)
            sub = sub[sel]
        tuples = list(itertools.permutations(sub.tolist(), k))
        if len(tuples) > cap:
            rng = np.random.default_rng([seed, level, k])
            pick = np.sort(rng.choice(len(tuples), size=cap, replace=False))
            tuples = [tuples[i] for i in pick]
        out.append([tuple(int(v) for v in t) for t in tuples])
    return out


def save(dom: SampledDomain, path) -> None:
    """Write the domain as JSON, one point per line."""
    if len(dom) == 0:
        raise DomainError("cannot save an empty domain")
    if not np.all(np.isfinite(dom.points)):
        raise DomainError("cannot save non-finite coordinates")
    lines = ["{", f'  "schema_version": {SCHEMA_VERSION},', f'  "n": {dom.n},', '  "points": [']
    rows = [json.dumps([float(v) for v in p]) for p in dom.points]
    lines.append(",\n".join("    " + r for r in rows))
    lines.append("  ],")
    lines.append('  "tags": ' + json.dumps(list(dom.tags)))
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


_BAD_CONST = re.compile(r"-?\b(NaN|Infinity)\b")


def loads(text: str) -> SampledDomain:
    def reject(tok):
        raise ValueError(tok)

    try:
        data = json.loads(text, parse_constant=reject)
    except json.JSONDecodeError as err:
        raise DomainFileError(err.msg, err.lineno) from err
    except ValueError as err:
        m = _BAD_CONST.search(text)
        line = text.count("\n", 0, m.start()) + 1 if m else None
        raise DomainFileError(f"non-finite coordinate {err}", line) from err
    if not isinstance(data, dict) or "points" not in data or "n" not in data:
        raise DomainFileError("expected an object with fields n, points, tags", 1)
    n = data["n"]
    pts = data["points"]
    tags = data.get("tags", [""] * len(pts))
    if not pts:
        raise DomainFileError("domain has no points", _line_of(text, '"points"'))
    for i, p in enumerate(pts):
        if not isinstance(p, list) or len(p) != n or not all(isinstance(v, (int, float)) for v in p):
            raise DomainFileError(f"point {i} is not a list of {n} numbers", _point_line(text, i))
    if len(tags) != len(pts):
        raise DomainFileError("tags and points differ in length", _line_of(text, '"tags"'))
    return SampledDomain(np.array(pts, dtype=float).reshape(len(pts), n), tuple(str(t) for t in tags))


def load(path) -> SampledDomain:
    """Read a domain file; identical file contents share one (immutable) domain and its shell cache."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DomainFileError(f"cannot read {path}: {err.strerror}") from err
    return _loads_shared(text)


@lru_cache(maxsize=8)
def _loads_shared(text: str) -> SampledDomain:
    return loads(text)


def _line_of(text: str, token: str) -> int | None:
    pos = text.find(token)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


def _point_line(text: str, i: int) -> int | None:
    start = text.find('"points"')
    if start < 0:
        return None
    depth, count = 0, -1
    for pos in range(text.find("[", start), len(text)):
        ch = text[pos]
        if ch == "[":
            depth += 1
            if depth == 2:
                count += 1
                if count == i:
                    return text.count("\n", 0, pos) + 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                break
    return None


def to_dict(dom: SampledDomain) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n": dom.n,
        "points": dom.points.tolist(),
        "tags": list(dom.tags),
    }
