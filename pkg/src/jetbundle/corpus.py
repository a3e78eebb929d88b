"""Builders for the bundled test systems and their domains."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .domain import SampledDomain, StratumDescription, from_points, sample, save
from .expressions import ScalarExpression

EH_A = ("(mul x x)", "(mul y y)", "(mul x y z z)")
EH_FAMILY = {
    "x2_plus_y2": "(add (mul x x) (mul y y))",
    "x3_plus_y3": "(add (pow x 3) (pow y 3))",
    "x2z": "(mul x x z)",
    "x": "x",
    "y": "y",
    "xy": "(mul x y)",
    "xyz": "(mul x y z)",
    "xy_plus_x2": "(add (mul x y) (mul x x))",
    "x2_plus_y2_plus_xy": "(add (mul x x) (mul y y) (mul x y))",
    "z_x2_plus_y2": "(mul z (add (mul x x) (mul y y)))",
}
# explicit continuous solutions (F1, F2, F3) where known
EH_SOLUTIONS = {
    "x2_plus_y2": ("1", "1", "0"),
    "x3_plus_y3": ("x", "y", "0"),
    "x2z": ("z", "0", "0"),
    "z_x2_plus_y2": ("z", "z", "0"),
}


def eh_z_levels(grid_res: int = 9, fine: int = 3) -> np.ndarray:
    """Axis heights: the cube grid levels plus a geometric cluster at 0."""
    z = set(np.linspace(-1.0, 1.0, grid_res).tolist())
    for k in range(3, 3 + fine):
        z.update((2.0 ** -k, -(2.0 ** -k)))
    z.add(0.0)
    return np.array(sorted(z))


def eh_domain(
    grid_res: int = 9,
    angles: int = 32,
    coarse_ring: int = 2,
    depth: int = 3,
    fine: int = 3,
) -> SampledDomain:
    """Cube grid on ``[-1, 1]^3`` plus a densified neighborhood of the z-axis.

    The axis carries points at every height of :func:`eh_z_levels`. Around the
    axis point at height z sit rings of ``angles`` points at radii ``2^-k`` for
    ``coarse_ring <= k <= k_z + depth``, where ``2^-k_z`` is the scale of |z|
    (floored at 1/16), so each axis point is seen at several scales below its
    own height. The rings at z = 0 stop at the finest axis height, so the
    finest scales around the origin still see axis neighbors.
    """
    strata = [StratumDescription.box_grid(3, -1.0, 1.0, grid_res, tag="cube")]
    zs = eh_z_levels(grid_res, fine)
    finest = 2 + fine
    pts, tags = [], []
    theta = 2 * np.pi * np.arange(angles) / angles
    for z in zs:
        pts.append([0.0, 0.0, z])
        tags.append("axis")
        if z == 0.0:
            last = finest
        else:
            last = max(int(round(-np.log2(abs(z)))), 4) + depth
        for k in range(coarse_ring, last + 1):
            rho = 2.0 ** -k
            for t in theta:
                pts.append([rho * np.cos(t), rho * np.sin(t), z])
                tags.append("collar")
    extra = from_points(pts, tags)
    cube = sample(strata)
    allp = np.vstack([extra.points, cube.points])
    return from_points(allp, list(extra.tags) + list(cube.tags))


def eh_radii() -> tuple[float, ...]:
    return tuple(2.0 ** -j for j in range(1, 11))


def parse(text: str) -> ScalarExpression:
    return ScalarExpression.parse(text)


def nested_grid(n: int, levels: int = 6, res: int = 9) -> np.ndarray:
    """Union of ``res^n`` grids on the boxes ``[-2^-k, 2^-k]^n``, k = 0..levels-1."""
    pts = []
    for k in range(levels):
        h = 2.0 ** -k
        axes = [np.linspace(-h, h, res)] * n
        pts.append(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n))
    return np.unique(np.round(np.vstack(pts), 15), axis=0)


# systems beyond the Epstein-Hochster family: (n, m, A, f, solution or None, domain kind)
EXTRA_SYSTEMS = {
    "identity_poly": (2, 2, [["1"]], ["(add (mul x x) (neg (mul x y)) (mul 3 y))"], ["(add (mul x x) (neg (mul x y)) (mul 3 y))"], "nested2"),
    "x_times_F_eq_x2": (1, 1, [["x"]], ["(mul x x)"], ["x"], "nested1"),
    "x_F_eq_1": (1, 0, [["x"]], ["1"], None, "nested1"),
    "x2_F_eq_x": (1, 0, [["(mul x x)"]], ["x"], None, "nested1"),
    "plane_gradient": (2, 1, [["x", "y"]], ["(add (mul x x) (mul y y))"], ["x", "y"], "nested2"),
    "exp_weight": (1, 2, [["(exp x)"]], ["(mul x (exp x))"], ["x"], "nested1"),
}


def corpus_problems() -> dict[str, dict]:
    """Problem dictionaries of the bundled corpus, keyed by name."""
    out = {}
    radii = list(eh_radii())
    for key, f in EH_FAMILY.items():
        d = {
            "schema_version": 1,
            "name": f"eh_{key}",
            "tags": ["epstein-hochster"],
            "n": 3, "m": 0, "N": 1, "M": 3,
            "A": [list(EH_A)],
            "f": [f],
            "domain": {"file": "eh_domain.json"},
            "config": {"radii": radii},
        }
        if key in EH_SOLUTIONS:
            d["solution"] = list(EH_SOLUTIONS[key])
        out[d["name"]] = d
    for name, (n, m, A, f, sol, kind) in EXTRA_SYSTEMS.items():
        d = {
            "schema_version": 1,
            "name": name,
            "tags": [],
            "n": n, "m": m, "N": len(A), "M": len(A[0]),
            "A": A,
            "f": f,
            "domain": {"file": f"{kind}_domain.json"},
        }
        if sol is not None:
            d["solution"] = sol
        out[name] = d
    return out


def corpus_domains() -> dict[str, SampledDomain]:
    return {
        "eh_domain.json": eh_domain(),
        "nested1_domain.json": from_points(nested_grid(1, levels=8, res=9)),
        "nested2_domain.json": from_points(nested_grid(2, levels=6, res=9)),
    }


def write_corpus(directory) -> list[Path]:
    """Write every corpus problem and its domain file into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for fname, dom in corpus_domains().items():
        save(dom, directory / fname)
        written.append(directory / fname)
    for name, d in corpus_problems().items():
        path = directory / f"{name}.json"
        path.write_text(json.dumps(d, indent=2) + "\n")
        written.append(path)
    return written


def corpus_dir() -> Path:
    """Directory of the corpus files shipped with the package."""
    return Path(str(resources.files("jetbundle") / "data" / "corpus"))


def corpus_paths() -> list[Path]:
    return sorted(p for p in corpus_dir().glob("*.json") if not p.name.endswith("_domain.json"))
