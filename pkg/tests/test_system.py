import json
from dataclasses import replace

import numpy as np
import pytest

from jetbundle.corpus import parse
from jetbundle.expressions import EvaluationError, jet_from_expression
from jetbundle.system import (
    Decision,
    ProblemError,
    build_bundle,
    build_module,
    decide,
    load_problem,
    scalar_compat_check,
    spec_from_dict,
    spec_to_dict,
)

GRID1 = [[v] for v in np.linspace(-1, 1, 9).tolist()]


def make_spec(A, f, n=1, m=1, points=None, **extra):
    d = {
        "n": n,
        "m": m,
        "N": len(A),
        "M": len(A[0]),
        "A": A,
        "f": f,
        "domain": {"points": points if points is not None else GRID1},
    }
    d.update(extra)
    return spec_from_dict(d)


def test_module_zero_matrix_is_full_space():
    spec = make_spec([["0", "0"]], ["0"], n=1, m=1)
    I = build_module(spec, [0.3])
    assert I.dim == I.size == 4


def test_module_identity_has_codimension_M():
    spec = make_spec([["1", "0"], ["0", "1"]], ["0", "0"], n=1, m=2)
    I = build_module(spec, [0.5])
    assert I.size - I.dim == 2
    # every module jet has zero values
    assert np.allclose(I.span.reshape(I.dim, 2, 3)[:, :, 0], 0.0)


def test_module_eh_normal_at_ones(corpus):
    spec = load_problem(corpus / "eh_x.json")
    I = build_module(spec, [1.0, 1.0, 1.0])
    assert I.size - I.dim == 1
    R = np.eye(3) - I.span.T @ I.span
    normal = np.linalg.eigh(R)[1][:, -1]
    normal *= np.sign(normal[0])
    assert np.allclose(normal, np.ones(3) / np.sqrt(3), atol=1e-12)


def test_bundle_identity_system_offsets_are_constant_values():
    spec = make_spec([["1"]], ["(add (mul x x) 1)"], m=2)
    B = build_bundle(spec)
    for x, F in zip(spec.domain.points, B.fibers):
        assert np.allclose(F.offset, [x[0] ** 2 + 1, 0.0, 0.0])
        assert F.dim == 2
        J = jet_from_expression([parse("(add (mul x x) 1)")], x, 2)
        assert F.distance(J) < 1e-12


def test_bundle_x_times_F_lift_and_full_fiber_at_zero():
    spec = make_spec([["x"]], ["(mul x x)"], m=1)
    B = build_bundle(spec)
    for x, F in zip(spec.domain.points, B.fibers):
        if x[0] == 0:
            assert F.dim == 2
        else:
            assert F.dim == 1
            assert np.isclose(F.offset[0], x[0])


def test_bundle_inconsistent_point_is_empty():
    spec = make_spec([["x"]], ["1"], m=0)
    B = build_bundle(spec)
    empty = B.empty_points()
    assert [spec.domain.points[i][0] for i in empty] == [0.0]


def test_bundle_evaluation_error_names_entry():
    spec = make_spec([["(div 1 x)"]], ["1"], m=0)
    with pytest.raises(EvaluationError, match=r"A\[0\]\[0\]"):
        build_bundle(spec)


def test_spec_shape_checked():
    with pytest.raises(ProblemError):
        make_spec([["1", "1"]], ["1", "2"])


def test_decide_identity_system_solvable():
    dec = decide(make_spec([["1"]], ["(add (mul x x x) x)"], m=1))
    assert dec.verdict == "solvable" and not dec.failures


def test_decide_inconsistent_reports_failure_at_zero():
    dec = decide(make_spec([["x"]], ["1"], m=0))
    assert dec.verdict == "unsolvable"
    assert [f.point for f in dec.failures] == [[0.0]]
    assert dec.failures[0].reason == "range condition violated"


def test_decide_eh_x_fails_on_axis(corpus):
    dec = decide(load_problem(corpus / "eh_x.json"))
    assert dec.verdict == "unsolvable"
    assert all(f.tag == "axis" for f in dec.failures)
    assert all(f.reason == "empty fiber after refinement" for f in dec.failures)


def test_decide_eh_x3_plus_y3_solvable(corpus):
    assert decide(load_problem(corpus / "eh_x3_plus_y3.json")).verdict == "solvable"


@pytest.mark.parametrize("name", ["x_times_F_eq_x2", "x_F_eq_1", "x2_F_eq_x"])
def test_decide_row_scaling_invariance(corpus, name):
    spec = load_problem(corpus / f"{name}.json")

    def scale(e):
        return parse(f"(mul (add 2 (mul x x)) {e.to_text()})")

    scaled = replace(spec, A=tuple(tuple(scale(e) for e in row) for row in spec.A), f=tuple(scale(e) for e in spec.f))
    B, Bs = build_bundle(spec), build_bundle(scaled)
    assert all(F.same_set(G, 1e-9) if not F.is_empty else G.is_empty for F, G in zip(B.fibers, Bs.fibers))
    d, ds = decide(spec), decide(scaled)
    assert d.verdict == ds.verdict
    assert [f.index for f in d.failures] == [f.index for f in ds.failures]


def test_scalar_compat_examples(corpus):
    spec = load_problem(corpus / "eh_x2_plus_y2.json")
    for phi in ("1", "0", "(add x y z)"):
        assert scalar_compat_check(spec, parse(phi))


def test_problem_json_round_trip(corpus, tmp_path):
    spec = load_problem(corpus / "plane_gradient.json")
    text = (corpus / "plane_gradient.json").read_text()
    assert json.dumps(spec_to_dict(spec), indent=2) + "\n" == text
    inline = make_spec([["x"]], ["(mul x x)"], m=1, config={"k_bar": 2, "l_star": 3})
    # the canonical dict rebuilt from parsed fields is a fixed point of dump and load
    d = spec_to_dict(replace(inline, source=None))
    path = tmp_path / "p.json"
    path.write_text(json.dumps(d))
    again = load_problem(path)
    assert spec_to_dict(again) == d
    assert spec_to_dict(replace(again, source=None)) == d
    assert again.config.k_bar == 2 and again.config.l_star == 3


def test_decision_round_trip(corpus):
    dec = decide(load_problem(corpus / "x_F_eq_1.json"))
    back = Decision.from_dict(json.loads(json.dumps(dec.to_dict())))
    assert back == dec


def test_unsolvable_decision_needs_failure():
    with pytest.raises(ValueError):
        Decision("unsolvable", [], [])
