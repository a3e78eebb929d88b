import numpy as np
import pytest

from jetbundle.bundle import (
    Bundle,
    RefineConfig,
    bundle_from_dict,
    bundle_scalar_product,
    glaeser_min,
    iterate_refine,
    refine,
    refine_fiber,
    whitney_form,
)
from jetbundle.domain import from_points
from jetbundle.expressions import ScalarExpression, jet_from_expression
from jetbundle.jets import ContractError, Jet
from jetbundle.subspace import AffineJetSet, EmptyFiberError, module_closure
from jetbundle.system import build_bundle, load_problem

P = ScalarExpression.parse


@pytest.fixture(scope="module")
def xF(corpus):
    spec = load_problem(corpus / "x_times_F_eq_x2.json")
    return spec, build_bundle(spec)


@pytest.fixture(scope="module")
def plane(corpus):
    spec = load_problem(corpus / "plane_gradient.json")
    return spec, build_bundle(spec)


def jet_at(expr, x, m):
    return jet_from_expression([P(expr)], x, m)


def test_whitney_form_zero_on_global_polynomial():
    g = "(add 1 (mul 2 x) (mul -3 x y) (mul y y))"
    pts = [(0.3, 0.1), (-0.2, 0.5), (0.7, -0.4)]
    jets = [jet_at(g, p, 2) for p in pts]
    assert whitney_form((0.0, 0.0), jet_at(g, (0.0, 0.0), 2), pts, jets, 2) == pytest.approx(0.0, abs=1e-24)


def test_whitney_form_single_pair_values():
    h, c = 0.25, 3.0
    P0 = Jet.constant([0.0], 1, 0, (0.0,))
    P1 = Jet.constant([c], 1, 0, (h,))
    assert whitney_form((0.0,), P0, [(h,)], [P1], 0) == pytest.approx(c * c)
    # m = 1: P0 = 0 at 0, P1 = t at h; value term (h/h)^2 plus slope term 1
    P0 = Jet.zero(1, 1, 1, (0.0,))
    P1 = jet_at("x", (h,), 1)
    assert whitney_form((0.0,), P0, [(h,)], [P1], 1) == pytest.approx(2.0)


def test_whitney_form_mismatch():
    with pytest.raises(ContractError):
        whitney_form((0.0,), Jet.zero(1, 1, 1, (0.0,)), [(1.0,)], [Jet.zero(1, 1, 2, (1.0,))], 1)


def test_glaeser_min_trivial_cases():
    dom = from_points([[0.0], [0.1], [0.2]])
    full = Bundle(dom, 1, 1, 1, tuple(AffineJetSet.full(1, 1, 1, x) for x in dom.points))
    P0 = jet_at("(add 1 x)", (0.0,), 1)
    assert glaeser_min(full, (0.0,), P0, [1, 2]) == pytest.approx(0.0, abs=1e-20)
    singles = [AffineJetSet.from_vectors(1, 1, 1, x, [x[0] ** 2, 0.0], []) for x in dom.points]
    B = Bundle(dom, 1, 1, 1, tuple(singles))
    jets = [singles[i].offset_jet for i in (1, 2)]
    expect = whitney_form((0.0,), P0, dom.points[[1, 2]], jets, 1)
    assert glaeser_min(B, (0.0,), P0, [1, 2]) == pytest.approx(expect)
    B = B.with_fibers([singles[0], AffineJetSet.empty(1, 1, 1, dom.points[1]), singles[2]])
    with pytest.raises(EmptyFiberError):
        glaeser_min(B, (0.0,), P0, [1])


def test_glaeser_min_separates_true_jet(xF):
    spec, B = xF
    dom = spec.domain
    good = Jet(1, 1, 1, (0.0,), np.array([[0.0, 1.0]]))
    bad = Jet(1, 1, 1, (0.0,), np.array([[0.0, 0.0]]))
    near = [dom.index_of([h]) for h in (0.25, 0.0625, 0.015625)]
    g = [glaeser_min(B, (0.0,), good, [i]) for i in near]
    b = [glaeser_min(B, (0.0,), bad, [i]) for i in near]
    assert g[-1] < 1e-20 and max(g) < 1e-20
    assert min(b) > 0.5


def test_isolated_point_fiber_unchanged():
    dom = from_points([[0.0], [10.0]])
    F = AffineJetSet.from_vectors(1, 1, 1, (0.0,), [1.0, 0.0], [])
    B = Bundle(dom, 1, 1, 1, (F, AffineJetSet.full(1, 1, 1, (10.0,))))
    out = refine_fiber(B, (0.0,), cfg=RefineConfig(radii=(1.0, 0.5, 0.25)))
    assert out.same_set(F)


def test_polynomial_bundle_unchanged():
    dom = from_points(np.linspace(-1, 1, 33)[:, None])
    g = "(add 1 (mul 3 x) (mul x x))"
    fibers = [AffineJetSet.from_vectors(1, 1, 2, x, jet_at(g, x, 2).vector, []) for x in dom.points]
    B = Bundle(dom, 1, 2, 1, tuple(fibers))
    out, rep = refine(B)
    assert out.same_as(B) and rep.proper


def test_full_space_bundle_unchanged():
    dom = from_points(np.linspace(-1, 1, 17)[:, None])
    B = Bundle(dom, 1, 1, 2, tuple(AffineJetSet.full(1, 2, 1, x) for x in dom.points))
    out, _ = refine(B)
    assert out.same_as(B)


def test_xF_refinement_pins_origin(xF):
    spec, B = xF
    i0 = spec.domain.index_of([0.0])
    out, rep = refine(B, "strong", spec.config)
    assert B.fibers[i0].dim == 2
    assert out.fibers[i0].dim <= 1
    assert out.fibers[i0].distance(np.array([0.0, 1.0])) < 1e-8
    assert all(a <= b for a, b in zip(out.dims(), B.dims()))


def test_subbundle_chain_and_section(plane):
    spec, B = plane
    sol = [P("x"), P("y")]
    prev = B
    cur, reports = iterate_refine(B, 3, "strong", spec.config)
    chain = [B]
    for it in range(1, len(reports) + 1):
        chain.append(iterate_refine(B, it, "strong", spec.config)[0])
    for a, b in zip(chain, chain[1:]):
        assert a.contains(b, 1e-8)
    for x, F in zip(spec.domain.points, cur.fibers):
        assert F.distance(jet_from_expression(sol, x, 1).vector) <= 1e-6
    assert prev is B


def test_strong_within_standard(plane):
    spec, B = plane
    strong, _ = refine(B, "strong", spec.config)
    standard, _ = refine(B, "standard", spec.config)
    assert standard.contains(strong, 1e-8)


def test_refined_fibers_are_modules(plane):
    spec, B = plane
    out, _ = refine(B, "strong", spec.config)
    for x, F in zip(spec.domain.points, out.fibers):
        C = module_closure(F.span_jets, x, 1, n=2, D=2)
        assert C.dim == F.dim


def test_iterate_zero_is_identity(xF):
    spec, B = xF
    out, reports = iterate_refine(B, 0, "strong", spec.config)
    assert out is B and reports == []


def test_iterate_reaches_fixed_point(xF):
    spec, B = xF
    out, reports = iterate_refine(B, 10, "strong", spec.config)
    assert len(reports) < 10 and reports[-1].changed == 0
    again, _ = refine(out, "strong", spec.config)
    assert again.same_as(out)


def test_all_isolated_identity():
    dom = from_points(np.arange(5.0)[:, None] * 10)
    rng = np.random.default_rng(0)
    fibers = [AffineJetSet.from_vectors(1, 1, 2, x, rng.standard_normal(3), rng.standard_normal((1, 3))) for x in dom.points]
    B = Bundle(dom, 1, 2, 1, tuple(fibers))
    out, rep = refine(B, "strong", RefineConfig(radii=(1.0, 0.5, 0.25, 0.125)))
    assert out.same_as(B) and all(p.status == "vacuous" for p in rep.points)


def test_scalar_product(xF):
    spec, B = xF
    assert bundle_scalar_product(P("1"), B).same_as(B)
    zero = bundle_scalar_product(P("0"), B)
    assert all(np.all(F.offset == 0) for F in zero.fibers)
    prod = bundle_scalar_product(P("x"), B)
    for i in np.linspace(0, len(B.fibers) - 1, 5).astype(int):
        x = spec.domain.points[i]
        expect = jet_at("x", x, 1).coeffs[0] @ np.array([[B.fibers[i].offset[0], B.fibers[i].offset[1]], [B.fibers[i].offset[1], 0.0]])
        assert prod.fibers[i].distance(expect) < 1e-12
    empty = B.with_fibers([AffineJetSet.empty(1, 1, 1, B.domain.points[0])] + list(B.fibers[1:]))
    with pytest.raises(ContractError):
        bundle_scalar_product(P("x"), empty)


def test_bundle_dump_roundtrip(plane):
    spec, B = plane
    out, _ = refine(B, "strong", spec.config)
    back = bundle_from_dict(out.to_dict(), spec.domain)
    assert back.same_as(out, 1e-12)
    assert back.dims() == out.dims()
