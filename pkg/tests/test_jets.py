import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetbundle.expressions import ScalarExpression, jet_from_expression, jet_transport_error
from jetbundle.jets import (
    ContractError,
    Jet,
    MultiIndex,
    jet_derivative_at,
    jet_dim,
    jet_multiply,
    jet_project,
    multi_indices,
)

P = ScalarExpression.parse


def scalar_jet(coeffs, n, m, x):
    return Jet(n, 1, m, tuple(x), np.asarray(coeffs, dtype=float)[None])


def jets_strategy(n, m):
    dim = jet_dim(n, m)
    return st.lists(st.floats(-10, 10), min_size=dim, max_size=dim).map(lambda c: scalar_jet(c, n, m, [0.3] * n))


def test_multi_index_order_is_graded_lex():
    assert multi_indices(2, 2) == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    a = MultiIndex((2, 1, 0))
    assert a.order == 3 and a.factorial() == 2
    assert MultiIndex((1, 0)) < MultiIndex((0, 1)) < MultiIndex((2, 0))


@pytest.mark.parametrize("n,m", [(1, 0), (1, 3), (2, 2), (3, 4)])
def test_jet_dim_matches_binomial(n, m):
    assert jet_dim(n, m) == math.comb(n + m, m) == len(multi_indices(n, m))


def test_jet_of_square_at_zero():
    J = jet_from_expression([P("(mul x x)")], [0.0], 2)
    assert J.coeffs.tolist() == [[0.0, 0.0, 1.0]]


def test_jet_of_x2_plus_y2_on_z_axis():
    J = jet_from_expression([P("(add (mul x x) (mul y y))")], [0.0, 0.0, 5.0], 1)
    assert np.all(J.coeffs == 0)


@pytest.mark.parametrize("m", [0, 1, 3])
def test_constant_jet(m):
    J = jet_from_expression([P("17")], [0.4, -2.0], m)
    assert J.coeffs[0, 0] == 17 and np.all(J.coeffs[0, 1:] == 0)


def test_division_by_zero_names_node():
    with pytest.raises(ArithmeticError, match="div"):
        jet_from_expression([P("(div 1 x)")], [0.0], 1)


def test_truncated_product():
    one_plus = scalar_jet([1, 1], 1, 1, [0])
    one_minus = scalar_jet([1, -1], 1, 1, [0])
    assert jet_multiply(one_plus, one_minus).coeffs.tolist() == [[1.0, 0.0]]


def test_product_of_powers_at_one():
    F = jet_from_expression([P("(pow x 2)")], [1.0], 3)
    G = jet_from_expression([P("(pow x 3)")], [1.0], 3)
    H = jet_from_expression([P("(pow x 5)")], [1.0], 3)
    assert np.allclose(jet_multiply(F, G).coeffs, H.coeffs, rtol=1e-14, atol=0)


def test_multiply_mismatch_rejected():
    with pytest.raises(ContractError):
        jet_multiply(scalar_jet([1, 0], 1, 1, [0]), scalar_jet([1, 0], 1, 1, [1]))


@given(jets_strategy(2, 3), jets_strategy(2, 3), jets_strategy(2, 3))
def test_ring_axioms(Pj, Qj, Rj):
    one = Jet.constant([1.0], 2, 3, Pj.basepoint)
    def close(a, b):
        return np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())

    assert close(jet_multiply(jet_multiply(Pj, Qj), Rj).coeffs, jet_multiply(Pj, jet_multiply(Qj, Rj)).coeffs)
    assert close(jet_multiply(Pj, Qj).coeffs, jet_multiply(Qj, Pj).coeffs)
    assert np.array_equal(jet_multiply(Pj, one).coeffs, Pj.coeffs)


def test_projection():
    Pj = scalar_jet([1, 1, 1], 1, 2, [0])
    assert jet_project(Pj, 1).coeffs.tolist() == [[1.0, 1.0]]
    assert jet_project(Pj, 2) == Pj or np.array_equal(jet_project(Pj, 2).coeffs, Pj.coeffs)
    with pytest.raises(ContractError):
        jet_project(Pj, 3)


def test_projection_of_sine_like_series():
    # degree-2 jet of a function whose Taylor series at 0 starts t - t^3/6
    Pj = scalar_jet([0, 1, 0], 1, 2, [0])
    assert jet_project(Pj, 1).coeffs.tolist() == [[0.0, 1.0]]


@given(jets_strategy(2, 4), st.integers(0, 4), st.integers(0, 4))
def test_projection_tower(Pj, a, b):
    m1, m0 = max(a, b), min(a, b)
    assert np.array_equal(jet_project(jet_project(Pj, m1), m0).coeffs, jet_project(Pj, m0).coeffs)


def test_derivative_at_examples():
    t2 = scalar_jet([0, 0, 1], 1, 2, [0])
    assert jet_derivative_at(t2, (2,), [7.0]) == pytest.approx(2.0)
    Pj = scalar_jet([3, 5, 7], 1, 2, [0])
    assert jet_derivative_at(Pj, (0,), [0.0]) == 3
    affine = scalar_jet([1, 2], 1, 1, [1])
    assert jet_derivative_at(affine, (1,), [0.0]) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        jet_derivative_at(affine, (2,), [0.0])


def test_reexpansion_roundtrip():
    Pj = scalar_jet([1.5, -2, 0.25, 3], 1, 3, [0.2])
    back = Pj.reexpand((1.1,)).reexpand((0.2,))
    assert np.allclose(back.coeffs, Pj.coeffs, rtol=1e-12, atol=1e-12)


poly_coeffs = st.lists(st.integers(-3, 3), min_size=4, max_size=4)


def _poly(c):
    # c0 + c1 x + c2 y^2 + c3 x^2 y^3 (degree up to 5)
    return P(f"(add {c[0]} (mul {c[1]} x) (mul {c[2]} y y) (mul {c[3]} x x y y y))")


@given(poly_coeffs, poly_coeffs, st.integers(0, 4), st.floats(-1, 1), st.floats(-1, 1))
def test_homomorphism(cf, cg, m, a, b):
    F, G = _poly(cf), _poly(cg)
    x = [a, b]
    lhs = jet_from_expression([ScalarExpression("mul", (F, G))], x, m).coeffs
    rhs = jet_multiply(jet_from_expression([F], x, m), jet_from_expression([G], x, m)).coeffs
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(lhs).max()))


def test_transport_exact_for_polynomials():
    err = jet_transport_error([P("(add (pow x 3) (mul 2 x y))")], [0.1, 0.2], [0.5, -0.3], 3, 2)
    assert max(err.values()) < 1e-12
    err = jet_transport_error([P("(exp x)")], [0.3], [0.3], 4, 2)
    assert max(err.values()) == 0


def test_transport_exp_rates():
    hs = [2.0 ** -k for k in range(2, 7)]
    tables = [jet_transport_error([P("(exp x)")], [0.0], [h], 3, 1) for h in hs]
    for a, order in (((0,), 3), ((1,), 2)):
        ratios = [tables[i][a] / tables[i + 1][a] for i in range(len(hs) - 1)]
        assert min(ratios) >= 2 ** order * 0.8
