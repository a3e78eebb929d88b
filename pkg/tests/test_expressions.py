import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetbundle.expressions import (
    ExpressionError,
    ScalarExpression,
    UnsupportedDerivative,
    jet_from_expression,
    taylor_coefficients,
)

P = ScalarExpression.parse


@pytest.mark.parametrize(
    "text,x,value",
    [
        ("(add (mul x x) (mul y y))", [1.0, 2.0], 5.0),
        ("(sub x 3)", [1.0], -2.0),
        ("(pow x 3)", [2.0], 8.0),
        ("(min x y 0.5)", [1.0, 2.0], 0.5),
        ("(sign (neg x))", [2.0], -1.0),
        ("(abs x2)", [0.0, -4.0], 4.0),
    ],
)
def test_evaluate(text, x, value):
    assert P(text).evaluate(x) == value


@pytest.mark.parametrize("bad", ["", "(add", "(foo x)", ")", "(neg x y)", "(pow x y)", "(add x) y", "(add nan)"])
def test_parse_errors(bad):
    with pytest.raises(ExpressionError):
        P(bad)


@given(st.integers(-5, 5), st.integers(-5, 5), st.floats(-2, 2))
def test_text_roundtrip(a, b, c):
    e = P(f"(add (mul {a} x y) (pow z 2) (mul {c!r} x))")
    e2 = P(e.to_text())
    assert e2 == e
    X = np.array([[0.1, -0.7, 1.3]])
    assert e2.evaluate_many(X)[0] == e.evaluate_many(X)[0]


def test_smooth_tier_matches_series():
    c = taylor_coefficients(P("(exp x)"), [0.0], 4)
    assert np.allclose(c, [1, 1, 1 / 2, 1 / 6, 1 / 24], rtol=1e-14)
    c = taylor_coefficients(P("(div 1 (sub 1 x))"), [0.0], 3)
    assert np.allclose(c, [1, 1, 1, 1], rtol=1e-14)


def test_nonsmooth_tier_finite_differences():
    J = jet_from_expression([P("(abs x)")], [0.5], 2)
    assert np.allclose(J.coeffs[0], [0.5, 1.0, 0.0], atol=1e-6)
    with pytest.raises(UnsupportedDerivative):
        jet_from_expression([P("(abs x)")], [0.5], 3)


def test_is_polynomial():
    assert P("(add (mul x y) (pow z 4))").is_polynomial()
    assert not P("(exp x)").is_polynomial()
    assert not P("(div x y)").is_polynomial()
