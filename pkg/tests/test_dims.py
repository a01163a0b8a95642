import random

import pytest

from mosaic.dims import Dim, as_dim, ceil_div, ceildiv, const, parse_dim, sym
from mosaic.errors import InstantiationError, ParseError


def test_eval_arithmetic():
    expr = (sym("L") + 2) * 4
    assert expr.eval({"L": 10}) == 48
    assert (sym("L") * sym("M")).eval({"L": 3, "M": 5}) == 15
    assert const(7).eval({}) == 7


def test_ceil_div_definition():
    # d = ceil(n/k) satisfies (d-1) < n/k <= d for positive inputs
    rng = random.Random(0)
    for _ in range(500):
        n = rng.randint(0, 1000)
        k = rng.randint(1, 50)
        d = ceil_div(n, k)
        assert n <= d * k
        if n > 0:
            assert (d - 1) * k < n
    assert ceildiv("M", "K").eval({"M": 10, "K": 4}) == 3


def test_ceil_div_rejects_nonpositive_denominator():
    with pytest.raises(InstantiationError):
        ceil_div(5, 0)


def test_unbound_symbol():
    with pytest.raises(InstantiationError):
        sym("L").eval({})


def test_symbols_and_subst():
    expr = ceildiv(sym("M"), sym("K")) * const(3)
    assert expr.symbols() == {"M", "K"}
    rewritten = expr.subst({"M": sym("M") + 1})
    assert rewritten.eval({"M": 9, "K": 4}) == expr.eval({"M": 10, "K": 4})


@pytest.mark.parametrize(
    "text,bindings,expected",
    [
        ("L", {"L": 12}, 12),
        ("L*8", {"L": 10}, 80),
        ("ceil(M, K)*3", {"M": 10, "K": 4}, 9),
        ("2+3*4", {}, 14),  # products bind tighter than sums
        ("(2+3)*4", {}, 20),
        ("ceil(L+1, 2)", {"L": 4}, 3),
    ],
)
def test_parse(text, bindings, expected):
    assert parse_dim(text).eval(bindings) == expected


def test_parse_rejects_garbage():
    for bad in ("", "L+", "ceil(M)", "1 2", "a$b", "(L"):
        with pytest.raises(ParseError):
            parse_dim(bad)


def test_round_trip_rendering():
    rng = random.Random(1)

    def random_expr(depth: int) -> Dim:
        if depth == 0 or rng.random() < 0.4:
            return const(rng.randint(0, 9)) if rng.random() < 0.5 else sym(rng.choice("LMK"))
        op = rng.choice(("add", "mul", "ceil"))
        a, b = random_expr(depth - 1), random_expr(depth - 1)
        if op == "add":
            return a + b
        if op == "mul":
            return a * b
        return ceildiv(a, b + 1)  # keep the denominator positive

    bindings = {"L": 7, "M": 12, "K": 3}
    for _ in range(300):
        expr = random_expr(3)
        assert parse_dim(str(expr)).eval(bindings) == expr.eval(bindings)


def test_as_dim_coercions():
    assert as_dim(5).eval({}) == 5
    assert as_dim("L").eval({"L": 3}) == 3
    with pytest.raises(ParseError):
        as_dim(3.5)
