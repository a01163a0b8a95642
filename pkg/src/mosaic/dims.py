"""Symbolic shape expressions: sums, products, and ceiling division over named dims.

The algebra is deliberately small. Every operator preserves non-negativity, so
any expression evaluated under a complete non-negative integer binding yields a
non-negative integer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

from .errors import InstantiationError, ParseError

DimLike = Union["Dim", int, str]


def ceil_div(numerator: int, denominator: int) -> int:
    if denominator <= 0:
        raise InstantiationError(f"ceil division by non-positive denominator {denominator}")
    return -(-numerator // denominator)


@dataclass(frozen=True)
class Dim:
    """One node of a shape expression tree.

    ``op`` is one of ``const``, ``sym``, ``add``, ``mul``, ``ceildiv``.
    """

    op: str
    value: int | str | None = None
    args: tuple["Dim", ...] = ()

    def eval(self, bindings: Mapping[str, int]) -> int:
        if self.op == "const":
            return self.value  # type: ignore[return-value]
        if self.op == "sym":
            try:
                return bindings[self.value]  # type: ignore[index]
            except KeyError:
                raise InstantiationError(f"unbound symbol {self.value!r}") from None
        a = self.args[0].eval(bindings)
        b = self.args[1].eval(bindings)
        if self.op == "add":
            return a + b
        if self.op == "mul":
            return a * b
        return ceil_div(a, b)

    def symbols(self) -> frozenset[str]:
        if self.op == "sym":
            return frozenset((self.value,))  # type: ignore[arg-type]
        out: frozenset[str] = frozenset()
        for a in self.args:
            out |= a.symbols()
        return out

    def subst(self, mapping: Mapping[str, "Dim"]) -> "Dim":
        """Replace symbol occurrences by expressions (used for chunk rewriting)."""
        if self.op == "const":
            return self
        if self.op == "sym":
            return mapping.get(self.value, self)  # type: ignore[arg-type]
        return Dim(self.op, None, tuple(a.subst(mapping) for a in self.args))

    def __add__(self, other: DimLike) -> "Dim":
        return Dim("add", None, (self, as_dim(other)))

    def __radd__(self, other: DimLike) -> "Dim":
        return Dim("add", None, (as_dim(other), self))

    def __mul__(self, other: DimLike) -> "Dim":
        return Dim("mul", None, (self, as_dim(other)))

    def __rmul__(self, other: DimLike) -> "Dim":
        return Dim("mul", None, (as_dim(other), self))

    def __str__(self) -> str:
        if self.op == "const":
            return str(self.value)
        if self.op == "sym":
            return str(self.value)
        a, b = self.args
        if self.op == "ceildiv":
            return f"ceil({a}, {b})"
        if self.op == "add":
            return f"{a}+{b}"
        # products parenthesize additive children to keep the rendering parseable
        sa = f"({a})" if a.op == "add" else str(a)
        sb = f"({b})" if b.op == "add" else str(b)
        return f"{sa}*{sb}"


def const(n: int) -> Dim:
    if not isinstance(n, int) or n < 0:
        raise ParseError(f"dim constants must be non-negative integers, got {n!r}")
    return Dim("const", n)


def sym(name: str) -> Dim:
    return Dim("sym", name)


def ceildiv(a: DimLike, b: DimLike) -> Dim:
    return Dim("ceildiv", None, (as_dim(a), as_dim(b)))


def as_dim(x: DimLike) -> Dim:
    if isinstance(x, Dim):
        return x
    if isinstance(x, int):
        return const(x)
    if isinstance(x, str):
        return sym(x)
    raise ParseError(f"cannot coerce {x!r} to a dim expression")


# --- expression parsing ------------------------------------------------------
#
# expr    := product ('+' product)*
# product := factor ('*' factor)*
# factor  := INT | IDENT | 'ceil' '(' expr ',' expr ')' | '(' expr ')'

_PUNCT = "+*(),"


def _tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in _PUNCT:
            tokens.append(c)
            i += 1
        elif c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(text[i:j])
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(text[i:j])
            i = j
        else:
            raise ParseError(f"unexpected character {c!r} in dim expression {text!r}")
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError(f"unexpected end of dim expression {self.text!r}")
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r} but found {tok!r} in {self.text!r}")
        self.pos += 1
        return tok

    def expr(self) -> Dim:
        node = self.product()
        while self.peek() == "+":
            self.take()
            node = Dim("add", None, (node, self.product()))
        return node

    def product(self) -> Dim:
        node = self.factor()
        while self.peek() == "*":
            self.take()
            node = Dim("mul", None, (node, self.factor()))
        return node

    def factor(self) -> Dim:
        tok = self.take()
        if tok == "(":
            node = self.expr()
            self.take(")")
            return node
        if tok == "ceil":
            self.take("(")
            a = self.expr()
            self.take(",")
            b = self.expr()
            self.take(")")
            return ceildiv(a, b)
        if tok.isdigit():
            return const(int(tok))
        if tok[0].isalpha() or tok[0] == "_":
            return sym(tok)
        raise ParseError(f"unexpected token {tok!r} in dim expression {self.text!r}")


def parse_dim(text: str) -> Dim:
    """Parse a shape expression string. ``ceil`` is reserved for ceiling division."""
    parser = _Parser(text)
    node = parser.expr()
    if parser.peek() is not None:
        raise ParseError(f"trailing tokens after dim expression in {text!r}")
    return node
