"""Residue clearing toy: sparse integer polynomials combined by the ⊕ operator.

``p ⊕ q = p + q + (p - q) x^(2^h(p - q))`` where ``h`` is the lowest degree
of a nonzero monomial.  Exponents are arbitrary integers, so degrees grow
like a tower of twos along a complete tree.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from gmpy2 import mpz

DEFAULT_EXPONENT_BITS = 2 ** 16


class ExponentBudgetError(OverflowError):
    def __init__(self, h):
        self.h = h
        size = mpz(h).bit_length()
        shown = str(h) if size <= 64 else f"a {size}-bit integer"
        super().__init__(f"exponent 2^h with h = {shown} exceeds the exponent bit budget")


class PolyParseError(ValueError):
    pass


class SparsePoly:
    """Map exponent -> nonzero integer coefficient."""

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        clean = {}
        for e, c in dict(terms or {}).items():
            e, c = mpz(e), mpz(c)
            if e < 0:
                raise ValueError("exponents must be nonnegative")
            if c:
                clean[e] = clean.get(e, mpz(0)) + c
                if not clean[e]:
                    del clean[e]
        self.terms = clean

    @classmethod
    def monomial(cls, coeff, exp=1) -> "SparsePoly":
        return cls({exp: coeff})

    @classmethod
    def x(cls) -> "SparsePoly":
        return cls({1: 1})

    @classmethod
    def zero(cls) -> "SparsePoly":
        return cls()

    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self):
        return bool(self.terms)

    def __eq__(self, other):
        return isinstance(other, SparsePoly) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def __add__(self, other: "SparsePoly") -> "SparsePoly":
        out = dict(self.terms)
        for e, c in other.terms.items():
            s = out.get(e, 0) + c
            if s:
                out[e] = s
            else:
                out.pop(e, None)
        return SparsePoly(out)

    def __neg__(self) -> "SparsePoly":
        return SparsePoly({e: -c for e, c in self.terms.items()})

    def __sub__(self, other: "SparsePoly") -> "SparsePoly":
        return self + (-other)

    def __mul__(self, other: "SparsePoly") -> "SparsePoly":
        out = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                out[e1 + e2] = out.get(e1 + e2, 0) + c1 * c2
        return SparsePoly(out)

    def shift(self, k) -> "SparsePoly":
        """Multiply by ``x^k``."""
        return SparsePoly({e + k: c for e, c in self.terms.items()})

    def scale(self, a) -> "SparsePoly":
        return SparsePoly({e: a * c for e, c in self.terms.items()})

    @property
    def degree(self):
        if not self.terms:
            raise ValueError("the zero polynomial has no degree")
        return max(self.terms)

    def leading(self):
        return self.terms[self.degree]

    def __repr__(self):
        return f"SparsePoly({to_text(self)!r})"

    def __str__(self):
        return to_text(self)


def low_degree(p: SparsePoly):
    """Smallest exponent carrying a nonzero coefficient."""
    if p.is_zero():
        raise ValueError("low degree of the zero polynomial is undefined")
    return min(p.terms)


def oplus(p: SparsePoly, q: SparsePoly, budget_bits: int = DEFAULT_EXPONENT_BITS) -> SparsePoly:
    diff = p - q
    if diff.is_zero():
        # the third term carries the factor p - q = 0
        return p + q
    h = low_degree(diff)
    if h + 1 > budget_bits:
        raise ExponentBudgetError(h)
    return p + q + diff.shift(mpz(1) << int(h))


# --------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class Leaf:
    poly: SparsePoly


@dataclass(frozen=True)
class Node:
    left: object
    right: object


def canonical_tree(k: int):
    """Complete tree with ``2^(k-1)`` leaves; a leaf with ``l`` left turns holds ``(-1)^l x``."""
    if k < 1:
        raise ValueError("the canonical tree needs k >= 1")

    def build(level, turns):
        if level == 1:
            return Leaf(SparsePoly.monomial(-1 if turns % 2 else 1))
        return Node(build(level - 1, turns + 1), build(level - 1, turns))

    return build(k, 0)


def eval_tree(tree, budget_bits: int = DEFAULT_EXPONENT_BITS) -> SparsePoly:
    if isinstance(tree, Leaf):
        return tree.poly
    if isinstance(tree, Node):
        return oplus(eval_tree(tree.left, budget_bits), eval_tree(tree.right, budget_bits), budget_bits)
    raise TypeError("not a combine tree")


def canonical_degrees(k: int) -> list:
    """``d_1 = 1``, ``d_j = d_{j-1} + 2^(d_{j-1})``."""
    out = [mpz(1)]
    while len(out) < k:
        d = out[-1]
        out.append(d + (mpz(1) << int(d)))
    return out


# --------------------------------------------------------------------------
# text forms


def to_text(p: SparsePoly) -> str:
    if p.is_zero():
        return "0"
    parts = []
    for e in sorted(p.terms):
        c = p.terms[e]
        mag = abs(c)
        if e == 0:
            body = str(mag)
        else:
            mono = "x" if e == 1 else f"x^{e}"
            body = mono if mag == 1 else f"{mag}*{mono}"
        sign = "-" if c < 0 else "+"
        parts.append((sign, body))
    first_sign, first = parts[0]
    text = ("-" if first_sign == "-" else "") + first
    for sign, body in parts[1:]:
        text += f" {sign} {body}"
    return text


_TERM = re.compile(r"\s*([+-])?\s*(?:(\d+)\s*(\*)?\s*)?(x(?:\s*\^\s*(\d+))?)?\s*")


def parse_poly(text: str) -> SparsePoly:
    s = text.strip()
    if not s:
        raise PolyParseError("empty polynomial")
    terms = {}
    pos = 0
    first = True
    while pos < len(s):
        m = _TERM.match(s, pos)
        sign, coeff, star, mono, exp = m.groups()
        if m.end() == pos or (coeff is None and mono is None) or (star and mono is None):
            raise PolyParseError(f"cannot parse polynomial at column {pos + 1}: {text!r}")
        if sign is None and not first:
            raise PolyParseError(f"missing operator at column {pos + 1}: {text!r}")
        c = mpz(coeff) if coeff is not None else mpz(1)
        if sign == "-":
            c = -c
        e = mpz(0) if mono is None else (mpz(exp) if exp is not None else mpz(1))
        terms[e] = terms.get(e, 0) + c
        pos = m.end()
        first = False
    return SparsePoly(terms)


def parse_tree(text: str):
    """Nested parentheses ``(left, right)`` whose leaves are polynomial literals."""
    s = text.strip()
    pos = 0

    def parse(i):
        while i < len(s) and s[i].isspace():
            i += 1
        if i < len(s) and s[i] == "(":
            left, i = parse(i + 1)
            i = _expect(i, ",")
            right, i = parse(i)
            i = _expect(i, ")")
            return Node(left, right), i
        j = i
        while j < len(s) and s[j] not in ",()":
            j += 1
        if j == i:
            raise PolyParseError(f"expected a leaf at column {i + 1}")
        return Leaf(parse_poly(s[i:j])), j

    def _expect(i, ch):
        while i < len(s) and s[i].isspace():
            i += 1
        if i >= len(s) or s[i] != ch:
            raise PolyParseError(f"expected {ch!r} at column {i + 1}")
        return i + 1

    tree, pos = parse(pos)
    if s[pos:].strip():
        raise PolyParseError(f"trailing text at column {pos + 1}")
    return tree


def tree_to_text(tree) -> str:
    if isinstance(tree, Leaf):
        return to_text(tree.poly)
    return f"({tree_to_text(tree.left)}, {tree_to_text(tree.right)})"
