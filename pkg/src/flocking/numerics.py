"""Number fields, dense matrices and bit-size bookkeeping.

Two numeric modes are supported:

* exact  -- arbitrary-precision rationals (``gmpy2.mpq``) stored in numpy
  object arrays; every operation is error-free.
* approx -- binary floating point.  Precision 53 maps to ``float64``, 54..64
  to the x87 extended ``longdouble`` and anything larger to ``mpmath``.

Thresholds are never compared implicitly in approx mode: a :class:`Field`
carries an explicit ``tolerance``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field as dc_field
from functools import reduce
from typing import Iterable, Sequence

import gmpy2
import mpmath
import numpy as np
from gmpy2 import mpq, mpz


class ModeError(TypeError):
    """An exact-only operation received approximate values (or vice versa)."""


class DimensionError(ValueError):
    pass


class RationalParseError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    pass


_RATIONAL_RE = re.compile(r"^\s*([+-]?\d+)(?:\s*/\s*(\d+))?\s*$")


def parse_rational(text) -> mpq:
    """Parse a ``"p/q"`` (or bare integer) literal into an exact rational."""
    if isinstance(text, (int, mpz)):
        return mpq(text)
    if isinstance(text, mpq):
        return text
    m = _RATIONAL_RE.match(str(text))
    if not m:
        raise RationalParseError(f"not a rational literal: {text!r}")
    num = int(m.group(1))
    den = int(m.group(2)) if m.group(2) is not None else 1
    if den == 0:
        raise RationalParseError(f"zero denominator in {text!r}")
    return mpq(num, den)


def format_scalar(x, digits: int = 20) -> str:
    """Rational values print as ``p/q``; floats as decimal strings."""
    if isinstance(x, mpq):
        return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"
    if isinstance(x, (int, mpz)):
        return str(int(x))
    if isinstance(x, mpmath.mpf):
        return mpmath.nstr(x, digits)
    return np.format_float_positional(np.longdouble(x), precision=digits, trim="-") \
        if isinstance(x, np.longdouble) else repr(float(x))


@dataclass(frozen=True)
class Field:
    """The active number field.

    ``tolerance`` is only consulted in approx mode (exact comparisons ignore it).
    """

    exact: bool = True
    precision: int = 64
    tolerance: float = 0.0
    _ctx: object = dc_field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.exact:
            if self.precision < 53:
                raise ValueError("approx mode needs at least 53 bits of precision")
            if self.precision > 64 and self._ctx is None:
                ctx = mpmath.MPContext()
                ctx.prec = self.precision
                object.__setattr__(self, "_ctx", ctx)

    @classmethod
    def approx(cls, precision: int = 64, tolerance: float = 0.0) -> "Field":
        return cls(exact=False, precision=precision, tolerance=tolerance)

    @property
    def mode(self) -> str:
        return "exact" if self.exact else "approx"

    @property
    def dtype(self):
        if self.exact or self.precision > 64:
            return object
        return np.float64 if self.precision == 53 else np.longdouble

    def scalar(self, value):
        if self.exact:
            if isinstance(value, (float, np.floating)):
                return mpq(float(value))
            if isinstance(value, mpmath.mpf):
                raise ModeError("cannot convert an mpmath float to an exact scalar")
            if isinstance(value, str):
                return parse_rational(value)
            return mpq(value)
        if isinstance(value, str):
            value = parse_rational(value)
        if self.precision > 64:
            if isinstance(value, mpq):
                return self._ctx.mpf(int(value.numerator)) / int(value.denominator)
            return self._ctx.mpf(value)
        if isinstance(value, mpq):
            t = self.dtype
            return t(int(value.numerator)) / t(int(value.denominator))
        return self.dtype(value)

    def array(self, values) -> np.ndarray:
        """Convert nested sequences (or an array) into a field array."""
        src = np.asarray(values, dtype=object)
        out = np.empty(src.shape, dtype=self.dtype)
        for idx, val in np.ndenumerate(src):
            out[idx] = self.scalar(val)
        return out

    def zeros(self, shape) -> np.ndarray:
        if self.dtype is object:
            out = np.empty(shape, dtype=object)
            out.fill(self.scalar(0))
            return out
        return np.zeros(shape, dtype=self.dtype)

    def eye(self, n: int) -> np.ndarray:
        out = self.zeros((n, n))
        for i in range(n):
            out[i, i] = self.scalar(1)
        return out

    def le(self, a, b) -> bool:
        """``a <= b`` (up to the field tolerance in approx mode)."""
        if self.exact:
            return a <= b
        return a <= b + self.tolerance

    def lt(self, a, b) -> bool:
        if self.exact:
            return a < b
        return a < b - self.tolerance

    def sqrt(self, x):
        if self.exact:
            raise ModeError("square roots are not exact; compare squared values instead")
        if self.precision > 64:
            return self._ctx.sqrt(x)
        return np.sqrt(self.dtype(x))


EXACT = Field()


def is_exact_array(a: np.ndarray) -> bool:
    return a.dtype == object and all(isinstance(x, (mpq, mpz, int)) for x in a.flat)


def to_float(a) -> np.ndarray:
    """Lossy conversion of any field array to float64."""
    arr = np.asarray(a)
    if arr.dtype == object:
        return np.vectorize(float, otypes=[np.float64])(arr) if arr.size else arr.astype(np.float64)
    return arr.astype(np.float64)


def check_square(a: np.ndarray) -> int:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    return a.shape[0]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def identity_like(a: np.ndarray) -> np.ndarray:
    n = check_square(a)
    if a.dtype == object:
        one = mpq(1) if is_exact_array(a) else type(a.flat[0])(1) if a.size else mpq(1)
        zero = one - one
        out = np.empty((n, n), dtype=object)
        out.fill(zero)
        for i in range(n):
            out[i, i] = one
        return out
    return np.eye(n, dtype=a.dtype)


def mat_power(a: np.ndarray, s: int) -> np.ndarray:
    """``a**s`` by repeated squaring; ``a**0`` is the identity.

    Exact matrices are powered through a common-denominator integer matrix,
    which avoids a gcd per entry per multiplication.
    """
    check_square(a)
    if s < 0:
        raise ValueError("exponent must be nonnegative")
    if a.dtype == object and is_exact_array(a):
        return CDMatrix.from_rational(a).power(s).to_rational()
    result = identity_like(a)
    base = a.copy()
    while s:
        if s & 1:
            result = result @ base
        s >>= 1
        if s:
            base = base @ base
    return result


def _bits(x: int) -> int:
    # bit length of |x|, with 0 taking one bit
    return max(1, int(gmpy2.bit_length(mpz(x))))


@dataclass(frozen=True)
class CDRationalStats:
    denominator_bits: int
    numerator_bits: int
    count: int
    denominator: int = 0


def cd_stats(v) -> CDRationalStats:
    """Common-denominator form of a rational vector (or matrix).

    The common denominator is the lcm of the entry denominators.
    """
    flat = list(np.asarray(v, dtype=object).flat)
    if not all(isinstance(x, (mpq, mpz, int)) for x in flat):
        raise ModeError("cd_stats needs exact rational entries")
    qs = [mpq(x) for x in flat]
    den = reduce(gmpy2.lcm, (x.denominator for x in qs), mpz(1))
    nums = [x.numerator * (den // x.denominator) for x in qs]
    top = max((_bits(abs(p)) for p in nums), default=1)
    return CDRationalStats(_bits(den), top, len(qs), int(den))


class CDMatrix:
    """Integer matrix over a single common denominator.

    Products of transition matrices stay in this form without any gcd work,
    which is what makes million-step exact powers affordable.
    """

    __slots__ = ("num", "den")

    def __init__(self, num: np.ndarray, den):
        self.num = num
        self.den = mpz(den)

    @classmethod
    def from_rational(cls, a) -> "CDMatrix":
        arr = np.asarray(a, dtype=object)
        qs = [mpq(x) for x in arr.flat]
        den = reduce(gmpy2.lcm, (x.denominator for x in qs), mpz(1))
        num = np.empty(arr.shape, dtype=object)
        for idx, x in zip(np.ndindex(arr.shape), qs):
            num[idx] = x.numerator * (den // x.denominator)
        return cls(num, den)

    @classmethod
    def identity(cls, n: int) -> "CDMatrix":
        num = np.empty((n, n), dtype=object)
        num.fill(mpz(0))
        for i in range(n):
            num[i, i] = mpz(1)
        return cls(num, 1)

    @property
    def shape(self):
        return self.num.shape

    def __matmul__(self, other: "CDMatrix") -> "CDMatrix":
        if self.shape[-1] != other.shape[0]:
            raise DimensionError(f"cannot multiply {self.shape} by {other.shape}")
        return CDMatrix(self.num @ other.num, self.den * other.den)

    def __add__(self, other: "CDMatrix") -> "CDMatrix":
        if self.shape != other.shape:
            raise DimensionError(f"cannot add {self.shape} and {other.shape}")
        if self.den == other.den:
            return CDMatrix(self.num + other.num, self.den)
        den = gmpy2.lcm(self.den, other.den)
        a, b = den // self.den, den // other.den
        return CDMatrix(self.num * a + other.num * b, den)

    def power(self, s: int) -> "CDMatrix":
        n = self.shape[0]
        result = CDMatrix.identity(n)
        base = self
        while s:
            if s & 1:
                result = result @ base
            s >>= 1
            if s:
                base = base @ base
        return result

    def to_rational(self) -> np.ndarray:
        out = np.empty(self.shape, dtype=object)
        for idx, p in np.ndenumerate(self.num):
            out[idx] = mpq(p, self.den)
        return out

    def stats(self) -> CDRationalStats:
        top = max((_bits(abs(p)) for p in self.num.flat), default=1)
        return CDRationalStats(_bits(self.den), top, self.num.size, int(self.den))


def exact_solve(a, b) -> np.ndarray:
    """Solve ``a X = b`` over the rationals by Gauss-Jordan elimination.

    Pivots are chosen as the nonzero candidate of smallest bit height, which
    keeps intermediate numerators and denominators balanced.
    """
    a = np.array(a, dtype=object)
    b = np.array(b, dtype=object)
    n = check_square(a)
    vec = b.ndim == 1
    if vec:
        b = b.reshape(n, 1)
    if b.shape[0] != n:
        raise DimensionError(f"right-hand side has {b.shape[0]} rows, expected {n}")
    aug = np.empty((n, n + b.shape[1]), dtype=object)
    for idx, x in np.ndenumerate(a):
        aug[idx] = mpq(x)
    for (i, j), x in np.ndenumerate(b):
        aug[i, n + j] = mpq(x)
    for col in range(n):
        best, best_h = None, None
        for r in range(col, n):
            x = aug[r, col]
            if x != 0:
                h = _bits(x.numerator) + _bits(x.denominator)
                if best is None or h < best_h:
                    best, best_h = r, h
        if best is None:
            raise SingularMatrixError("matrix is singular")
        if best != col:
            aug[[col, best]] = aug[[best, col]]
        aug[col] = aug[col] / aug[col, col]
        for r in range(n):
            if r != col and aug[r, col] != 0:
                aug[r] = aug[r] - aug[r, col] * aug[col]
    x = aug[:, n:]
    return x.reshape(n) if vec else x


def exact_inverse(a) -> np.ndarray:
    n = check_square(np.asarray(a, dtype=object))
    return exact_solve(a, EXACT.eye(n))


def isqrt_bounds(x: mpq, bits: int = 64) -> tuple[mpq, mpq]:
    """Rational lower/upper bounds on sqrt(x) within 2**-bits relative width."""
    if x < 0:
        raise ValueError("negative argument")
    if x == 0:
        return mpq(0), mpq(0)
    p, q = x.numerator, x.denominator
    scale = mpz(1) << (2 * bits)
    # sqrt(p/q) = sqrt(p*q*scale) / (q * 2**bits)
    r = gmpy2.isqrt(p * q * scale)
    den = q << bits
    lo = mpq(r, den)
    hi = lo if r * r == p * q * scale else mpq(r + 1, den)
    return lo, hi


def sqrt_diff_compare(a2, b2, e2, strict: bool) -> bool:
    """Decide ``|sqrt(a2) - sqrt(b2)| < sqrt(e2)`` (or ``<=``) exactly.

    All three arguments are nonnegative rationals (squared lengths).
    """
    # (√a - √b)² = a + b - 2√(ab), so compare a + b - e with 2√(ab)
    lhs = a2 + b2 - e2
    if lhs < 0:
        return True
    rhs2 = 4 * a2 * b2
    return lhs * lhs < rhs2 if strict else lhs * lhs <= rhs2


def inf_norm(a) -> float:
    arr = np.asarray(a)
    if arr.size == 0:
        return 0
    return max(abs(x) for x in arr.flat)


def lcm_all(values: Iterable[int]) -> int:
    return math.lcm(*[int(v) for v in values]) if values else 1


def rows_to_strings(a: np.ndarray) -> list[list[str]]:
    return [[format_scalar(x) for x in row] for row in np.atleast_2d(a)]


def strings_to_array(rows: Sequence[Sequence[str]], fld: Field) -> np.ndarray:
    return fld.array([[parse_rational(x) if isinstance(x, str) else x for x in row] for row in rows])
