from fractions import Fraction

import mpmath
import numpy as np
import pytest
from gmpy2 import mpq
from hypothesis import given, settings, strategies as st

from flocking.dynamics import LAZY_WALK, run
from flocking.lowerbound import LBParams, initial_conditions
from flocking.numerics import (
    EXACT,
    CDMatrix,
    DimensionError,
    Field,
    ModeError,
    RationalParseError,
    SingularMatrixError,
    cd_stats,
    exact_inverse,
    exact_solve,
    format_scalar,
    isqrt_bounds,
    mat_power,
    parse_rational,
    sqrt_diff_compare,
)

rationals = st.fractions(max_denominator=10 ** 6).map(lambda f: mpq(f.numerator, f.denominator))


def R(rows):
    return EXACT.array(rows)


class TestParsing:
    @pytest.mark.parametrize("text,value", [("3/4", mpq(3, 4)), ("-2", mpq(-2)), (" +6 / 8 ", mpq(3, 4)),
                                            ("0", mpq(0))])
    def test_literals(self, text, value):
        assert parse_rational(text) == value

    @pytest.mark.parametrize("text", ["1/0", "1.5", "a/b", "", "1//2", "1/-2"])
    def test_rejects(self, text):
        with pytest.raises(RationalParseError):
            parse_rational(text)

    @given(rationals)
    def test_round_trip(self, x):
        assert parse_rational(format_scalar(x)) == x


class TestCdStats:
    def test_half_third(self):
        s = cd_stats([mpq(1, 2), mpq(1, 3)])
        assert (s.denominator, s.denominator_bits, s.numerator_bits) == (6, 3, 2)

    def test_zero_vector(self):
        s = cd_stats([mpq(0), mpq(0)])
        assert (s.denominator, s.denominator_bits, s.numerator_bits) == (1, 1, 1)

    def test_approx_rejected(self):
        with pytest.raises(ModeError):
            cd_stats(np.array([0.5, 0.25]))

    @given(st.lists(rationals, min_size=1, max_size=8), st.randoms())
    def test_order_invariant(self, xs, rnd):
        ys = list(xs)
        rnd.shuffle(ys)
        assert cd_stats(xs) == cd_stats(ys)

    def test_denominator_growth_is_linear(self):
        # 8-bird lazy-walk run: one factor 3 per tick at most, so bits grow linearly
        cfg = initial_conditions(LBParams(8))
        tr = run(cfg, 100, policy=LAZY_WALK)
        bits = {r.t: cd_stats(r.v.ravel()).denominator_bits for r in tr.records}
        slope = (bits[100] - bits[50]) / 50
        assert bits[100] <= 100 * 2 + bits[0] + 8
        assert 1.0 <= slope <= 2.0   # log2(3) ~ 1.585 per tick
        for t in range(1, 101):
            assert bits[t] <= bits[t - 1] + 2


class TestMatPower:
    P1 = R([["1/3", "2/3"], ["2/3", "1/3"]])

    def test_zero_power(self):
        assert (mat_power(self.P1, 0) == EXACT.eye(2)).all()

    def test_square(self):
        assert (mat_power(self.P1, 2) == R([["5/9", "4/9"], ["4/9", "5/9"]])).all()

    def test_non_square(self):
        with pytest.raises(DimensionError):
            mat_power(R([[1, 2, 3]]), 2)

    @settings(max_examples=25)
    @given(st.integers(0, 12), st.integers(0, 12))
    def test_additive_exponents(self, s, t):
        A = R([["1/2", "1/3", "1/6"], ["0", "3/4", "1/4"], ["1/5", "1/5", "3/5"]])
        assert (mat_power(A, s + t) == mat_power(A, s) @ mat_power(A, t)).all()

    def test_float_mode(self):
        A = np.array([[0.5, 0.5], [0.25, 0.75]])
        assert np.allclose(mat_power(A, 5), np.linalg.matrix_power(A, 5))

    def test_alternating_product_gives_rank_one(self):
        A = R([["1/2", "1/2"], ["1/2", "1/2"]])
        B = R([["1", "0"], ["1/2", "1/2"]])
        C = R([["3/4", "1/4"], ["3/4", "1/4"]])
        # time sequence B, A, B, A; the backward product applies the latest on the left
        assert (A @ B @ A @ B == C).all()

    def test_cd_matrix_matches_rational(self):
        A = R([["1/3", "2/3"], ["1/7", "6/7"]])
        cd = CDMatrix.from_rational(A).power(9).to_rational()
        direct = EXACT.eye(2)
        for _ in range(9):
            direct = direct @ A
        assert (cd == direct).all()


class TestExactArithmetic:
    @given(rationals, rationals)
    def test_round_trip(self, a, b):
        assert (a + b) - b == a

    def test_solve(self):
        A = R([[2, 1], [1, 3]])
        x = exact_solve(A, R([3, 5]))
        assert list(x) == [mpq(4, 5), mpq(7, 5)]

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            exact_inverse(R([[1, 2], [2, 4]]))

    @settings(max_examples=30)
    @given(st.lists(st.lists(st.integers(-9, 9), min_size=4, max_size=4), min_size=4, max_size=4))
    def test_inverse_against_fractions(self, rows):
        A = R(rows)
        # oracle: determinant by Fraction cofactor expansion decides invertibility
        M = [[Fraction(v) for v in r] for r in rows]

        def det(m):
            if len(m) == 1:
                return m[0][0]
            return sum((-1) ** j * m[0][j] * det([r[:j] + r[j + 1:] for r in m[1:]]) for j in range(len(m)))

        if det(M) == 0:
            with pytest.raises(SingularMatrixError):
                exact_inverse(A)
        else:
            assert (A @ exact_inverse(A) == EXACT.eye(4)).all()


class TestSqrtCompare:
    @settings(max_examples=200)
    @given(rationals.map(abs), rationals.map(abs), rationals.map(abs), st.booleans())
    def test_against_high_precision(self, a, b, e, strict):
        with mpmath.workdps(60):
            f = lambda z: mpmath.mpf(int(z.numerator)) / int(z.denominator)
            lhs = abs(mpmath.sqrt(f(a)) - mpmath.sqrt(f(b)))
            rhs = mpmath.sqrt(f(e))
            if abs(lhs - rhs) < mpmath.mpf(10) ** -40:
                return  # exact ties have their own test
            assert sqrt_diff_compare(a, b, e, strict) == (lhs < rhs)

    def test_ties(self):
        # |sqrt(4) - sqrt(1)| = 1 = sqrt(1)
        assert sqrt_diff_compare(mpq(4), mpq(1), mpq(1), strict=False)
        assert not sqrt_diff_compare(mpq(4), mpq(1), mpq(1), strict=True)

    def test_isqrt_bounds(self):
        lo, hi = isqrt_bounds(mpq(2))
        assert lo * lo <= 2 <= hi * hi and hi - lo <= mpq(1, 2 ** 60)
        assert isqrt_bounds(mpq(9, 4)) == (mpq(3, 2), mpq(3, 2))


class TestField:
    def test_precision_floor(self):
        with pytest.raises(ValueError):
            Field.approx(precision=40)

    def test_tolerance_only_in_approx(self):
        f = Field.approx(64, tolerance=1e-9)
        assert f.le(1.0 + 1e-12, 1.0)
        assert not EXACT.le(mpq(1) + mpq(1, 10 ** 12), mpq(1))

    def test_exact_sqrt_refused(self):
        with pytest.raises(ModeError):
            EXACT.sqrt(mpq(2))

    def test_high_precision_dtype(self):
        f = Field.approx(200)
        x = f.scalar(mpq(1, 3))
        assert abs(x * 3 - 1) < mpmath.mpf(2) ** -190
        assert Field.approx(53).dtype is np.float64
        assert Field.approx(64).dtype is np.longdouble
