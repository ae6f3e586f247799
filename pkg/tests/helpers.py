from fractions import Fraction

import numpy as np
from gmpy2 import mpq

from flocking.dynamics import Configuration


def col(values):
    return [[mpq(v) if not isinstance(v, str) else mpq(*map(int, v.split("/")))] for v in values]


def oscillator():
    x0 = [mpq(k, 16) for k in (0, 8, 21, 29)]
    v1 = [mpq(s, 8) for s in (1, -1, 1, -1)]
    return Configuration.launch([[a] for a in x0], [[b] for b in v1])


def frac(z):
    z = mpq(z)
    return Fraction(int(z.numerator), int(z.denominator))


def random_stochastic(rng, n, m=None, den=12):
    """Random rational row-stochastic matrix with entries k/den-style weights."""
    m = m or n
    out = np.empty((n, m), dtype=object)
    for i in range(n):
        w = rng.integers(0, den, size=m)
        if w.sum() == 0:
            w[rng.integers(0, m)] = 1
        tot = int(w.sum())
        for j in range(m):
            out[i, j] = mpq(int(w[j]), tot)
    return out
