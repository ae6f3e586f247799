"""Neighbor-averaging flocking on unit-disk networks with hysteresis.

Tick convention: a :class:`Configuration` at tick ``t`` holds ``x(t)`` and
``v(t)`` (the motion that ended at ``t``).  One step builds ``G_t`` from
``x(t)``, forms ``P(t) = I - C_t L_t`` and sets ``v(t+1) = P(t) v(t)``,
``x(t+1) = x(t) + v(t+1)``.  The launch configuration at ``t = 0`` carries
the given initial velocity ``v(1)`` instead (there is no ``v(0)``), and the
first step is just ``x(1) = x(0) + v(1)``.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field as dc_field, replace
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import gmpy2
import numpy as np
from gmpy2 import mpq, mpz

from .numerics import (
    EXACT,
    DimensionError,
    Field,
    format_scalar,
    is_exact_array,
    sqrt_diff_compare,
)


class PolicyError(ValueError):
    pass


class InvalidEventError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


# --------------------------------------------------------------------------
# networks


class _DSU:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


@dataclass(frozen=True)
class Network:
    """Undirected simple graph on birds ``0..n-1``; edges stored as ``(i, j)``, ``i < j``."""

    n: int
    edges: frozenset = frozenset()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a network needs at least one bird")
        norm = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {(i, j)} out of range for n={self.n}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def path(cls, n: int) -> "Network":
        return cls(n, frozenset((i, i + 1) for i in range(n - 1)))

    @classmethod
    def empty(cls, n: int) -> "Network":
        return cls(n)

    @cached_property
    def degrees(self) -> tuple:
        deg = [0] * self.n
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return tuple(deg)

    @cached_property
    def flocks(self) -> tuple:
        """Connected components, each a sorted tuple, ordered by smallest member."""
        dsu = _DSU(self.n)
        for i, j in self.edges:
            dsu.union(i, j)
        groups = {}
        for i in range(self.n):
            groups.setdefault(dsu.find(i), []).append(i)
        return tuple(sorted(tuple(g) for g in groups.values()))

    @cached_property
    def flock_index(self) -> tuple:
        idx = [0] * self.n
        for k, members in enumerate(self.flocks):
            for i in members:
                idx[i] = k
        return tuple(idx)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    def neighbors(self, i: int) -> list:
        return sorted({j for e in self.edges if i in e for j in e if j != i})

    def is_connected(self) -> bool:
        return len(self.flocks) == 1

    def edge_list(self) -> list:
        return sorted(self.edges)

    def restrict(self, members: Sequence[int]) -> "Network":
        """Induced subnetwork, relabeled ``0..m-1`` in the order given."""
        pos = {b: k for k, b in enumerate(members)}
        return Network(len(members), frozenset(
            (pos[i], pos[j]) for i, j in self.edges if i in pos and j in pos))

    def is_simple_path(self, members: Sequence[int]) -> bool:
        """True iff the induced graph on ``members`` is a path visiting them in the given order."""
        want = {(min(a, b), max(a, b)) for a, b in zip(members, members[1:])}
        have = {e for e in self.edges if e[0] in set(members) and e[1] in set(members)}
        return want == have

    def diff(self, other: "Network") -> tuple:
        """Edges gained and lost going from ``other`` to ``self``."""
        return self.edges - other.edges, other.edges - self.edges


@dataclass(frozen=True)
class HysteresisRule:
    """An existing edge survives if its length changed by less than ``eps``."""

    eps: mpq = mpq(1, 2 ** 40)
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eps", mpq(self.eps) if not isinstance(self.eps, float) else self.eps)
        if self.enabled and self.eps <= 0:
            raise ValueError("hysteresis threshold must be positive")

    @classmethod
    def disabled(cls) -> "HysteresisRule":
        return cls(enabled=False)


def _sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(axis=2)


def build_network(x, prev: Network | None = None, rule: HysteresisRule | None = None,
                  prev_x=None, fld: Field = EXACT) -> Network:
    """Unit-disk network of positions ``x`` (rows are birds), with hysteresis.

    Pairs at distance at most 1 are joined.  An edge of ``prev`` is kept when
    its length changed by less than ``rule.eps`` since ``prev_x``.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError("positions must be an n-by-d array")
    n = x.shape[0]
    if prev is not None and prev.n != n:
        raise DimensionError(f"previous network has {prev.n} birds, positions have {n}")
    sq = _sq_dists(x)
    one = fld.scalar(1)
    edges = {(i, j) for i in range(n) for j in range(i + 1, n) if fld.le(sq[i, j], one)}
    use_h = rule is not None and rule.enabled and prev is not None and prev_x is not None
    if use_h:
        psq = _sq_dists(np.asarray(prev_x))
        for i, j in prev.edges:
            if (i, j) in edges:
                continue
            if fld.exact:
                keep = sqrt_diff_compare(sq[i, j], psq[i, j], rule.eps * rule.eps, strict=True)
            else:
                keep = abs(fld.sqrt(sq[i, j]) - fld.sqrt(psq[i, j])) < float(rule.eps)
            if keep:
                edges.add((i, j))
    return Network(n, frozenset(edges))


# --------------------------------------------------------------------------
# confidence policies and transition matrices


class ConfidencePolicy:
    """Maps a network to self-confidence coefficients ``c_i``.

    ``rule(i, degree, network)`` returns ``c_i``; the result may depend on
    the network only.
    """

    def __init__(self, name: str, rule: Callable):
        self.name = name
        self._rule = rule

    def __repr__(self):
        return f"ConfidencePolicy({self.name!r})"

    def coefficients(self, g: Network, fld: Field = EXACT) -> np.ndarray:
        c = [mpq(self._rule(i, d, g)) for i, d in enumerate(g.degrees)]
        for i, (ci, d) in enumerate(zip(c, g.degrees)):
            if d > 0 and not (0 < ci * d < 1):
                raise PolicyError(f"{self.name}: c_{i} * d_{i} = {ci * d} is not in (0, 1)")
        return np.array(c, dtype=object) if fld.exact else fld.array(c)


VICSEK = ConfidencePolicy("vicsek", lambda i, d, g: mpq(1, d + 1))
LAZY_WALK = ConfidencePolicy("lazy", lambda i, d, g: mpq(2, 3 * max(d, 1)))


def custom_policy(table: Mapping[int, object] | Sequence, name: str = "custom",
                  by: str = "degree") -> ConfidencePolicy:
    """Table-driven policy keyed by degree (default) or by bird index."""
    if by == "degree":
        tab = {int(k): mpq(v) if not isinstance(v, str) else mpq(*map(int, v.split("/")))
               for k, v in dict(table).items()}
        return ConfidencePolicy(name, lambda i, d, g: tab.get(d, mpq(1, d + 1)))
    if by == "bird":
        vals = [mpq(v) for v in table]
        return ConfidencePolicy(name, lambda i, d, g: vals[i])
    raise ValueError("custom policy key must be 'degree' or 'bird'")


POLICIES = {"vicsek": VICSEK, "lazy": LAZY_WALK, "lazywalk": LAZY_WALK}


def laplacian(g: Network, fld: Field = EXACT) -> np.ndarray:
    lap = fld.zeros((g.n, g.n))
    for i, d in enumerate(g.degrees):
        lap[i, i] = fld.scalar(d)
    for i, j in g.edges:
        lap[i, j] = lap[j, i] = fld.scalar(-1)
    return lap


@dataclass(frozen=True)
class TransitionMatrix:
    P: np.ndarray
    c: np.ndarray
    network: Network
    policy: str

    def footprint(self) -> np.ndarray:
        return np.vectorize(lambda z: z != 0, otypes=[bool])(self.P)

    def row_sums(self):
        return [sum(row) for row in self.P]


def transition(g: Network, policy: ConfidencePolicy = VICSEK, fld: Field = EXACT) -> TransitionMatrix:
    """``P = I - diag(c) L``."""
    c = policy.coefficients(g, fld)
    P = fld.eye(g.n)
    for i, d in enumerate(g.degrees):
        P[i, i] = fld.scalar(1) - c[i] * d
    for i, j in g.edges:
        P[i, j] = c[i]
        P[j, i] = c[j]
    return TransitionMatrix(P, c, g, policy.name)


# --------------------------------------------------------------------------
# configurations and the step map


@dataclass(frozen=True)
class Configuration:
    t: int
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x, v = np.asarray(self.x), np.asarray(self.v)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if x.shape != v.shape or x.shape[0] < 1 or x.shape[1] < 1:
            raise DimensionError(f"positions {x.shape} and velocities {v.shape} disagree")
        if self.t < 0:
            raise ValueError("tick must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @classmethod
    def launch(cls, x0, v1, fld: Field = EXACT) -> "Configuration":
        """Tick-0 configuration from ``x(0)`` and the initial velocity ``v(1)``."""
        x0, v1 = fld.array(x0), fld.array(v1)
        return cls(0, x0, v1)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def step(cfg: Configuration, g: Network, policy: ConfidencePolicy = VICSEK,
         fld: Field = EXACT) -> Configuration:
    if g.n != cfg.n:
        raise DimensionError("network and configuration sizes differ")
    if cfg.t == 0:
        v_new = cfg.v
    else:
        v_new = transition(g, policy, fld).P @ cfg.v
    return Configuration(cfg.t + 1, cfg.x + v_new, v_new)


@dataclass(frozen=True)
class PerturbationEvent:
    """Coordinatewise rescaling ``v_i <- alpha * v_i`` of every bird in ``members``."""

    t: int
    members: tuple
    alpha: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in self.members)))
        object.__setattr__(self, "alpha", tuple(
            a if isinstance(a, (float, np.floating)) else mpq(a) for a in self.alpha))

    @classmethod
    def flip(cls, t: int, members: Iterable[int], d: int = 1) -> "PerturbationEvent":
        return cls(t, tuple(members), (mpq(-1),) * d)

    def __lt__(self, other):
        return (self.t, self.members) < (other.t, other.members)


def _check_whole_flocks(members: Sequence[int], g: Network):
    mset = set(members)
    for f in g.flocks:
        inter = mset.intersection(f)
        if inter and len(inter) != len(f):
            raise InvalidEventError(f"event members {sorted(mset)} split flock {f}")


def apply_perturbation(cfg: Configuration, ev: PerturbationEvent, g: Network) -> Configuration:
    _check_whole_flocks(ev.members, g)
    if len(ev.alpha) != cfg.d:
        raise DimensionError(f"alpha has {len(ev.alpha)} entries for d={cfg.d}")
    v = cfg.v.copy()
    for i in ev.members:
        for c, a in enumerate(ev.alpha):
            v[i, c] = v[i, c] * a
    return Configuration(cfg.t, cfg.x, v)


# --------------------------------------------------------------------------
# noise model


@dataclass(frozen=True)
class NoiseBudget:
    """Admissible perturbations: at most ``max_events`` events, each of norm at most
    ``delta_const * log(t) / t`` and within ``window`` ticks after a switch."""

    max_events: int | None = None
    delta_const: float = 1.0
    window: int = 0

    def delta(self, t: int) -> float:
        return self.delta_const * math.log(t) / t if t > 0 else 0.0


@dataclass(frozen=True)
class AppliedEvent:
    t: int
    members: tuple
    alpha: tuple
    delta_norm: float


@dataclass
class NoiseCheck:
    event: AppliedEvent
    alpha_ok: bool
    magnitude_ok: bool
    window_ok: bool
    bound: float

    @property
    def passed(self) -> bool:
        return self.alpha_ok and self.magnitude_ok and self.window_ok


@dataclass
class NoiseReport:
    checks: list
    count_ok: bool

    @property
    def passed(self) -> bool:
        return self.count_ok and all(c.passed for c in self.checks)


def validate_noise(events: Sequence[AppliedEvent], budget: NoiseBudget,
                   switch_ticks: Sequence[int]) -> NoiseReport:
    ticks = sorted(switch_ticks)
    checks = []
    for ev in events:
        bound = budget.delta(ev.t)
        alpha_ok = all(abs(a) <= 1 for a in ev.alpha)
        # the window is inclusive: an event at the switch tick itself counts
        k = np.searchsorted(ticks, ev.t, side="right")
        window_ok = k > 0 and ev.t - ticks[k - 1] <= budget.window
        checks.append(NoiseCheck(ev, alpha_ok, ev.delta_norm <= bound, bool(window_ok), bound))
    count_ok = budget.max_events is None or len(events) <= budget.max_events
    return NoiseReport(checks, count_ok)


# --------------------------------------------------------------------------
# simulation engines

_FLOAT_MARGIN = 1e-10


def _ratio_float(num, den) -> float:
    num, den = mpz(num), mpz(den)
    shift = int(den.bit_length()) - 200
    if shift > 0:
        return float(num >> shift) / float(den >> shift)
    return float(mpq(num, den))


class _ExactState:
    """Positions and velocities as integer arrays over one common denominator."""

    __slots__ = ("X", "V", "D", "_xf", "_vf")

    def __init__(self, X, V, D):
        self.X, self.V, self.D = X, V, mpz(D)
        self._xf = self._vf = None

    @classmethod
    def from_config(cls, cfg: Configuration) -> "_ExactState":
        vals = [mpq(z) for z in cfg.x.flat] + [mpq(z) for z in cfg.v.flat]
        D = mpz(1)
        for z in vals:
            D = gmpy2.lcm(D, z.denominator)
        conv = np.vectorize(lambda z: mpq(z).numerator * (D // mpq(z).denominator), otypes=[object])
        return cls(conv(cfg.x), conv(cfg.v), D)

    @property
    def n(self):
        return self.X.shape[0]

    def arrays(self):
        f = np.vectorize(lambda p: mpq(p, self.D), otypes=[object])
        return f(self.X), f(self.V)

    def floats(self):
        if self._xf is None:
            f = np.vectorize(lambda p: _ratio_float(p, self.D), otypes=[np.float64])
            self._xf, self._vf = f(self.X), f(self.V)
        return self._xf, self._vf

    def within(self, i, j, level: mpq) -> bool:
        diff = self.X[i] - self.X[j]
        s = sum(z * z for z in diff)
        return s * level.denominator ** 2 <= level.numerator ** 2 * self.D * self.D

    def step(self, N, delta, launch=False):
        if launch:
            return _ExactState(self.X + self.V, self.V, self.D)
        V = N @ self.V
        return _ExactState(self.X * delta + V, V, self.D * delta)

    def jump(self, cache, k):
        """Advance ``k`` ticks on a fixed network using cached binary powers."""
        W, U, E = self.V, None, mpz(1)
        i = 0
        while k:
            if k & 1:
                Nb, Tb, db = cache.level(i)
                TW = Tb @ W
                U = TW if U is None else U * db + TW
                W = Nb @ W
                E = E * db
            k >>= 1
            i += 1
        return _ExactState(self.X * E + U, W, self.D * E)

    def scaled(self, members, alpha):
        L = mpz(1)
        for a in alpha:
            L = gmpy2.lcm(L, mpq(a).denominator)
        X = self.X * L
        V = self.V * L
        for i in members:
            for c, a in enumerate(alpha):
                a = mpq(a)
                V[i, c] = self.V[i, c] * a.numerator * (L // a.denominator)
        return _ExactState(X, V, self.D * L)

    def delta_norm(self, members, alpha) -> float:
        s = mpq(0)
        for i in members:
            for c, a in enumerate(alpha):
                s += ((mpq(a) - 1) * mpq(self.V[i, c], self.D)) ** 2
        return math.sqrt(float(s)) if s < 2 ** 1000 else float("inf")


class _FloatState:
    __slots__ = ("X", "V")

    def __init__(self, X, V):
        self.X, self.V = X, V

    @classmethod
    def from_config(cls, cfg: Configuration, fld: Field):
        return cls(fld.array(cfg.x), fld.array(cfg.v))

    @property
    def n(self):
        return self.X.shape[0]

    def arrays(self):
        return self.X, self.V

    def floats(self):
        return np.asarray(self.X, dtype=np.float64), np.asarray(self.V, dtype=np.float64)

    def step(self, P, launch=False):
        if launch:
            return _FloatState(self.X + self.V, self.V)
        V = P @ self.V
        return _FloatState(self.X + V, V)

    def jump(self, cache, k):
        W, U = self.V, None
        i = 0
        while k:
            if k & 1:
                Pb, Tb = cache.level(i)
                TW = Tb @ W
                U = TW if U is None else U + TW
                W = Pb @ W
            k >>= 1
            i += 1
        return _FloatState(self.X + U, W)

    def scaled(self, members, alpha):
        V = self.V.copy()
        for i in members:
            for c, a in enumerate(alpha):
                V[i, c] = V[i, c] * a
        return _FloatState(self.X, V)

    def delta_norm(self, members, alpha) -> float:
        s = 0.0
        for i in members:
            for c, a in enumerate(alpha):
                s += float((float(a) - 1) * self.V[i, c]) ** 2
        return math.sqrt(s)


class _ExactPowers:
    """Binary powers ``N^b`` and ``T_b = sum_{s=1..b} P^s`` (numerators over ``delta^b``)."""

    def __init__(self, N, delta):
        self.levels = [(N, N.copy(), mpz(delta))]

    def level(self, i):
        while len(self.levels) <= i:
            Nb, Tb, db = self.levels[-1]
            self.levels.append((Nb @ Nb, Tb * db + Nb @ Tb, db * db))
        return self.levels[i]


class _FloatPowers:
    def __init__(self, P):
        self.levels = [(P, P.copy())]

    def level(self, i):
        while len(self.levels) <= i:
            Pb, Tb = self.levels[-1]
            self.levels.append((Pb @ Pb, Tb + Pb @ Tb))
        return self.levels[i]


def _cd_transition(tm: TransitionMatrix):
    delta = mpz(1)
    for z in tm.P.flat:
        delta = gmpy2.lcm(delta, mpq(z).denominator)
    N = np.vectorize(lambda z: mpq(z).numerator * (delta // mpq(z).denominator), otypes=[object])(tm.P)
    return N, delta


def _network_from_state(state, fld: Field, prev: Network | None, prev_state,
                        rule: HysteresisRule | None) -> Network:
    n = state.n
    if fld.exact:
        xf, _ = state.floats()
        one = mpq(1)
        sq = _sq_dists(xf)
        dist = np.sqrt(sq)
        margin = _FLOAT_MARGIN * (1.0 + float(np.abs(xf).max()))
        edges = set()
        for i in range(n):
            for j in range(i + 1, n):
                if dist[i, j] < 1 - margin:
                    edges.add((i, j))
                elif dist[i, j] <= 1 + margin and state.within(i, j, one):
                    edges.add((i, j))
        if rule is not None and rule.enabled and prev is not None and prev_state is not None:
            e2 = rule.eps * rule.eps
            for i, j in prev.edges:
                if (i, j) in edges:
                    continue
                a = sum(z * z for z in state.X[i] - state.X[j])
                b = sum(z * z for z in prev_state.X[i] - prev_state.X[j])
                # common scale D^2 D'^2 q^2 turns all three quantities into integers
                q2 = mpz(e2.denominator)
                a2 = a * prev_state.D ** 2 * q2
                b2 = b * state.D ** 2 * q2
                s2 = e2.numerator * state.D ** 2 * prev_state.D ** 2
                if sqrt_diff_compare(a2, b2, s2, strict=True):
                    edges.add((i, j))
        return Network(n, frozenset(edges))
    x, _ = state.arrays()
    prev_x = prev_state.arrays()[0] if prev_state is not None else None
    return build_network(x, prev, rule, prev_x, fld)


def _certified_ticks(state, net: Network, fld: Field, levels) -> int | None:
    """Number of ticks the network provably stays equal to ``net``.

    Velocities of a flock stay in the convex hull of its current velocities,
    so the distance between birds of flocks F and G changes by at most the
    l1 spread bound B(F, G) per tick.  Returns None when unbounded.
    """
    xf, vf = state.floats()
    n, d = xf.shape
    flocks = net.flocks
    lo = np.array([[vf[list(f), c].min() for c in range(d)] for f in flocks])
    hi = np.array([[vf[list(f), c].max() for c in range(d)] for f in flocks])
    if fld.exact:
        # exact integer spreads, then a tiny relative inflation for the float conversion
        ilo = [[min(state.V[i, c] for i in f) for c in range(d)] for f in flocks]
        ihi = [[max(state.V[i, c] for i in f) for c in range(d)] for f in flocks]
    nf = len(flocks)
    bound = np.zeros((nf, nf))
    for a in range(nf):
        for b in range(a, nf):
            if fld.exact:
                tot = mpz(0)
                for c in range(d):
                    tot += max(ihi[a][c] - ilo[b][c], ihi[b][c] - ilo[a][c], mpz(0))
                val = _ratio_float(tot, state.D) * (1 + 1e-12) if tot else 0.0
            else:
                val = float(sum(max(hi[a, c] - lo[b, c], hi[b, c] - lo[a, c], 0.0) for c in range(d)))
                val *= 1 + 1e-9
            bound[a, b] = bound[b, a] = val
    dist = np.sqrt(_sq_dists(xf))
    margin = _FLOAT_MARGIN * (1.0 + float(np.abs(xf).max()))
    fi = net.flock_index
    best = None
    lv = [float(L) for L in levels]
    for i in range(n):
        for j in range(i + 1, n):
            B = bound[fi[i], fi[j]]
            if B == 0:
                continue
            for L in lv:
                gap = abs(dist[i, j] - L) - margin
                if gap <= 0:
                    return 0
                k = math.floor(gap / B)
                if dist[i, j] > L and k * B >= gap:
                    k -= 1
                best = k if best is None else min(best, k)
                if best <= 0:
                    return 0
    return best


@dataclass
class TickRecord:
    t: int
    network: Network
    switch: bool
    skipped: int = 0
    state: object = dc_field(default=None, repr=False)

    @property
    def edges(self):
        return self.network.edge_list()

    @property
    def flocks(self):
        return self.network.flocks

    @cached_property
    def _arrays(self):
        if self.state is None:
            raise ValueError(f"state at tick {self.t} was not retained")
        return self.state.arrays()

    @property
    def x(self):
        return self._arrays[0]

    @property
    def v(self):
        return self._arrays[1]

    def positions_float(self):
        return self.state.floats()[0]

    def velocities_float(self):
        return self.state.floats()[1]

    @property
    def has_state(self) -> bool:
        return self.state is not None


@dataclass
class Trace:
    records: list
    events: list
    policy: str
    mode: str
    status: str = "complete"
    final: object = dc_field(default=None, repr=False)

    @property
    def ticks(self):
        return [r.t for r in self.records]

    @property
    def switch_ticks(self):
        return [r.t for r in self.records if r.switch]

    def record_at(self, t: int) -> TickRecord:
        for r in self.records:
            if r.t == t:
                return r
        raise KeyError(t)

    def final_configuration(self) -> Configuration:
        x, v = self.final[1].arrays()
        return Configuration(self.final[0], x, v)


def run(initial: Configuration, horizon: int, events: Iterable[PerturbationEvent] = (),
        policy: ConfidencePolicy = VICSEK, rule: HysteresisRule | None = None,
        fld: Field = EXACT, observers: Sequence[Callable] = (), *,
        prev_network: Network | None = None, fast_forward: bool = False,
        watch_levels: Sequence = (), keep_states: str = "all",
        stop_when: Callable | None = None, step_budget: int | None = None) -> Trace:
    """Drive the dynamics for ``horizon`` ticks.

    Observers are called with each :class:`TickRecord` in tick order and may
    return further (future) :class:`PerturbationEvent` objects.  With
    ``fast_forward`` the engine jumps over stretches where the network is
    certified not to change (and no distance crosses any ``watch_levels``
    threshold); records are then produced only at visited ticks.

    ``keep_states``: ``"all"``, ``"changes"`` (switch and event ticks, plus
    the first and last records) or ``"none"``.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rule = rule if rule is not None else HysteresisRule()
    if fld.exact and not (is_exact_array(np.asarray(initial.x)) and is_exact_array(np.asarray(initial.v))):
        initial = Configuration(initial.t, EXACT.array(initial.x), EXACT.array(initial.v))
    state = _ExactState.from_config(initial) if fld.exact else _FloatState.from_config(initial, fld)
    levels = sorted({mpq(1)} | {mpq(L) for L in watch_levels})

    queue = list(events)
    heapq.heapify(queue)
    records, applied = [], []
    t = initial.t
    end = t + horizon
    status = "complete"
    prev_net, prev_state = prev_network, None
    tm_cache = {}

    def transition_for(net):
        entry = tm_cache.get(net)
        if entry is None:
            tm = transition(net, policy, fld)
            if fld.exact:
                N, delta = _cd_transition(tm)
                entry = (tm, N, delta, None)
            else:
                entry = (tm, tm.P, None, None)
            if len(tm_cache) > 64:
                tm_cache.clear()
            tm_cache[net] = entry
        return entry

    def powers_for(net):
        tm, N, delta, pw = transition_for(net)
        if pw is None:
            pw = _ExactPowers(N, delta) if fld.exact else _FloatPowers(N)
            tm_cache[net] = (tm, N, delta, pw)
        return pw

    net = _network_from_state(state, fld, prev_net, prev_state, rule)
    skipped = 0
    while True:
        switch = prev_net is not None and net != prev_net
        while queue and queue[0].t < t:
            raise InvalidEventError(f"event at tick {heapq.heappop(queue).t} is in the past (now {t})")
        while queue and queue[0].t == t:
            ev = heapq.heappop(queue)
            _check_whole_flocks(ev.members, net)
            if len(ev.alpha) != state.X.shape[1]:
                raise DimensionError("alpha length does not match dimension")
            norm = state.delta_norm(ev.members, ev.alpha)
            state = state.scaled(ev.members, ev.alpha)
            applied.append(AppliedEvent(t, ev.members, ev.alpha, norm))
        keep = keep_states == "all" or (keep_states == "changes" and (
            switch or not records or (applied and applied[-1].t == t)))
        rec = TickRecord(t, net, switch, skipped, state if keep else None)
        live = TickRecord(t, net, switch, skipped, state)
        records.append(rec)
        for obs in observers:
            new = obs(live)
            for ev in new or ():
                if ev.t <= t:
                    raise InvalidEventError(f"observer scheduled an event at {ev.t} <= {t}")
                heapq.heappush(queue, ev)
        if stop_when is not None and stop_when(live):
            status = "stopped"
            break
        if t >= end:
            break
        if step_budget is not None and t - initial.t >= step_budget:
            status = "budget"
            break

        k = 1
        if fast_forward and t >= 1:
            limit = end - t
            if queue:
                limit = min(limit, queue[0].t - t)
            if step_budget is not None:
                limit = min(limit, step_budget - (t - initial.t))
            if limit >= 2 and not _has_stretched_edges(state, net, fld):
                cert = _certified_ticks(state, net, fld, levels)
                k = limit if cert is None else max(1, min(cert, limit))
        old_state = state
        tm, N, delta, _ = transition_for(net)
        if k == 1:
            if fld.exact:
                state = state.step(N, delta, launch=(t == 0))
            else:
                state = state.step(N, launch=(t == 0))
            t += 1
            prev_net, prev_state = net, old_state
            net = _network_from_state(state, fld, prev_net, prev_state, rule)
            skipped = 0
        else:
            state = state.jump(powers_for(net), k)
            t += k
            # certified: the network is unchanged over the whole jump
            prev_net, prev_state = net, None
            skipped = k - 1
    if records and keep_states == "changes" and records[-1].state is None:
        records[-1].state = state
    return Trace(records, applied, policy.name, fld.mode, status, (t, state))


def _has_stretched_edges(state, net: Network, fld: Field) -> bool:
    """True if some current edge is longer than 1 (kept only by hysteresis)."""
    one = mpq(1)
    for i, j in net.edges:
        if fld.exact:
            if not state.within(i, j, one):
                return True
        else:
            xf, _ = state.floats()
            if float(((xf[i] - xf[j]) ** 2).sum()) > 1.0:
                return True
    return False


def sup_velocity(v) -> object:
    return max(abs(z) for z in np.asarray(v).flat)


def format_row(values) -> list:
    return [format_scalar(z) for z in values]
