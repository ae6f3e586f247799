"""The tower-of-twos lower-bound instance: generator, flip scheduler, predictors, checks.

Birds ``0..n-1`` start in pairs at ``2l`` and ``2l + 2/3``; pair ``l`` is
launched with velocity ``(-1)^l (q, 0)``.  Flocks merge along the complete
binary tree over bird blocks of size ``2^j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import mpmath
import numpy as np
from gmpy2 import mpq, mpz

from .analysis import detect_switches, fusion_tree
from .dynamics import (
    LAZY_WALK,
    BudgetExceeded,
    Configuration,
    ConfidencePolicy,
    HysteresisRule,
    NoiseBudget,
    PerturbationEvent,
    Trace,
    _ratio_float,
    run,
    validate_noise,
)
from .numerics import EXACT, Field, parse_rational


class CongruenceError(ValueError):
    pass


class DegenerateVelocityError(ArithmeticError):
    pass


INTEGRITY_LOW = mpq(58, 100)


@dataclass(frozen=True)
class LBParams:
    n: int = 8
    q: mpq = mpq(1, 32)
    lag: int = 6
    dim: int = 1

    def __post_init__(self):
        q = parse_rational(self.q) if isinstance(self.q, str) else mpq(self.q)
        object.__setattr__(self, "q", q)
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 4, got {self.n}")
        if q <= 0 or q.numerator != 1:
            raise CongruenceError(f"q must be 1/k for a positive integer k, got {q}")
        if q.denominator % 6 != 2:
            raise CongruenceError(f"1/q = {q.denominator} is not 2 mod 6")
        if self.lag < 1:
            raise ValueError("lag must be positive")
        if self.dim not in (1, 2):
            raise ValueError("dimension mode must be 1 or 2")

    @property
    def height(self) -> int:
        return self.n.bit_length() - 1


def initial_conditions(p: LBParams) -> Configuration:
    x, v = [], []
    for l in range(p.n // 2):
        x += [mpq(2 * l), mpq(2 * l) + mpq(2, 3)]
        v += [p.q if l % 2 == 0 else -p.q, mpq(0)]
    if p.dim == 1:
        return Configuration.launch([[a] for a in x], [[b] for b in v])
    return Configuration.launch([[a, 0] for a in x], [[b, 1] for b in v])


def lazy_policy() -> ConfidencePolicy:
    return LAZY_WALK


# --------------------------------------------------------------------------
# closed forms


def _alt(t: int) -> mpq:
    """``(-3)^(1-t)`` exactly."""
    e = 1 - t
    return mpq(-3) ** e if e >= 0 else mpq(1) / mpq(-3) ** (-e)


@dataclass(frozen=True)
class Height1:
    q: mpq
    theta1: int
    m1: mpq

    def position(self, bird: int, t: int) -> mpq:
        """Closed-form trajectory of any bird before the first merge (``t <= theta1``)."""
        l, second = divmod(bird, 2)
        sign = 1 if l % 2 == 0 else -1
        a = _alt(t) / 4
        half = self.q / 2
        if second:
            return 2 * l + mpq(2, 3) + sign * half * (t - mpq(3, 4) - a)
        return 2 * l + sign * half * (t + mpq(3, 4) + a)

    def pair_gap(self, t: int, sign: int = 1) -> mpq:
        """``2/3 - sign * (3/4) q (1 - (-1/3)^t)``."""
        return mpq(2, 3) - sign * mpq(3, 4) * self.q * (1 - mpq(-1, 3) ** t)

    def sibling_gap(self, t: int) -> mpq:
        return mpq(4, 3) - t * self.q


def predict_height1(q) -> Height1:
    q = mpq(q)
    if q.numerator != 1 or q.denominator % 6 != 2:
        raise CongruenceError(f"1/q = {1 / q} is not an integer congruent to 2 mod 6")
    theta = (int(q.denominator) + 1) // 3
    return Height1(q, theta, q / 2)


def predict_m2(q, theta1: int) -> mpq:
    """``(q/2) (-3)^(-theta1)``."""
    return mpq(q) / 2 / mpq(-3) ** theta1


def predict_m3(q, theta2: int) -> mpq:
    """``(q/42) (4 (2/3)^theta2 - (-3)^(-theta2))``, built over ``3^theta2``."""
    th = int(theta2)
    num = 4 * mpz(2) ** th - (-1) ** th
    return mpq(q) / 42 * mpq(num, mpz(3) ** th)


@dataclass(frozen=True)
class ThetaWindow:
    lo: mpq
    hi: mpq
    center: mpq

    def contains(self, theta) -> bool:
        return self.lo <= theta <= self.hi

    def as_ints(self) -> tuple:
        return math.ceil(self.lo), math.floor(self.hi)


def predict_theta(j: int, m, lag: int, slack=mpq(1, 4)) -> ThetaWindow:
    """``lag + (1 ± slack) / (6 |m|)``."""
    m = mpq(m)
    if m == 0:
        raise DegenerateVelocityError(f"stationary velocity at height {j} vanishes")
    base = 1 / (6 * abs(m))
    slack = mpq(slack)
    return ThetaWindow(lag + base * (1 - slack), lag + base * (1 + slack), lag + base)


def sign_pattern(j: int, mode: str = "right-only") -> int:
    if j < 1:
        raise ValueError("height must be at least 1")
    if mode == "right-only":
        return 1 if j % 4 in (0, 1) else -1
    if mode == "true-rule":
        return 1
    raise ValueError(f"unknown flip mode {mode!r}")


# --------------------------------------------------------------------------
# flip scheduling


def block_of(members) -> tuple | None:
    """``(height, index)`` if ``members`` is the aligned block ``[k 2^h, (k+1) 2^h)``."""
    m = sorted(members)
    size = len(m)
    if size & (size - 1) or m != list(range(m[0], m[0] + size)) or m[0] % size:
        return None
    return size.bit_length() - 1, m[0] // size


def flips_for(height: int, index: int, n: int) -> bool:
    """Left children of even height > 1 flip, as do right children of odd height > 2."""
    if 1 << height >= n:
        return False
    left = index % 2 == 0
    return (left and height % 2 == 0 and height > 1) or (not left and height % 2 == 1 and height > 2)


class FlipScheduler:
    """Observer that emits a flip ``lag`` ticks after each qualifying merge."""

    def __init__(self, params: LBParams):
        self.params = params
        self.known = None
        self.scheduled = []
        self.anomalies = []

    def __call__(self, rec):
        flocks = set(rec.flocks)
        if self.known is None:
            self.known = flocks
            return ()
        fresh = flocks - self.known
        self.known = flocks
        out = []
        for f in sorted(fresh):
            blk = block_of(f)
            if blk is None:
                self.anomalies.append((rec.t, f))
                continue
            h, k = blk
            if flips_for(h, k, self.params.n):
                ev = PerturbationEvent.flip(rec.t + self.params.lag, f, self.params.dim)
                if self.params.dim == 2:
                    ev = PerturbationEvent(ev.t, f, (mpq(-1), mpq(1)))
                self.scheduled.append(ev)
                out.append(ev)
        return out


# --------------------------------------------------------------------------
# integrity


@dataclass
class IntegrityReport:
    checked_ticks: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def first(self):
        return self.violations[0] if self.violations else None


def _exact_gap(state, i, k) -> tuple:
    """Signed first-coordinate gap ``x_k - x_i`` as ``(numerator, denominator)``."""
    if hasattr(state, "D"):
        return state.X[k, 0] - state.X[i, 0], state.D
    return state.X[k, 0] - state.X[i, 0], 1


def integrity_check(trace: Trace, low=INTEGRITY_LOW, high=mpq(1)) -> IntegrityReport:
    """Adjacent intra-flock distances in ``[low, high]``, order preserved, flocks are paths.

    Checked at every recorded tick with a retained state.  In fast-forwarded
    runs, skipped stretches are covered by the jump certificate (``low`` is
    then among the watch levels).
    """
    violations = []
    checked = 0
    for rec in trace.records:
        g = rec.network
        for f in rec.flocks:
            if not g.is_simple_path(f):
                violations.append((rec.t, "path", f))
        if rec.state is None:
            continue
        checked += 1
        st = rec.state
        exact = hasattr(st, "D")
        n = g.n
        for i in range(n - 1):
            num, den = _exact_gap(st, i, i + 1)
            if num <= 0:
                violations.append((rec.t, "order", (i, i + 1)))
        for f in rec.flocks:
            for i, k in zip(f, f[1:]):
                if exact:
                    ok_hi = st.within(i, k, mpq(high))
                    ok_lo = not st.within(i, k, mpq(low)) or _on_level(st, i, k, mpq(low))
                else:
                    d = float(np.linalg.norm(np.asarray(st.X[i] - st.X[k], dtype=float)))
                    ok_hi, ok_lo = d <= float(high), d >= float(low)
                if not (ok_hi and ok_lo):
                    violations.append((rec.t, "distance", (i, k)))
    return IntegrityReport(checked, violations)


def _on_level(st, i, k, level: mpq) -> bool:
    diff = st.X[i] - st.X[k]
    s = sum(z * z for z in diff)
    return s * level.denominator ** 2 == level.numerator ** 2 * st.D * st.D


# --------------------------------------------------------------------------
# end-to-end driver


@dataclass
class MergeRecord:
    height: int
    tick: int
    members: tuple
    m: object                    # measured stationary velocity (first coordinate)
    predicted: object = None
    window: ThetaWindow | None = None
    theta: int | None = None     # lifetime of the children ending at this merge

    @property
    def exact_match(self) -> bool | None:
        return None if self.predicted is None else self.m == self.predicted


@dataclass
class LBRun:
    params: LBParams
    trace: Trace
    merges: list
    flips: list
    integrity: IntegrityReport
    noise: object
    refused: str | None = None
    extra: dict = dc_field(default_factory=dict)

    def merge_at(self, height: int) -> MergeRecord:
        for m in self.merges:
            if m.height == height:
                return m
        raise KeyError(height)

    def report(self) -> list:
        rows = []
        for m in self.merges:
            row = {"height": m.height, "tick": m.tick, "theta": m.theta,
                   "m_measured": _fmt(m.m), "m_predicted": _fmt(m.predicted),
                   "exact_match": m.exact_match}
            if m.window is not None:
                lo, hi = m.window.as_ints()
                row["window"] = [int(lo), int(hi)]
                row["in_window"] = m.window.contains(m.theta) if m.theta is not None else None
            rows.append(row)
        return rows


def _fmt(x):
    if x is None:
        return None
    if isinstance(x, mpq) and max(x.numerator.bit_length(), x.denominator.bit_length()) > 256:
        approx = mpmath.mpf(int(x.numerator)) / int(x.denominator)
        return f"~{mpmath.nstr(approx, 8)} ({x.denominator.bit_length()}-bit denominator)"
    return str(x)


def flock_velocity(state, members) -> object:
    """Stationary velocity ``(1/(m-1)) (v_1/2 + v_2 + ... + v_{m-1} + v_m/2)`` of a lazy path flock."""
    m = len(members)
    if hasattr(state, "D"):
        tot = (state.V[members[0], 0] + state.V[members[-1], 0])
        tot += 2 * sum((state.V[i, 0] for i in members[1:-1]), mpz(0))
        return mpq(tot, 2 * (m - 1) * state.D)
    w = np.ones(m)
    w[0] = w[-1] = 0.5
    return float(w @ np.asarray(state.V[list(members), 0], dtype=float)) / (m - 1)


def simulate_lower_bound(p: LBParams, fld: Field = EXACT, budget: int = 10 ** 7,
                         max_height: int | None = None, slack=mpq(1, 4),
                         fast_forward: bool = True, keep_states: str = "all") -> LBRun:
    """Run the instance until the root flock forms (or ``max_height`` is reached).

    Before each height the predicted lifetime window is compared against
    the step budget; heights that cannot fit are refused.
    """
    top = p.height if max_height is None else min(max_height, p.height)
    cfg = initial_conditions(p)
    sched = FlipScheduler(p)
    merges = []
    refused = None

    h1 = predict_height1(p.q)
    known_m = {1: h1.m1}

    def stop(rec):
        sizes = [len(f) for f in rec.flocks]
        return max(sizes) >= 2 ** top

    def watch(rec):
        nonlocal refused
        for f in rec.flocks:
            blk = block_of(f)
            if blk is None or blk[0] < 2 or any(m.members == f for m in merges):
                continue
            h = blk[0]
            if rec.state is None:
                continue
            merges.append(MergeRecord(h, rec.t, f, flock_velocity(rec.state, f)))
        return ()

    horizon = budget
    trace = run(cfg, horizon, policy=LAZY_WALK, rule=HysteresisRule(), fld=fld,
                observers=[sched, watch], fast_forward=fast_forward,
                watch_levels=[INTEGRITY_LOW], keep_states=keep_states, stop_when=stop,
                step_budget=budget)

    # predictions, in height order
    ticks = {1: 0}
    for m in sorted(merges, key=lambda r: (r.height, r.tick)):
        ticks.setdefault(m.height, m.tick)
    for m in merges:
        if m.tick != ticks[m.height]:
            continue
        prev = ticks.get(m.height - 1)
        m.theta = m.tick - prev if prev is not None else None
        if m.height == 2:
            m.predicted = predict_m2(p.q, m.theta)
            m.window = ThetaWindow(mpq(h1.theta1), mpq(h1.theta1), mpq(h1.theta1))
        elif m.height == 3:
            m.predicted = predict_m3(p.q, m.theta)
            m.window = predict_theta(2, predict_m2(p.q, h1.theta1), p.lag, slack)
    if trace.status != "stopped":
        refused = f"step budget {budget} exhausted before height {top}"
    elif top > 3 and fld.exact:
        refused = "heights above 3 are only predicted analytically"

    switches = detect_switches(trace).ticks
    sizes = [len(ev.members) for ev in trace.events] or [1]
    noise = validate_noise(trace.events, NoiseBudget(None, 4 * max(sizes), p.lag), switches)
    return LBRun(p, trace, merges, list(trace.events), integrity_check(trace), noise, refused,
                 {"anomalies": sched.anomalies})


def predict_chain(p: LBParams, slack=mpq(1, 4), theta2=None) -> list:
    """Analytic predictions for heights 1 to 3.

    ``theta2`` defaults to the window centre when no measured value is given.
    """
    h1 = predict_height1(p.q)
    m2 = predict_m2(p.q, h1.theta1)
    w2 = predict_theta(2, m2, p.lag, slack)
    th2 = int(theta2) if theta2 is not None else int(w2.center)
    m3 = predict_m3(p.q, th2)
    w3 = predict_theta(3, m3, p.lag, slack)
    return [
        {"height": 1, "m": h1.m1, "theta": h1.theta1, "sign": _sign(h1.m1)},
        {"height": 2, "m": m2, "window": w2, "theta": th2, "sign": _sign(m2)},
        {"height": 3, "m": m3, "window": w3, "sign": _sign(m3)},
    ]


def _sign(x) -> int:
    return (x > 0) - (x < 0)


def check_budget(window: ThetaWindow, budget: int, height: int):
    if window.lo > budget:
        raise BudgetExceeded(f"height {height} needs at least {math.ceil(window.lo)} ticks, budget is {budget}")
