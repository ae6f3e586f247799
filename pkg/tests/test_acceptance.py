"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion k: PASS/FAIL - detail`` line, collected
again in the terminal summary.
"""
import time

import numpy as np
import pytest
from gmpy2 import mpq

from conftest import report_line
from helpers import oscillator, random_stochastic
from flocking.analysis import detect_switches, influence, network_period, stationary_velocities
from flocking.dynamics import (
    LAZY_WALK,
    VICSEK,
    HysteresisRule,
    Network,
    NoiseBudget,
    run,
    transition,
    validate_noise,
)
from flocking.fileio import parse_config, random_config
from flocking.lowerbound import (
    FlipScheduler,
    LBParams,
    initial_conditions,
    integrity_check,
    predict_height1,
    predict_m2,
    predict_m3,
    predict_theta,
    simulate_lower_bound,
)
from flocking.numerics import EXACT, mat_power, sqrt_diff_compare, to_float
from flocking.residue import ExponentBudgetError, SparsePoly, canonical_degrees, canonical_tree, eval_tree, oplus
from flocking.spectral import (
    backward_product,
    check_contraction,
    forward_product,
    gamma,
    limit_configuration,
    mass_center,
    path_spectrum,
    spectrum,
    stationary_distribution,
    tau1,
    tau2,
    tau2_sq,
)

Q = mpq
q = Q(1, 32)


class Checks:
    """Collects named sub-checks so one line can report all of them."""

    def __init__(self):
        self.items = []

    def __call__(self, name, ok):
        self.items.append((name, bool(ok)))
        return ok

    @property
    def passed(self):
        return all(ok for _, ok in self.items)

    def failed(self):
        return [name for name, ok in self.items if not ok]


def finish(number, checks, detail):
    bad = checks.failed()
    report_line(number, checks.passed, detail + (f"; failed: {', '.join(bad)}" if bad else ""))
    assert checks.passed, bad


@pytest.fixture(scope="module")
def lb3():
    start = time.perf_counter()
    run_ = simulate_lower_bound(LBParams(8))
    run_.extra["seconds"] = time.perf_counter() - start
    return run_


def test_criterion_1_oscillator():
    ck = Checks()
    start = time.perf_counter()
    tr = run(oscillator(), 200, policy=LAZY_WALK, rule=HysteresisRule.disabled())
    elapsed = time.perf_counter() - start
    v1 = oscillator().v
    for r in tr.records[1:]:
        t = r.t
        x = r.x[:, 0]
        r3 = Q(-1, 3) ** (t - 1)
        ck(f"v({t})", (r.v == v1 / Q(-3) ** (t - 1)).all())
        ck(f"middle gap {t}", x[2] - x[1] == 1 + r3 / 16)
        ck(f"outer gaps {t}", x[1] - x[0] == (5 - r3) / 16 and x[3] - x[2] == (5 - r3) / 16)
        ck(f"span {t}", x[2] - x[0] == Q(21, 16) and x[3] - x[1] == Q(21, 16))
    ck("period 2", network_period(tr) == 2)
    ck("runtime < 1 s", elapsed < 1)
    finish(1, ck, f"200 ticks bit-exact, period {network_period(tr)}, {elapsed:.2f} s")


def test_criterion_2_heights_one_two():
    ck = Checks()
    start = time.perf_counter()
    lb = simulate_lower_bound(LBParams(8), max_height=2)
    # a single-stepped copy checks integrity at every tick through the first flip
    plain = run(initial_conditions(LBParams(8)), 30, policy=LAZY_WALK, observers=[FlipScheduler(LBParams(8))])
    elapsed = time.perf_counter() - start
    m = lb.merge_at(2)
    theta1 = (int(1 / q) + 1) // 3
    x = plain.record_at(11).x[:, 0]
    ck("t2 = 11", m.tick == 11 == theta1 == predict_height1(q).theta1)
    ck("merge gap", x[2] - x[1] == 1 - q / 3 and x[6] - x[5] == 1 - q / 3)
    ck("m2 exact", m.m == Q(-1, 11337408) == q / 2 / Q(-3) ** 11)
    ck("integrity (jumped run)", lb.integrity.passed)
    ck("integrity (every tick)", integrity_check(plain).passed)
    ck("runtime < 10 s", elapsed < 10)
    finish(2, ck, f"t2={m.tick}, m2={m.m}, {elapsed:.2f} s")


def _p2_projectors():
    P2 = transition(Network.path(4), LAZY_WALK).P
    lams = [Q(1), Q(2, 3), Q(0), Q(-1, 3)]
    I = EXACT.eye(4)
    out = []
    for k, lk in enumerate(lams):
        M = I
        for l, ll in enumerate(lams):
            if l != k:
                M = M @ (P2 - ll * I) / (lk - ll)
        out.append(M)
    return lams, out


def _oracle_state(rec, lams, proj, n_steps):
    """Positions and velocities ``n_steps`` ticks after ``rec`` for two frozen quads."""
    pw = [l ** n_steps for l in lams]
    geo = [Q(n_steps) if l == 1 else l * (1 - p) / (1 - l) for l, p in zip(lams, pw)]
    xs, vs = [], []
    for blk in (slice(0, 4), slice(4, 8)):
        v, x = rec.v[blk, 0], rec.x[blk, 0]
        comps = [E @ v for E in proj]
        vs.extend(sum((p * c for p, c in zip(pw, comps)), EXACT.zeros(4)))
        xs.extend(x + sum((g * c for g, c in zip(geo, comps)), EXACT.zeros(4)))
    return xs, vs


def test_criterion_3_height_three(lb3):
    ck = Checks()
    m2 = lb3.merge_at(2)
    m3 = lb3.merge_at(3)
    t3, theta2 = m3.tick, m3.theta
    theta1 = m2.tick
    ck("within budget", lb3.trace.status == "stopped" and t3 <= 10 ** 7)
    ck("m3 exact", m3.m == predict_m3(q, theta2))

    # independent oracle: exact spectral projectors of P2 from the single-stepped state at t = 17
    early = run(initial_conditions(LBParams(8)), 17, policy=LAZY_WALK, observers=[FlipScheduler(LBParams(8))])
    rec = early.record_at(17)
    lams, proj = _p2_projectors()
    ck("projectors resolve I", (sum(proj[1:], proj[0]) == EXACT.eye(4)).all())
    x_before, _ = _oracle_state(rec, lams, proj, t3 - 1 - 17)
    x_at, v_at = _oracle_state(rec, lams, proj, t3 - 17)
    ck("oracle: apart at t3-1", x_before[4] - x_before[3] > 1)
    ck("oracle: joined at t3", x_at[4] - x_at[3] <= 1)
    m_oracle = (v_at[0] / 2 + sum(v_at[1:7]) + v_at[7] / 2) / 7
    ck("oracle m3", m_oracle == m3.m)
    ck("simulated state matches oracle", list(lb3.trace.record_at(t3).x[:, 0]) == x_at)

    ratio = theta2 / theta1
    ck("theta2/theta1 > 1e4", ratio > 10 ** 4)
    window = predict_theta(2, predict_m2(q, theta1), LBParams().lag)
    lo, hi = window.as_ints()
    ck("theta2 in window", window.contains(theta2))
    finish(3, ck, f"t3={t3}, theta2={theta2}, window=[{lo}, {hi}], theta2/theta1={float(ratio):.0f}, "
                  f"m3 exact={m3.m == predict_m3(q, theta2)}, {lb3.extra['seconds']:.1f} s")


def _random_connected(rng, n):
    edges = {(int(rng.integers(0, k)), k) for k in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        i, j = sorted(rng.choice(n, 2, replace=False))
        edges.add((int(i), int(j)))
    return Network(n, frozenset(edges))


def test_criterion_4_gamma_and_limit():
    ck = Checks()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(50):
        n = int(rng.integers(2, 9))
        tm = transition(_random_connected(rng, n), [VICSEK, LAZY_WALK][k % 2])
        pi = stationary_distribution(tm)
        res = gamma(tm.P, pi).residuals()
        ck(f"gamma identities {k}", all(all(z == 0 for z in r.flat) for r in res.values()))

        x0 = EXACT.array([[Q(int(a), 8)] for a in rng.integers(-16, 16, n)])
        v1 = EXACT.array([[Q(int(a), 64)] for a in rng.integers(-16, 16, n)])
        xr, drift = limit_configuration(x0, v1, tm.P, tm.c)
        # exact mass centre is linear in t
        x, v = x0.copy(), v1.copy()
        mc0, mv = mass_center(x0, pi), mass_center(v1, pi)
        for t in range(1, 31):
            x = x + v
            v = tm.P @ v
            ck(f"mass centre {k}", (mass_center(x, pi) == mc0 + t * mv).all())
        # float run of 400 ticks against the relative limit
        Pf, xf, vf, pif = to_float(tm.P), to_float(x0), to_float(v1), to_float(pi)
        for _ in range(400):
            xf = xf + vf
            vf = Pf @ vf
        rel = xf - np.outer(np.ones(n), pif @ xf)
        err = float(np.abs(rel - to_float(xr)).max())
        worst = max(worst, err)
        ck(f"limit {k}", err <= 1e-8)
    finish(4, ck, f"50 flocks, worst limit error {worst:.2e}")


def test_criterion_5_ergodicity():
    ck = Checks()
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(1000):
        A, B = random_stochastic(rng, 5), random_stochastic(rng, 5)
        ck("exact submultiplicativity", tau2_sq(A @ B) <= tau1(A) ** 2 * tau2_sq(B))
    for _ in range(1000):
        A, B = rng.random((5, 5)), rng.random((5, 5))
        A /= A.sum(1, keepdims=True)
        B /= B.sum(1, keepdims=True)
        gap = tau2(A @ B) - tau1(A) * tau2(B)
        worst = max(worst, gap)
        ck("float submultiplicativity", gap <= 1e-12)

    A = EXACT.array([["1/2", "1/2"], ["1/2", "1/2"]])
    B = EXACT.array([["1", "0"], ["1/2", "1/2"]])
    C = EXACT.array([["3/4", "1/4"], ["3/4", "1/4"]])
    # time order B, A, B, A: the backward product puts the latest factor on the left
    ck("backward B,A,B,A = C", (backward_product([B, A, B, A]) == C).all()
       and (A @ B @ A @ B == C).all())
    seq = [B if s % 2 == 0 else A for s in range(12)]
    for k in range(2, 13):
        ck(f"backward {k}", (backward_product(seq[:k]) == C).all())
        ck(f"forward {k}", (forward_product(seq[:k]) == (A if k % 2 == 0 else C)).all())

    a = Q(1, 5)
    b = (1 - a) / 2
    W = EXACT.array([[a, 0, b, b], [0, a, b, b], [b, b, a, 0], [b, b, 0, a]])
    hat_sq = lambda M: tau2_sq(M) / 2
    ck("K22 control", hat_sq(W @ W) > hat_sq(W) ** 2)
    finish(5, ck, f"2000 pairs, largest float tau2(AB) - tau1(A)tau2(B) = {worst:.1e}; K22: {hat_sq(W @ W)} > {hat_sq(W) ** 2}")


def test_criterion_6_spectral_values():
    ck = Checks()
    worst = 0.0
    for j in range(1, 6):
        ps = path_spectrum(j)
        P = transition(Network.path(2 ** j), LAZY_WALK).P
        for s in (1, 10, 100):
            err = float(np.abs(ps.power(s) - to_float(mat_power(P, s))).max())
            worst = max(worst, err)
            ck(f"path j={j} s={s}", err <= 1e-10)
    M = EXACT.array([["12/15", "3/15"], ["10/15", "5/15"]])
    lam = spectrum(M).eigenvalues
    ck("eigenvalues", np.allclose(lam, [1, 2 / 15], atol=1e-9))
    w = M @ EXACT.array(["1", "0"])
    stretch = float(np.sqrt(float(sum(w * w))))
    ck("stretch", abs(stretch - np.sqrt(244) / 15) <= 1e-9 and stretch > 1)
    rng = np.random.default_rng(66)
    for k in range(100):
        tm = transition(_random_connected(rng, int(rng.integers(2, 9))), [VICSEK, LAZY_WALK][k % 2])
        pi = to_float(stationary_distribution(tm))
        ck(f"contraction {k}", check_contraction(to_float(tm.P), pi, rng.normal(size=tm.P.shape[0]),
                                                 spectrum(tm.P).mu).holds)
    finish(6, ck, f"max reconstruction error {worst:.1e}, stretch {stretch:.4f}")


def test_criterion_7_monotone_structure():
    ck = Checks()
    n = 10
    total_gain = 0
    for seed in range(100):
        sc = parse_config(random_config(n, 2, seed=1000 + seed, horizon=200))
        tr = run(sc.initial, 200, policy=sc.policy)
        recs = tr.records
        # footprint of P(t, 0), evolved tick by tick
        fp = np.eye(n, dtype=bool)
        for r in recs[:-1]:
            a = r.network.adjacency()
            np.fill_diagonal(a, True)
            new = a @ fp
            ck("footprint never loses", (new >= fp).all())
            fp = new
        st = influence(tr, 0)
        ck("influence agrees", (st.footprint == fp).all())
        ck("gains <= n^2 - n", st.gains <= n * n - n)
        total_gain = max(total_gain, st.gains)
        for prev, cur in zip(recs[1:], recs[2:]):
            ck("sup norm", max(abs(z) for z in cur.v.flat) <= max(abs(z) for z in prev.v.flat))
        for prev, cur in zip(recs, recs[1:]):
            xf, pf, vf = cur.positions_float(), prev.positions_float(), np.asarray(cur.v, dtype=float)
            for i in range(n):
                for j in range(i + 1, n):
                    lhs = abs(np.linalg.norm(xf[i] - xf[j]) - np.linalg.norm(pf[i] - pf[j]))
                    rhs = np.linalg.norm(vf[i] - vf[j])
                    if lhs < rhs - 1e-9:
                        continue
                    # too close to call in floating point: decide exactly
                    ck("displacement", sqrt_diff_compare(sum((cur.x[i] - cur.x[j]) ** 2),
                                                         sum((prev.x[i] - prev.x[j]) ** 2),
                                                         sum((cur.v[i] - cur.v[j]) ** 2), strict=False))
    finish(7, ck, f"100 runs x 200 ticks, n=10, largest footprint gain {total_gain}")


def test_criterion_8_residue():
    ck = Checks()
    start = time.perf_counter()
    want = canonical_degrees(5)
    ck("degrees", want[:4] == [1, 3, 11, 2059] and want[4] == 2059 + (1 << 2059))
    for k in range(1, 6):
        p = eval_tree(canonical_tree(k))
        ck(f"k={k}", list(p.terms) == [want[k - 1]] and abs(p.terms[want[k - 1]]) == 2 ** (k - 1))
    x3 = SparsePoly.monomial(1, 3)
    ck("x^d + 0", oplus(x3, SparsePoly()) == SparsePoly({3: 1, 11: 1}))
    ck("twice", oplus(SparsePoly({3: 1, 11: 1}), SparsePoly()) == SparsePoly({3: 1, 11: 2, 19: 1}))
    try:
        eval_tree(canonical_tree(6))
        ck("k=6 fails", False)
    except ExponentBudgetError:
        ck("k=6 fails", True)
    elapsed = time.perf_counter() - start
    ck("runtime < 1 s", elapsed < 1)
    finish(8, ck, f"k=1..5 exact, k=6 budget error, {elapsed:.2f} s")


def test_criterion_9_noise(lb3):
    ck = Checks()
    switches = detect_switches(lb3.trace).ticks
    ck("flips present", len(lb3.flips) >= 1)
    for ev in lb3.flips:
        rep = validate_noise([ev], NoiseBudget(None, 4 * len(ev.members), LBParams().lag), switches)
        ck(f"flip t={ev.t}", rep.passed)
        last = max(s for s in switches if s <= ev.t)
        ck(f"window t={ev.t}", ev.t - last <= LBParams().lag)
    ck("run-level report", lb3.noise.passed)
    detail = ", ".join(f"t={e.t} |delta|={e.delta_norm:.4f}" for e in lb3.flips)
    finish(9, ck, f"{len(lb3.flips)} flip(s): {detail}")
