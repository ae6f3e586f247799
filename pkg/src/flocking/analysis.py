"""Diagnostics over simulation traces: switches, fusion trees, influence, escape angles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Iterator, Sequence

import numpy as np

from .dynamics import POLICIES, ConfidencePolicy, HysteresisRule, Network, Trace, transition
from .numerics import EXACT, sqrt_diff_compare
from .spectral import mass_center, stationary_distribution


# --------------------------------------------------------------------------
# switches


@dataclass(frozen=True)
class SwitchEntry:
    t: int
    gained: frozenset
    lost: frozenset


@dataclass
class SwitchLog:
    entries: list

    @property
    def ticks(self) -> list:
        return [e.t for e in self.entries]

    @property
    def count(self) -> int:
        return len(self.entries)

    def last_loss(self) -> int | None:
        """Last tick at which an edge disappeared (the empirical fragmentation breakpoint)."""
        lost = [e.t for e in self.entries if e.lost]
        return lost[-1] if lost else None


def detect_switches(trace: Trace) -> SwitchLog:
    entries = []
    recs = trace.records
    for prev, cur in zip(recs, recs[1:]):
        if cur.network != prev.network:
            gained, lost = cur.network.diff(prev.network)
            entries.append(SwitchEntry(cur.t, frozenset(gained), frozenset(lost)))
    return SwitchLog(entries)


def network_period(trace: Trace, start: int = 1) -> int | None:
    """Smallest p with ``G_t = G_{t+p}`` for all recorded consecutive ticks from ``start`` on."""
    nets = [r.network for r in trace.records if r.t >= start]
    for p in range(1, len(nets)):
        if all(nets[k] == nets[k + p] for k in range(len(nets) - p)):
            return p
    return None


def _segments(trace: Trace) -> Iterator[tuple]:
    """Yield ``(t, count, network)``: the network holds for ``count`` consecutive ticks from ``t``."""
    recs = trace.records
    for k, r in enumerate(recs):
        nxt = recs[k + 1].t if k + 1 < len(recs) else r.t + 1
        yield r.t, nxt - r.t, r.network


# --------------------------------------------------------------------------
# fusion trees


@dataclass
class FusionNode:
    ident: int
    members: tuple
    tick: int
    height: int
    children: list = dc_field(default_factory=list)
    parent: int | None = None
    kind: str = "leaf"          # leaf | merge | split


@dataclass
class FusionTree:
    nodes: list
    splits: list                # (tick, source node id, [child node ids])
    breakpoint: int | None = None

    @property
    def is_tree(self) -> bool:
        return not self.splits

    @property
    def roots(self) -> list:
        return [nd for nd in self.nodes if nd.parent is None]

    @property
    def leaves(self) -> list:
        return [nd for nd in self.nodes if nd.kind == "leaf"]

    def formation_ticks(self) -> dict:
        """Height -> earliest formation tick among merge nodes of that height."""
        out = {}
        for nd in self.nodes:
            if nd.kind == "merge":
                out[nd.height] = min(out.get(nd.height, nd.tick), nd.tick)
        return dict(sorted(out.items()))

    def lifetimes(self) -> dict:
        """``theta_j = t_{j+1} - t_j`` by height, from the formation ticks."""
        ticks = self.formation_ticks()
        leaves = [nd for nd in self.nodes if nd.kind == "leaf" and nd.height > 0]
        if leaves:
            h = max(nd.height for nd in leaves)
            ticks.setdefault(h, min(nd.tick for nd in leaves))
        hs = sorted(ticks)
        return {h: ticks[h + 1] - ticks[h] for h in hs if h + 1 in ticks}

    def to_text(self) -> str:
        lines = []

        def walk(nd, depth):
            label = " ".join(str(m + 1) for m in nd.members)
            lines.append(f"{'  ' * depth}[{label}] t={nd.tick} h={nd.height} {nd.kind}")
            for c in nd.children:
                walk(self.nodes[c], depth + 1)

        for r in self.roots:
            walk(r, 0)
        for t, src, parts in self.splits:
            lines.append(f"split at t={t}: node {src} -> {parts}")
        return "\n".join(lines)

    def to_dot(self) -> str:
        out = ["digraph fusion {"]
        for nd in self.nodes:
            label = ",".join(str(m + 1) for m in nd.members)
            out.append(f'  n{nd.ident} [label="{label} @{nd.tick}"];')
        for nd in self.nodes:
            if nd.parent is not None:
                out.append(f'  n{nd.ident} -> n{nd.parent} [label="{self.nodes[nd.parent].tick}"];')
        for t, src, parts in self.splits:
            for p in parts:
                out.append(f'  n{src} -> n{p} [label="split {t}", style=dashed];')
        out.append("}")
        return "\n".join(out)


def fusion_tree(trace: Trace) -> FusionTree:
    """Flock genealogy.  Initial singletons are height-0 leaves, larger initial flocks height 1.

    Splits turn the result into an event DAG: each split is recorded and the
    split pieces become fresh nodes.
    """
    recs = trace.records
    if not recs:
        return FusionTree([], [])
    nodes, splits = [], []
    live = {}

    def add(members, tick, height, kind, children=()):
        nd = FusionNode(len(nodes), tuple(members), tick, height, list(children), None, kind)
        nodes.append(nd)
        for c in children:
            nodes[c].parent = nd.ident
        live[nd.members] = nd.ident
        return nd.ident

    for f in recs[0].flocks:
        add(f, recs[0].t, 0 if len(f) == 1 else 1, "leaf")
    for prev, cur in zip(recs, recs[1:]):
        if cur.flocks == prev.flocks:
            continue
        old = {m: f for f in prev.flocks for m in f}
        # splits first: an old flock whose birds land in several new flocks
        for f in prev.flocks:
            parts = {tuple(g) for g in cur.flocks if set(g) & set(f)}
            pieces = [tuple(sorted(set(g) & set(f))) for g in parts]
            if len(pieces) > 1:
                src = live.pop(f)
                ids = []
                for piece in sorted(pieces):
                    ids.append(add(piece, cur.t, 0 if len(piece) == 1 else nodes[src].height, "split"))
                    nodes[ids[-1]].parent = None
                splits.append((cur.t, src, ids))
        for g in cur.flocks:
            if g in live:
                continue
            sources = sorted({tuple(sorted(set(old[m]) & set(g))) for m in g})
            kids = [live.pop(s) for s in sources]
            add(g, cur.t, 1 + max(nodes[k].height for k in kids), "merge", kids)
    return FusionTree(nodes, splits, detect_switches(trace).last_loss() if splits else None)


# --------------------------------------------------------------------------
# influence footprints and stabilizers


def _footprint(g: Network) -> np.ndarray:
    a = g.adjacency()
    np.fill_diagonal(a, True)
    return a


def _bool_mul(a, b):
    return a @ b


@dataclass
class InfluenceState:
    s: int
    t: int
    footprint: np.ndarray
    history: list               # (tick, number of entries newly gained)
    min_entries: list = dc_field(default_factory=list)   # (tick, min positive entry) when tracked

    @property
    def gains(self) -> int:
        return sum(k for _, k in self.history)


def _policy_of(trace: Trace, policy):
    if isinstance(policy, ConfidencePolicy):
        return policy
    return POLICIES[policy or trace.policy]


def influence(trace: Trace, s: int, track_entries: bool = False, policy=None) -> InfluenceState:
    """Footprint of ``P(t, s) = P(t-1) ... P(s)`` up to the end of the trace.

    With ``track_entries`` the exact product is formed as well and its
    smallest positive entry is recorded after every tick.
    """
    recs = trace.records
    n = recs[0].network.n
    if not recs[0].t <= s <= recs[-1].t:
        raise ValueError(f"tick {s} is outside the trace")
    fp = np.eye(n, dtype=bool)
    prod = EXACT.eye(n) if track_entries else None
    pol = _policy_of(trace, policy) if track_entries else None
    history, mins = [], []
    t = s
    for start, count, g in _segments(trace):
        end = start + count
        if end <= s or start >= recs[-1].t:
            continue
        lo = max(start, s)
        steps = min(end, recs[-1].t) - lo
        F = _footprint(g)
        P = transition(g, pol).P if track_entries else None
        for k in range(steps):
            t = lo + k + 1
            new = _bool_mul(F, fp)
            gained = int(new.sum() - fp.sum())
            if track_entries:
                prod = P @ prod
                mins.append((t, min(z for z in prod.flat if z != 0)))
            elif gained == 0:
                # a fixed footprint under a fixed network stays fixed
                t = lo + steps
                break
            fp = new
            if gained:
                history.append((t, gained))
    return InfluenceState(s, t, fp, history, mins)


@dataclass
class StabilizerChain:
    bird: int
    stages: list                 # (V_k frozenset, T_k)
    fixpoint: bool

    @property
    def sets(self) -> list:
        return [v for v, _ in self.stages]


def _tick_networks(trace: Trace, s: int):
    end = trace.records[-1].t
    for start, count, g in _segments(trace):
        lo, hi = max(start, s), min(start + count, end)
        if hi > lo:
            yield lo, hi - lo, g


def _default_quiet(trace: Trace) -> int:
    ticks = detect_switches(trace).ticks
    gaps = [b - a for a, b in zip(ticks, ticks[1:])]
    n = trace.records[0].network.n
    return 10 * n * max(gaps[-1] if gaps else 1, 1)


def stabilizers(trace: Trace, s: int, bird: int, quiet: int | None = None) -> StabilizerChain:
    """Nested stabilizers ``V_1 ⊇ V_2 ⊇ ...`` of ``bird`` from reference tick ``s``.

    Column ``bird`` of the footprint of ``P(t, s_k)`` (restricted to
    ``V_{k-1}``) is tracked until it has not changed for ``quiet`` ticks;
    its support is ``V_k`` and ``T_k`` the tick it last changed.  The next
    stage restarts at ``T_k + 1``.  Stops at a fixpoint or at the trace end.
    """
    n = trace.records[0].network.n
    end = trace.records[-1].t
    Q = quiet if quiet is not None else _default_quiet(trace)
    allowed = np.ones(n, dtype=bool)
    stages = []
    start = s
    while start <= end:
        col = np.zeros(n, dtype=bool)
        col[bird] = True
        last_change = start
        settled = False
        for lo, count, g in _tick_networks(trace, start):
            F = _footprint(g) & allowed[:, None] & allowed[None, :]
            for k in range(count):
                new = F @ col
                if not (new != col).any():
                    # constant for the rest of this segment
                    break
                col, last_change = new, lo + k + 1
            if lo + count - last_change >= Q:
                settled = True
                break
        if not settled:
            return StabilizerChain(bird, stages, False)
        V = frozenset(int(i) for i in np.flatnonzero(col))
        if stages and V == stages[-1][0]:
            stages.append((V, last_change))
            return StabilizerChain(bird, stages, True)
        stages.append((V, last_change))
        allowed = np.zeros(n, dtype=bool)
        allowed[list(V)] = True
        start = last_change + 1
    return StabilizerChain(bird, stages, False)


# --------------------------------------------------------------------------
# soundness


@dataclass
class SoundnessReport:
    checked_ticks: int
    missing: list                # (tick, pair) within unit distance but not adjacent
    overlong: list               # (tick, pair) adjacent beyond 1 + sqrt(eps)

    @property
    def passed(self) -> bool:
        return not self.missing and not self.overlong


def check_soundness(trace: Trace, rule: HysteresisRule = HysteresisRule()) -> SoundnessReport:
    """Close pairs are adjacent, and no edge is longer than ``1 + sqrt(eps)``.

    Exact traces are checked exactly; ticks without a stored state are skipped.
    """
    missing, overlong = [], []
    checked = 0
    for rec in trace.records:
        if not rec.has_state:
            continue
        checked += 1
        x = rec.x
        exact = x.dtype == object
        n = rec.network.n
        for i in range(n):
            for j in range(i + 1, n):
                d2 = sum((x[i] - x[j]) ** 2)
                edge = (i, j) in rec.network.edges
                if d2 <= 1 and not edge:
                    missing.append((rec.t, (i, j)))
                elif d2 > 1 and edge:
                    if not rule.enabled:
                        bad = True
                    elif exact:
                        bad = not sqrt_diff_compare(d2, 1, rule.eps, strict=False)
                    else:
                        bad = math.sqrt(float(d2)) - 1 > math.sqrt(float(rule.eps))
                    if bad:
                        overlong.append((rec.t, (i, j)))
    return SoundnessReport(checked, missing, overlong)


# --------------------------------------------------------------------------
# velocities and escape observables


def stationary_velocities(trace: Trace, tick: int, policy=None) -> list:
    """``(members, m)`` per flock at ``tick``, with ``m = (pi^T ⊗ I_d) v`` over the flock."""
    rec = trace.record_at(tick)
    pol = _policy_of(trace, policy)
    c = pol.coefficients(rec.network)
    v = rec.v
    out = []
    for f in rec.flocks:
        sub = rec.network.restrict(f)
        pi = stationary_distribution(c[list(f)], sub)
        out.append((f, mass_center(v[list(f)], pi)))
    return out


@dataclass(frozen=True)
class EscapeObservables:
    omega: float
    offset: float
    w: np.ndarray


def escape_observables(trace: Trace, tick: int, bird: int) -> EscapeObservables:
    """Angle between lifted ``(x_i(t), t)`` and ``(v_i(t), 1)``, and ``‖v~ - w~‖`` with ``w~ = x~/t``."""
    if tick < 1:
        raise ValueError("escape observables need t >= 1")
    rec = trace.record_at(tick)
    x = np.append(np.asarray(rec.x[bird], dtype=float), float(tick))
    v = np.append(np.asarray(rec.v[bird], dtype=float), 1.0)
    nx, nv = np.linalg.norm(x), np.linalg.norm(v)
    if nx == 0 or nv == 0:
        raise ValueError("angle undefined for a zero vector")
    dot = float(x @ v)
    rej = np.linalg.norm(v - dot / (nx * nx) * x)
    omega = math.atan2(rej * nx, dot)
    w = x / tick
    return EscapeObservables(omega, float(np.linalg.norm(v - w)), w)
