"""Config files (YAML or JSON, rationals as "p/q" strings) and JSON-lines traces.

Bird indices in files are 1-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import yaml
from gmpy2 import mpq

from .dynamics import (
    POLICIES,
    Configuration,
    HysteresisRule,
    Network,
    PerturbationEvent,
    Trace,
    TickRecord,
    custom_policy,
)
from .numerics import EXACT, Field, RationalParseError, format_scalar, parse_rational


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


def _line_of(text: str, needle: str):
    for k, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return k
    return None


@dataclass
class SimConfig:
    initial: Configuration
    field: Field
    policy: object
    rule: HysteresisRule
    horizon: int
    events: list
    budget: int | None = None
    raw: dict = dc_field(default_factory=dict)


def load_mapping(path) -> tuple:
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(exc).splitlines()[0], mark.line + 1 if mark else None, path) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, path)
    return data, text


def _rational(value, text, path):
    try:
        return parse_rational(str(value))
    except RationalParseError as exc:
        raise ConfigError(str(exc), _line_of(text, str(value)), path) from exc


def _rows(value, key, text, path):
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list of rows", _line_of(text, key), path)
    rows = []
    for row in value:
        row = row if isinstance(row, list) else [row]
        rows.append([_rational(z, text, path) for z in row])
    return rows


def parse_config(data: dict, text: str = "", path=None, mode: str | None = None) -> SimConfig:
    for key in ("x0", "v1"):
        if key not in data:
            raise ConfigError(f"missing key {key!r}", None, path)
    x0 = _rows(data["x0"], "x0", text, path)
    v1 = _rows(data["v1"], "v1", text, path)
    n = data.get("n", len(x0))
    d = data.get("d", len(x0[0]) if x0 else 1)
    if len(x0) != n or len(v1) != n or any(len(r) != d for r in x0 + v1):
        raise ConfigError(f"x0/v1 must be {n} rows of {d} entries", _line_of(text, "x0"), path)
    mode = mode or data.get("mode", "exact")
    if mode == "exact":
        fld = EXACT
    elif mode == "approx":
        fld = Field.approx(int(data.get("precision", 64)), float(data.get("tolerance", 0.0)))
    else:
        raise ConfigError(f"unknown mode {mode!r}", _line_of(text, "mode"), path)
    pol = data.get("policy", "vicsek")
    if isinstance(pol, dict):
        table = {int(k): _rational(v, text, path) for k, v in pol.get("table", {}).items()}
        policy = custom_policy(table, pol.get("name", "custom"))
    elif pol in POLICIES:
        policy = POLICIES[pol]
    else:
        raise ConfigError(f"unknown policy {pol!r}", _line_of(text, "policy"), path)
    eps = data.get("epsilon_h", "1/1099511627776")
    if eps in (None, "off", False, "none"):
        rule = HysteresisRule.disabled()
    else:
        rule = HysteresisRule(_rational(eps, text, path))
    events = []
    for ev in data.get("events", []) or []:
        try:
            members = [int(m) - 1 for m in ev["members"]]
            alpha = [_rational(a, text, path) for a in ev.get("alpha", ["-1"] * d)]
            events.append(PerturbationEvent(int(ev["time"]), members, alpha))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed event {ev!r}", _line_of(text, "events"), path) from exc
    cfg = Configuration.launch(x0, v1, EXACT if fld.exact else fld)
    return SimConfig(cfg, fld, policy, rule, int(data.get("horizon", 0)), sorted(events),
                     data.get("budget"), data)


def load_config(path, mode: str | None = None) -> SimConfig:
    data, text = load_mapping(path)
    return parse_config(data, text, path, mode)


def random_config(n: int, d: int = 2, seed: int = 0, box: int = 4, horizon: int = 100,
                  policy: str = "vicsek") -> dict:
    """Random rational starting configuration as a config mapping."""
    rng = np.random.default_rng(seed)
    den = 16
    x0 = [[f"{int(rng.integers(0, box * den))}/{den}" for _ in range(d)] for _ in range(n)]
    v1 = [[f"{int(rng.integers(-den, den + 1))}/{den * 8}" for _ in range(d)] for _ in range(n)]
    return {"n": n, "d": d, "mode": "exact", "x0": x0, "v1": v1, "policy": policy,
            "horizon": horizon, "events": []}


# --------------------------------------------------------------------------
# traces


def _matrix(a):
    return [[format_scalar(z) for z in row] for row in np.asarray(a)]


def record_to_dict(rec: TickRecord, sparse: bool = False) -> dict:
    out = {"t": rec.t,
           "edges": [[i + 1, j + 1] for i, j in rec.network.edge_list()],
           "flocks": [[i + 1 for i in f] for f in rec.flocks],
           "switch": rec.switch}
    if rec.skipped:
        out["skipped"] = rec.skipped
    if not sparse and rec.has_state:
        out["x"] = _matrix(rec.x)
        out["v"] = _matrix(rec.v)
    return out


def write_trace(trace: Trace, path, sparse: bool = False, meta: dict | None = None) -> None:
    path = Path(path)
    n = trace.records[0].network.n if trace.records else 0
    with path.open("w") as fh:
        header = {"type": "header", "n": n, "policy": trace.policy, "mode": trace.mode,
                  "status": trace.status}
        header.update(meta or {})
        fh.write(json.dumps(header) + "\n")
        for rec in trace.records:
            fh.write(json.dumps({"type": "tick", **record_to_dict(rec, sparse)}) + "\n")
        for ev in trace.events:
            fh.write(json.dumps({"type": "event", "t": ev.t, "members": [m + 1 for m in ev.members],
                                 "alpha": [format_scalar(a) for a in ev.alpha],
                                 "delta_norm": ev.delta_norm}) + "\n")


@dataclass
class StoredRecord:
    t: int
    network: Network
    switch: bool
    skipped: int
    x: object = None
    v: object = None
    raw: dict = dc_field(default_factory=dict)

    @property
    def flocks(self):
        return self.network.flocks

    @property
    def state(self):
        return None


@dataclass
class StoredTrace:
    header: dict
    records: list
    events: list

    @property
    def policy(self):
        return self.header.get("policy", "vicsek")

    def as_trace(self) -> Trace:
        recs = [TickRecord(r.t, r.network, r.switch, r.skipped) for r in self.records]
        return Trace(recs, self.events, self.policy, self.header.get("mode", "exact"),
                     self.header.get("status", "complete"))


def read_trace(path) -> StoredTrace:
    header, records, events = {}, [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad trace line: {exc.msg}", lineno, path) from exc
            kind = obj.pop("type", "tick")
            if kind == "header":
                header = obj
            elif kind == "tick":
                n = header.get("n") or max((m for f in obj["flocks"] for m in f), default=0)
                net = Network(n, frozenset((i - 1, j - 1) for i, j in obj["edges"]))
                x = [[parse_rational(z) if "/" in z or z.lstrip("-").isdigit() else float(z) for z in row]
                     for row in obj["x"]] if "x" in obj else None
                v = [[parse_rational(z) if "/" in z or z.lstrip("-").isdigit() else float(z) for z in row]
                     for row in obj["v"]] if "v" in obj else None
                records.append(StoredRecord(obj["t"], net, obj["switch"], obj.get("skipped", 0), x, v, obj))
            elif kind == "event":
                events.append(obj)
    return StoredTrace(header, records, events)


def stored_to_dict(rec: StoredRecord) -> dict:
    return dict(rec.raw)
