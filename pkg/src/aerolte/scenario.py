"""Scenario files: loading, validation with line-precise messages, normalisation and dumping.

A scenario is a YAML mapping with ``version: 1``.  Serving UAVs get ids
``1..uavs``, spares ``uavs+1..uavs+spares``; an optional ground gateway is
node ``0``.  UE waypoint and event times are seconds after bootstrap ends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Any

import yaml

from .backhaul import PLANNABLE_TECHS, EnergyModel
from .ran import OBJECTIVES
from .world import AntennaPattern, Obstacle, Position3D, WorldModel

SCHEMA_VERSION = 1
GATEWAY_ID = 0
COUPLINGS = ("hardware", "software")
EVENT_KINDS = ("uav_down", "uav_restored")


@dataclass(frozen=True)
class Issue:
    path: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.path or '<root>'}: {self.message}"


class ScenarioError(ValueError):
    """Every problem found in a scenario, each with its field path and line."""

    def __init__(self, issues: list[Issue]):
        self.issues = list(issues)
        super().__init__("invalid scenario:\n" + "\n".join(f"  {i}" for i in self.issues))

    def to_dict(self) -> dict:
        return {"error": "invalid_scenario",
                "issues": [{"path": i.path, "line": i.line, "message": i.message} for i in self.issues]}


# -- typed scenario --------------------------------------------------------------

@dataclass(frozen=True)
class UeSpec:
    ue_id: int
    position: Position3D
    demand_bps: float = 1e6
    waypoints: tuple[tuple[float, Position3D], ...] = ()  # (t_s, new position)
    traffic: tuple[tuple[float, bool], ...] = ()  # (t_s, active) toggles; traffic starts active


@dataclass(frozen=True)
class FleetSpec:
    uavs: int = 3
    spares: int = 0
    radios: int = 2
    msr_m: float = 30.0
    speed_mps: float = 10.0
    tx_power_dbm: float = 30.0
    antenna: AntennaPattern = field(default_factory=lambda: AntennaPattern(10.0, 90.0, -10.0))
    base: tuple[float, float] = (0.0, 0.0)
    energy: EnergyModel = field(default_factory=EnergyModel)
    outage_s: float = 300.0

    @property
    def serving_ids(self) -> list[int]:
        return list(range(1, self.uavs + 1))

    @property
    def spare_ids(self) -> list[int]:
        return list(range(self.uavs + 1, self.uavs + self.spares + 1))


@dataclass(frozen=True)
class RanSpec:
    objective: str = "maxmin"
    min_rate_bps: float = 1e6
    epsilon: float = 0.1
    rf_budget_fraction: float = 0.25
    ranging_waypoints: int = 8
    ranging_sigma_m: float = 5.0
    lattice_m: float = 20.0
    coverage_fraction: float = 1.0
    hysteresis: float = 0.05
    handover_margin_db: float = 3.0
    wait_limit_s: float = 30.0


@dataclass(frozen=True)
class BackhaulSpec:
    tech: str = "sub6-wifi"
    coupling: str = "hardware"
    interference_factor: float = 1.5
    demand_bps: float = 5e6
    gateway: Position3D | None = None


@dataclass(frozen=True)
class CoreSpec:
    hop_latency_ms: int = 5
    handoff_timeout_ms: int = 5000
    packet_bytes: int = 1500
    traffic_interval_s: float = 1.0
    reaction_ms: int = 1000


@dataclass(frozen=True)
class UpdateSpec:
    period_s: float = 60.0
    energy_tick_s: float = 10.0


@dataclass(frozen=True, order=True)
class ScriptedEvent:
    t_s: float
    kind: str
    uav: int
    planned: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration_s: float
    world: WorldModel
    ues: tuple[UeSpec, ...]
    fleet: FleetSpec = field(default_factory=FleetSpec)
    ran: RanSpec = field(default_factory=RanSpec)
    backhaul: BackhaulSpec = field(default_factory=BackhaulSpec)
    core: CoreSpec = field(default_factory=CoreSpec)
    updates: UpdateSpec = field(default_factory=UpdateSpec)
    events: tuple[ScriptedEvent, ...] = ()

    def with_overrides(self, *, seed: int | None = None, duration_s: float | None = None, tech: str | None = None,
                       coupling: str | None = None) -> "Scenario":
        bh = self.backhaul
        if tech is not None or coupling is not None:
            bh = BackhaulSpec(tech or bh.tech, coupling or bh.coupling, bh.interference_factor, bh.demand_bps,
                              bh.gateway)
        return Scenario(self.name, self.seed if seed is None else seed,
                        self.duration_s if duration_s is None else duration_s, self.world, self.ues, self.fleet,
                        self.ran, bh, self.core, self.updates, self.events)


# -- raw YAML with line numbers ---------------------------------------------------

def _located(text: str) -> tuple[Any, dict[str, int], list[Issue]]:
    """Parse YAML and map every dotted field path to its 1-based line."""
    issues: list[Issue] = []
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError([Issue("", mark.line + 1 if mark else None, f"YAML syntax error: {exc}")]) from None
    lines: dict[str, int] = {}

    def walk(node, path: str) -> None:
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for k, v in node.value:
                key = k.value
                sub = f"{path}.{key}" if path else str(key)
                if key in seen:
                    issues.append(Issue(sub, k.start_mark.line + 1, "duplicate key"))
                seen.add(key)
                walk(v, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{path}[{i}]")

    if root is not None:
        walk(root, "")
    return data, lines, issues


class _Checker:
    """Collects issues while reading typed values out of the raw mapping."""

    def __init__(self, lines: dict[str, int], issues: list[Issue]):
        self.lines = lines
        self.issues = issues

    def fail(self, path: str, message: str) -> None:
        # a missing field is reported at the line of its nearest present parent
        probe = path
        while probe not in self.lines and probe:
            cut = max(probe.rfind("."), probe.rfind("["))
            probe = probe[:cut] if cut > 0 else ""
        self.issues.append(Issue(path, self.lines.get(probe), message))

    def section(self, raw: dict, key: str, path: str = "") -> dict:
        sub = f"{path}.{key}" if path else key
        val = raw.get(key, {})
        if val is None:
            return {}
        if not isinstance(val, dict):
            self.fail(sub, "must be a mapping")
            return {}
        return val

    def unknown(self, raw: dict, allowed, path: str) -> None:
        for k in raw:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else str(k), f"unknown field (allowed: {', '.join(sorted(allowed))})")

    def number(self, raw: dict, key: str, path: str, default=None, *, lo=None, hi=None, lo_open=False,
               integer=False, required=False):
        sub = f"{path}.{key}" if path else key
        if key not in raw or raw[key] is None:
            if required:
                self.fail(sub, "required field is missing")
            return default
        val = raw[key]
        if isinstance(val, str):
            try:
                val = float(val)
            except ValueError:
                self.fail(sub, f"expected a number, got {raw[key]!r}")
                return default
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            self.fail(sub, f"expected a finite number, got {raw[key]!r}")
            return default
        if integer:
            if float(val) != int(val):
                self.fail(sub, f"expected an integer, got {val!r}")
                return default
            val = int(val)
        else:
            val = float(val)
        if lo is not None and (val <= lo if lo_open else val < lo):
            self.fail(sub, f"must be {'>' if lo_open else '>='} {lo}, got {val}")
            return default
        if hi is not None and val > hi:
            self.fail(sub, f"must be <= {hi}, got {val}")
            return default
        return val

    def choice(self, raw: dict, key: str, path: str, default, choices):
        sub = f"{path}.{key}" if path else key
        val = raw.get(key, default)
        if val not in choices:
            self.fail(sub, f"must be one of {', '.join(choices)}, got {val!r}")
            return default
        return val

    def flag(self, raw: dict, key: str, path: str, default: bool) -> bool:
        val = raw.get(key, default)
        if not isinstance(val, bool):
            self.fail(f"{path}.{key}", f"expected true/false, got {val!r}")
            return default
        return val

    def vector(self, val, path: str, sizes=(2, 3)) -> tuple[float, ...] | None:
        if not isinstance(val, (list, tuple)) or len(val) not in sizes:
            self.fail(path, f"expected a list of {' or '.join(map(str, sizes))} numbers, got {val!r}")
            return None
        out = []
        for i, v in enumerate(val):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                self.fail(f"{path}[{i}]", f"expected a finite number, got {v!r}")
                return None
            out.append(float(v))
        return tuple(out)


def _inside(world: WorldModel, x: float, y: float) -> bool:
    x0, y0, x1, y1 = world.extent
    return x0 <= x <= x1 and y0 <= y <= y1


def _position(chk: _Checker, world: WorldModel | None, val, path: str, what: str) -> Position3D | None:
    vec = chk.vector(val, path)
    if vec is None:
        return None
    x, y = vec[0], vec[1]
    z = vec[2] if len(vec) == 3 else 0.0
    if z < 0:
        chk.fail(path, f"{what} altitude must be >= 0")
        return None
    if world is not None and not _inside(world, x, y):
        chk.fail(path, f"{what} at ({x:g}, {y:g}) lies outside the world extent {list(world.extent)}")
        return None
    return Position3D(x, y, z)


# -- parsing ------------------------------------------------------------------------------

_TOP = ("version", "name", "seed", "duration_s", "world", "fleet", "ran", "backhaul", "core", "updates", "ues",
        "events")


def _parse_world(chk: _Checker, raw: dict) -> WorldModel | None:
    p = "world"
    chk.unknown(raw, ("extent", "grid_m", "altitude_ceiling_m", "access_freq_mhz", "access_bandwidth_hz",
                      "path_loss_exponent", "noise_figure_db", "obstacles"), p)
    extent = None
    if "extent" not in raw:
        chk.fail(f"{p}.extent", "required field is missing")
    else:
        extent = chk.vector(raw["extent"], f"{p}.extent", sizes=(4,))
        if extent is not None and not (extent[2] > extent[0] and extent[3] > extent[1]):
            chk.fail(f"{p}.extent", "expected [x_min, y_min, x_max, y_max] with x_max > x_min and y_max > y_min")
            extent = None
    grid = chk.number(raw, "grid_m", p, 20.0, lo=0, lo_open=True)
    ceiling = chk.number(raw, "altitude_ceiling_m", p, 122.0, lo=0, lo_open=True)
    freq = chk.number(raw, "access_freq_mhz", p, 2600.0, lo=0, lo_open=True)
    bw = chk.number(raw, "access_bandwidth_hz", p, 10e6, lo=0, lo_open=True)
    ple = chk.number(raw, "path_loss_exponent", p, 2.0, lo=2.0)
    nf = chk.number(raw, "noise_figure_db", p, 7.0, lo=0)
    obstacles = []
    raw_obs = raw.get("obstacles") or []
    if not isinstance(raw_obs, list):
        chk.fail(f"{p}.obstacles", "must be a list")
        raw_obs = []
    for i, o in enumerate(raw_obs):
        op = f"{p}.obstacles[{i}]"
        if not isinstance(o, dict):
            chk.fail(op, "must be a mapping")
            continue
        chk.unknown(o, ("name", "x_min", "x_max", "y_min", "y_max", "height_m", "attenuation_db"), op)
        vals = [chk.number(o, k, op, required=True) for k in ("x_min", "x_max", "y_min", "y_max")]
        h = chk.number(o, "height_m", op, required=True, lo=0, lo_open=True)
        att = chk.number(o, "attenuation_db", op, 20.0, lo=0)
        if None in vals or h is None:
            continue
        if not (vals[1] > vals[0] and vals[3] > vals[2]):
            chk.fail(op, "obstacle footprint must have x_max > x_min and y_max > y_min")
            continue
        obstacles.append(Obstacle(vals[0], vals[1], vals[2], vals[3], h, att, str(o.get("name", f"obstacle{i}"))))
    if extent is None or None in (grid, ceiling, freq, bw, ple, nf):
        return None
    return WorldModel(extent, grid, tuple(obstacles), access_freq_mhz=freq, altitude_ceiling_m=ceiling,
                      path_loss_exponent=ple, access_bandwidth_hz=bw, noise_figure_db=nf)


def _parse_fleet(chk: _Checker, raw: dict, world: WorldModel | None) -> FleetSpec:
    p = "fleet"
    d = FleetSpec()
    chk.unknown(raw, ("uavs", "spares", "radios", "msr_m", "speed_mps", "tx_power_dbm", "antenna", "base",
                      "energy", "outage_s"), p)
    uavs = chk.number(raw, "uavs", p, d.uavs, lo=1, integer=True)
    spares = chk.number(raw, "spares", p, d.spares, lo=0, integer=True)
    radios = chk.number(raw, "radios", p, d.radios, lo=1, integer=True)
    msr = chk.number(raw, "msr_m", p, d.msr_m, lo=0)
    speed = chk.number(raw, "speed_mps", p, d.speed_mps, lo=0, lo_open=True)
    tx = chk.number(raw, "tx_power_dbm", p, d.tx_power_dbm)
    outage = chk.number(raw, "outage_s", p, d.outage_s, lo=0)
    ant = chk.section(raw, "antenna", p)
    chk.unknown(ant, ("gain_dbi", "beamwidth_deg", "floor_dbi"), f"{p}.antenna")
    gain = chk.number(ant, "gain_dbi", f"{p}.antenna", d.antenna.boresight_gain_dbi)
    beam = chk.number(ant, "beamwidth_deg", f"{p}.antenna", d.antenna.beamwidth_deg, lo=0, lo_open=True, hi=360)
    floor = chk.number(ant, "floor_dbi", f"{p}.antenna", d.antenna.floor_gain_dbi)
    antenna = d.antenna
    if None not in (gain, beam, floor):
        if floor > gain:
            chk.fail(f"{p}.antenna.floor_dbi", "must not exceed gain_dbi")
        else:
            antenna = AntennaPattern(gain, beam, floor)
    base = d.base
    if "base" in raw:
        pos = _position(chk, world, raw["base"], f"{p}.base", "launch base")
        if pos is not None:
            base = (pos.x, pos.y)
    en = chk.section(raw, "energy", p)
    ep = f"{p}.energy"
    chk.unknown(en, ("capacity_j", "hover_w", "per_bit_j", "threshold_j"), ep)
    de = d.energy
    cap = chk.number(en, "capacity_j", ep, de.capacity_j, lo=0, lo_open=True)
    energy = EnergyModel(cap if cap is not None else de.capacity_j,
                         chk.number(en, "hover_w", ep, de.hover_w, lo=0),
                         chk.number(en, "per_bit_j", ep, de.per_bit_j, lo=0),
                         chk.number(en, "threshold_j", ep, de.threshold_j, lo=0, hi=cap))
    return FleetSpec(uavs, spares, radios, msr, speed, tx, antenna, base, energy, outage)


def _parse_ran(chk: _Checker, raw: dict) -> RanSpec:
    p = "ran"
    d = RanSpec()
    chk.unknown(raw, tuple(RanSpec.__dataclass_fields__), p)
    return RanSpec(
        chk.choice(raw, "objective", p, d.objective, OBJECTIVES),
        chk.number(raw, "min_rate_bps", p, d.min_rate_bps, lo=0),
        chk.number(raw, "epsilon", p, d.epsilon, lo=0, hi=0.999999),
        chk.number(raw, "rf_budget_fraction", p, d.rf_budget_fraction, lo=0, lo_open=True, hi=1),
        chk.number(raw, "ranging_waypoints", p, d.ranging_waypoints, lo=3, integer=True),
        chk.number(raw, "ranging_sigma_m", p, d.ranging_sigma_m, lo=0),
        chk.number(raw, "lattice_m", p, d.lattice_m, lo=0, lo_open=True),
        chk.number(raw, "coverage_fraction", p, d.coverage_fraction, lo=0, lo_open=True, hi=1),
        chk.number(raw, "hysteresis", p, d.hysteresis, lo=0),
        chk.number(raw, "handover_margin_db", p, d.handover_margin_db, lo=0),
        chk.number(raw, "wait_limit_s", p, d.wait_limit_s, lo=0, lo_open=True),
    )


def _parse_backhaul(chk: _Checker, raw: dict, world: WorldModel | None) -> BackhaulSpec:
    p = "backhaul"
    d = BackhaulSpec()
    chk.unknown(raw, ("tech", "coupling", "interference_factor", "demand_bps", "gateway"), p)
    gateway = None
    if raw.get("gateway") is not None:
        gateway = _position(chk, world, raw["gateway"], f"{p}.gateway", "gateway")
    return BackhaulSpec(
        chk.choice(raw, "tech", p, d.tech, PLANNABLE_TECHS),
        chk.choice(raw, "coupling", p, d.coupling, COUPLINGS),
        chk.number(raw, "interference_factor", p, d.interference_factor, lo=1),
        chk.number(raw, "demand_bps", p, d.demand_bps, lo=0),
        gateway,
    )


def _parse_core(chk: _Checker, raw: dict) -> CoreSpec:
    p = "core"
    d = CoreSpec()
    chk.unknown(raw, tuple(CoreSpec.__dataclass_fields__), p)
    return CoreSpec(
        chk.number(raw, "hop_latency_ms", p, d.hop_latency_ms, lo=1, integer=True),
        chk.number(raw, "handoff_timeout_ms", p, d.handoff_timeout_ms, lo=1, integer=True),
        chk.number(raw, "packet_bytes", p, d.packet_bytes, lo=1, integer=True),
        chk.number(raw, "traffic_interval_s", p, d.traffic_interval_s, lo=0.001),
        chk.number(raw, "reaction_ms", p, d.reaction_ms, lo=0, integer=True),
    )


def _parse_updates(chk: _Checker, raw: dict) -> UpdateSpec:
    p = "updates"
    d = UpdateSpec()
    chk.unknown(raw, tuple(UpdateSpec.__dataclass_fields__), p)
    return UpdateSpec(chk.number(raw, "period_s", p, d.period_s, lo=0.001),
                      chk.number(raw, "energy_tick_s", p, d.energy_tick_s, lo=0.001))


def _parse_ues(chk: _Checker, raw, world: WorldModel | None) -> tuple[UeSpec, ...]:
    if raw is None:
        chk.fail("ues", "required field is missing")
        return ()
    if not isinstance(raw, list) or not raw:
        chk.fail("ues", "must be a non-empty list")
        return ()
    out, seen = [], {}
    for i, u in enumerate(raw):
        p = f"ues[{i}]"
        if not isinstance(u, dict):
            chk.fail(p, "must be a mapping")
            continue
        chk.unknown(u, ("id", "position", "demand_bps", "waypoints", "traffic"), p)
        uid = chk.number(u, "id", p, required=True, lo=0, integer=True)
        label = f"UE {uid}" if uid is not None else f"UE #{i}"
        if uid is not None:
            if uid in seen:
                chk.fail(f"{p}.id", f"duplicate UE id {uid} (also ues[{seen[uid]}])")
            seen.setdefault(uid, i)
        if "position" not in u:
            chk.fail(f"{p}.position", "required field is missing")
            pos = None
        else:
            pos = _position(chk, world, u["position"], f"{p}.position", label)
        demand = chk.number(u, "demand_bps", p, 1e6, lo=0)
        wps = []
        raw_wps = u.get("waypoints") or []
        if not isinstance(raw_wps, list):
            chk.fail(f"{p}.waypoints", "must be a list")
            raw_wps = []
        last = -1.0
        for j, w in enumerate(raw_wps):
            wp = f"{p}.waypoints[{j}]"
            if not isinstance(w, dict):
                chk.fail(wp, "must be a mapping with t_s and position")
                continue
            chk.unknown(w, ("t_s", "position"), wp)
            t = chk.number(w, "t_s", wp, required=True, lo=0)
            q = _position(chk, world, w.get("position"), f"{wp}.position", label) if "position" in w else None
            if "position" not in w:
                chk.fail(f"{wp}.position", "required field is missing")
            if t is not None and t <= last:
                chk.fail(f"{wp}.t_s", "waypoint times must be strictly increasing")
            if t is not None:
                last = t
            if t is not None and q is not None:
                wps.append((t, q))
        toggles = []
        raw_tr = u.get("traffic") or []
        if not isinstance(raw_tr, list):
            chk.fail(f"{p}.traffic", "must be a list")
            raw_tr = []
        last = -1.0
        for j, w in enumerate(raw_tr):
            tp = f"{p}.traffic[{j}]"
            if not isinstance(w, dict):
                chk.fail(tp, "must be a mapping with t_s and active")
                continue
            chk.unknown(w, ("t_s", "active"), tp)
            t = chk.number(w, "t_s", tp, required=True, lo=0)
            on = chk.flag(w, "active", tp, True)
            if t is not None and t <= last:
                chk.fail(f"{tp}.t_s", "traffic toggle times must be strictly increasing")
            if t is not None:
                last = t
                toggles.append((t, on))
        if uid is not None and pos is not None and demand is not None:
            out.append(UeSpec(uid, pos, demand, tuple(wps), tuple(toggles)))
    return tuple(out)


def _parse_events(chk: _Checker, raw, fleet: FleetSpec) -> tuple[ScriptedEvent, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        chk.fail("events", "must be a list")
        return ()
    known = set(fleet.serving_ids) | set(fleet.spare_ids)
    out = []
    for i, e in enumerate(raw):
        p = f"events[{i}]"
        if not isinstance(e, dict):
            chk.fail(p, "must be a mapping")
            continue
        chk.unknown(e, ("t_s", "kind", "uav", "planned"), p)
        t = chk.number(e, "t_s", p, required=True, lo=0)
        kind = chk.choice(e, "kind", p, None, EVENT_KINDS) if "kind" in e else None
        if "kind" not in e:
            chk.fail(f"{p}.kind", "required field is missing")
        uav = chk.number(e, "uav", p, required=True, integer=True)
        if uav is not None and uav not in known:
            chk.fail(f"{p}.uav", f"unknown UAV id {uav} (fleet ids are 1..{fleet.uavs + fleet.spares})")
            uav = None
        planned = chk.flag(e, "planned", p, False)
        if None not in (t, kind, uav):
            out.append(ScriptedEvent(t, kind, uav, planned))
    return tuple(sorted(out))


def parse_scenario(text: str) -> Scenario:
    data, lines, issues = _located(text)
    chk = _Checker(lines, issues)
    if not isinstance(data, dict):
        raise ScenarioError(issues + [Issue("", 1, "scenario must be a YAML mapping")])
    chk.unknown(data, _TOP, "")
    if "version" not in data:
        chk.fail("version", "required field is missing")
    elif data["version"] != SCHEMA_VERSION:
        chk.fail("version", f"unsupported version {data['version']!r}; expected {SCHEMA_VERSION}")
    seed = chk.number(data, "seed", "", required=True, lo=0, integer=True)
    duration = chk.number(data, "duration_s", "", required=True, lo=0)
    name = data.get("name", "scenario")
    if not isinstance(name, str):
        chk.fail("name", "must be a string")
        name = "scenario"
    if "world" not in data:
        chk.fail("world", "required field is missing")
    world = _parse_world(chk, chk.section(data, "world"))
    fleet = _parse_fleet(chk, chk.section(data, "fleet"), world)
    ran = _parse_ran(chk, chk.section(data, "ran"))
    backhaul = _parse_backhaul(chk, chk.section(data, "backhaul"), world)
    core = _parse_core(chk, chk.section(data, "core"))
    updates = _parse_updates(chk, chk.section(data, "updates"))
    ues = _parse_ues(chk, data.get("ues"), world)
    events = _parse_events(chk, data.get("events"), fleet)
    if chk.issues:
        raise ScenarioError(chk.issues)
    return Scenario(name, seed, duration, world, ues, fleet, ran, backhaul, core, updates, events)


def demo_text() -> str:
    """The bundled three-cluster demo scenario."""
    return (files("aerolte") / "data" / "demo.yaml").read_text(encoding="utf-8")


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError([Issue("", None, f"cannot read scenario file: {exc}")]) from None
    return parse_scenario(text)


# -- normalised form -----------------------------------------------------------------

def _xyz(p: Position3D) -> list[float]:
    return [p.x, p.y, p.z]


def scenario_to_dict(s: Scenario) -> dict:
    w, f = s.world, s.fleet
    return {
        "version": SCHEMA_VERSION,
        "name": s.name,
        "seed": s.seed,
        "duration_s": s.duration_s,
        "world": {
            "extent": list(w.extent),
            "grid_m": w.ground_grid_resolution,
            "altitude_ceiling_m": w.altitude_ceiling_m,
            "access_freq_mhz": w.access_freq_mhz,
            "access_bandwidth_hz": w.access_bandwidth_hz,
            "path_loss_exponent": w.path_loss_exponent,
            "noise_figure_db": w.noise_figure_db,
            "obstacles": [{"name": o.name, "x_min": o.x_min, "x_max": o.x_max, "y_min": o.y_min, "y_max": o.y_max,
                           "height_m": o.height, "attenuation_db": o.attenuation_db} for o in w.obstacles],
        },
        "fleet": {
            "uavs": f.uavs, "spares": f.spares, "radios": f.radios, "msr_m": f.msr_m, "speed_mps": f.speed_mps,
            "tx_power_dbm": f.tx_power_dbm,
            "antenna": {"gain_dbi": f.antenna.boresight_gain_dbi, "beamwidth_deg": f.antenna.beamwidth_deg,
                        "floor_dbi": f.antenna.floor_gain_dbi},
            "base": list(f.base),
            "energy": {"capacity_j": f.energy.capacity_j, "hover_w": f.energy.hover_w,
                       "per_bit_j": f.energy.per_bit_j, "threshold_j": f.energy.threshold_j},
            "outage_s": f.outage_s,
        },
        "ran": {k: getattr(s.ran, k) for k in RanSpec.__dataclass_fields__},
        "backhaul": {"tech": s.backhaul.tech, "coupling": s.backhaul.coupling,
                     "interference_factor": s.backhaul.interference_factor, "demand_bps": s.backhaul.demand_bps,
                     "gateway": None if s.backhaul.gateway is None else _xyz(s.backhaul.gateway)},
        "core": {k: getattr(s.core, k) for k in CoreSpec.__dataclass_fields__},
        "updates": {k: getattr(s.updates, k) for k in UpdateSpec.__dataclass_fields__},
        "ues": [{"id": u.ue_id, "position": _xyz(u.position), "demand_bps": u.demand_bps,
                 "waypoints": [{"t_s": t, "position": _xyz(p)} for t, p in u.waypoints],
                 "traffic": [{"t_s": t, "active": on} for t, on in u.traffic]} for u in s.ues],
        "events": [{"t_s": e.t_s, "kind": e.kind, "uav": e.uav, "planned": e.planned} for e in s.events],
    }


def dump_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)


def revalidated(s: Scenario) -> Scenario:
    """Run an in-memory scenario (e.g. after overrides) back through validation."""
    return parse_scenario(dump_scenario(s))
