"""Deterministic discrete-event simulation: bootstrap flights, then periodic updates.

All times are integer milliseconds.  Events run in (time, sequence) order
and the sequence number is assigned at enqueue, so a scenario and seed fix
the whole run.  Random streams are derived per purpose from the seed, so
adding work in one place never shifts the numbers drawn elsewhere.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .backhaul import (
    BackhaulController,
    BackhaulPlan,
    ControllerEvent,
    LinkGraph,
    choose_configs,
    get_tech,
    route_flows,
)
from .core import DROP_REASONS, CoreNetwork
from .localization import (
    ConvergenceError,
    IllConditionedError,
    RangeMeasurement,
    measure_range,
    plan_ranging_waypoints,
    trilaterate,
)
from .metrics import MetricsReport
from .ran import (
    MIN_RF_BUDGET,
    CandidateSet,
    CoverageZone,
    RanCaps,
    RfMap,
    UavRanConfig,
    ZoneUncoverableError,
    adopt_new_optimum,
    build_rf_map,
    candidate_set,
    objective_values,
    operational_airspace,
    optimize_placement,
    partition_zones,
    resolve_conflict,
)
from .scenario import GATEWAY_ID, Scenario
from .world import Position3D, isotropic, link_snr, snr_to_rate

EVENT_KINDS = ("measurement_step", "periodic_update", "ue_move", "uav_energy_tick", "uav_down", "uav_restored",
               "traffic_tick", "core_message_delivery", "core_timer")
MEASUREMENT_TICK_MS = 1000
MAX_REQUEUES = 2
DODGE_AFTER_MS = 3000
BOOTSTRAP_LIMIT_MS = 6 * 3600 * 1000

# random stream tags
_ZONING, _RANGING, _RF = 1, 2, 3


class SimulationError(RuntimeError):
    """Structured failure raised before any simulated time passes."""

    def __init__(self, kind: str, details: list[dict]):
        self.kind = kind
        self.details = details
        super().__init__(f"{kind}: {details}")

    def to_dict(self) -> dict:
        return {"error": self.kind, "details": self.details}


@dataclass(order=True)
class Event:
    time_ms: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


@dataclass
class RanPlan:
    """One UAV's pass through localisation, RF mapping and placement."""

    uav: int
    ues: tuple[int, ...]
    airspace_size: int
    waypoints: tuple[Position3D, ...]
    measurements: dict[int, list[RangeMeasurement]]
    estimates: dict[int, Position3D]
    loc_error_m: dict[int, float]
    loc_failures: int
    rf_map: RfMap | None
    config: UavRanConfig
    candidates: CandidateSet | None
    objective: float
    stops: list[Position3D]  # measurement flight: ranging waypoints then RF samples


def _nearest_first(points: list[Position3D], start: Position3D) -> list[Position3D]:
    """Greedy nearest-neighbour visiting order over distinct points."""
    pts = sorted(set(points))
    if not pts:
        return []
    xyz = np.array([p.xyz for p in pts])
    left = np.ones(len(pts), dtype=bool)
    cur = start.xyz
    out = []
    for _ in range(len(pts)):
        d = np.where(left, np.linalg.norm(xyz - cur, axis=1), np.inf)
        i = int(np.argmin(d))
        left[i] = False
        out.append(pts[i])
        cur = xyz[i]
    return out


def _step_toward(cur: Position3D, target: Position3D, dist: float) -> Position3D:
    gap = cur.distance(target)
    if gap <= dist:
        return target
    f = dist / gap
    return Position3D(cur.x + (target.x - cur.x) * f, cur.y + (target.y - cur.y) * f,
                      max(0.0, cur.z + (target.z - cur.z) * f))


def _without_node(plan: BackhaulPlan, u: int) -> BackhaulPlan:
    """The data plane right after ``u`` vanishes, before the controller reacts."""
    g = plan.graph
    graph = LinkGraph({n: p for n, p in g.nodes.items() if n != u},
                      {k: l for k, l in g.links.items() if u not in k}, g.tech)
    live = {d: v for d, v in plan.flows.demands.items() if u not in d}
    flows = route_flows(graph.capacities(), live)
    suspended = tuple(sorted(set(plan.suspended) | (set(plan.flows.demands) - set(live))))
    return BackhaulPlan(graph, flows, {r: p for r, p in plan.relays.items() if r != u}, plan.radio_drops,
                        plan.beam_drops, plan.channel_deactivations, plan.conflicts_resolved, suspended)


class Simulation:
    def __init__(self, scenario: Scenario):
        s = scenario
        self.s = s
        self.world = s.world
        self.tech = get_tech(s.backhaul.tech)
        self.caps = RanCaps(pattern=s.fleet.antenna, max_tx_power_dbm=s.fleet.tx_power_dbm,
                            lattice_m=s.ran.lattice_m, coverage_fraction=s.ran.coverage_fraction)
        self.serving_ids = s.fleet.serving_ids
        self.queue: list[Event] = []
        self._seq = 0
        self.now_ms = 0
        self.phase = "init"
        self.t0_ms = 0
        self.end_ms = 0
        self.ue_ids = sorted(u.ue_id for u in s.ues)
        self.ue_specs = {u.ue_id: u for u in s.ues}
        self.ue_pos = {u.ue_id: u.position for u in s.ues}
        self.serving: dict[int, int | None] = {u: None for u in self.ue_ids}
        self.positions: dict[int, Position3D] = {}  # airborne UAVs
        self.configs: dict[int, UavRanConfig] = {}
        self.ran_plans: dict[int, RanPlan] = {}
        self.ran_plans_bootstrap: dict[int, RanPlan] = {}
        self.bootstrap_configs: dict[int, UavRanConfig] = {}
        self.ran_keys: dict[int, tuple | None] = {}
        self.zones: dict[int, object] = {}
        self.tours: dict[int, deque] = {}
        self.requeues: dict[tuple[int, Position3D], int] = {}
        self.wait_ms: dict[int, int] = {}
        self.detours: dict[int, set[Position3D]] = {}
        self.controller: BackhaulController | None = None
        self.plan: BackhaulPlan | None = None
        self.initial_plan: BackhaulPlan | None = None
        self.core: CoreNetwork | None = None
        self._routes: dict[tuple[int, int], int | None] = {}
        self.going_down: dict[int, dict] = {}
        self.deferred: set[int] = set()
        self.update_round = 0
        self.demands = self._demands()
        self.series: dict[str, list[tuple]] = {k: [] for k in ("lambda", "demands", "ue", "energy", "uav")}
        self.m = {
            "measurement_done_ms": {}, "measurement_stops": 0, "stops_skipped": 0, "msr_holds": 0,
            "min_separation_m": math.inf, "placement_unreached": 0,
            "ran_moves": 0, "backhaul_changes": 0, "update_holds": 0, "uncoverable_updates": 0,
            "ran_reruns": 0, "uav_down": 0, "uav_down_energy": 0, "uav_restored": 0, "reattach": 0,
            "handoff_fallback_attach": 0, "coverage_losses": 0, "traffic_skipped_no_coverage": 0,
            "relays_max": 0, "lambda_min": 1.0, "beam_drops_max": 0, "radio_drops_max": 0,
            "channel_deactivations_max": 0, "conflicts_resolved_max": 0,
        }

    # -- plumbing -----------------------------------------------------------------

    def _rng(self, *tags: int) -> np.random.Generator:
        return np.random.default_rng([self.s.seed, *tags])

    def push(self, time_ms: int, kind: str, **payload) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind}")
        if time_ms < self.now_ms:
            raise ValueError("event scheduled in the past")
        self._seq += 1
        heapq.heappush(self.queue, Event(int(time_ms), self._seq, kind, payload))

    def _core_schedule(self, time_ms: int, kind: str, ident: int) -> None:
        self.push(time_ms, kind, id=ident)

    def _run(self, until_ms: int | None, stop=lambda: False) -> None:
        while self.queue and not stop():
            if until_ms is not None and self.queue[0].time_ms > until_ms:
                break
            ev = heapq.heappop(self.queue)
            self.now_ms = ev.time_ms
            if self.core is not None:
                self.core.now_ms = max(self.core.now_ms, self.now_ms)
            getattr(self, f"_on_{ev.kind}")(ev.payload)
        if until_ms is not None:
            self.now_ms = max(self.now_ms, until_ms)

    def _demands(self) -> dict[tuple[int, int], int]:
        bps = int(round(self.s.backhaul.demand_bps))
        nodes = list(self.serving_ids) + ([GATEWAY_ID] if self.s.backhaul.gateway is not None else [])
        return {(a, b): bps for a in nodes for b in nodes if a != b and bps > 0}

    def _t_s(self) -> float:
        return self.now_ms / 1000.0

    def _service_ms(self, t_s: float) -> int:
        return self.t0_ms + int(round(t_s * 1000))

    # -- RAN pipeline ---------------------------------------------------------------------

    def _zone_ues(self, u: int) -> list[int]:
        cells = self.zones[u].cells
        return [ue for ue in self.ue_ids if self.world.cell_of(self.ue_pos[ue].x, self.ue_pos[ue].y) in cells]

    def _zone_key(self, u: int) -> tuple:
        return tuple((ue, self.ue_pos[ue]) for ue in self._zone_ues(u))

    def _plan_ran(self, u: int, round_no: int) -> RanPlan:
        s, world = self.s, self.world
        ues = self._zone_ues(u)
        if not ues:
            # nothing to serve: hover over the zone's centre at the ceiling
            cells = sorted(self.zones[u].cells)
            c = world.cell_centers(cells).mean(axis=0)
            cfg = UavRanConfig(Position3D(float(c[0]), float(c[1]), world.altitude_ceiling_m), 0.0, 0.0,
                               s.fleet.tx_power_dbm)
            return RanPlan(u, (), 0, (), {}, {}, {}, 0, None, cfg, None, 0.0, [])
        cells = frozenset(world.cell_of(self.ue_pos[ue].x, self.ue_pos[ue].y) for ue in ues)
        airspace = operational_airspace(CoverageZone(cells, s.ran.min_rate_bps, u), self.caps, world)
        positions = sorted({p.position for p in airspace})
        plan = plan_ranging_waypoints(positions, s.ran.ranging_waypoints)
        rng = self._rng(_RANGING, u, round_no)
        truth = [self.ue_pos[ue] for ue in ues]
        meas = {ue: [measure_range(w, t, s.ran.ranging_sigma_m, rng) for w in plan.waypoints]
                for ue, t in zip(ues, truth)}
        estimates, errors, failures = {}, {}, 0
        for ue, t in zip(ues, truth):
            try:
                est = trilaterate(meas[ue]).position
            except ConvergenceError as exc:
                est, failures = exc.best.position, failures + 1
            except IllConditionedError:
                xy = np.mean([[w.x, w.y] for w in plan.waypoints], axis=0)
                est, failures = Position3D(float(xy[0]), float(xy[1]), 0.0), failures + 1
            estimates[ue] = est
            errors[ue] = est.distance(t)
        budget = max(MIN_RF_BUDGET, math.ceil(s.ran.rf_budget_fraction * len(airspace)))
        rf = build_rf_map([estimates[ue] for ue in ues], airspace, budget, world, self._rng(_RF, u, round_no),
                          caps=self.caps, true_positions=truth)
        cfg = optimize_placement(rf, s.ran.objective, s.ran.min_rate_bps)
        cands = candidate_set(rf, s.ran.epsilon, s.ran.objective, s.ran.min_rate_bps)
        start = self.positions.get(u, cfg.position)
        stops = _nearest_first(list(plan.waypoints), start)
        for phase in ("coarse", "fine"):
            here = stops[-1] if stops else start
            stops += _nearest_first([rf.points[i].position for i in rf.sample_order if rf.provenance[i] == phase],
                                    here)
        return RanPlan(u, tuple(ues), len(airspace), plan.waypoints, meas, estimates, errors, failures, rf, cfg,
                       cands, cands.optimum, stops)

    def _objective_at(self, plan: RanPlan, cfg: UavRanConfig) -> float:
        if plan.rf_map is None:
            return 0.0
        try:
            i = plan.rf_map.index_of(cfg.point)
        except ValueError:
            return 0.0
        vals = objective_values(plan.rf_map.rates()[i:i + 1], self.s.ran.objective, self.s.ran.min_rate_bps)
        return float(vals[0])

    def _choose_configs(self) -> dict[int, UavRanConfig]:
        chosen = {u: p.config for u, p in self.ran_plans.items()}
        if self.s.backhaul.coupling != "software":
            return chosen
        cands: dict[int, list[UavRanConfig]] = {}
        for u, p in self.ran_plans.items():
            seen, opts = set(), []
            for c in (p.candidates.configs if p.candidates else (p.config,)):
                if c.position not in seen:
                    seen.add(c.position)
                    opts.append(c)
            cands[u] = opts
        fixed = {GATEWAY_ID: self.s.backhaul.gateway} if self.s.backhaul.gateway is not None else None
        pick = choose_configs({u: [c.position for c in opts] for u, opts in cands.items()}, self.demands,
                              self.tech, self.world, self.s.fleet.spare_ids, self.s.fleet.radios,
                              fixed_nodes=fixed)
        return {u: cands[u][i] for u, i in pick.items()}

    # -- bootstrap ---------------------------------------------------------------------------

    def launch_positions(self) -> dict[int, Position3D]:
        bx, by = self.s.fleet.base
        gap = max(2 * self.s.fleet.msr_m, 1.0)
        return {u: Position3D(bx + i * gap, by, 0.0) for i, u in enumerate(self.serving_ids)}

    def bootstrap(self) -> None:
        s = self.s
        self.positions = self.launch_positions()
        zones = partition_zones(self.world, len(self.serving_ids), [self.ue_pos[u] for u in self.ue_ids],
                                self._rng(_ZONING), s.ran.min_rate_bps)
        self.zones = dict(zip(self.serving_ids, zones))
        failures = []
        for u in self.serving_ids:
            try:
                self.ran_plans[u] = self._plan_ran(u, 0)
                self.ran_keys[u] = self._zone_key(u)
            except ZoneUncoverableError as exc:
                failures.append({"uav": u, "zone_cells": len(self.zones[u].cells), "ues": self._zone_ues(u),
                                 "message": str(exc)})
        if failures:
            raise SimulationError("uncoverable_zone", failures)
        self.configs = self._choose_configs()
        for u in self.serving_ids:
            self.tours[u] = deque(self.ran_plans[u].stops + [self.configs[u].position])
            self.wait_ms[u] = 0
            self.detours[u] = set()
        self.phase = "bootstrap"
        self.ran_plans_bootstrap = dict(self.ran_plans)
        self.bootstrap_configs = dict(self.configs)
        self.push(0, "measurement_step")
        self._run(None, stop=lambda: self.phase != "bootstrap")

    def _track_separation(self) -> None:
        pos = sorted(self.positions.items())
        for i, (_, a) in enumerate(pos):
            for _, b in pos[i + 1:]:
                self.m["min_separation_m"] = min(self.m["min_separation_m"], a.distance(b))

    def _sidestep(self, u: int, target: Position3D) -> Position3D | None:
        """Right-hand-rule detour for a held UAV: step sideways to the right of its heading.

        Two UAVs meeting head-on both step right and so pass each other.
        """
        cur = self.positions[u]
        hx, hy = target.x - cur.x, target.y - cur.y
        norm = math.hypot(hx, hy)
        if norm == 0:
            return None
        d = 1.5 * max(self.s.fleet.msr_m, self.s.fleet.speed_mps)
        x0, y0, x1, y1 = self.world.extent
        x = min(max(cur.x + d * hy / norm, x0), x1)
        y = min(max(cur.y - d * hx / norm, y0), y1)
        return Position3D(x, y, cur.z)

    def _on_measurement_step(self, _payload) -> None:
        dt = MEASUREMENT_TICK_MS / 1000.0
        reach = self.s.fleet.speed_mps * dt
        planned = {u: _step_toward(self.positions[u], t[0], reach) for u, t in sorted(self.tours.items()) if t}
        res = resolve_conflict(planned, self.positions, self.s.fleet.msr_m)
        for u in sorted(planned):
            tour = self.tours[u]
            if u in res.held:
                self.m["msr_holds"] += 1
                self.wait_ms[u] += MEASUREMENT_TICK_MS
                detour = None
                if self.wait_ms[u] == DODGE_AFTER_MS and tour[0] not in self.detours[u]:
                    detour = self._sidestep(u, tour[0])
                if detour is not None:
                    self.detours[u].add(detour)
                    tour.appendleft(detour)
                elif self.wait_ms[u] >= self.s.ran.wait_limit_s * 1000:
                    target = tour.popleft()
                    n = self.requeues.get((u, target), 0)
                    if target in self.detours[u]:
                        pass  # abandon the detour
                    elif n < MAX_REQUEUES and tour:
                        self.requeues[(u, target)] = n + 1
                        tour.append(target)
                    else:
                        self.m["stops_skipped"] += 1
                        if not tour:
                            self.m["placement_unreached"] += 1
                    self.wait_ms[u] = 0
                continue
            self.wait_ms[u] = 0
            self.positions[u] = res.committed[u]
            if self.positions[u] == tour[0]:
                reached = tour.popleft()
                if reached in self.detours[u]:
                    self.detours[u].discard(reached)
                else:
                    self.m["measurement_stops"] += 1
            if not tour:
                self.m["measurement_done_ms"][u] = self.now_ms + MEASUREMENT_TICK_MS
        self._track_separation()
        busy = any(self.tours.values())
        if busy and self.now_ms + MEASUREMENT_TICK_MS <= BOOTSTRAP_LIMIT_MS:
            self.push(self.now_ms + MEASUREMENT_TICK_MS, "measurement_step")
        else:
            for u, tour in sorted(self.tours.items()):
                if tour:
                    self.m["stops_skipped"] += len(tour)
                    self.m["placement_unreached"] += 1
                    tour.clear()
            self.now_ms += MEASUREMENT_TICK_MS
            self._start_service()

    def _start_service(self) -> None:
        s = self.s
        self.phase = "service"
        self.t0_ms = self.now_ms
        self.end_ms = self.t0_ms + int(round(s.duration_s * 1000))
        fixed = {GATEWAY_ID: s.backhaul.gateway} if s.backhaul.gateway is not None else None
        self.controller = BackhaulController(dict(self.positions), self.demands, self.tech, self.world,
                                             s.fleet.spare_ids, s.fleet.radios, s.backhaul.interference_factor,
                                             s.fleet.energy, fixed_nodes=fixed)
        self._set_plan(self.controller.replan(), "bootstrap")
        self.initial_plan = self.plan
        self.core = CoreNetwork(self.serving_ids, hops=self._hops, hop_latency_ms=s.core.hop_latency_ms,
                                handoff_timeout_ms=s.core.handoff_timeout_ms)
        self.core.now_ms = self.now_ms
        self.core.on_schedule = self._core_schedule
        for ue in self.ue_ids:
            best = self._best_uav(ue, None)
            if best is not None:
                self.core.attach(best, ue)
                self.serving[ue] = best
                if not self._traffic_on(ue):
                    self.core.set_idle(best, ue)
        for ue in self.ue_ids:
            for t, pos in self.ue_specs[ue].waypoints:
                self.push(self._service_ms(t), "ue_move", ue=ue, x=pos.x, y=pos.y, z=pos.z)
        for e in s.events:
            self.push(self._service_ms(e.t_s), e.kind, uav=e.uav, planned=e.planned, cause="scripted",
                      phase="start")
        self.push(self._service_ms(s.updates.period_s), "periodic_update")
        self.push(self._service_ms(s.updates.energy_tick_s), "uav_energy_tick")
        self.push(self._service_ms(s.core.traffic_interval_s), "traffic_tick")
        self._sample()

    # -- service phase -----------------------------------------------------------------

    def run_updates(self) -> None:
        if self.phase != "service":
            raise RuntimeError("bootstrap has not completed")
        self._run(self.end_ms)
        self._sample()
        self.core.run_until_quiescent()  # let in-flight control traffic and packets settle
        self.phase = "done"

    def _hops(self, a: int, b: int) -> int | None:
        if a == b:
            return 0
        key = (a, b)
        if key not in self._routes:
            path = self.plan.route(a, b) if a in self.plan.graph.nodes and b in self.plan.graph.nodes else None
            self._routes[key] = None if path is None else len(path) - 1
        return self._routes[key]

    def _set_plan(self, plan: BackhaulPlan, label: str) -> None:
        self.plan = plan
        self._routes = {}
        for r in [r for r in self.positions if r in self.s.fleet.spare_ids and r not in plan.relays]:
            del self.positions[r]
        for r, p in sorted(plan.relays.items()):
            self.positions[r] = p
        m = self.m
        m["relays_max"] = max(m["relays_max"], len(plan.relays))
        m["lambda_min"] = min(m["lambda_min"], plan.lam)
        m["beam_drops_max"] = max(m["beam_drops_max"], len(plan.beam_drops))
        m["radio_drops_max"] = max(m["radio_drops_max"], len(plan.radio_drops))
        m["channel_deactivations_max"] = max(m["channel_deactivations_max"], len(plan.channel_deactivations))
        m["conflicts_resolved_max"] = max(m["conflicts_resolved_max"], plan.conflicts_resolved)
        t = self._t_s()
        self.series["lambda"].append((t, label, plan.lam, plan.flows.total_routed, len(plan.graph.active_links()),
                                      len(plan.relays), len(plan.suspended)))
        for d in sorted(plan.flows.demands):
            self.series["demands"].append((t, label, d[0], d[1], plan.flows.demands[d], plan.flows.routed[d],
                                           plan.flows.satisfied(d)))

    def _traffic_on(self, ue: int) -> bool:
        on = True
        t = (self.now_ms - self.t0_ms) / 1000.0
        for when, state in self.ue_specs[ue].traffic:
            if when <= t:
                on = state
        return on

    def _snr(self, uav: int, ue: int) -> float:
        cfg = self.configs[uav]
        return link_snr(self.s.fleet.tx_power_dbm, self.s.fleet.antenna.oriented(cfg.yaw, cfg.tilt),
                        self.positions[uav], isotropic(self.world.ue_gain_dbi), self.ue_pos[ue],
                        self.world.access_freq_mhz, self.world)

    def _live_serving(self) -> list[int]:
        return [u for u in self.serving_ids if u in self.positions and self.core is not None
                and u in self.core.agents and u not in self.going_down]

    def _best_uav(self, ue: int, current: int | None) -> int | None:
        live = self._live_serving() if self.core is not None else [u for u in self.serving_ids if u in self.positions]
        if not live:
            return None
        snrs = {u: self._snr(u, ue) for u in live}
        best = max(live, key=lambda u: (snrs[u], -u))
        if snrs[best] < self.world.rate.demod_floor_db:
            return None
        if current in snrs and snrs[best] < snrs[current] + self.s.ran.handover_margin_db:
            return current
        return best

    def _anchor_of(self, ue: int) -> int | None:
        for a in self.core.agents.values():
            if ue in a.sessions and a.locate(ue) == a.agent_id:
                return a.agent_id
        return None

    def _settled(self, ue: int) -> bool:
        return not any(ue in a.transferring or ue in a.awaiting for a in self.core.agents.values())

    def _reassociate(self, ue: int) -> None:
        core = self.core
        cur = self.serving[ue]
        if cur is not None and cur not in self._live_serving():
            cur = None
        if cur is None:
            cur = self._anchor_of(ue)
            if cur is not None and cur in self.going_down:
                cur = None
        best = self._best_uav(ue, cur)
        if best is None:
            if self.serving[ue] is not None:
                self.m["coverage_losses"] += 1
            self.serving[ue] = None
            return
        if not self._settled(ue):
            self.deferred.add(ue)
            return
        self.deferred.discard(ue)
        anchor = self._anchor_of(ue)
        if best == anchor:
            self.serving[ue] = best
            return
        sess = core.agents[anchor].sessions[ue] if anchor is not None else None
        if anchor is None or anchor in self.going_down or anchor not in self._live_serving():
            core.attach(best, ue)
            self.m["reattach"] += 1
            if not self._traffic_on(ue):
                core.set_idle(best, ue)
        elif sess.state == "active":
            if core.handoff(anchor, best, ue) is None:
                core.attach(best, ue)
                self.m["handoff_fallback_attach"] += 1
        else:
            core.tracking_area_update(best, ue)
        self.serving[ue] = best

    def _on_core_message_delivery(self, p) -> None:
        if p["id"] in self.core.pending:
            self.core.deliver(p["id"])

    def _on_core_timer(self, p) -> None:
        if p["id"] in self.core.timers:
            self.core.fire(p["id"])

    def _on_ue_move(self, p) -> None:
        self.ue_pos[p["ue"]] = Position3D(p["x"], p["y"], p["z"])
        self._reassociate(p["ue"])

    def _on_traffic_tick(self, _p) -> None:
        core = self.core
        for ue in sorted(self.deferred):
            self._reassociate(ue)
        on = {ue: self._traffic_on(ue) for ue in self.ue_ids}
        for ue in self.ue_ids:
            anchor = self._anchor_of(ue)
            if not on[ue] and anchor is not None and self._settled(ue) \
                    and core.agents[anchor].sessions[ue].state == "active":
                core.set_idle(anchor, ue)
        n = len(self.ue_ids)
        for i, ue in enumerate(self.ue_ids):
            if not on[ue]:
                continue
            peer = self.ue_ids[(i + 1) % n]
            ingress = self.serving[peer]
            if ingress is None or self.serving[ue] is None or ingress not in core.agents:
                self.m["traffic_skipped_no_coverage"] += 1
                continue
            core.send_packet(ingress, ue, self.s.core.packet_bytes, src_ue=peer if peer != ue else None)
        nxt = self.now_ms + int(round(self.s.core.traffic_interval_s * 1000))
        if nxt <= self.end_ms:
            self.push(nxt, "traffic_tick")

    def _sample(self) -> None:
        t = self._t_s()
        for ue in self.ue_ids:
            u = self.serving[ue]
            snr = self._snr(u, ue) if u is not None and u in self.positions else None
            rate = snr_to_rate(snr, self.world.access_bandwidth_hz, self.world.rate) if snr is not None else 0.0
            self.series["ue"].append((t, ue, u, snr, rate, self.ue_pos[ue].x, self.ue_pos[ue].y))
        for u in sorted(self.controller.energy):
            self.series["energy"].append((t, u, self.controller.energy[u]))
        for u, pos in sorted(self.positions.items()):
            role = "serving" if u in self.serving_ids else "relay"
            self.series["uav"].append((t, u, role, pos.x, pos.y, pos.z))

    def _on_uav_energy_tick(self, _p) -> None:
        dt = self.s.updates.energy_tick_s
        for u in self.controller.tick_energy(dt):
            if u not in self.going_down and u in self.positions:
                self.push(self.now_ms, "uav_down", uav=u, planned=True, cause="energy", phase="start")
        self._sample()
        self._track_separation()
        nxt = self.now_ms + int(round(dt * 1000))
        if nxt <= self.end_ms:
            self.push(nxt, "uav_energy_tick")

    def _role(self, u: int) -> str | None:
        c = self.controller
        if u in c.positions:
            return "serving"
        if u in c.relays:
            return "relay"
        if u in c.spares:
            return "spare"
        return None

    def _replacement(self, u: int) -> int | None:
        others = [x for x in self._live_serving() if x != u]
        if not others:
            return None
        def rank(x):
            h = self._hops(u, x)
            return (h is None, h or 0, self.positions[u].distance(self.positions[x]), x)
        best = min(others, key=rank)
        return best if self._hops(u, best) is not None else None

    def _on_uav_down(self, p) -> None:
        u = p["uav"]
        if p["phase"] == "start":
            role = self._role(u)
            if role is None or u in self.going_down:
                return
            self.going_down[u] = {"role": role, "planned": p["planned"], "cause": p["cause"]}
            self.m["uav_down"] += 1
            if p["cause"] == "energy":
                self.m["uav_down_energy"] += 1
            if role == "serving" and p["planned"]:
                repl = self._replacement(u)
                if repl is not None:
                    self.core.migrate_all(u, repl)
            elif role in ("serving", "relay"):
                self._set_plan(_without_node(self.plan, u), f"failure:{u}")
                self.positions.pop(u, None)
                if role == "serving":
                    self.core.remove_agent(u)
                    for ue in self.ue_ids:
                        if self.serving[ue] == u:
                            self.serving[ue] = None
                            self._reassociate(ue)
            self.push(self.now_ms + self.s.core.reaction_ms, "uav_down", uav=u, planned=p["planned"],
                      cause=p["cause"], phase="commit")
            return
        info = self.going_down.pop(u)
        if info["role"] == "serving" and u in self.core.agents:
            self.core.remove_agent(u)
        self.positions.pop(u, None)
        self._set_plan(self.controller.reconfigure(ControllerEvent("uav_down", u)), f"reconfigure:{u}")
        for ue in self.ue_ids:
            if self.serving[ue] == u or self.serving[ue] is None:
                self.serving[ue] = None
                self._reassociate(ue)
        self.push(self.now_ms + int(round(self.s.fleet.outage_s * 1000)), "uav_restored", uav=u)

    def _on_uav_restored(self, p) -> None:
        u = p["uav"]
        if u not in self.controller.down:
            return
        role = self.controller.down[u]
        self.m["uav_restored"] += 1
        plan = self.controller.reconfigure(ControllerEvent("uav_restored", u))
        self._set_plan(plan, f"restored:{u}")
        if role == "serving":
            self.positions[u] = self.controller.positions[u]
            self.core.add_agent(u)  # after the plan, so the register resync has routes
        for ue in self.ue_ids:
            self._reassociate(ue)

    def _on_periodic_update(self, _p) -> None:
        self.update_round += 1
        targets: dict[int, UavRanConfig] = {}
        for u in self._live_serving():
            key = self._zone_key(u)
            if key == self.ran_keys.get(u):
                continue  # nothing observed has changed: the previous optimum stands
            self.m["ran_reruns"] += 1
            try:
                plan = self._plan_ran(u, self.update_round)
            except ZoneUncoverableError:
                self.m["uncoverable_updates"] += 1
                continue
            self.ran_plans[u] = plan
            self.ran_keys[u] = key
            if plan.config != self.configs[u] and adopt_new_optimum(
                    self._objective_at(plan, self.configs[u]), plan.objective, self.s.ran.hysteresis):
                targets[u] = plan.config
        if targets:
            res = resolve_conflict({u: c.position for u, c in targets.items()}, self.positions, self.s.fleet.msr_m)
            moved = {}
            for u, cfg in sorted(targets.items()):
                if u in res.held:
                    self.m["update_holds"] += 1
                    self.ran_keys[u] = None  # try again next period
                    continue
                self.positions[u] = cfg.position
                self.configs[u] = cfg
                self.controller.homes[u] = cfg.position
                moved[u] = cfg.position
                self.m["ran_moves"] += 1
            if moved:
                self.controller.update_positions(moved)
            self._track_separation()
        if not self.going_down:  # a failure awaiting its commit keeps the degraded plan
            before = self.plan.to_dict()
            plan = self.controller.reconfigure(ControllerEvent("periodic"))
            if plan.to_dict() != before:
                self.m["backhaul_changes"] += 1
                self._set_plan(plan, "periodic")
            else:
                self.plan = plan
                self._routes = {}
        for ue in self.ue_ids:
            self._reassociate(ue)
        nxt = self.now_ms + int(round(self.s.updates.period_s * 1000))
        if nxt <= self.end_ms:
            self.push(nxt, "periodic_update")

    # -- report ---------------------------------------------------------------------------

    def report(self) -> MetricsReport:
        s, m = self.s, self.m
        counters = self.core.counters()
        dropped = {r: counters.get(f"packets_dropped_{r}", 0) for r in DROP_REASONS}
        loc = {ue: err for p in self.ran_plans_bootstrap.values() for ue, err in p.loc_error_m.items()}
        errs = list(loc.values())
        fin = self.plan
        summary = {
            "scenario": s.name, "seed": s.seed, "tech": s.backhaul.tech, "coupling": s.backhaul.coupling,
            "timing": {
                "bootstrap_s": self.t0_ms / 1000.0,
                "measurement_flight_s": {u: t / 1000.0 for u, t in sorted(m["measurement_done_ms"].items())},
                "service_s": (self.end_ms - self.t0_ms) / 1000.0,
                "end_s": self.end_ms / 1000.0,
            },
            "bootstrap": {
                "zones": {u: len(z.cells) for u, z in sorted(self.zones.items())},
                "ran": {u: {"ues": list(p.ues), "airspace_points": p.airspace_size,
                            "ranging_waypoints": len(p.waypoints),
                            "rf_samples": p.rf_map.samples_used() if p.rf_map else 0,
                            "objective_bps": p.objective,
                            "candidates": len(p.candidates.configs) if p.candidates else 0,
                            "config": _config_dict(self.bootstrap_configs[u])}
                        for u, p in sorted(self.ran_plans_bootstrap.items())},
                "measurement_stops": m["measurement_stops"], "stops_skipped": m["stops_skipped"],
                "msr_holds": m["msr_holds"], "placement_unreached": m["placement_unreached"],
            },
            "localization": {
                "error_m": {ue: e for ue, e in sorted(loc.items())},
                "mean_error_m": float(np.mean(errs)) if errs else 0.0,
                "max_error_m": max(errs) if errs else 0.0,
                "failures": sum(p.loc_failures for p in self.ran_plans_bootstrap.values()),
            },
            "backhaul": {
                "lambda_initial": self.initial_plan.lam, "lambda_final": fin.lam, "lambda_min": m["lambda_min"],
                "relays_initial": sorted(self.initial_plan.relays), "relays_final": sorted(fin.relays),
                "initial": _plan_counts(self.initial_plan), "final": _plan_counts(fin),
                "max_over_run": {"beam_drops": m["beam_drops_max"], "radio_drops": m["radio_drops_max"],
                                 "channel_deactivations": m["channel_deactivations_max"],
                                 "conflicts_resolved": m["conflicts_resolved_max"], "relays": m["relays_max"]},
                "per_demand": [{"src": a, "dst": b, "demand_bps": fin.flows.demands[(a, b)],
                                "routed_bps": fin.flows.routed[(a, b)], "satisfied": fin.flows.satisfied((a, b))}
                               for a, b in sorted(fin.flows.demands)],
            },
            "core": counters,
            "packets": {"sent": counters.get("packets_sent", 0), "delivered": counters.get("packets_delivered", 0),
                        "dropped": dropped},
            "handoffs": {"started": counters.get("handoff_started", 0),
                         "completed": counters.get("handoff_completed", 0),
                         "aborted": counters.get("handoff_aborted_total", 0)},
            "uavs_deployed": {"serving": len(self.serving_ids), "relays_max": m["relays_max"],
                              "total_max": len(self.serving_ids) + m["relays_max"]},
            "reconfigurations": {"ran_moves": m["ran_moves"], "backhaul_changes": m["backhaul_changes"],
                                 "total": m["ran_moves"] + m["backhaul_changes"], "ran_reruns": m["ran_reruns"],
                                 "update_holds": m["update_holds"],
                                 "uncoverable_updates": m["uncoverable_updates"]},
            "events": {"uav_down": m["uav_down"], "uav_down_energy": m["uav_down_energy"],
                       "uav_restored": m["uav_restored"], "reattach": m["reattach"],
                       "handoff_fallback_attach": m["handoff_fallback_attach"],
                       "coverage_losses": m["coverage_losses"],
                       "traffic_skipped_no_coverage": m["traffic_skipped_no_coverage"]},
            "min_separation_m": m["min_separation_m"],
        }
        return MetricsReport(summary, self.series, list(self.core.trace), self.plan_document())

    def plan_document(self) -> dict:
        """Final plan plus the controller-input snapshot."""
        c = self.controller
        flows = self.plan.flows
        demand_io = {u: {"out_bps": sum(v for (a, _), v in flows.demands.items() if a == u),
                         "in_bps": sum(v for (_, b), v in flows.demands.items() if b == u)}
                     for u in sorted(self.plan.graph.nodes)}
        return {
            "version": 1,
            "backhaul": self.plan.to_dict(),
            "bootstrap_backhaul": self.initial_plan.to_dict(),
            "ran": {u: {"config": _config_dict(self.configs[u]),
                        "candidates": [_config_dict(x) for x in (p.candidates.configs if p.candidates else ())],
                        "candidate_objectives_bps": list(p.candidates.objectives) if p.candidates else [],
                        "epsilon": self.s.ran.epsilon}
                    for u, p in sorted(self.ran_plans.items()) if u in self.configs},
            "controller_input": {
                "demand": demand_io,
                "energy_j": {u: e for u, e in sorted(c.energy.items())},
                "down": {u: r for u, r in sorted(c.down.items())},
                "spares": list(c.spares),
            },
        }


def _config_dict(c: UavRanConfig) -> dict:
    return {"position": [c.position.x, c.position.y, c.position.z], "yaw": c.yaw, "tilt": c.tilt,
            "tx_power_dbm": c.tx_power_dbm}


def _plan_counts(plan: BackhaulPlan) -> dict:
    return {"nodes": len(plan.graph.nodes), "links": len(plan.graph.links),
            "active_links": len(plan.graph.active_links()), "relays": len(plan.relays),
            "beam_drops": len(plan.beam_drops), "radio_drops": len(plan.radio_drops),
            "channel_deactivations": len(plan.channel_deactivations),
            "conflicts_resolved": plan.conflicts_resolved, "lambda": plan.lam,
            "total_routed_bps": plan.flows.total_routed}


def run_bootstrap(scenario: Scenario) -> Simulation:
    sim = Simulation(scenario)
    sim.bootstrap()
    return sim


def run_updates(sim: Simulation) -> MetricsReport:
    sim.run_updates()
    return sim.report()


def run_scenario(scenario: Scenario) -> tuple[Simulation, MetricsReport]:
    sim = run_bootstrap(scenario)
    return sim, run_updates(sim)
