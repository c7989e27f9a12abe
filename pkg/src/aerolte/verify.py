"""Cross-check a finished run against the brute-force oracles.

Every check recomputes a result the simulation produced through an
independent route and lists the disagreements.  Checks that would be too
expensive on large instances run on a bounded sub-instance and say so.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backhaul import beam_alignment_error_deg, route_flows
from .core import check_trace, quiescence_violations
from .oracles import brute_force_locate, brute_force_placement, min_cut_value, same_channel_conflicts
from .ran import build_rf_map, optimize_placement
from .sim import Simulation

LOCATE_SLACK_M = 0.5
PLACEMENT_POINTS = 500
MAXFLOW_NODES = 8


@dataclass
class OracleCheck:
    name: str
    compared: int = 0
    skipped: int = 0
    mismatches: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "compared": self.compared, "skipped": self.skipped,
                "mismatches": self.mismatches}


def check_localization(sim: Simulation) -> OracleCheck:
    """Solver error is at most the 1 m grid-search error plus a small slack."""
    out = OracleCheck("localization")
    truth = {u.ue_id: u.position for u in sim.s.ues}
    for uav, plan in sorted(sim.ran_plans_bootstrap.items()):
        for ue, meas in sorted(plan.measurements.items()):
            oracle = brute_force_locate(meas, sim.world.extent).distance(truth[ue])
            got = plan.loc_error_m[ue]
            out.compared += 1
            if got > oracle + LOCATE_SLACK_M:
                out.mismatches.append(f"UAV {uav} UE {ue}: solver error {got:.3f} m > oracle {oracle:.3f} m + "
                                      f"{LOCATE_SLACK_M} m")
    return out


def check_placement(sim: Simulation) -> OracleCheck:
    """Full-budget placement over the points nearest each chosen spot equals the exhaustive argmax."""
    out = OracleCheck("placement")
    truth = {u.ue_id: u.position for u in sim.s.ues}
    for uav, plan in sorted(sim.ran_plans_bootstrap.items()):
        if plan.rf_map is None:
            out.skipped += 1
            continue
        pts = plan.rf_map.points
        xyz = np.array([p.position.xyz for p in pts])
        gap = np.linalg.norm(xyz - plan.config.position.xyz, axis=1)
        keep = sorted(np.argsort(gap, kind="stable")[:PLACEMENT_POINTS].tolist())
        subset = [pts[i] for i in keep]
        ues = [truth[u] for u in plan.ues]
        rf = build_rf_map(ues, subset, len(subset), sim.world, np.random.default_rng(0), caps=sim.caps)
        got = optimize_placement(rf, sim.s.ran.objective, sim.s.ran.min_rate_bps).point
        want = brute_force_placement(subset, ues, sim.caps.pattern, sim.caps.max_tx_power_dbm, sim.world,
                                     sim.s.ran.objective, sim.s.ran.min_rate_bps)
        out.compared += 1
        if got != want:
            out.mismatches.append(f"UAV {uav}: optimizer chose {got}, exhaustive search {want}")
    return out


def check_channels(sim: Simulation) -> OracleCheck:
    """No two interfering links share a channel, by an independent rescan."""
    out = OracleCheck("channels")
    plan = sim.plan
    if plan.tech.directional:
        out.skipped += 1
        return out
    channels = {l.key: l.channel for l in plan.graph.active_links()}
    reach = sim.s.backhaul.interference_factor * plan.tech.max_range_m
    out.compared = len(channels)
    for l1, l2 in same_channel_conflicts(plan.graph.nodes, channels, reach):
        out.mismatches.append(f"links {l1} and {l2} interfere on one channel")
    return out


def check_beams(sim: Simulation) -> OracleCheck:
    """Per-node beams fit the radio count and point along their links."""
    out = OracleCheck("beams")
    plan = sim.plan
    if not plan.tech.directional:
        out.skipped += 1
        return out
    radios = sim.s.fleet.radios
    used: dict[int, int] = {}
    for l in plan.graph.active_links():
        a, b = plan.graph.nodes[l.a], plan.graph.nodes[l.b]
        for n in l.key:
            used[n] = used.get(n, 0) + 1
        out.compared += 1
        for beam, frm, to in ((l.beams[0], a, b), (l.beams[1], b, a)):
            err = beam_alignment_error_deg(beam, frm, to)
            if err > plan.tech.beamwidth_deg / 2:
                out.mismatches.append(f"link {l.key}: beam off by {err:.3f} deg")
    for n, k in sorted(used.items()):
        if k > radios:
            out.mismatches.append(f"node {n} steers {k} beams with {radios} radios")
    return out


def check_max_flow(sim: Simulation) -> OracleCheck:
    """Single-demand routing equals the minimum cut on the active topology."""
    out = OracleCheck("max_flow")
    plan = sim.plan
    nodes = sorted(plan.graph.nodes)
    capacity = {l.key: int(l.capacity_bps) for l in plan.graph.active_links()}
    for k, load in sorted(plan.flows.link_load.items()):
        if load > capacity.get(k, 0):
            out.mismatches.append(f"link {k} carries {load} bit/s over capacity {capacity.get(k, 0)}")
    if len(nodes) > MAXFLOW_NODES:
        out.skipped = len(plan.flows.demands)
        return out
    flood = max(1, sum(capacity.values()))
    for s, d in sorted(plan.flows.demands):
        routed = route_flows(capacity, {(s, d): flood}).routed[(s, d)]
        cut = min_cut_value(nodes, capacity, s, d)
        out.compared += 1
        if routed != cut:
            out.mismatches.append(f"demand {s}->{d}: routed {routed} != min cut {cut}")
    return out


def check_core(sim: Simulation) -> OracleCheck:
    """The message trace is well formed and the agents agree at quiescence."""
    out = OracleCheck("core")
    sim.core.run_until_quiescent()
    out.compared = len(sim.core.trace)
    out.mismatches += check_trace(sim.core.trace)
    out.mismatches += quiescence_violations(sim.core, sim.ue_ids)
    return out


def check_separation(sim: Simulation) -> OracleCheck:
    out = OracleCheck("separation")
    got = sim.m["min_separation_m"]
    out.compared = 1
    if math.isfinite(got) and got < sim.s.fleet.msr_m:
        out.mismatches.append(f"closest committed pair {got:.3f} m < msr {sim.s.fleet.msr_m} m")
    return out


CHECKS = (check_localization, check_placement, check_channels, check_beams, check_max_flow, check_core,
          check_separation)


def verify_run(sim: Simulation) -> dict:
    checks = [c(sim) for c in CHECKS]
    return {"version": 1, "passed": all(c.passed for c in checks), "checks": [c.to_dict() for c in checks]}
