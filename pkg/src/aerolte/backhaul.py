"""Inter-UAV mesh backhaul planning.

The controller builds candidate links from UAV positions, provisions them
(channels for omni radios, steered beams for directional ones), routes
integer bit/s flows for the max-concurrent-flow objective and adds relay
UAVs from a spare pool when demands are unmet.
"""
from __future__ import annotations

import copy
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .world import (
    AntennaPattern,
    Position3D,
    WorldModel,
    boresight_vector,
    direction_angles,
    isotropic,
    link_snr,
    snr_to_rate,
    thermal_noise_dbm,
)

Link = tuple[int, int]
Demand = tuple[int, int]

INTERFERENCE_FACTOR = 1.5
DEFAULT_RADIOS = 2
MIN_LEVEL_STEP = 2.0 ** -10


class UnknownUavError(KeyError):
    pass


@dataclass(frozen=True)
class BackhaulTech:
    mode: str
    freq_mhz: float
    max_range_m: float
    channel_count: int
    channel_bandwidth_hz: float
    directional: bool
    beamwidth_deg: float = 360.0
    antenna_gain_dbi: float = 0.0  # per link end
    tx_power_dbm: float = 20.0
    noise_figure_db: float = 7.0
    data_only: bool = False

    @property
    def noise_floor_dbm(self) -> float:
        return thermal_noise_dbm(self.channel_bandwidth_hz, self.noise_figure_db)

    def pattern(self, yaw: float = 0.0, tilt: float = 0.0) -> AntennaPattern:
        if not self.directional:
            return isotropic(self.antenna_gain_dbi)
        return AntennaPattern(self.antenna_gain_dbi, self.beamwidth_deg, -10.0, yaw, tilt)


TECH_PROFILES: dict[str, BackhaulTech] = {
    "sub6-wifi": BackhaulTech("sub6-wifi", 5800.0, 1000.0, 3, 20e6, False, antenna_gain_dbi=3.0),
    "sub6-lte": BackhaulTech("sub6-lte", 3500.0, 1000.0, 3, 10e6, False, antenna_gain_dbi=3.0),
    "mmwave-60": BackhaulTech("mmwave-60", 60000.0, 2000.0, 1, 2.16e9, True, beamwidth_deg=10.0,
                              antenna_gain_dbi=36.0, noise_figure_db=5.0),
    # comparison rows only; no planning support
    "mmwave-other": BackhaulTech("mmwave-other", 28000.0, 3000.0, 1, 1e9, True, beamwidth_deg=10.0,
                                 antenna_gain_dbi=30.0, data_only=True),
    "fso": BackhaulTech("fso", 2e8, 5000.0, 1, 10e9, True, beamwidth_deg=0.1, antenna_gain_dbi=0.0, data_only=True),
}
PLANNABLE_TECHS = tuple(k for k, v in TECH_PROFILES.items() if not v.data_only)


def get_tech(mode: str) -> BackhaulTech:
    try:
        tech = TECH_PROFILES[mode]
    except KeyError:
        raise ValueError(f"unknown backhaul tech {mode!r}; expected one of {PLANNABLE_TECHS}") from None
    if tech.data_only:
        raise ValueError(f"backhaul tech {mode!r} is a comparison profile only")
    return tech


@dataclass
class BackhaulLink:
    a: int
    b: int
    distance_m: float
    snr_db: float
    capacity_bps: int
    channel: int | None = None
    beams: tuple[tuple[float, float], tuple[float, float]] | None = None  # (yaw, tilt) at a, at b
    active: bool = True

    @property
    def key(self) -> Link:
        return (self.a, self.b)


@dataclass
class LinkGraph:
    nodes: dict[int, Position3D]
    links: dict[Link, BackhaulLink]
    tech: BackhaulTech

    def active_links(self) -> list[BackhaulLink]:
        return [l for k, l in sorted(self.links.items()) if l.active]

    def capacities(self, active_only: bool = True) -> dict[Link, int]:
        return {k: l.capacity_bps for k, l in sorted(self.links.items()) if l.active or not active_only}

    def components(self, active_only: bool = True) -> list[frozenset[int]]:
        return connected_components(self.nodes, self.capacities(active_only))

    @property
    def connected(self) -> bool:
        return len(self.components(active_only=False)) <= 1


def link_key(u: int, v: int) -> Link:
    return (u, v) if u < v else (v, u)


def connected_components(nodes: Iterable[int], edges: Iterable[Link]) -> list[frozenset[int]]:
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    for u, v in edges:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    seen: set[int] = set()
    comps = []
    for n in sorted(adj):
        if n in seen:
            continue
        comp, queue = {n}, deque([n])
        while queue:
            for m in adj[queue.popleft()]:
                if m not in comp:
                    comp.add(m)
                    queue.append(m)
        seen |= comp
        comps.append(frozenset(comp))
    return comps


def link_budget_snr(a: Position3D, b: Position3D, tech: BackhaulTech, world: WorldModel) -> float:
    """SNR of a backhaul hop; directional ends are steered onto each other."""
    yaw_a, tilt_a = direction_angles(a, b)
    yaw_b, tilt_b = direction_angles(b, a)
    return link_snr(tech.tx_power_dbm, tech.pattern(yaw_a, tilt_a), a, tech.pattern(yaw_b, tilt_b), b,
                    tech.freq_mhz, world, noise_floor_dbm=tech.noise_floor_dbm)


def build_link_graph(nodes: Mapping[int, Position3D], tech: BackhaulTech, world: WorldModel) -> LinkGraph:
    """Candidate edge for every pair within range and with positive capacity."""
    nodes = dict(sorted(nodes.items()))
    links = {}
    for u, v in itertools.combinations(nodes, 2):
        d = nodes[u].distance(nodes[v])
        if d > tech.max_range_m or d == 0:
            continue
        snr = link_budget_snr(nodes[u], nodes[v], tech, world)
        cap = int(math.floor(snr_to_rate(snr, tech.channel_bandwidth_hz, world.rate)))
        if cap > 0:
            links[(u, v)] = BackhaulLink(u, v, d, snr, cap)
    return LinkGraph(nodes, links, tech)


# -- demand pressure and provisioning --------------------------------------------

def _adjacency(nodes: Iterable[int], edges: Iterable[Link]) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    for n in adj:
        adj[n].sort()
    return adj


def min_hop_path(adj: Mapping[int, list[int]], src: int, dst: int) -> list[int] | None:
    if src not in adj or dst not in adj:
        return None
    prev = {src: src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for v in adj[u]:
            if v not in prev:
                prev[v] = u
                queue.append(v)
    if dst not in prev:
        return None
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


def demand_pressure(graph: LinkGraph, demands: Mapping[Demand, int]) -> dict[Link, int]:
    """Demand carried by each candidate link under min-hop routing."""
    adj = _adjacency(graph.nodes, graph.links)
    pressure = {k: 0 for k in graph.links}
    for (s, d), amount in sorted(demands.items()):
        path = min_hop_path(adj, s, d)
        if path:
            for u, v in zip(path, path[1:]):
                pressure[link_key(u, v)] += amount
    return pressure


def _priority(graph: LinkGraph, pressure: Mapping[Link, int]) -> list[Link]:
    return sorted(graph.links, key=lambda k: (-pressure.get(k, 0), -graph.links[k].capacity_bps, k))


def enforce_radio_budget(graph: LinkGraph, pressure: Mapping[Link, int],
                         radios: Mapping[int, int] | int = DEFAULT_RADIOS) -> list[Link]:
    """Keep links in priority order while both ends have a free radio; return the dropped ones."""
    budget = {n: (radios if isinstance(radios, int) else radios.get(n, DEFAULT_RADIOS)) for n in graph.nodes}
    used = {n: 0 for n in graph.nodes}
    dropped = []
    for k in _priority(graph, pressure):
        link = graph.links[k]
        if not link.active:
            continue
        if used[link.a] < budget[link.a] and used[link.b] < budget[link.b]:
            used[link.a] += 1
            used[link.b] += 1
        else:
            link.active = False
            dropped.append(k)
    return dropped


def links_conflict(graph: LinkGraph, k1: Link, k2: Link, factor: float = INTERFERENCE_FACTOR) -> bool:
    """Protocol interference model: shared endpoint or any endpoints within factor x range."""
    if set(k1) & set(k2):
        return True
    reach = factor * graph.tech.max_range_m
    return any(graph.nodes[x].distance(graph.nodes[y]) <= reach for x in k1 for y in k2)


def conflict_edges(graph: LinkGraph, links: Sequence[Link], factor: float = INTERFERENCE_FACTOR) -> list[tuple[int, int]]:
    return [(i, j) for i, j in itertools.combinations(range(len(links)), 2)
            if links_conflict(graph, links[i], links[j], factor)]


def greedy_coloring(n: int, edges: Iterable[tuple[int, int]], order: Sequence[int],
                    limit: int | None = None) -> list[int]:
    """Smallest-free-colour greedy in ``order``; -1 for vertices that exceed ``limit``."""
    adj = [set() for _ in range(n)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    colors = [-1] * n
    for v in order:
        used = {colors[u] for u in adj[v]}
        c = next(c for c in itertools.count() if c not in used)
        if limit is None or c < limit:
            colors[v] = c
    return colors


def iterated_greedy(n: int, edges: list[tuple[int, int]], order: Sequence[int], rounds: int = 8) -> list[int]:
    """Greedy colouring refined by re-running greedy over colour classes.

    Re-colouring class by class never uses more colours than before, and
    reversing the class order often frees one.
    """
    best = greedy_coloring(n, edges, order)
    colors = best
    for r in range(rounds):
        k = max(colors, default=-1) + 1
        classes = [[v for v in order if colors[v] == c] for c in range(k)]
        if r % 2 == 0:
            classes.reverse()
        else:
            classes.sort(key=len, reverse=True)
        colors = greedy_coloring(n, edges, [v for cls in classes for v in cls])
        if max(colors, default=-1) < max(best, default=-1):
            best = colors
    return best


@dataclass(frozen=True)
class ChannelAssignment:
    channels: dict[Link, int]
    deactivated: tuple[Link, ...]
    conflicts_resolved: int  # conflicting pairs of active links kept apart by channel choice


def assign_channels(graph: LinkGraph, pressure: Mapping[Link, int] | None = None,
                    factor: float = INTERFERENCE_FACTOR) -> ChannelAssignment:
    """Greedy conflict-graph colouring of the active links with the tech's channels.

    Links are taken by descending demand pressure (ties by id).  If an
    unconstrained colouring fits the channel count it is used as is;
    otherwise links that find no free channel are deactivated.
    """
    if graph.tech.directional:
        raise ValueError("channel assignment applies to omni-directional techs")
    pressure = pressure or {}
    links = [l.key for l in graph.active_links()]
    order_keys = sorted(range(len(links)), key=lambda i: (-pressure.get(links[i], 0), links[i]))
    edges = conflict_edges(graph, links, factor)
    colors = iterated_greedy(len(links), edges, order_keys)
    if max(colors, default=-1) >= graph.tech.channel_count:
        colors = greedy_coloring(len(links), edges, order_keys, graph.tech.channel_count)
    deactivated = []
    channels = {}
    for k, c in zip(links, colors):
        link = graph.links[k]
        if c < 0:
            link.active = False
            link.channel = None
            deactivated.append(k)
        else:
            link.channel = c
            channels[k] = c
    resolved = sum(1 for i, j in edges if colors[i] >= 0 and colors[j] >= 0)
    return ChannelAssignment(channels, tuple(deactivated), resolved)


@dataclass(frozen=True)
class BeamAssignment:
    beams: dict[Link, tuple[tuple[float, float], tuple[float, float]]]
    dropped: tuple[Link, ...]


def select_beams(graph: LinkGraph, pressure: Mapping[Link, int] | None = None,
                 radios: Mapping[int, int] | int = DEFAULT_RADIOS) -> BeamAssignment:
    """Steer one radio per link end along the connecting segment.

    Every link shares the one channel.  Links beyond a UAV's radio count are
    infeasible and dropped lowest demand first.
    """
    if not graph.tech.directional:
        raise ValueError("beam selection applies to directional techs")
    dropped = enforce_radio_budget(graph, pressure or {}, radios)
    beams = {}
    for link in graph.active_links():
        a, b = graph.nodes[link.a], graph.nodes[link.b]
        link.beams = (direction_angles(a, b), direction_angles(b, a))
        link.channel = 0
        beams[link.key] = link.beams
    return BeamAssignment(beams, tuple(dropped))


def beam_alignment_error_deg(beam: tuple[float, float], frm: Position3D, to: Position3D) -> float:
    axis = boresight_vector(*beam)
    v = to.xyz - frm.xyz
    c = float(axis @ v / np.linalg.norm(v))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


# -- max-concurrent-flow routing ---------------------------------------------------

@dataclass
class FlowAssignment:
    demands: dict[Demand, int]
    routed: dict[Demand, int]
    paths: dict[Demand, list[tuple[tuple[int, ...], int]]]
    link_load: dict[Link, int]

    def satisfied(self, demand: Demand) -> float:
        want = self.demands[demand]
        return 1.0 if want == 0 else self.routed[demand] / want

    @property
    def lam(self) -> float:
        return min((self.satisfied(d) for d in self.demands), default=1.0)

    @property
    def total_routed(self) -> int:
        return sum(self.routed.values())


class _Router:
    def __init__(self, capacities: Mapping[Link, int]):
        self.cap = {link_key(*k): int(c) for k, c in capacities.items() if c > 0}
        self.adj = _adjacency({n for k in self.cap for n in k}, self.cap)
        self.flow: dict[Demand, dict[Link, int]] = {}
        self.usage = {k: 0 for k in self.cap}

    def residual(self, k: Demand, u: int, v: int) -> int:
        key = link_key(u, v)
        f = self.flow[k].get(key, 0)
        signed = f if u < v else -f
        other = self.usage[key] - abs(f)
        return self.cap[key] - other - signed

    def push(self, k: Demand, u: int, v: int, amount: int) -> None:
        key = link_key(u, v)
        f = self.flow[k].get(key, 0)
        nf = f + (amount if u < v else -amount)
        self.usage[key] += abs(nf) - abs(f)
        self.flow[k][key] = nf

    def augment(self, k: Demand, want: int) -> int:
        """Edmonds-Karp augmentation for commodity ``k`` up to ``want``."""
        s, t = k
        self.flow.setdefault(k, {})
        if s not in self.adj or t not in self.adj:
            return 0
        sent = 0
        while sent < want:
            prev = {s: None}
            queue = deque([s])
            while queue and t not in prev:
                u = queue.popleft()
                for v in self.adj[u]:
                    if v not in prev and self.residual(k, u, v) > 0:
                        prev[v] = u
                        queue.append(v)
            if t not in prev:
                break
            path = [t]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            path.reverse()
            amount = min(want - sent, min(self.residual(k, u, v) for u, v in zip(path, path[1:])))
            for u, v in zip(path, path[1:]):
                self.push(k, u, v, amount)
            sent += amount
        return sent

    def decompose(self, k: Demand) -> list[tuple[tuple[int, ...], int]]:
        """Split commodity ``k``'s net flow into s-t paths; leftover circulation is dropped."""
        s, t = k
        arcs: dict[tuple[int, int], int] = {}
        for (u, v), f in self.flow.get(k, {}).items():
            if f > 0:
                arcs[(u, v)] = f
            elif f < 0:
                arcs[(v, u)] = -f
        paths = []
        while True:
            out: dict[int, list[int]] = {}
            for (u, v), f in sorted(arcs.items()):
                if f > 0:
                    out.setdefault(u, []).append(v)
            prev = {s: None}
            queue = deque([s])
            while queue and t not in prev:
                u = queue.popleft()
                for v in out.get(u, []):
                    if v not in prev:
                        prev[v] = u
                        queue.append(v)
            if t not in prev:
                break
            path = [t]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            path.reverse()
            amount = min(arcs[(u, v)] for u, v in zip(path, path[1:]))
            for u, v in zip(path, path[1:]):
                arcs[(u, v)] -= amount
            paths.append((tuple(path), amount))
        # rebuild the commodity from its paths so circulations free their capacity
        for key, f in self.flow.get(k, {}).items():
            self.usage[key] -= abs(f)
        self.flow[k] = {}
        for path, amount in paths:
            for u, v in zip(path, path[1:]):
                self.push(k, u, v, amount)
        return paths


def route_flows(capacities: Mapping[Link, int], demands: Mapping[Demand, int]) -> FlowAssignment:
    """Max-concurrent-flow heuristic over an undirected capacitated graph.

    All demands are raised together to a common satisfied fraction in
    halving steps (each level is routed by shortest augmenting paths and
    rolled back if any demand cannot reach it); leftover capacity is then
    filled demand by demand.  Flows are integers, so conservation and
    capacity hold exactly.
    """
    for (s, t), amount in demands.items():
        if s == t:
            raise ValueError(f"demand {s}->{t} has identical endpoints")
        if amount < 0:
            raise ValueError("demands must be >= 0")
    order = sorted(demands)
    router = _Router(capacities)
    for k in order:
        router.flow[k] = {}
    routed = {k: 0 for k in order}

    lam, step = 0.0, 0.25
    while step >= MIN_LEVEL_STEP and lam < 1.0:
        target = min(1.0, lam + step)
        saved = (copy.deepcopy(router.flow), dict(router.usage), dict(routed))
        ok = True
        for k in order:
            need = int(math.floor(target * demands[k])) - routed[k]
            if need > 0:
                got = router.augment(k, need)
                routed[k] += got
                if got < need:
                    ok = False
                    break
        if ok:
            lam = target
        else:
            router.flow, router.usage, routed = saved
            step /= 2
    for k in order:
        if routed[k] < demands[k]:
            routed[k] += router.augment(k, demands[k] - routed[k])

    paths = {k: router.decompose(k) for k in order}
    routed = {k: sum(a for _, a in paths[k]) for k in order}
    load = {k: u for k, u in sorted(router.usage.items()) if u}
    return FlowAssignment(dict(demands), routed, paths, load)


# -- full plans -------------------------------------------------------------------

@dataclass
class BackhaulPlan:
    graph: LinkGraph
    flows: FlowAssignment
    relays: dict[int, Position3D] = field(default_factory=dict)
    radio_drops: tuple[Link, ...] = ()
    beam_drops: tuple[Link, ...] = ()
    channel_deactivations: tuple[Link, ...] = ()
    conflicts_resolved: int = 0
    suspended: tuple[Demand, ...] = ()

    @property
    def lam(self) -> float:
        return self.flows.lam

    @property
    def tech(self) -> BackhaulTech:
        return self.graph.tech

    def route(self, src: int, dst: int) -> list[int] | None:
        """Hop-by-hop path between two nodes over the active links (min-hop)."""
        return min_hop_path(_adjacency(self.graph.nodes, [l.key for l in self.graph.active_links()]), src, dst)

    def to_dict(self) -> dict:
        return {
            "tech": self.tech.mode,
            "lambda": round(self.lam, 9),
            "nodes": {str(n): list(p.xyz.round(6)) for n, p in self.graph.nodes.items()},
            "relays": sorted(self.relays),
            "links": [
                {"a": l.a, "b": l.b, "active": l.active, "capacity_bps": l.capacity_bps,
                 "channel": l.channel, "snr_db": round(l.snr_db, 6),
                 "beams": None if l.beams is None else [[round(x, 6) for x in b] for b in l.beams]}
                for _, l in sorted(self.graph.links.items())
            ],
            "flows": [
                {"src": s, "dst": d, "demand_bps": self.flows.demands[(s, d)], "routed_bps": self.flows.routed[(s, d)],
                 "paths": [{"hops": list(p), "bps": a} for p, a in self.flows.paths[(s, d)]]}
                for s, d in sorted(self.flows.demands)
            ],
            "radio_drops": [list(k) for k in self.radio_drops],
            "beam_drops": [list(k) for k in self.beam_drops],
            "channel_deactivations": [list(k) for k in self.channel_deactivations],
            "suspended_demands": [list(k) for k in self.suspended],
        }


def plan_backhaul(nodes: Mapping[int, Position3D], demands: Mapping[Demand, int], tech: BackhaulTech,
                  world: WorldModel, radios: Mapping[int, int] | int = DEFAULT_RADIOS,
                  interference_factor: float = INTERFERENCE_FACTOR) -> BackhaulPlan:
    graph = build_link_graph(nodes, tech, world)
    live = {k: v for k, v in demands.items() if k[0] in graph.nodes and k[1] in graph.nodes}
    suspended = tuple(sorted(set(demands) - set(live)))
    pressure = demand_pressure(graph, live)
    if tech.directional:
        beams = select_beams(graph, pressure, radios)
        radio_drops, beam_drops, deact, resolved = (), beams.dropped, (), 0
    else:
        radio_drops = tuple(enforce_radio_budget(graph, pressure, radios))
        ca = assign_channels(graph, pressure, interference_factor)
        beam_drops, deact, resolved = (), ca.deactivated, ca.conflicts_resolved
    flows = route_flows(graph.capacities(), live)
    return BackhaulPlan(graph, flows, {}, radio_drops, beam_drops, deact, resolved, suspended)


def _gap(plan: BackhaulPlan, demand: Demand) -> tuple[Position3D, Position3D]:
    """Node pair whose midpoint is the best relay site for an unmet demand."""
    nodes = plan.graph.nodes
    comps = plan.graph.components()
    side = {n: i for i, c in enumerate(comps) for n in c}
    s, t = demand
    if side[s] != side[t]:
        pairs = [(nodes[a].distance(nodes[b]), a, b) for a in sorted(comps[side[s]]) for b in sorted(comps[side[t]])]
        _, a, b = min(pairs)
        return nodes[a], nodes[b]
    # connected but short of capacity: split the weakest hop on the min-hop route
    path = plan.route(s, t) or [s, t]
    hops = [plan.graph.links[link_key(u, v)] for u, v in zip(path, path[1:])]
    weakest = min(hops, key=lambda l: (l.capacity_bps, l.key))
    return nodes[weakest.a], nodes[weakest.b]


def relay_site(a: Position3D, b: Position3D, world: WorldModel) -> Position3D:
    return Position3D((a.x + b.x) / 2, (a.y + b.y) / 2, world.altitude_ceiling_m)


def augment_relays(nodes: Mapping[int, Position3D], demands: Mapping[Demand, int], tech: BackhaulTech,
                   spare_ids: Sequence[int], world: WorldModel, radios: Mapping[int, int] | int = DEFAULT_RADIOS,
                   interference_factor: float = INTERFERENCE_FACTOR,
                   relays: Mapping[int, Position3D] | None = None) -> BackhaulPlan:
    """Greedily deploy spares as relays while demands are unmet.

    Each round considers the unmet demands worst first and places a relay at
    the midpoint (at the altitude ceiling) of that demand's gap.  A relay is
    kept only if it strictly increases total routed flow; the search stops
    when every demand is met, spares run out or no candidate helps.
    """
    relays = dict(relays or {})
    spares = [s for s in spare_ids if s not in relays and s not in nodes]

    def plan_for(extra: Mapping[int, Position3D]) -> BackhaulPlan:
        p = plan_backhaul({**nodes, **extra}, demands, tech, world, radios, interference_factor)
        p.relays = dict(extra)
        return p

    plan = plan_for(relays)
    while spares and plan.lam < 1.0:
        unmet = sorted((d for d in plan.flows.demands if plan.flows.satisfied(d) < 1.0),
                       key=lambda d: (plan.flows.satisfied(d), d))
        improved = None
        new_id = spares[0]
        for demand in unmet:
            site = relay_site(*_gap(plan, demand), world)
            if any(site == p for p in {**nodes, **relays}.values()):
                continue
            trial = plan_for({**relays, new_id: site})
            if trial.flows.total_routed > plan.flows.total_routed:
                improved = trial
                break
        if improved is None:
            break
        relays[spares.pop(0)] = improved.relays[new_id]
        plan = improved
    return plan


# -- controller: churn, energy and coupling -----------------------------------------

@dataclass(frozen=True)
class EnergyModel:
    capacity_j: float = 400_000.0
    hover_w: float = 200.0
    per_bit_j: float = 5e-9
    threshold_j: float = 40_000.0


@dataclass
class ControllerEvent:
    kind: str  # uav_down | uav_restored | periodic
    uav: int | None = None


class BackhaulController:
    """Centralised backhaul controller working on snapshots of fleet state."""

    def __init__(self, positions: Mapping[int, Position3D], demands: Mapping[Demand, int], tech: BackhaulTech,
                 world: WorldModel, spare_ids: Sequence[int] = (), radios: Mapping[int, int] | int = DEFAULT_RADIOS,
                 interference_factor: float = INTERFERENCE_FACTOR, energy: EnergyModel = EnergyModel(),
                 fixed_nodes: Mapping[int, Position3D] | None = None):
        self.positions = dict(sorted(positions.items()))
        self.homes = dict(self.positions)  # where a serving UAV returns to after an outage
        self.fixed = dict(fixed_nodes or {})  # e.g. a ground gateway
        self.demands = dict(demands)
        self.tech = tech
        self.world = world
        self.spares = sorted(spare_ids)
        self.radios = radios
        self.interference_factor = interference_factor
        self.energy_model = energy
        self.relays: dict[int, Position3D] = {}
        self.down: dict[int, str] = {}  # id -> "serving" | "relay"
        self.energy = {u: energy.capacity_j for u in list(self.positions) + list(self.spares)}
        self.plan: BackhaulPlan | None = None

    def _live_demands(self) -> dict[Demand, int]:
        live = set(self.positions) | set(self.fixed)
        return {k: v for k, v in self.demands.items() if k[0] in live and k[1] in live}

    def _nodes(self) -> dict[int, Position3D]:
        return {**self.positions, **self.fixed}

    def replan(self) -> BackhaulPlan:
        plan = augment_relays(self._nodes(), self._live_demands(), self.tech, self.spares, self.world, self.radios,
                              self.interference_factor, relays=self.relays)
        for r in plan.relays:
            if r in self.spares:
                self.spares.remove(r)
        self.relays = dict(plan.relays)
        plan = self._prune(plan)
        plan.suspended = tuple(sorted(set(self.demands) - set(self._live_demands())))
        self.plan = plan
        return plan

    def _prune(self, plan: BackhaulPlan) -> BackhaulPlan:
        """Return relays to the spare pool when removing them costs nothing."""
        for r in sorted(self.relays, reverse=True):
            rest = {k: v for k, v in self.relays.items() if k != r}
            trial = plan_backhaul({**self._nodes(), **rest}, self._live_demands(), self.tech, self.world,
                                  self.radios, self.interference_factor)
            if trial.flows.total_routed >= plan.flows.total_routed and trial.lam >= plan.lam:
                trial.relays = rest
                self.relays = rest
                self.spares = sorted(self.spares + [r])
                plan = trial
        return plan

    def update_positions(self, positions: Mapping[int, Position3D]) -> None:
        for u, p in positions.items():
            if u not in self.positions:
                raise UnknownUavError(u)
            self.positions[u] = p

    def reconfigure(self, event: ControllerEvent) -> BackhaulPlan:
        if event.kind == "periodic":
            return self.replan()
        u = event.uav
        if event.kind == "uav_down":
            if u in self.positions:
                del self.positions[u]
                self.down[u] = "serving"
            elif u in self.relays:
                del self.relays[u]
                self.down[u] = "relay"
            elif u in self.spares:
                self.spares.remove(u)
                self.down[u] = "spare"
            else:
                raise UnknownUavError(u)
            return self.replan()
        if event.kind == "uav_restored":
            if u not in self.down:
                raise UnknownUavError(u)
            role = self.down.pop(u)
            self.energy[u] = self.energy_model.capacity_j
            if role != "serving":
                self.spares = sorted(self.spares + [u])
                return self.replan()
            before = self.plan
            saved = (dict(self.positions), dict(self.relays), list(self.spares))
            self.positions[u] = self._restore_position(u)
            new = self.replan()
            if before is not None and not _no_worse(new, before):
                # keep the pre-restore routing; the returning UAV waits for the next periodic update
                self.positions, self.relays, self.spares = saved
                self.positions[u] = self._restore_position(u)
                before.suspended = tuple(sorted(set(self.demands) - set(before.flows.demands)))
                self.plan = before
                return before
            return new
        raise ValueError(f"unknown controller event {event.kind!r}")

    def _restore_position(self, u: int) -> Position3D:
        if u not in self.homes:
            raise UnknownUavError(u)
        return self.homes[u]

    def relayed_bits_per_s(self) -> dict[int, int]:
        """Traffic each node forwards for others (interior hops of routed paths)."""
        through: dict[int, int] = {}
        if self.plan is None:
            return through
        for paths in self.plan.flows.paths.values():
            for path, amount in paths:
                for n in path[1:-1]:
                    through[n] = through.get(n, 0) + amount
        return through

    def tick_energy(self, dt_s: float) -> list[int]:
        """Drain hover and relaying energy; return airborne UAVs that hit the threshold."""
        m = self.energy_model
        relayed = self.relayed_bits_per_s()
        exhausted = []
        for u in sorted(set(self.positions) | set(self.relays)):
            cost = m.hover_w * dt_s + m.per_bit_j * relayed.get(u, 0) * dt_s
            self.energy[u] = max(0.0, self.energy[u] - cost)
            if self.energy[u] <= m.threshold_j:
                exhausted.append(u)
        return exhausted


def _no_worse(new: BackhaulPlan, old: BackhaulPlan) -> bool:
    common = [d for d in old.flows.demands if d in new.flows.demands]
    lam_new = min((new.flows.satisfied(d) for d in common), default=1.0)
    lam_old = min((old.flows.satisfied(d) for d in common), default=1.0)
    total_new = sum(new.flows.routed[d] for d in common)
    total_old = sum(old.flows.routed[d] for d in common)
    return lam_new >= lam_old and total_new >= total_old


def choose_configs(candidates: Mapping[int, Sequence[Position3D]], demands: Mapping[Demand, int],
                   tech: BackhaulTech, world: WorldModel, spare_ids: Sequence[int] = (),
                   radios: Mapping[int, int] | int = DEFAULT_RADIOS, rounds: int = 3,
                   fixed_nodes: Mapping[int, Position3D] | None = None) -> dict[int, int]:
    """Coordinate ascent over each UAV's acceptable RAN positions to raise backhaul lambda.

    ``candidates[u][0]`` must be the RAN optimum; returns the chosen index
    per UAV.  Ties keep the earlier (better-for-RAN) candidate.
    """
    choice = {u: 0 for u in sorted(candidates)}
    fixed = dict(fixed_nodes or {})

    def score(ch: Mapping[int, int]) -> tuple[float, int]:
        nodes = {**{u: candidates[u][i] for u, i in ch.items()}, **fixed}
        plan = augment_relays(nodes, demands, tech, spare_ids, world, radios)
        return plan.lam, plan.flows.total_routed

    best = score(choice)
    for _ in range(rounds):
        changed = False
        for u in sorted(candidates):
            for i in range(len(candidates[u])):
                if i == choice[u]:
                    continue
                trial = {**choice, u: i}
                s = score(trial)
                if s > best:
                    best, choice, changed = s, trial, True
        if not changed:
            break
    return choice
