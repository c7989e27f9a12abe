"""Brute-force reference solvers.

Each function here solves the same problem as a production routine by
exhaustive enumeration, sharing no code path with it beyond the scalar
models in `world`.  They back the test-suite and ``--verify-oracles``.
"""
from __future__ import annotations

import itertools
from typing import Hashable, Iterable, Sequence

import numpy as np

from .localization import RangeMeasurement
from .world import AntennaPattern, Position3D, WorldModel, isotropic, link_snr, snr_to_rate


def brute_force_locate(measurements: Sequence[RangeMeasurement], extent: tuple[float, float, float, float],
                       step: float = 1.0) -> Position3D:
    """Grid search of the trilateration objective over the extent."""
    w = np.array([m.waypoint.xyz for m in measurements])
    r = np.array([m.measured_range for m in measurements])
    x0, y0, x1, y1 = extent
    xs = np.arange(x0, x1 + step / 2, step)
    ys = np.arange(y0, y1 + step / 2, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cost = np.zeros_like(gx)
    for wi, ri in zip(w, r):
        d = np.sqrt((gx - wi[0]) ** 2 + (gy - wi[1]) ** 2 + wi[2] ** 2)
        cost += (d - ri) ** 2
    i, j = np.unravel_index(int(np.argmin(cost)), cost.shape)
    return Position3D(float(gx[i, j]), float(gy[i, j]), 0.0)


def min_cut_value(nodes: Sequence[Hashable], capacity: dict[tuple, int], source: Hashable, sink: Hashable) -> int:
    """Minimum s-t cut of an undirected capacitated graph by enumerating every cut.

    ``capacity`` maps unordered pairs (either orientation) to capacity.
    Exponential in the node count; meant for graphs of at most ~12 nodes.
    """
    others = [n for n in nodes if n not in (source, sink)]
    best = None
    for bits in itertools.product((0, 1), repeat=len(others)):
        side = {source} | {n for n, b in zip(others, bits) if b}
        cut = sum(c for (u, v), c in capacity.items() if (u in side) != (v in side))
        if best is None or cut < best:
            best = cut
    return int(best or 0)


def chromatic_number(n_vertices: int, edges: Iterable[tuple[int, int]]) -> int:
    """Smallest k admitting a proper k-colouring, by exhaustive backtracking."""
    if n_vertices == 0:
        return 0
    adj = [set() for _ in range(n_vertices)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)

    def colorable(k: int) -> bool:
        colors = [-1] * n_vertices

        def place(i: int) -> bool:
            if i == n_vertices:
                return True
            used = {colors[j] for j in adj[i] if colors[j] >= 0}
            # symmetry breaking: never open more than one new colour at a time
            limit = min(k, max(colors[:i], default=-1) + 2)
            for c in range(limit):
                if c not in used:
                    colors[i] = c
                    if place(i + 1):
                        return True
            colors[i] = -1
            return False

        return place(0)

    for k in range(1, n_vertices + 1):
        if colorable(k):
            return k
    return n_vertices


def ground_truth_snr(point, ue: Position3D, pattern: AntennaPattern, tx_power_dbm: float, world: WorldModel) -> float:
    """Scalar link SNR from an oriented airspace point to a ground UE."""
    return link_snr(tx_power_dbm, pattern.oriented(point.yaw, point.tilt), point.position,
                    isotropic(world.ue_gain_dbi), ue, world.access_freq_mhz, world)


def brute_force_placement(points, ues: Sequence[Position3D], pattern: AntennaPattern, tx_power_dbm: float,
                          world: WorldModel, objective: str = "maxmin", min_rate_bps: float = 0.0,
                          resolution: float = 1e-3):
    """Exhaustive argmax of the placement objective with scalar link evaluations.

    Ties: higher mean rate, lower altitude, then (x, y, yaw, tilt).  Values
    are compared at ``resolution`` bit/s.
    """
    best_key, best = None, None
    for p in points:
        rates = [snr_to_rate(ground_truth_snr(p, ue, pattern, tx_power_dbm, world), world.access_bandwidth_hz,
                             world.rate) for ue in ues]
        if objective == "maxmin":
            obj = min(rates)
        elif objective == "mean":
            obj = sum(rates) / len(rates)
        else:
            obj = float(sum(r >= min_rate_bps for r in rates))
        mean = sum(rates) / len(rates)
        key = (-round(obj / resolution), -round(mean / resolution), p.position.z, p.position.x, p.position.y,
               p.yaw, p.tilt)
        if best_key is None or key < best_key:
            best_key, best = key, p
    return best


def min_pairwise_distance(positions: Sequence[Position3D]) -> float:
    return min((a.distance(b) for a, b in itertools.combinations(positions, 2)), default=float("inf"))


def same_channel_conflicts(nodes: dict, channels: dict, interference_range_m: float) -> list[tuple]:
    """Pairs of channelled links that interfere yet share a channel.

    Independent rescan of the protocol model: two links interfere if they
    share an endpoint or any of their endpoints are within range.
    """
    bad = []
    items = sorted(channels.items())
    for (l1, c1), (l2, c2) in itertools.combinations(items, 2):
        if c1 != c2:
            continue
        ends1 = np.array([nodes[n].xyz for n in l1])
        ends2 = np.array([nodes[n].xyz for n in l2])
        gaps = np.linalg.norm(ends1[:, None, :] - ends2[None, :, :], axis=2)
        if set(l1) & set(l2) or (gaps <= interference_range_m).any():
            bad.append((l1, l2))
    return bad


def min_relays_brute_force(nodes: dict, demands: dict, sites: Sequence[Position3D], evaluate, max_relays: int = 2,
                           first_id: int = 1000) -> int | None:
    """Fewest relays from ``sites`` (up to ``max_relays``) making ``evaluate(nodes)`` reach 1."""
    for k in range(max_relays + 1):
        for combo in itertools.combinations(sites, k):
            extra = {first_id + i: p for i, p in enumerate(combo)}
            if evaluate({**nodes, **extra}) >= 1.0:
                return k
    return None
