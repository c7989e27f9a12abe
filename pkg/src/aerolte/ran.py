"""Per-UAV RAN planning: operational airspace, RF maps, placement and zoning.

All searches are exhaustive over a discrete airspace lattice, so every
result can be reproduced by brute force (see `aerolte.oracles`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .world import (
    AntennaPattern,
    Cell,
    Position3D,
    RateModel,
    WorldModel,
    access_snr_matrix,
    in_cone_many,
    snr_to_rate_many,
)

OBJECTIVES = ("maxmin", "mean", "coverage")
# Objective values closer than this (bit/s) are treated as ties.
TIE_RESOLUTION_BPS = 1e-3
MIN_RF_BUDGET = 8
IDW_POWER = 2.0
IDW_NEIGHBORS = 8


class ZoneUncoverableError(ValueError):
    pass


class RfBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class CoverageZone:
    cells: frozenset[Cell]
    min_rate_bps: float = 1e6
    zone_id: int = 0

    def __post_init__(self):
        if not self.cells:
            raise ValueError("coverage zone must be non-empty")


@dataclass(frozen=True)
class RanCaps:
    """What a UAV's RAN payload can do, and how finely its airspace is searched."""

    pattern: AntennaPattern = field(default_factory=lambda: AntennaPattern(10.0, 90.0, -10.0))
    max_tx_power_dbm: float = 30.0
    lattice_m: float = 20.0
    yaws: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    tilts: tuple[float, ...] = (0.0, 15.0, 30.0)
    coverage_fraction: float = 1.0

    def orientations(self) -> list[tuple[float, float]]:
        # yaw is meaningless when pointing straight down; keep one copy
        out = []
        for tilt in sorted(self.tilts):
            for yaw in (sorted(self.yaws)[:1] if tilt == 0 else sorted(self.yaws)):
                out.append((float(yaw), float(tilt)))
        return out


@dataclass(frozen=True, order=True)
class AirspacePoint:
    position: Position3D
    yaw: float = 0.0
    tilt: float = 0.0


@dataclass(frozen=True)
class UavRanConfig:
    position: Position3D
    yaw: float
    tilt: float
    tx_power_dbm: float

    @property
    def point(self) -> AirspacePoint:
        return AirspacePoint(self.position, self.yaw, self.tilt)


@dataclass(frozen=True)
class CandidateSet:
    configs: tuple[UavRanConfig, ...]
    objectives: tuple[float, ...]
    epsilon: float
    optimum: float


# -- operational airspace ---------------------------------------------------

def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def airspace_lattice(world: WorldModel, lattice_m: float) -> np.ndarray:
    x0, y0, x1, y1 = world.extent
    xs = _axis(x0, x1, lattice_m)
    ys = _axis(y0, y1, lattice_m)
    zs = _axis(lattice_m, world.altitude_ceiling_m, lattice_m)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def operational_airspace(zone: CoverageZone, caps: RanCaps, world: WorldModel) -> list[AirspacePoint]:
    """Lattice points and orientations whose antenna cone covers the zone.

    Only cone geometry is tested here; obstacles and SNR enter later via
    the RF map.
    """
    lattice = airspace_lattice(world, caps.lattice_m)
    cells = sorted(zone.cells)
    centers = world.cell_centers(cells)
    need = caps.coverage_fraction * len(cells) - 1e-9
    out: list[AirspacePoint] = []
    for yaw, tilt in caps.orientations():
        covered = np.zeros(len(lattice), dtype=int)
        for start in range(0, len(centers), 256):
            chunk = centers[start:start + 256]
            inside = in_cone_many(lattice[:, None, :], chunk[None, :, :], yaw, tilt, caps.pattern.beamwidth_deg)
            covered += inside.sum(axis=1)
        for p in lattice[covered >= need]:
            out.append(AirspacePoint(Position3D(float(p[0]), float(p[1]), float(p[2])), yaw, tilt))
    if not out:
        raise ZoneUncoverableError(f"zone {zone.zone_id} cannot be covered from any airspace point")
    out.sort()
    return out


# -- RF map -----------------------------------------------------------------

@dataclass
class RfMap:
    points: list[AirspacePoint]
    snr_db: np.ndarray  # (points, ues); samples stored verbatim, the rest interpolated
    provenance: np.ndarray  # "coarse" | "fine" | "interp"
    sample_order: list[int]
    tx_power_dbm: float
    bandwidth_hz: float
    rate: RateModel = field(default_factory=RateModel)
    idw_power: float = IDW_POWER
    idw_neighbors: int = IDW_NEIGHBORS

    @property
    def sampled(self) -> np.ndarray:
        return self.provenance != "interp"

    @property
    def n_ues(self) -> int:
        return self.snr_db.shape[1]

    def samples_used(self) -> int:
        return int(self.sampled.sum())

    def index_of(self, point: AirspacePoint) -> int:
        return self.points.index(point)

    def predict(self, point: AirspacePoint) -> np.ndarray:
        return self.snr_db[self.index_of(point)]

    def rates(self) -> np.ndarray:
        return snr_to_rate_many(self.snr_db, self.bandwidth_hz, self.rate)


def _positions(points: Sequence[AirspacePoint]) -> np.ndarray:
    return np.array([[p.position.x, p.position.y, p.position.z] for p in points], dtype=float)


def _farthest_point_order(xyz: np.ndarray, count: int) -> list[int]:
    centroid = xyz.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(xyz - centroid, axis=1)))
    chosen = [first]
    mind = np.linalg.norm(xyz - xyz[first], axis=1)
    mind[first] = -1.0
    while len(chosen) < count:
        nxt = int(np.argmax(mind))
        if mind[nxt] < 0:
            break
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(xyz - xyz[nxt], axis=1))
        mind[chosen] = -1.0
    return chosen


def _apportion(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``sizes``."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    base = [min(int(math.floor(e)), s) for e, s in zip(exact, sizes)]
    rest = total - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    while rest > 0:
        progressed = False
        for i in order:
            if rest and base[i] < sizes[i]:
                base[i] += 1
                rest -= 1
                progressed = True
        if not progressed:
            break
    return base


def build_rf_map(ue_estimates: Sequence[Position3D], airspace: Sequence[AirspacePoint], budget: int,
                 world: WorldModel, rng: np.random.Generator, *, caps: RanCaps = RanCaps(),
                 true_positions: Sequence[Position3D] | None = None, noise_db: float = 0.0) -> RfMap:
    """Two-phase hierarchical RF map over ``airspace``.

    Phase one spends half the budget on a spread-out coarse subset (greedy
    farthest-point per orientation, which approximates a coarse
    sub-lattice on irregular airspaces).  Phase two spends the remainder
    on the nearest unsampled neighbours of the top-quartile coarse samples,
    ranked by their worst-UE SNR.  Everything else is filled by inverse
    distance weighting over same-orientation samples.

    Measurements are taken towards ``true_positions`` when given (the real
    UEs); the estimates only fix the UE order.  ``noise_db`` adds Gaussian
    measurement noise drawn from ``rng``.
    """
    if budget < MIN_RF_BUDGET:
        raise RfBudgetError(f"RF map budget {budget} below minimum {MIN_RF_BUDGET}")
    if not ue_estimates:
        raise ValueError("RF map needs at least one UE")
    points = list(airspace)
    n = len(points)
    budget = min(budget, n)
    targets = list(true_positions) if true_positions is not None else list(ue_estimates)
    if len(targets) != len(ue_estimates):
        raise ValueError("true_positions must align with ue_estimates")
    xyz = _positions(points)
    yaws = np.array([p.yaw for p in points])
    tilts = np.array([p.tilt for p in points])
    ue_xyz = np.array([[t.x, t.y, t.z] for t in targets], dtype=float)

    def measure(idx: list[int]) -> np.ndarray:
        idx_arr = np.asarray(idx, dtype=int)
        vals = access_snr_matrix(xyz[idx_arr], yaws[idx_arr], tilts[idx_arr], ue_xyz, caps.pattern,
                                 caps.max_tx_power_dbm, world)
        if noise_db > 0:
            vals = vals + rng.normal(0.0, noise_db, size=vals.shape)
        return vals

    snr = np.zeros((n, len(targets)))
    provenance = np.full(n, "interp", dtype=object)
    groups: dict[tuple[float, float], list[int]] = {}
    for i, p in enumerate(points):
        groups.setdefault((p.yaw, p.tilt), []).append(i)
    keys = sorted(groups)

    if budget >= n:
        order = list(range(n))
        snr[:] = measure(order)
        provenance[:] = "coarse"
        return RfMap(points, snr, provenance, order, caps.max_tx_power_dbm, world.access_bandwidth_hz, world.rate)

    coarse_budget = budget // 2
    coarse: list[int] = []
    for key, share in zip(keys, _apportion([len(groups[k]) for k in keys], coarse_budget)):
        members = groups[key]
        if share:
            coarse.extend(members[j] for j in _farthest_point_order(xyz[members], share))
    snr[coarse] = measure(coarse)
    provenance[coarse] = "coarse"

    fine_budget = budget - len(coarse)
    worst = snr[coarse].min(axis=1)
    ranked = [coarse[i] for i in sorted(range(len(coarse)), key=lambda i: (-worst[i], coarse[i]))]
    top = ranked[:max(1, math.ceil(len(ranked) / 4))]
    taken = set(coarse)
    fine: list[int] = []
    queues = []
    for t in top:
        members = np.array(groups[(points[t].yaw, points[t].tilt)])
        d = np.linalg.norm(xyz[members] - xyz[t], axis=1)
        queues.append([int(members[j]) for j in np.lexsort((members, d))])
    cursor = [0] * len(top)
    while len(fine) < fine_budget:
        progressed = False
        for qi, queue in enumerate(queues):
            while cursor[qi] < len(queue) and queue[cursor[qi]] in taken:
                cursor[qi] += 1
            if cursor[qi] < len(queue) and len(fine) < fine_budget:
                idx = queue[cursor[qi]]
                fine.append(idx)
                taken.add(idx)
                progressed = True
        if not progressed:
            break
    if len(fine) < fine_budget:
        # refinement neighbourhoods exhausted: spend the rest nearest the top samples
        top_xyz = xyz[top]
        rest = [i for i in range(n) if i not in taken]
        d = np.min(np.linalg.norm(xyz[rest][:, None, :] - top_xyz[None, :, :], axis=2), axis=1)
        for j in np.lexsort((rest, d))[: fine_budget - len(fine)]:
            fine.append(rest[j])
            taken.add(rest[j])
    if fine:
        snr[fine] = measure(fine)
        provenance[fine] = "fine"

    # Interpolate the channel with this UAV's own antenna gain removed: the
    # gain is known from geometry and its cone edge is a 20 dB step that
    # distance weighting would smear across neighbours.
    est_xyz = np.array([[u.x, u.y, u.z] for u in ue_estimates], dtype=float)
    gain = np.where(in_cone_many(xyz[:, None, :], est_xyz[None, :, :], yaws[:, None], tilts[:, None],
                                 caps.pattern.beamwidth_deg),
                    caps.pattern.boresight_gain_dbi, caps.pattern.floor_gain_dbi)
    channel = snr - gain
    sampled = np.array(sorted(taken))
    for key in keys:
        members = np.array(groups[key])
        unsampled = members[provenance[members] == "interp"]
        if not len(unsampled):
            continue
        pool = members[provenance[members] != "interp"]
        if not len(pool):
            pool = sampled
        snr[unsampled] = gain[unsampled] + _idw(xyz[unsampled], xyz[pool], channel[pool], IDW_NEIGHBORS, IDW_POWER)
    return RfMap(points, snr, provenance, coarse + fine, caps.max_tx_power_dbm, world.access_bandwidth_hz,
                 world.rate)


def _idw(query: np.ndarray, known: np.ndarray, values: np.ndarray, k: int, power: float) -> np.ndarray:
    d = np.linalg.norm(query[:, None, :] - known[None, :, :], axis=2)
    k = min(k, len(known))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, nearest, axis=1)
    w = 1.0 / np.maximum(dn, 1e-12) ** power
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qku->qu", w, values[nearest])


# -- placement ----------------------------------------------------------------

def objective_values(rates: np.ndarray, objective: str = "maxmin", min_rate_bps: float = 0.0) -> np.ndarray:
    if objective == "maxmin":
        return rates.min(axis=1)
    if objective == "mean":
        return rates.mean(axis=1)
    if objective == "coverage":
        return (rates >= min_rate_bps).sum(axis=1).astype(float)
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def _quantize(v: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(v, dtype=float) / TIE_RESOLUTION_BPS)


def rank_points(rf_map: RfMap, objective: str = "maxmin", min_rate_bps: float = 0.0) -> tuple[list[int], np.ndarray]:
    """Airspace indices from best to worst, with their objective values.

    Order: objective desc, mean rate desc, altitude asc, then (x, y, yaw, tilt).
    """
    rates = rf_map.rates()
    obj = objective_values(rates, objective, min_rate_bps)
    mean = rates.mean(axis=1)
    q_obj, q_mean = _quantize(obj), _quantize(mean)
    keys = [(-q_obj[i], -q_mean[i], p.position.z, p.position.x, p.position.y, p.yaw, p.tilt)
            for i, p in enumerate(rf_map.points)]
    order = sorted(range(len(keys)), key=keys.__getitem__)
    return order, obj


def _config(rf_map: RfMap, i: int) -> UavRanConfig:
    p = rf_map.points[i]
    return UavRanConfig(p.position, p.yaw, p.tilt, rf_map.tx_power_dbm)


def optimize_placement(rf_map: RfMap, objective: str = "maxmin", min_rate_bps: float = 0.0) -> UavRanConfig:
    if rf_map.n_ues < 1:
        raise ValueError("RF map covers no UEs")
    order, _ = rank_points(rf_map, objective, min_rate_bps)
    return _config(rf_map, order[0])


def candidate_set(rf_map: RfMap, epsilon: float, objective: str = "maxmin", min_rate_bps: float = 0.0,
                  cap: int = 32) -> CandidateSet:
    if not (0 <= epsilon < 1):
        raise ValueError("epsilon must be in [0, 1)")
    order, obj = rank_points(rf_map, objective, min_rate_bps)
    best = float(obj[order[0]])
    q_best = _quantize(best)
    threshold = (1 - epsilon) * best
    keep = []
    for i in order:
        ok = _quantize(obj[i]) >= q_best if epsilon == 0 else obj[i] >= threshold
        if not ok:
            break
        keep.append(i)
        if len(keep) >= cap:
            break
    return CandidateSet(tuple(_config(rf_map, i) for i in keep), tuple(float(obj[i]) for i in keep), epsilon, best)


def adopt_new_optimum(current_objective: float, new_objective: float, hysteresis: float = 0.05) -> bool:
    """Handoff-churn guard: move only for a relative gain of at least ``hysteresis``."""
    if current_objective <= 0:
        return new_objective > 0
    return new_objective >= current_objective * (1 + hysteresis)


# -- zoning -------------------------------------------------------------------

def _balanced_assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    n, k = len(points), len(centroids)
    cap = math.ceil(n / k)
    d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    order = sorted(((d[i, c], i, c) for i in range(n) for c in range(k)))
    assign = np.full(n, -1)
    load = [0] * k
    for _, i, c in order:
        if assign[i] < 0 and load[c] < cap:
            assign[i] = c
            load[c] += 1
    return assign


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[int(rng.integers(len(points)))]]
    while len(centroids) < k:
        d2 = np.min(np.linalg.norm(points[:, None, :] - np.array(centroids)[None], axis=2) ** 2, axis=1)
        if d2.sum() == 0:
            centroids.append(points[int(rng.integers(len(points)))])
        else:
            centroids.append(points[int(rng.choice(len(points), p=d2 / d2.sum()))])
    return np.array(centroids, dtype=float)


def _farthest_cell(centers: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    if not len(centroids):
        return centers[0]
    d = np.min(np.linalg.norm(centers[:, None, :] - centroids[None], axis=2), axis=1)
    return centers[int(np.argmax(d))]


def partition_zones(world: WorldModel, n_uavs: int, ue_positions: Sequence[Position3D],
                    rng: np.random.Generator, min_rate_bps: float = 1e6, iterations: int = 100) -> list[CoverageZone]:
    """Balanced k-means over UEs, then a Voronoi split of every ground cell.

    Clusters are capped at ceil(n/k) members.  With fewer UEs than UAVs the
    missing centroids are seeded at the cells farthest from existing ones.
    """
    if n_uavs < 1:
        raise ValueError("need at least one UAV")
    cells = world.cells()
    centers = world.cell_centers(cells)[:, :2]
    if n_uavs == 1:
        return [CoverageZone(frozenset(cells), min_rate_bps, 0)]

    pts = np.array([[p.x, p.y] for p in ue_positions], dtype=float).reshape(-1, 2)
    k_data = min(n_uavs, len(pts))
    if k_data > 0:
        centroids = _kmeans_pp(pts, k_data, rng)
        assign = None
        for _ in range(iterations):
            new = _balanced_assign(pts, centroids)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            for c in range(k_data):
                members = pts[assign == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
    else:
        centroids = np.zeros((0, 2))
    while len(centroids) < n_uavs:
        centroids = np.vstack([centroids, _farthest_cell(centers, centroids)])

    for _ in range(n_uavs + 1):
        d = np.linalg.norm(centers[:, None, :] - centroids[None], axis=2)
        owner = np.argmin(d, axis=1)  # ties -> lowest index
        counts = np.bincount(owner, minlength=n_uavs)
        empty = [c for c in range(n_uavs) if counts[c] == 0]
        if not empty:
            break
        others = np.delete(centroids, empty[0], axis=0)
        centroids[empty[0]] = _farthest_cell(centers, others)
    zones = []
    for c in range(n_uavs):
        members = frozenset(cell for cell, o in zip(cells, owner) if o == c)
        zones.append(CoverageZone(members, min_rate_bps, c))
    return zones


# -- multi-UAV collision avoidance ----------------------------------------------

@dataclass(frozen=True)
class ConflictResolution:
    committed: dict[int, Position3D]
    held: frozenset[int]
    initial_violation: bool = False


def resolve_conflict(planned: Mapping[int, Position3D], current: Mapping[int, Position3D], msr: float,
                     priorities: Sequence[int] | None = None) -> ConflictResolution:
    """Commit next moves in priority order, holding any that would break the MSR.

    A move is cancelled if it lands closer than ``msr`` to a higher-priority
    UAV's committed position or to a lower-priority UAV's current position
    (which it keeps if it has to hold).  Default priority: ascending id.
    """
    order = list(priorities) if priorities is not None else sorted(current)
    ids = sorted(current)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if current[a].distance(current[b]) < msr:
                return ConflictResolution(dict(current), frozenset(current), True)
    committed: dict[int, Position3D] = {}
    held = set()
    for rank, uav in enumerate(order):
        target = planned.get(uav, current[uav])
        blockers = [committed[u] for u in order[:rank]] + [current[u] for u in order[rank + 1:]]
        if target != current[uav] and any(target.distance(b) < msr for b in blockers):
            committed[uav] = current[uav]
            held.add(uav)
        else:
            committed[uav] = target
    return ConflictResolution(committed, frozenset(held))
