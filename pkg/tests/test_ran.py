import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerolte.oracles import brute_force_placement, ground_truth_snr, min_pairwise_distance
from aerolte.ran import (
    AirspacePoint,
    CoverageZone,
    RanCaps,
    RfBudgetError,
    ZoneUncoverableError,
    adopt_new_optimum,
    build_rf_map,
    candidate_set,
    objective_values,
    operational_airspace,
    optimize_placement,
    partition_zones,
    rank_points,
    resolve_conflict,
)
from aerolte.world import AntennaPattern, Obstacle, Position3D, WorldModel, coverage_footprint, snr_to_rate_many

DOWN = RanCaps(pattern=AntennaPattern(10, 90, -10), yaws=(0.0,), tilts=(0.0,))


def small_world(**kw):
    kw.setdefault("extent", (0, 0, 200, 200))
    kw.setdefault("ground_grid_resolution", 20)
    return WorldModel(**kw)


def truth_matrix(points, ues, caps, world):
    return np.array([[ground_truth_snr(p, u, caps.pattern, caps.max_tx_power_dbm, world) for u in ues]
                     for p in points])


# -- operational airspace ----------------------------------------------------

def test_airspace_single_cell_cone_radius():
    world = small_world()
    cell = (0, 0)
    center = world.cell_center(cell)
    pts = operational_airspace(CoverageZone(frozenset([cell])), DOWN, world)
    assert pts
    for p in pts:
        # 90 degree cone: radius equals altitude
        assert p.position.horizontal_distance(center) <= p.position.z + 1e-9
        assert p.position.z <= world.altitude_ceiling_m
    # and nothing qualifying is missing
    for x in range(0, 201, 20):
        for y in range(0, 201, 20):
            for z in range(20, 121, 20):
                q = Position3D(x, y, z)
                if q.horizontal_distance(center) <= z:
                    assert AirspacePoint(q, 0.0, 0.0) in pts


def test_airspace_uncoverable_zone():
    world = WorldModel(extent=(0, 0, 600, 600), ground_grid_resolution=20)
    with pytest.raises(ZoneUncoverableError):
        operational_airspace(CoverageZone(frozenset(world.cells())), DOWN, world)


def test_airspace_square_zone_verified_by_footprint():
    world = WorldModel(extent=(0, 0, 400, 400), ground_grid_resolution=20)
    zone = CoverageZone(frozenset((i, j) for i in range(5, 15) for j in range(5, 15)))  # 200 m square
    caps = RanCaps()
    pts = operational_airspace(zone, caps, world)
    assert pts
    for p in pts[:: max(1, len(pts) // 40)]:
        fp = coverage_footprint(p.position, caps.pattern.oriented(p.yaw, p.tilt), world, -math.inf, 30.0)
        assert zone.cells <= fp


def test_tilt_zero_orientation_deduplicated():
    orients = RanCaps().orientations()
    assert [o for o in orients if o[1] == 0] == [(0.0, 0.0)]
    assert len(orients) == 9


# -- RF map ----------------------------------------------------------------------

def _map_setup(seed=0, n_ues=3, world=None):
    world = world or small_world()
    rng = np.random.default_rng(seed)
    ues = [Position3D(*rng.uniform(60, 140, 2), 0) for _ in range(n_ues)]
    zone = CoverageZone(frozenset(world.cell_of(u.x, u.y) for u in ues))
    caps = RanCaps()
    return world, ues, caps, operational_airspace(zone, caps, world)


def test_rf_map_budget_bound():
    world, ues, caps, air = _map_setup()
    with pytest.raises(RfBudgetError):
        build_rf_map(ues, air, 7, world, np.random.default_rng(0), caps=caps)


def test_rf_map_full_budget_equals_ground_truth():
    world, ues, caps, air = _map_setup(world=small_world(obstacles=(Obstacle(60, 120, 60, 120, 30, 15),)))
    m = build_rf_map(ues, air, len(air), world, np.random.default_rng(0), caps=caps)
    assert m.sampled.all()
    np.testing.assert_allclose(m.snr_db, truth_matrix(air, ues, caps, world), atol=1e-9)


def test_rf_map_samples_verbatim_and_split():
    world, ues, caps, air = _map_setup(world=small_world(obstacles=(Obstacle(60, 120, 60, 120, 30, 15),)))
    budget = len(air) // 4
    m = build_rf_map(ues, air, budget, world, np.random.default_rng(0), caps=caps)
    assert m.samples_used() == budget
    assert (m.provenance == "coarse").sum() == budget // 2
    assert len(set(m.sample_order)) == budget
    idx = np.flatnonzero(m.sampled)
    truth = truth_matrix([air[i] for i in idx], ues, caps, world)
    np.testing.assert_allclose(m.snr_db[idx], truth, atol=1e-9)
    assert np.isfinite(m.snr_db).all()
    for i in idx[:5]:
        np.testing.assert_array_equal(m.predict(air[i]), m.snr_db[i])


def test_rf_map_interpolation_within_3db_obstacle_free():
    world, ues, caps, air = _map_setup(seed=3)
    m = build_rf_map(ues, air, math.ceil(0.25 * len(air)), world, np.random.default_rng(0), caps=caps)
    truth = truth_matrix(air, ues, caps, world)
    un = ~m.sampled
    err = np.abs(m.snr_db[un] - truth[un]).max(axis=1)
    assert np.mean(err <= 3.0) >= 0.95


def test_rf_map_fine_phase_targets_best_coarse_region():
    world, ues, caps, air = _map_setup(seed=5, n_ues=1)
    m = build_rf_map(ues, air, 40, world, np.random.default_rng(0), caps=caps)
    coarse = np.flatnonzero(m.provenance == "coarse")
    fine = np.flatnonzero(m.provenance == "fine")
    worst = m.snr_db.min(axis=1)
    assert worst[fine].mean() >= np.median(worst[coarse])


def test_rf_map_measures_true_positions():
    world, ues, caps, air = _map_setup()
    shifted = [Position3D(u.x + 5, u.y, 0) for u in ues]
    m = build_rf_map(ues, air, len(air), world, np.random.default_rng(0), caps=caps, true_positions=shifted)
    np.testing.assert_allclose(m.snr_db, truth_matrix(air, shifted, caps, world), atol=1e-9)


# -- placement --------------------------------------------------------------------

def test_single_ue_lowest_point_overhead():
    # low power keeps the rate below the spectral-efficiency cap so SNR decides
    world = small_world()
    caps = RanCaps(max_tx_power_dbm=-40.0)
    ue = Position3D(100, 100, 0)
    zone = CoverageZone(frozenset([world.cell_of(100, 100)]))
    air = operational_airspace(zone, caps, world)
    m = build_rf_map([ue], air, len(air), world, np.random.default_rng(0), caps=caps)
    cfg = optimize_placement(m)
    assert (cfg.position.x, cfg.position.y, cfg.position.z) == (100, 100, 20)
    assert cfg.tilt == 0


def test_symmetric_ues_tie_rule_lexicographic():
    world = small_world(ground_grid_resolution=40)  # UEs sit on cell centres
    caps = RanCaps(max_tx_power_dbm=-20.0)
    ues = [Position3D(100, 60, 0), Position3D(100, 140, 0)]
    zone = CoverageZone(frozenset(world.cell_of(u.x, u.y) for u in ues))
    air = operational_airspace(zone, caps, world)
    m = build_rf_map(ues, air, len(air), world, np.random.default_rng(0), caps=caps)
    cfg = optimize_placement(m)
    assert cfg.position.y == 100  # on the perpendicular bisector
    assert cfg.point == brute_force_placement(air, ues, caps.pattern, caps.max_tx_power_dbm, world)


def test_shadowed_region_avoided():
    building = Obstacle(0, 95, 0, 200, 110, 40.0)
    world = small_world(obstacles=(building,))
    caps = RanCaps(max_tx_power_dbm=-20.0)
    ue = Position3D(100, 100, 0)
    zone = CoverageZone(frozenset([world.cell_of(100, 100)]))
    air = operational_airspace(zone, caps, world)
    m = build_rf_map([ue], air, len(air), world, np.random.default_rng(0), caps=caps)
    cfg = optimize_placement(m)
    assert cfg.position.x >= 100
    assert cfg.point == brute_force_placement(air, [ue], caps.pattern, caps.max_tx_power_dbm, world)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from(["maxmin", "mean", "coverage"]))
def test_full_budget_placement_matches_brute_force(seed, n_ues, objective):
    rng = np.random.default_rng(seed)
    obstacles = tuple(Obstacle(*sorted(rng.uniform(0, 200, 2)), *sorted(rng.uniform(0, 200, 2)),
                               rng.uniform(10, 80), rng.uniform(0, 30)) for _ in range(rng.integers(0, 3)))
    world = small_world(obstacles=obstacles)
    caps = RanCaps(max_tx_power_dbm=float(rng.uniform(-50, 30)))
    ues = [Position3D(*rng.uniform(40, 160, 2), 0) for _ in range(n_ues)]
    zone = CoverageZone(frozenset(world.cell_of(u.x, u.y) for u in ues))
    air = operational_airspace(zone, caps, world)
    m = build_rf_map(ues, air, len(air), world, rng, caps=caps)
    got = optimize_placement(m, objective, min_rate_bps=2e7)
    want = brute_force_placement(air, ues, caps.pattern, caps.max_tx_power_dbm, world, objective, 2e7)
    assert got.point == want
    assert optimize_placement(m, objective, min_rate_bps=2e7) == got


# -- candidate sets ------------------------------------------------------------------

def _caps_map(seed=1):
    world, ues, _, _ = _map_setup(seed=seed)
    caps = RanCaps(max_tx_power_dbm=-30.0)
    zone = CoverageZone(frozenset(world.cell_of(u.x, u.y) for u in ues))
    air = operational_airspace(zone, caps, world)
    return build_rf_map(ues, air, len(air), world, np.random.default_rng(0), caps=caps)


def test_candidate_set_epsilon_zero_is_exact_optimum_ties():
    m = _caps_map()
    cs = candidate_set(m, 0.0)
    best = optimize_placement(m)
    assert cs.configs[0] == best
    _, obj = rank_points(m)
    assert all(v == pytest.approx(cs.optimum, abs=1e-3) for v in cs.objectives)


def test_candidate_set_near_one_is_capped_and_ordered():
    m = _caps_map()
    cs = candidate_set(m, 0.999999, cap=32)
    assert len(cs.configs) == min(32, len(m.points))
    assert list(cs.objectives) == sorted(cs.objectives, reverse=True)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_candidate_set_members_reevaluated(seed):
    m = _caps_map(seed)
    cs = candidate_set(m, 0.1)
    assert optimize_placement(m) in cs.configs
    rates = snr_to_rate_many(m.snr_db, m.bandwidth_hz, m.rate)
    obj = objective_values(rates)
    for cfg in cs.configs:
        assert obj[m.index_of(cfg.point)] >= 0.9 * cs.optimum


def test_hysteresis_guard():
    assert not adopt_new_optimum(100.0, 104.0)
    assert adopt_new_optimum(100.0, 105.0)
    assert adopt_new_optimum(0.0, 1.0)
    assert not adopt_new_optimum(0.0, 0.0)


# -- zoning ------------------------------------------------------------------------------

def _assert_partition(world, zones):
    seen = set()
    for z in zones:
        assert not (seen & z.cells)
        seen |= z.cells
    assert seen == set(world.cells())


def test_single_uav_whole_area():
    world = small_world()
    zones = partition_zones(world, 1, [Position3D(5, 5, 0)], np.random.default_rng(0))
    assert len(zones) == 1 and zones[0].cells == frozenset(world.cells())


def test_two_far_clusters_split():
    world = WorldModel(extent=(0, 0, 1000, 400), ground_grid_resolution=20)
    rng = np.random.default_rng(4)
    a = [Position3D(*rng.uniform([50, 150], [150, 250]), 0) for _ in range(6)]
    b = [Position3D(*rng.uniform([850, 150], [950, 250]), 0) for _ in range(6)]
    zones = partition_zones(world, 2, a + b, np.random.default_rng(0))
    _assert_partition(world, zones)
    for cluster in (a, b):
        owners = {z.zone_id for z in zones for u in cluster if world.cell_of(u.x, u.y) in z.cells}
        assert len(owners) == 1
    assert len({z.zone_id for z in zones for u in a + b if world.cell_of(u.x, u.y) in z.cells}) == 2


def test_fewer_ues_than_uavs_still_partitions():
    world = small_world()
    zones = partition_zones(world, 4, [Position3D(10, 10, 0)], np.random.default_rng(0))
    assert len(zones) == 4
    _assert_partition(world, zones)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200)), max_size=15),
       st.integers(0, 100))
def test_zones_always_partition(k, ues, seed):
    world = small_world()
    zones = partition_zones(world, k, [Position3D(x, y, 0) for x, y in ues], np.random.default_rng(seed))
    assert len(zones) == k
    _assert_partition(world, zones)
    again = partition_zones(world, k, [Position3D(x, y, 0) for x, y in ues], np.random.default_rng(seed))
    assert [z.cells for z in zones] == [z.cells for z in again]


# -- MSR -----------------------------------------------------------------------------------

def test_msr_no_conflict_both_move():
    cur = {1: Position3D(0, 0, 50), 2: Position3D(300, 0, 50)}
    plan = {1: Position3D(0, 50, 50), 2: Position3D(100, 50, 50)}
    res = resolve_conflict(plan, cur, 50.0)
    assert res.committed == plan and not res.held


def test_msr_converging_lower_priority_holds():
    cur = {1: Position3D(0, 0, 50), 2: Position3D(200, 0, 50)}
    target = Position3D(100, 0, 50)
    res = resolve_conflict({1: target, 2: target}, cur, 50.0)
    assert res.committed[1] == target and res.committed[2] == cur[2]
    assert res.held == {2}


def test_msr_chain_hold():
    cur = {1: Position3D(0, 0, 50), 2: Position3D(100, 0, 50), 3: Position3D(200, 0, 50)}
    plan = {1: Position3D(30, 0, 50), 2: Position3D(60, 0, 50), 3: Position3D(140, 0, 50)}
    res = resolve_conflict(plan, cur, 50.0)
    assert res.held == {2, 3}
    assert res.committed[1] == plan[1]
    assert min_pairwise_distance(list(res.committed.values())) >= 50.0


def test_msr_initial_violation_flagged():
    cur = {1: Position3D(0, 0, 50), 2: Position3D(10, 0, 50)}
    res = resolve_conflict({1: Position3D(100, 0, 50)}, cur, 50.0)
    assert res.initial_violation and res.committed == cur


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_msr_committed_never_violates(seed):
    rng = np.random.default_rng(seed)
    cur = {}
    while len(cur) < 5:
        p = Position3D(*rng.uniform(0, 400, 2), 60)
        if all(p.distance(q) >= 50 for q in cur.values()):
            cur[len(cur) + 1] = p
    plan = {u: Position3D(*np.clip([p.x + rng.normal(0, 60), p.y + rng.normal(0, 60)], 0, 400), 60)
            for u, p in cur.items()}
    res = resolve_conflict(plan, cur, 50.0)
    assert min_pairwise_distance(list(res.committed.values())) >= 50.0


def test_msr_higher_priority_blocked_by_lower_priority_current_position():
    # committing 1 here would leave it within msr of a holding UAV 2
    cur = {1: Position3D(0, 0, 50), 2: Position3D(100, 0, 50)}
    res = resolve_conflict({1: Position3D(70, 0, 50)}, cur, 50.0)
    assert res.held == {1}
