import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerolte.world import (
    AntennaPattern,
    DomainError,
    LinkBudget,
    Obstacle,
    Position3D,
    RateModel,
    WorldModel,
    access_snr_matrix,
    antenna_gain,
    coverage_footprint,
    free_space_loss_db,
    isotropic,
    link_budget,
    link_snr,
    path_loss,
    path_loss_many,
    snr_to_rate,
)


def friis_db(d_m, f_mhz):
    lam = 299_792_458.0 / (f_mhz * 1e6)
    return 20 * math.log10(4 * math.pi * d_m / lam)


def sampled_crossings(a, b, ob, n=20001):
    """Oracle: does any of n evenly spaced points on a->b lie in the box."""
    t = np.linspace(0, 1, n)[:, None]
    pts = a.xyz + t * (b.xyz - a.xyz)
    inside = ((pts[:, 0] >= ob.x_min) & (pts[:, 0] <= ob.x_max) & (pts[:, 1] >= ob.y_min)
              & (pts[:, 1] <= ob.y_max) & (pts[:, 2] >= 0) & (pts[:, 2] <= ob.height))
    return bool(inside.any())


@pytest.fixture
def open_world():
    return WorldModel(extent=(-500, -500, 500, 500))


def test_reference_distance_identity(open_world):
    for f in (700.0, 2600.0, 60000.0):
        pl = path_loss(Position3D(0, 0, 10), Position3D(0, 0, 11), f, open_world)
        assert pl == pytest.approx(free_space_loss_db(1.0, f), abs=1e-12)


def test_friis_at_one_km(open_world):
    pl = path_loss(Position3D(0, 0, 50), Position3D(1000, 0, 50), 2600.0, open_world)
    assert pl == pytest.approx(friis_db(1000, 2600), abs=1e-9)
    assert pl == pytest.approx(32.44 + 20 * math.log10(2600) + 20 * math.log10(1.0), abs=0.02)
    assert round(pl, 1) == 100.7


def test_single_obstacle_adds_its_attenuation(open_world):
    a, b = Position3D(-400, 0, 10), Position3D(600, 0, 10)
    ob = Obstacle(0, 20, -10, 10, 30, 15.0)
    blocked = WorldModel(extent=(-500, -500, 700, 500), obstacles=(ob,))
    clear = WorldModel(extent=(-500, -500, 700, 500))
    assert sampled_crossings(a, b, ob)
    assert path_loss(a, b, 2600, blocked) == pytest.approx(path_loss(a, b, 2600, clear) + 15.0)


def test_obstacle_counted_once_per_box_not_per_face():
    ob = Obstacle(0, 100, 0, 100, 50, 7.0)
    w = WorldModel(extent=(-200, -200, 200, 200), obstacles=(ob,))
    clear = WorldModel(extent=(-200, -200, 200, 200))
    # enters through a side, exits through the top
    a, b = Position3D(-50, 50, 10), Position3D(150, 50, 120)
    assert path_loss(a, b, 900, w) - path_loss(a, b, 900, clear) == pytest.approx(7.0)


@settings(max_examples=200, deadline=None)
@given(
    st.tuples(*[st.floats(-100, 100)] * 2, st.floats(0, 80)),
    st.tuples(*[st.floats(-100, 100)] * 2, st.floats(0, 80)),
)
def test_ray_box_matches_sampling_oracle(p, q):
    a, b = Position3D(*p), Position3D(*q)
    if a.distance(b) < 1e-3:
        return
    ob = Obstacle(-20, 35, -15, 25, 40, 5.0)
    exact = ob.intersects(a, b)
    sampled = sampled_crossings(a, b, ob)
    # sampling can only miss grazing hits, never invent one
    if sampled:
        assert exact


def test_coincident_endpoints_rejected(open_world):
    p = Position3D(1, 2, 3)
    with pytest.raises(DomainError):
        path_loss(p, p, 2600, open_world)
    with pytest.raises(DomainError):
        path_loss(p, Position3D(0, 0, 0), 0.0, open_world)
    with pytest.raises(DomainError):
        antenna_gain(AntennaPattern(), p, p)


def test_position_invariants():
    with pytest.raises(DomainError):
        Position3D(0, 0, -1)
    with pytest.raises(DomainError):
        Position3D(float("nan"), 0, 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 5000.0), st.floats(1e-3, 100.0), st.floats(2.0, 4.0))
def test_path_loss_strictly_increasing_along_clear_ray(d, extra, n):
    w = WorldModel(extent=(0, 0, 10, 10), path_loss_exponent=n)
    o = Position3D(0, 0, 100)
    assert path_loss(o, Position3D(d + extra, 0, 100), 2600, w) > path_loss(o, Position3D(d, 0, 100), 2600, w)


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(st.floats(-200, 200), st.floats(-200, 200), st.floats(0, 120)),
    st.tuples(st.floats(-200, 200), st.floats(-200, 200), st.floats(0, 120)),
    st.tuples(st.floats(-150, 100), st.floats(1, 80), st.floats(-150, 100), st.floats(1, 80),
              st.floats(1, 60), st.floats(0, 40)),
)
def test_adding_obstacle_never_decreases_loss(p, q, box):
    a, b = Position3D(*p), Position3D(*q)
    if a.distance(b) < 1e-6:
        return
    x0, wx, y0, wy, h, att = box
    base = WorldModel(extent=(-200, -200, 200, 200))
    more = WorldModel(extent=(-200, -200, 200, 200), obstacles=(Obstacle(x0, x0 + wx, y0, y0 + wy, h, att),))
    assert path_loss(a, b, 2600, more) >= path_loss(a, b, 2600, base)


def test_vectorised_path_loss_agrees_with_scalar():
    rng = np.random.default_rng(3)
    obs = (Obstacle(-30, 10, -40, 0, 25, 12.0), Obstacle(50, 90, 20, 80, 60, 20.0))
    w = WorldModel(extent=(-100, -100, 100, 100), obstacles=obs, path_loss_exponent=2.7)
    a = rng.uniform([-100, -100, 0], [100, 100, 120], size=(300, 3))
    b = rng.uniform([-100, -100, 0], [100, 100, 120], size=(300, 3))
    vec = path_loss_many(a, b, 2600, w)
    ref = [path_loss(Position3D(*p), Position3D(*q), 2600, w) for p, q in zip(a, b)]
    assert np.allclose(vec, ref, atol=1e-9)


def test_antenna_gain_cases():
    pat = AntennaPattern(boresight_gain_dbi=12, beamwidth_deg=90, floor_gain_dbi=-8)
    uav = Position3D(0, 0, 100)
    assert antenna_gain(pat, uav, Position3D(0, 0, 0)) == 12
    # exactly 45 deg off straight-down
    assert antenna_gain(pat, uav, Position3D(100, 0, 0)) == 12
    # 60 deg off
    assert antenna_gain(pat, uav, Position3D(100 * math.tan(math.radians(60)), 0, 0)) == -8


def test_yaw_tilt_rotate_the_cone():
    pat = AntennaPattern(10, 30, -10).oriented(yaw_deg=90, tilt_deg=45)
    uav = Position3D(0, 0, 100)
    assert antenna_gain(pat, uav, Position3D(0, 100, 0)) == 10
    assert antenna_gain(pat, uav, Position3D(0, -100, 0)) == -10
    assert antenna_gain(pat, uav, Position3D(100, 0, 0)) == -10


def test_link_budget_identity_and_absorption():
    w = WorldModel(extent=(0, 0, 2000, 10))
    a, b = Position3D(0, 0, 100), Position3D(1000, 0, 100)
    arr = isotropic(30.0)
    lb = link_budget(20.0, arr, a, arr, b, 60000.0, w, noise_floor_dbm=-75.0)
    assert lb.extra_absorption_db == pytest.approx(20.0, abs=1e-12)
    expected = 20.0 + 30 + 30 - lb.path_loss_db - 20.0 - (-75.0)
    assert lb.snr_db == pytest.approx(expected, abs=1e-9)
    iso = link_budget(20.0, isotropic(0.0), a, isotropic(0.0), b, 60000.0, w, noise_floor_dbm=-75.0)
    # 60 dB of array gain offsets the 20 dB absorption with 40 dB to spare
    assert lb.snr_db - (iso.snr_db + iso.extra_absorption_db) == pytest.approx(40.0, abs=1e-9)
    sub6 = link_budget(20.0, isotropic(), a, isotropic(), b, 5800.0, w)
    assert sub6.extra_absorption_db == 0.0


def test_link_snr_composes_components():
    ob = Obstacle(400, 600, -50, 50, 200, 9.0)
    w = WorldModel(extent=(0, -100, 1000, 100), obstacles=(ob,))
    a, b = Position3D(0, 0, 100), Position3D(1000, 0, 100)
    pat = AntennaPattern(8, 60, -12).oriented(0, 90)
    snr = link_snr(23.0, pat, a, isotropic(2.0), b, 2600, w)
    by_hand = 23.0 + 8 + 2 - path_loss(a, b, 2600, w) - w.access_noise_floor_dbm
    assert snr == pytest.approx(by_hand, abs=1e-9)
    assert LinkBudget(1, 2, 3, 4, 5, 6).snr_db == 1 + 3 + 4 - 2 - 5 - 6


def test_snr_to_rate():
    assert snr_to_rate(0.0, 10e6) == pytest.approx(10e6)
    assert snr_to_rate(-20.0, 10e6) == 0.0
    assert snr_to_rate(30.0, 1.0) == pytest.approx(min(math.log2(1001), 7.4))
    assert snr_to_rate(30.0, 1.0) == pytest.approx(7.4)
    assert snr_to_rate(-6.0, 1.0) > 0
    assert snr_to_rate(10.0, 1.0, RateModel(spectral_efficiency_cap=20, demod_floor_db=-100)) == pytest.approx(
        math.log2(11))
    with pytest.raises(DomainError):
        snr_to_rate(0.0, 0.0)


@given(st.floats(-50, 60), st.floats(0, 10))
def test_rate_monotone(snr, delta):
    assert snr_to_rate(snr + delta, 1e6) >= snr_to_rate(snr, 1e6)


def _disk_radius(cells, world, center=(0.0, 0.0)):
    return max(math.hypot(world.cell_center(c).x - center[0], world.cell_center(c).y - center[1]) for c in cells)


def test_footprint_disk_and_altitude_monotonicity():
    w = WorldModel(extent=(-300, -300, 300, 300))
    pat = AntennaPattern(10, 90, -10)
    hi = coverage_footprint(Position3D(0, 0, 100), pat, w, min_snr_db=-50, tx_power_dbm=40)
    lo = coverage_footprint(Position3D(0, 0, 50), pat, w, min_snr_db=-50, tx_power_dbm=40)
    res = w.ground_grid_resolution
    assert abs(_disk_radius(hi, w) - 100) <= res
    assert abs(_disk_radius(lo, w) - 50) <= res
    assert lo < hi
    # every kept cell is in-cone, every in-cone cell is kept (power is generous)
    for c in w.cells():
        center = w.cell_center(c)
        inside = math.hypot(center.x, center.y) <= 100 + 1e-9
        assert (c in hi) == inside


def test_footprint_obstacle_shadows_one_cell():
    clear = WorldModel(extent=(-100, -100, 100, 100))
    target = clear.cell_of(35, 35)
    c = clear.cell_center(target)
    ob = Obstacle(c.x - 4, c.x + 4, c.y - 4, c.y + 4, 3.0, 60.0)
    w = WorldModel(extent=(-100, -100, 100, 100), obstacles=(ob,))
    pat = AntennaPattern(10, 120, -10)
    uav = Position3D(0, 0, 60)
    threshold = 5.0
    before = coverage_footprint(uav, pat, clear, threshold, 0.0)
    after = coverage_footprint(uav, pat, w, threshold, 0.0)
    assert target in before and target not in after
    # oracle: per-cell link_snr
    for cell in w.cells():
        p = w.cell_center(cell)
        expect = (antenna_gain(pat, uav, p) == pat.boresight_gain_dbi
                  and link_snr(0.0, pat, uav, isotropic(), p, w.access_freq_mhz, w) >= threshold)
        assert (cell in after) == expect
    neighbors = {(target[0] + 1, target[1]), (target[0], target[1] + 1)}
    assert neighbors <= after


def test_access_snr_matrix_agrees_with_link_snr():
    ob = Obstacle(-20, 20, -20, 20, 30, 18.0)
    w = WorldModel(extent=(-100, -100, 100, 100), obstacles=(ob,))
    pat = AntennaPattern(9, 70, -11)
    rng = np.random.default_rng(0)
    tx = rng.uniform([-100, -100, 20], [100, 100, 120], size=(40, 3))
    yaws = rng.choice([0, 90, 180, 270], size=40)
    tilts = rng.choice([0, 15, 30], size=40)
    ues = np.column_stack([rng.uniform(-100, 100, (7, 2)), np.zeros(7)])
    m = access_snr_matrix(tx, yaws, tilts, ues, pat, 30.0, w)
    for i in range(40):
        for j in range(7):
            ref = link_snr(30.0, pat.oriented(yaws[i], tilts[i]), Position3D(*tx[i]), isotropic(w.ue_gain_dbi),
                           Position3D(*ues[j]), w.access_freq_mhz, w)
            assert m[i, j] == pytest.approx(ref, abs=1e-9)
