"""Ground-truth geometry, propagation, antenna and rate models.

Everything here is a pure function of its arguments.  Scalar entry points
(`path_loss`, `antenna_gain`, `link_snr`, ...) are the reference semantics;
the ``*_many`` / matrix helpers are vectorised equivalents used by the RAN
and backhaul planners on large candidate sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
OXYGEN_BAND_MHZ = 57_000.0
OXYGEN_ABSORPTION_DB_PER_M = 0.02
THERMAL_NOISE_DBM_HZ = -174.0

# Boundary-inclusive cone test; absorbs float error from arccos.
ANGLE_EPS_DEG = 1e-9

Cell = tuple[int, int]


class DomainError(ValueError):
    """Raised for geometrically meaningless inputs (coincident points etc.)."""


@dataclass(frozen=True, order=True)
class Position3D:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite, got {v}")
        if self.z < 0:
            raise DomainError(f"z must be >= 0, got {self.z}")

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def distance(self, other: "Position3D") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))

    def horizontal_distance(self, other: "Position3D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def with_z(self, z: float) -> "Position3D":
        return Position3D(self.x, self.y, z)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box standing on the ground, ``[x_min,x_max] x [y_min,y_max] x [0,height]``."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: float
    attenuation_db: float
    name: str = ""

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DomainError("obstacle footprint must have positive extent")
        if self.height <= 0:
            raise DomainError("obstacle height must be > 0")
        if self.attenuation_db < 0:
            raise DomainError("obstacle attenuation must be >= 0")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, 0.0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.height])

    def intersects(self, a: Position3D, b: Position3D) -> bool:
        return bool(_segment_hits_box(a.xyz[None, :], b.xyz[None, :], self.lo, self.hi)[0])


@dataclass(frozen=True)
class RateModel:
    spectral_efficiency_cap: float = 7.4
    demod_floor_db: float = -6.0


@dataclass(frozen=True)
class WorldModel:
    extent: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    ground_grid_resolution: float = 10.0
    obstacles: tuple[Obstacle, ...] = ()
    access_freq_mhz: float = 2600.0
    backhaul_freq_mhz: float = 5800.0
    altitude_ceiling_m: float = 122.0
    path_loss_exponent: float = 2.0
    reference_distance: float = 1.0
    access_bandwidth_hz: float = 10e6
    noise_figure_db: float = 7.0
    ue_gain_dbi: float = 0.0
    rate: RateModel = field(default_factory=RateModel)

    def __post_init__(self):
        x0, y0, x1, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise DomainError("world extent must be non-empty")
        if self.ground_grid_resolution <= 0:
            raise DomainError("ground grid resolution must be > 0")
        if self.path_loss_exponent < 2:
            raise DomainError("path loss exponent must be >= 2")
        if self.reference_distance <= 0:
            raise DomainError("reference distance must be > 0")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    # -- ground grid -------------------------------------------------------
    @property
    def grid_shape(self) -> tuple[int, int]:
        x0, y0, x1, y1 = self.extent
        r = self.ground_grid_resolution
        return (max(1, math.ceil((x1 - x0) / r - 1e-9)), max(1, math.ceil((y1 - y0) / r - 1e-9)))

    def cells(self) -> list[Cell]:
        nx, ny = self.grid_shape
        return [(i, j) for i in range(nx) for j in range(ny)]

    def cell_center(self, cell: Cell) -> Position3D:
        x0, y0, x1, y1 = self.extent
        r = self.ground_grid_resolution
        return Position3D(min(x0 + (cell[0] + 0.5) * r, x1), min(y0 + (cell[1] + 0.5) * r, y1), 0.0)

    def cell_centers(self, cells: Sequence[Cell]) -> np.ndarray:
        if not cells:
            return np.zeros((0, 3))
        x0, y0, x1, y1 = self.extent
        r = self.ground_grid_resolution
        idx = np.asarray(cells, dtype=float)
        xs = np.minimum(x0 + (idx[:, 0] + 0.5) * r, x1)
        ys = np.minimum(y0 + (idx[:, 1] + 0.5) * r, y1)
        return np.column_stack([xs, ys, np.zeros(len(cells))])

    def cell_of(self, x: float, y: float) -> Cell:
        x0, y0, _, _ = self.extent
        nx, ny = self.grid_shape
        r = self.ground_grid_resolution
        i = min(max(int(math.floor((x - x0) / r)), 0), nx - 1)
        j = min(max(int(math.floor((y - y0) / r)), 0), ny - 1)
        return (i, j)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 <= x <= x1 and y0 <= y <= y1

    @property
    def access_noise_floor_dbm(self) -> float:
        return thermal_noise_dbm(self.access_bandwidth_hz, self.noise_figure_db)


@dataclass(frozen=True)
class AntennaPattern:
    """Two-level sectored cone: boresight gain inside the cone, floor gain outside.

    ``tilt`` is measured from straight down, ``yaw`` counter-clockwise from +x.
    """

    boresight_gain_dbi: float = 10.0
    beamwidth_deg: float = 90.0
    floor_gain_dbi: float = -10.0
    yaw_deg: float = 0.0
    tilt_deg: float = 0.0

    def __post_init__(self):
        if not (0 < self.beamwidth_deg <= 360):
            raise DomainError("beamwidth must be in (0, 360]")
        if self.boresight_gain_dbi < self.floor_gain_dbi:
            raise DomainError("boresight gain must be >= floor gain")

    def oriented(self, yaw_deg: float, tilt_deg: float) -> "AntennaPattern":
        return AntennaPattern(self.boresight_gain_dbi, self.beamwidth_deg, self.floor_gain_dbi, yaw_deg, tilt_deg)

    @property
    def boresight(self) -> np.ndarray:
        return boresight_vector(self.yaw_deg, self.tilt_deg)


def isotropic(gain_dbi: float = 0.0) -> AntennaPattern:
    return AntennaPattern(gain_dbi, 360.0, gain_dbi)


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float
    path_loss_db: float
    tx_gain_dbi: float
    rx_gain_dbi: float
    extra_absorption_db: float
    noise_floor_dbm: float

    @property
    def snr_db(self) -> float:
        return (self.tx_power_dbm + self.tx_gain_dbi + self.rx_gain_dbi
                - self.path_loss_db - self.extra_absorption_db - self.noise_floor_dbm)

    @property
    def rx_power_dbm(self) -> float:
        return self.snr_db + self.noise_floor_dbm


def thermal_noise_dbm(bandwidth_hz: float, noise_figure_db: float = 7.0) -> float:
    return THERMAL_NOISE_DBM_HZ + 10 * math.log10(bandwidth_hz) + noise_figure_db


def boresight_vector(yaw_deg: float, tilt_deg: float) -> np.ndarray:
    yaw, tilt = math.radians(yaw_deg), math.radians(tilt_deg)
    return np.array([math.sin(tilt) * math.cos(yaw), math.sin(tilt) * math.sin(yaw), -math.cos(tilt)])


def direction_angles(frm: Position3D, to: Position3D) -> tuple[float, float]:
    """(yaw, tilt) in degrees of the boresight that points from ``frm`` at ``to``."""
    d = to.xyz - frm.xyz
    n = float(np.linalg.norm(d))
    if n == 0:
        raise DomainError("coincident points have no direction")
    tilt = math.degrees(math.acos(max(-1.0, min(1.0, -d[2] / n))))
    yaw = math.degrees(math.atan2(d[1], d[0])) % 360.0
    return yaw, tilt


def free_space_loss_db(distance_m: float, freq_mhz: float) -> float:
    return 20 * math.log10(4 * math.pi * distance_m * freq_mhz * 1e6 / SPEED_OF_LIGHT)


# -- propagation --------------------------------------------------------------

def _segment_hits_box(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test for K segments against one closed box; returns a bool mask (K,)."""
    d = p1 - p0
    t_enter = np.zeros(len(p0))
    t_exit = np.ones(len(p0))
    hit = np.ones(len(p0), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for ax in range(3):
            parallel = d[:, ax] == 0
            inside = (p0[:, ax] >= lo[ax]) & (p0[:, ax] <= hi[ax])
            hit &= ~parallel | inside
            ta = (lo[ax] - p0[:, ax]) / d[:, ax]
            tb = (hi[ax] - p0[:, ax]) / d[:, ax]
            t_near = np.where(parallel, -np.inf, np.minimum(ta, tb))
            t_far = np.where(parallel, np.inf, np.maximum(ta, tb))
            t_enter = np.maximum(t_enter, t_near)
            t_exit = np.minimum(t_exit, t_far)
    return hit & (t_enter <= t_exit)


def obstacle_loss_many(p0: np.ndarray, p1: np.ndarray, obstacles: Iterable[Obstacle]) -> np.ndarray:
    """Summed attenuation of every obstacle crossed by each segment p0[k] -> p1[k]."""
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    p0, p1 = np.broadcast_arrays(p0, p1)
    total = np.zeros(len(p0))
    for ob in obstacles:
        total += np.where(_segment_hits_box(p0, p1, ob.lo, ob.hi), ob.attenuation_db, 0.0)
    return total


def path_loss(tx: Position3D, rx: Position3D, freq_mhz: float, world: WorldModel) -> float:
    if freq_mhz <= 0:
        raise DomainError("frequency must be > 0")
    d = tx.distance(rx)
    if d == 0:
        raise DomainError("path loss undefined for coincident endpoints")
    d0 = world.reference_distance
    pl = free_space_loss_db(d0, freq_mhz) + 10 * world.path_loss_exponent * math.log10(d / d0)
    pl += sum(ob.attenuation_db for ob in world.obstacles if ob.intersects(tx, rx))
    return pl


def path_loss_many(tx: np.ndarray, rx: np.ndarray, freq_mhz: float, world: WorldModel) -> np.ndarray:
    """Vectorised `path_loss` over broadcastable (…,3) endpoint arrays."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    tx, rx = np.broadcast_arrays(tx, rx)
    shape = tx.shape[:-1]
    a = tx.reshape(-1, 3)
    b = rx.reshape(-1, 3)
    d = np.linalg.norm(a - b, axis=1)
    if np.any(d == 0):
        raise DomainError("path loss undefined for coincident endpoints")
    d0 = world.reference_distance
    pl = free_space_loss_db(d0, freq_mhz) + 10 * world.path_loss_exponent * np.log10(d / d0)
    if world.obstacles:
        pl = pl + obstacle_loss_many(a, b, world.obstacles)
    return pl.reshape(shape)


def extra_absorption_db(distance_m, freq_mhz: float):
    if freq_mhz >= OXYGEN_BAND_MHZ:
        return OXYGEN_ABSORPTION_DB_PER_M * distance_m
    return 0.0 * distance_m


# -- antennas -----------------------------------------------------------------

def off_boresight_deg(pattern: AntennaPattern, frm: Position3D, to: Position3D) -> float:
    v = to.xyz - frm.xyz
    n = float(np.linalg.norm(v))
    if n == 0:
        raise DomainError("antenna gain undefined for coincident points")
    c = float(np.dot(pattern.boresight, v) / n)
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def antenna_gain(pattern: AntennaPattern, frm: Position3D, to: Position3D) -> float:
    angle = off_boresight_deg(pattern, frm, to)
    if angle <= pattern.beamwidth_deg / 2 + ANGLE_EPS_DEG:
        return pattern.boresight_gain_dbi
    return pattern.floor_gain_dbi


def in_cone_many(frm: np.ndarray, to: np.ndarray, yaw_deg, tilt_deg, beamwidth_deg: float) -> np.ndarray:
    """Cone membership for broadcastable arrays; yaw/tilt broadcast against frm[..., 0]."""
    frm = np.asarray(frm, dtype=float)
    to = np.asarray(to, dtype=float)
    yaw = np.radians(np.asarray(yaw_deg, dtype=float))
    tilt = np.radians(np.asarray(tilt_deg, dtype=float))
    bx = np.sin(tilt) * np.cos(yaw)
    by = np.sin(tilt) * np.sin(yaw)
    bz = -np.cos(tilt)
    v = to - frm
    n = np.linalg.norm(v, axis=-1)
    if np.any(n == 0):
        raise DomainError("antenna gain undefined for coincident points")
    c = (bx * v[..., 0] + by * v[..., 1] + bz * v[..., 2]) / n
    angle = np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))
    return angle <= beamwidth_deg / 2 + ANGLE_EPS_DEG


# -- link budget and rate ----------------------------------------------------

def link_budget(tx_power_dbm: float, tx_pat: AntennaPattern, tx: Position3D, rx_pat: AntennaPattern,
                rx: Position3D, freq_mhz: float, world: WorldModel,
                noise_floor_dbm: float | None = None) -> LinkBudget:
    pl = path_loss(tx, rx, freq_mhz, world)
    return LinkBudget(
        tx_power_dbm=tx_power_dbm,
        path_loss_db=pl,
        tx_gain_dbi=antenna_gain(tx_pat, tx, rx),
        rx_gain_dbi=antenna_gain(rx_pat, rx, tx),
        extra_absorption_db=extra_absorption_db(tx.distance(rx), freq_mhz),
        noise_floor_dbm=world.access_noise_floor_dbm if noise_floor_dbm is None else noise_floor_dbm,
    )


def link_snr(tx_power_dbm: float, tx_pat: AntennaPattern, tx: Position3D, rx_pat: AntennaPattern,
             rx: Position3D, freq_mhz: float, world: WorldModel,
             noise_floor_dbm: float | None = None) -> float:
    return link_budget(tx_power_dbm, tx_pat, tx, rx_pat, rx, freq_mhz, world, noise_floor_dbm).snr_db


def access_snr_matrix(tx_pos: np.ndarray, yaws: np.ndarray, tilts: np.ndarray, ues: np.ndarray,
                      pattern: AntennaPattern, tx_power_dbm: float, world: WorldModel) -> np.ndarray:
    """Downlink SNR (N, M) from N oriented UAV positions to M ground receivers."""
    tx_pos = np.asarray(tx_pos, dtype=float)[:, None, :]
    ues = np.asarray(ues, dtype=float)[None, :, :]
    yaws = np.asarray(yaws, dtype=float)[:, None]
    tilts = np.asarray(tilts, dtype=float)[:, None]
    pl = path_loss_many(tx_pos, ues, world.access_freq_mhz, world)
    d = np.linalg.norm(tx_pos - ues, axis=-1)
    gain = np.where(in_cone_many(tx_pos, ues, yaws, tilts, pattern.beamwidth_deg),
                    pattern.boresight_gain_dbi, pattern.floor_gain_dbi)
    absorption = extra_absorption_db(d, world.access_freq_mhz)
    return tx_power_dbm + gain + world.ue_gain_dbi - pl - absorption - world.access_noise_floor_dbm


def snr_to_rate(snr_db: float, bandwidth_hz: float, rate: RateModel = RateModel()) -> float:
    if bandwidth_hz <= 0:
        raise DomainError("bandwidth must be > 0")
    if snr_db < rate.demod_floor_db:
        return 0.0
    se = math.log2(1 + 10 ** (snr_db / 10))
    return bandwidth_hz * min(se, rate.spectral_efficiency_cap)


def snr_to_rate_many(snr_db: np.ndarray, bandwidth_hz: float, rate: RateModel = RateModel()) -> np.ndarray:
    snr_db = np.asarray(snr_db, dtype=float)
    se = np.minimum(np.log2(1 + 10 ** (snr_db / 10)), rate.spectral_efficiency_cap)
    return np.where(snr_db < rate.demod_floor_db, 0.0, bandwidth_hz * se)


def coverage_footprint(uav: Position3D, pattern: AntennaPattern, world: WorldModel, min_snr_db: float,
                       tx_power_dbm: float) -> frozenset[Cell]:
    """Ground cells inside the antenna cone whose downlink SNR is at least ``min_snr_db``."""
    if uav.z <= 0:
        raise DomainError("footprint requires an airborne UAV")
    cells = world.cells()
    centers = world.cell_centers(cells)
    snr = access_snr_matrix(uav.xyz[None, :], np.array([pattern.yaw_deg]), np.array([pattern.tilt_deg]),
                            centers, pattern, tx_power_dbm, world)[0]
    in_cone = in_cone_many(uav.xyz[None, :], centers, pattern.yaw_deg, pattern.tilt_deg, pattern.beamwidth_deg)
    keep = in_cone & (snr >= min_snr_db)
    return frozenset(c for c, k in zip(cells, keep) if k)
