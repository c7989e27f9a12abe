"""Time-of-flight ranging and ground-plane trilateration of UEs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world import Position3D

GRAD_TOL = 1e-9
MAX_ITER = 200
COLLINEAR_TOL = 1e-6


class IllConditionedError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, best: "UeEstimate"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class RangeMeasurement:
    waypoint: Position3D
    measured_range: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.measured_range < 0:
            raise ValueError("measured range must be >= 0")


@dataclass(frozen=True)
class UeEstimate:
    position: Position3D
    residual_rms: float
    measurement_count: int
    iterations: int = 0


@dataclass(frozen=True)
class WaypointPlan:
    waypoints: tuple[Position3D, ...]
    degenerate: bool = False


def measure_range(uav: Position3D, ue_true: Position3D, sigma: float, rng: np.random.Generator) -> RangeMeasurement:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    noise = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    return RangeMeasurement(uav, max(0.0, uav.distance(ue_true) + noise), sigma)


def _xy_collinear(xy: np.ndarray, tol: float = COLLINEAR_TOL) -> bool:
    """True when all points lie on one line (or coincide), relative to their spread."""
    if len(xy) < 3:
        return True
    centered = xy - xy.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0:
        return True
    return s[1] <= tol * s[0]


def plan_ranging_waypoints(airspace: Sequence[Position3D], k: int) -> WaypointPlan:
    """Greedy farthest-point selection of ``k`` ranging waypoints.

    Diversity is measured in the horizontal plane, since only the (x, y)
    spread conditions the ground-plane solve.  The first pick is the point
    nearest the airspace centroid; ties always go to the lowest index of
    the sorted airspace.
    """
    if k < 3:
        raise ValueError("need at least 3 waypoints")
    pts = sorted(set(airspace))
    if len(pts) < k:
        return WaypointPlan(tuple(pts), degenerate=True)
    xyz = np.array([p.xyz for p in pts])
    xy = xyz[:, :2]
    if _xy_collinear(xy):
        return WaypointPlan(tuple(pts[:k]), degenerate=True)
    if k == len(pts):
        return WaypointPlan(tuple(pts))

    centroid = xyz.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(xyz - centroid, axis=1)))
    chosen = [first]
    mind = np.linalg.norm(xy - xy[first], axis=1)
    mind[first] = -1.0
    while len(chosen) < k:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(xy - xy[nxt], axis=1))
        mind[chosen] = -1.0

    if _xy_collinear(xy[chosen]):
        # swap the last pick for the point farthest off the chosen line
        base = xy[chosen[0]]
        direction = xy[chosen[1]] - base
        direction = direction / np.linalg.norm(direction)
        rel = xy - base
        off = np.abs(rel[:, 0] * direction[1] - rel[:, 1] * direction[0])
        off[chosen[:-1]] = -1.0
        chosen[-1] = int(np.argmax(off))
    return WaypointPlan(tuple(pts[i] for i in chosen))


def _objective(p: np.ndarray, w: np.ndarray, r: np.ndarray):
    diff = np.column_stack([p[0] - w[:, 0], p[1] - w[:, 1], -w[:, 2]])
    dist = np.linalg.norm(diff, axis=1)
    return dist - r, diff, dist


def _linearised_start(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Closed-form (x, y) from differenced squared-range equations; exact for noiseless data."""
    sq = (w ** 2).sum(axis=1)
    a = 2 * (w[1:, :2] - w[0, :2])
    b = r[0] ** 2 - r[1:] ** 2 + sq[1:] - sq[0]
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol


def _levenberg_marquardt(p: np.ndarray, w: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, float, int, bool]:
    res, diff, dist = _objective(p, w, r)
    cost = float(res @ res)
    lam = 1e-3
    for it in range(1, MAX_ITER + 1):
        safe = np.where(dist > 0, dist, 1.0)
        jac = diff[:, :2] / safe[:, None]
        grad = jac.T @ res
        if np.linalg.norm(grad) <= GRAD_TOL:
            return p, cost, it - 1, True
        jtj = jac.T @ jac
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -grad)
            cand = p + step
            c_res, c_diff, c_dist = _objective(cand, w, r)
            c_cost = float(c_res @ c_res)
            if c_cost < cost:
                p, res, diff, dist, cost = cand, c_res, c_diff, c_dist, c_cost
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved:
            # no descent direction left at machine precision: stationary point
            return p, cost, it, True
    return p, cost, MAX_ITER, False


def trilaterate(measurements: Sequence[RangeMeasurement]) -> UeEstimate:
    """Levenberg-Marquardt solve of sum((|w_i - p| - r_i)^2) over ground-plane p.

    Two starts are refined: the waypoint centroid and the linearised
    closed-form solution.  The lower-cost result is returned, so the mirror
    minimum that traps a centroid start for UEs far outside the waypoint
    hull is avoided.
    """
    if len(measurements) < 3:
        raise IllConditionedError("trilateration needs at least 3 measurements")
    w = np.array([m.waypoint.xyz for m in measurements])
    r = np.array([m.measured_range for m in measurements])
    if _xy_collinear(w[:, :2]):
        raise IllConditionedError("ranging waypoints are collinear in the horizontal plane")

    n = len(measurements)
    runs = [_levenberg_marquardt(w[:, :2].mean(axis=0), w, r)]
    start = _linearised_start(w, r)
    if np.all(np.isfinite(start)):
        runs.append(_levenberg_marquardt(start, w, r))
    p, cost, iters, converged = min(runs, key=lambda run: run[1])
    est = UeEstimate(Position3D(float(p[0]), float(p[1]), 0.0), math.sqrt(cost / n), n, iters)
    if not converged:
        raise ConvergenceError("trilateration did not converge", est)
    return est
