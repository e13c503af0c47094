"""Comparison systems: behavior cloning, Gaussian diffusion, and RRT*.

The Gaussian baselines reuse the annealed Langevin machinery with the
analytic mixture score over all goals (obstacle-blind by construction) and
freeze on the first collision instead of redrawing noise. RRT* is a
standard grid planner with straight-line collision checks sampled every
quarter cell and neighbourhood rewiring.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy import ndimage

from .gridmap import _CROSS, GridMap, Scenario
from .kernel import KernelSchedule
from .sampler import (
    GaussianMixtureProvider,
    SamplerConfig,
    SimResult,
    StepSchedule,
    Trajectory,
    draw_initial_state,
    run_langevin,
    state_cell,
)
from .score import interpolate_vectors
from .seeds import make_rng

_SEG_STEP = 0.25


@dataclass(frozen=True, eq=False)
class BCFieldModel:
    """Per-cell mean expert displacement; zero vectors where no data exists.

    stationary_number mirrors the baseline's extra step-count input; it is
    recorded but has no effect on queries.
    """

    vectors: np.ndarray
    counts: np.ndarray
    stationary_number: int = 0

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if vec.ndim != 3 or vec.shape[2] != 2:
            raise ValueError("vectors must have shape (H, W, 2)")
        if not np.isfinite(vec).all():
            raise ValueError("BC vectors must be finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    def query(self, xy: np.ndarray) -> np.ndarray:
        return interpolate_vectors(self.vectors, np.asarray(xy, dtype=np.float64))


def bc_fit(expert_trajectories, grid: GridMap, stationary_number: int = 0) -> BCFieldModel:
    """Per-cell mean of expert step displacements (the MSE minimizer)."""
    trajs = list(expert_trajectories)
    if not trajs or all(len(t.states) < 2 for t in trajs):
        raise ValueError("expert data is empty")
    sums = np.zeros((grid.height, grid.width, 2))
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    for traj in trajs:
        states = np.asarray(traj.states)
        if len(states) < 2:
            continue
        steps = states[1:] - states[:-1]
        cx = np.floor(states[:-1, 0] + 0.5).astype(np.intp)
        cy = np.floor(states[:-1, 1] + 0.5).astype(np.intp)
        np.add.at(sums, (cy, cx), steps)
        np.add.at(counts, (cy, cx), 1)
    vectors = np.zeros_like(sums)
    visited = counts > 0
    vectors[visited] = sums[visited] / counts[visited][:, None]
    return BCFieldModel(vectors, counts, stationary_number)


def bc_rollout_batch(
    model: BCFieldModel, grid: GridMap, x_init: np.ndarray, n_steps: int
):
    """Deterministic x <- x + model(x) rollouts; obstacle steps freeze."""
    occ = grid.occupancy
    height, width = occ.shape
    pos = np.asarray(x_init, dtype=np.float64).reshape(-1, 2).copy()
    frozen = np.zeros(len(pos), dtype=bool)
    for _ in range(n_steps):
        act = np.nonzero(~frozen)[0]
        if act.size == 0:
            break
        nxt = pos[act] + model.query(pos[act])
        px, py = nxt[:, 0], nxt[:, 1]
        in_dom = (px >= 0) & (px <= width - 1) & (py >= 0) & (py <= height - 1)
        cx = np.clip(np.floor(px + 0.5).astype(np.intp), 0, width - 1)
        cy = np.clip(np.floor(py + 0.5).astype(np.intp), 0, height - 1)
        ok = in_dom & ~occ[cy, cx]
        pos[act[ok]] = nxt[ok]
        frozen[act[~ok]] = True
    return pos, frozen


def bc_rollout(model: BCFieldModel, scenario: Scenario, x_init, n_steps: int = 1000) -> Trajectory:
    """Recorded single rollout; freezes (and stops) on an obstacle step."""
    grid = scenario.map
    occ = grid.occupancy
    pos = np.asarray(x_init, dtype=np.float64).reshape(2).copy()
    if occ[state_cell(pos[0], pos[1])[1], state_cell(pos[0], pos[1])[0]]:
        raise ValueError("initial state lies in an obstacle cell")
    states = [pos.copy()]
    frozen = False
    for _ in range(n_steps):
        nxt = pos + model.query(pos.reshape(1, 2))[0]
        inside = 0 <= nxt[0] <= grid.width - 1 and 0 <= nxt[1] <= grid.height - 1
        if inside:
            cx, cy = state_cell(nxt[0], nxt[1])
            inside = not occ[cy, cx]
        if not inside:
            frozen = True
            break
        pos = nxt
        states.append(pos.copy())
    return Trajectory(
        np.array(states), np.zeros(len(states) - 1, dtype=np.int64), frozen, 0
    )


# ---------------------------------------------------------------------------
# RRT*


@dataclass(frozen=True)
class RRTStarConfig:
    max_iterations: int = 5000
    step_size: float = 2.0
    neighborhood_radius: float = 6.0
    goal_bias: float = 0.05
    seed: int = 0
    stop_on_goal: bool = False

    def __post_init__(self):
        if min(self.max_iterations, self.step_size, self.neighborhood_radius) <= 0:
            raise ValueError("iterations, step size, and radius must be positive")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal_bias must lie in [0, 1)")


@njit(cache=True)
def _segment_free(occ, x0, y0, x1, y1):
    # Points every _SEG_STEP cells of arclength, plus both endpoints.
    width = occ.shape[1]
    height = occ.shape[0]
    dx = x1 - x0
    dy = y1 - y0
    dist = (dx * dx + dy * dy) ** 0.5
    n = int(dist / _SEG_STEP)
    for i in range(n + 2):
        s = i * _SEG_STEP / dist if dist > 0 else 0.0
        if i == n + 1 or s > 1.0:
            s = 1.0
        px = x0 + dx * s
        py = y0 + dy * s
        if px < 0 or px > width - 1 or py < 0 or py > height - 1:
            return False
        cx = int(math.floor(px + 0.5))
        cy = int(math.floor(py + 0.5))
        if occ[cy, cx]:
            return False
    return True


@njit(cache=True)
def _rrt_core(occ, sx, sy, gx, gy, rand_u, step, radius, goal_bias, stop_on_goal):
    max_iter = rand_u.shape[0]
    width = occ.shape[1]
    height = occ.shape[0]
    nx = np.empty(max_iter + 1)
    ny = np.empty(max_iter + 1)
    parent = np.full(max_iter + 1, -1, dtype=np.int64)
    cost = np.zeros(max_iter + 1)
    nx[0] = sx
    ny[0] = sy
    n = 1
    r2 = radius * radius
    goal_parent = -1
    goal_cost = np.inf
    for it in range(max_iter):
        if rand_u[it, 0] < goal_bias:
            tx, ty = gx, gy
        else:
            tx = rand_u[it, 1] * (width - 1)
            ty = rand_u[it, 2] * (height - 1)
        best = 0
        bd = (nx[0] - tx) ** 2 + (ny[0] - ty) ** 2
        for i in range(1, n):
            d2 = (nx[i] - tx) ** 2 + (ny[i] - ty) ** 2
            if d2 < bd:
                bd = d2
                best = i
        dist = bd ** 0.5
        if dist < 1e-12:
            continue
        length = step if step < dist else dist
        newx = nx[best] + (tx - nx[best]) * (length / dist)
        newy = ny[best] + (ty - ny[best]) * (length / dist)
        if not _segment_free(occ, nx[best], ny[best], newx, newy):
            continue
        # Lowest-cost collision-free parent within the neighbourhood.
        par = best
        pcost = cost[best] + length
        for i in range(n):
            d2 = (nx[i] - newx) ** 2 + (ny[i] - newy) ** 2
            if d2 <= r2:
                c = cost[i] + d2 ** 0.5
                if c < pcost and _segment_free(occ, nx[i], ny[i], newx, newy):
                    pcost = c
                    par = i
        nx[n] = newx
        ny[n] = newy
        parent[n] = par
        cost[n] = pcost
        # Rewire neighbours through the new node where that is cheaper.
        for i in range(n):
            d2 = (nx[i] - newx) ** 2 + (ny[i] - newy) ** 2
            if d2 <= r2:
                c = pcost + d2 ** 0.5
                if c < cost[i] and _segment_free(occ, newx, newy, nx[i], ny[i]):
                    parent[i] = n
                    cost[i] = c
        gd = ((newx - gx) ** 2 + (newy - gy) ** 2) ** 0.5
        if gd <= step and _segment_free(occ, newx, newy, gx, gy):
            c = pcost + gd
            if c < goal_cost:
                goal_cost = c
                goal_parent = n
            if stop_on_goal:
                n += 1
                break
        n += 1
    return nx[:n], ny[:n], parent[:n], cost[:n], goal_parent


def _extract_path(nx, ny, parent, goal_parent, goal):
    chain = []
    i = goal_parent
    while i >= 0:
        chain.append((float(nx[i]), float(ny[i])))
        i = int(parent[i])
    chain.reverse()
    chain.append((float(goal[0]), float(goal[1])))
    return np.array(chain)


def _check_endpoint(grid: GridMap, point, label: str):
    x, y = float(point[0]), float(point[1])
    if not (0 <= x <= grid.width - 1 and 0 <= y <= grid.height - 1):
        raise ValueError(f"{label} outside the map domain")
    cx, cy = state_cell(x, y)
    if grid.occupancy[cy, cx]:
        raise ValueError(f"{label} lies in an obstacle cell")


def rrt_star(
    grid: GridMap, start, goal, config: RRTStarConfig, return_tree: bool = False
):
    """Plan a collision-free polyline from start to goal.

    Returns the path as an (N, 2) array, or None after max_iterations when
    no connection was found (an unreachable goal is a failure result, not an
    error). Deterministic for a fixed config seed.
    """
    _check_endpoint(grid, start, "start")
    _check_endpoint(grid, goal, "goal")
    rng = make_rng(config.seed)
    rand_u = rng.random((config.max_iterations, 3))
    nx, ny, parent, cost, goal_parent = _rrt_core(
        grid.occupancy,
        float(start[0]),
        float(start[1]),
        float(goal[0]),
        float(goal[1]),
        rand_u,
        config.step_size,
        config.neighborhood_radius,
        config.goal_bias,
        config.stop_on_goal,
    )
    path = None if goal_parent < 0 else _extract_path(nx, ny, parent, goal_parent, goal)
    if return_tree:
        tree = {
            "nodes": [
                {"x": float(nx[i]), "y": float(ny[i]), "parent": int(parent[i]), "cost": float(cost[i])}
                for i in range(len(nx))
            ]
        }
        return path, tree
    return path


def tree_to_json(tree: dict) -> str:
    return json.dumps(tree, separators=(",", ":"))


def path_length(path: np.ndarray) -> float:
    diffs = np.diff(np.asarray(path, dtype=np.float64), axis=0)
    return float(np.hypot(diffs[:, 0], diffs[:, 1]).sum())


# ---------------------------------------------------------------------------
# Gaussian diffusion baselines


def gaussian_provider(scenario: Scenario, schedule: KernelSchedule) -> GaussianMixtureProvider:
    """Analytic mixture over all goals, reachable or not, capped sigma."""
    means = np.array([[g.x, g.y] for g in scenario.goals], dtype=np.float64)
    return GaussianMixtureProvider.from_schedule(means, schedule, scenario.map.width)


def gaussian_diffusion_batch(
    scenario: Scenario,
    schedule: KernelSchedule,
    config: SamplerConfig,
    seeds,
    grid: GridMap | None = None,
    record: bool = False,
) -> SimResult:
    """Annealed Langevin with the Gaussian score; collisions freeze.

    grid overrides the collision map (the goal-sampling stage of the RRT*
    baseline runs on an obstacle-free copy).
    """
    grid = grid or scenario.map
    provider = gaussian_provider(scenario, schedule)
    rngs = [make_rng(s) for s in seeds]
    x_init = np.array([draw_initial_state(scenario, g) for g in rngs])
    steps = StepSchedule.build(schedule, grid.width, config.epsilon)
    return run_langevin(
        grid, provider, x_init, steps, config, rngs,
        collision="freeze", record=record, seeds=list(seeds),
    )


def gaussian_diffusion_sample(
    scenario: Scenario, schedule: KernelSchedule, config: SamplerConfig, seed: int
) -> Trajectory:
    """Single recorded trajectory of the obstacle-blind Gaussian baseline."""
    result = gaussian_diffusion_batch(scenario, schedule, config, [seed], record=True)
    return result.trajectories[0]


def gaussian_plus_rrt(
    scenario: Scenario,
    schedule: KernelSchedule,
    config: SamplerConfig,
    rrt_config: RRTStarConfig,
    seed: int,
) -> Trajectory:
    """Sample a goal with Gaussian diffusion on an obstacle-free copy, then
    plan to it with RRT* on the true map; planning failure freezes at the
    initial state.

    Goals in obstacles or in a different free-space component than the start
    are planning failures without burning iterations (RRT* could never
    connect them).
    """
    rng = make_rng(seed)
    x_init = draw_initial_state(scenario, rng)
    free_map = scenario.map.all_free_copy()
    provider = gaussian_provider(scenario, schedule)
    steps = StepSchedule.build(schedule, free_map.width, config.epsilon)
    sim = run_langevin(
        free_map, provider, x_init.reshape(1, 2), steps, config, [rng],
        collision="freeze", seeds=[seed],
    )
    goal = sim.finals[0]

    occ = scenario.map.occupancy
    gx, gy = state_cell(goal[0], goal[1])
    sx, sy = state_cell(x_init[0], x_init[1])
    labels, _ = ndimage.label(~occ, structure=_CROSS)
    reachable_goal = (not occ[gy, gx]) and labels[gy, gx] == labels[sy, sx]
    path = None
    if reachable_goal:
        rand_u = rng.random((rrt_config.max_iterations, 3))
        nx, ny, parent, cost, goal_parent = _rrt_core(
            occ, float(x_init[0]), float(x_init[1]), float(goal[0]), float(goal[1]),
            rand_u, rrt_config.step_size, rrt_config.neighborhood_radius,
            rrt_config.goal_bias, rrt_config.stop_on_goal,
        )
        if goal_parent >= 0:
            path = _extract_path(nx, ny, parent, goal_parent, goal)
    if path is None:
        return Trajectory(x_init.reshape(1, 2), np.zeros(0, dtype=np.int64), True, seed)
    return Trajectory(path, np.zeros(len(path) - 1, dtype=np.int64), False, seed)
