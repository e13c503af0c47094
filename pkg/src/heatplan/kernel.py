"""Collision-avoiding diffusion kernel pipeline.

Evolving point masses through the insulated heat equation yields per-source
kernels; evolving the goal distribution directly gives the perturbed
distribution at each noise level (the two coincide by linearity). Finalizing
a raw field smooths it, re-zeros obstacles, confines mass to the free-space
components it started in, and normalizes to unit sum, so probability never
appears on obstacles or across walls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .gridmap import _CROSS, GridMap, Scenario
from .heat import HeatField, SolverParams, delta_field, evolve, evolve_snapshots, steps_for_dispersion_time

PROB_SUM_TOL = 1e-12


@dataclass(frozen=True)
class KernelSchedule:
    """Geometric dispersion-time schedule k(t) for t in {1..T}."""

    T: int = 10
    k_min: float = 12.5
    k_max: float = 3612.5

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("need at least two diffusion levels")
        if not 0 < self.k_min < self.k_max:
            raise ValueError("require 0 < k_min < k_max")

    def k(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"level {t} outside 1..{self.T}")
        return self.k_min * (self.k_max / self.k_min) ** ((t - 1) / (self.T - 1))

    def sigma(self, t: int) -> float:
        """Std of the free-space Gaussian heat kernel at level t."""
        return float(np.sqrt(2.0 * self.k(t)))

    def level_steps(self, params: SolverParams | None = None) -> list[int]:
        return [steps_for_dispersion_time(self.k(t), params) for t in range(1, self.T + 1)]


@dataclass(frozen=True)
class KernelParams:
    """Goal dispersion time h and the post-evolution Gaussian smoothing std."""

    h: float = 2.0
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be non-negative")


@dataclass(frozen=True, eq=False)
class ProbabilityField:
    """Normalized non-negative field with zero mass on obstacle cells."""

    values: np.ndarray
    role: str = "pt"

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("values must be 2-D")
        if (vals < 0).any():
            raise ValueError("probabilities must be non-negative")
        total = float(vals.sum())
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"field sums to {total!r}, not 1")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ProbabilityField)
            and self.role == other.role
            and np.array_equal(self.values, other.values)
        )


def finalize(
    raw: HeatField, grid: GridMap, params: KernelParams | None = None, role: str = "pt"
) -> ProbabilityField:
    """Smooth, re-mask, confine to the source components, and normalize.

    The Gaussian blur ignores walls, so its output is zeroed on obstacle
    cells and on free components that held no pre-blur mass; otherwise the
    smoothing could fabricate probability inside sealed regions.
    """
    params = params or KernelParams()
    if raw.values.shape != grid.occupancy.shape:
        raise ValueError("field and map dimensions differ")
    if raw.total_mass <= 0:
        raise ValueError("raw field has no mass")
    values = raw.values.astype(np.float64, copy=True)
    support = values > 0
    if params.smooth_sigma > 0:
        values = ndimage.gaussian_filter(values, params.smooth_sigma, mode="reflect")
    values[grid.occupancy] = 0.0
    labels, _ = ndimage.label(grid.free_mask, structure=_CROSS)
    keep = np.unique(labels[support & grid.free_mask])
    keep = keep[keep > 0]
    values[~np.isin(labels, keep)] = 0.0
    np.maximum(values, 0.0, out=values)
    total = values.sum()
    if total <= 0:
        raise ValueError("no probability mass left after masking")
    values /= total
    return ProbabilityField(values, role)


def goal_distribution(
    scenario: Scenario,
    params: KernelParams | None = None,
    goal_subset: str = "all",
    solver: SolverParams | None = None,
) -> ProbabilityField:
    """Equal-mass goal deltas evolved for dispersion time h, finalized.

    goal_subset "all" builds the planner's p0; "reachable_only" builds the
    evaluation ground truth.
    """
    if goal_subset not in ("all", "reachable_only"):
        raise ValueError(f"unknown goal subset {goal_subset!r}")
    params = params or KernelParams()
    cells = scenario.goal_cells(reachable_only=goal_subset == "reachable_only")
    if not cells:
        raise ValueError("selected goal set is empty")
    raw = delta_field(scenario.map, cells)
    steps = steps_for_dispersion_time(params.h, solver)
    evolved = evolve(raw, scenario.map, steps, solver)
    role = "p0" if goal_subset == "all" else "pgoal"
    return finalize(evolved, scenario.map, params, role)


def perturbed_raw(
    p0: ProbabilityField,
    t: int,
    schedule: KernelSchedule,
    grid: GridMap,
    solver: SolverParams | None = None,
) -> HeatField:
    """Pre-finalize evolution of p0 to level t (the superposition oracle target)."""
    steps = steps_for_dispersion_time(schedule.k(t), solver)
    return evolve(HeatField(p0.values), grid, steps, solver)


def perturbed_distribution(
    p0: ProbabilityField,
    t: int,
    schedule: KernelSchedule,
    grid: GridMap,
    params: KernelParams | None = None,
    solver: SolverParams | None = None,
) -> ProbabilityField:
    """Goal distribution diffused to level t; equals the per-source mixture."""
    raw = perturbed_raw(p0, t, schedule, grid, solver)
    return finalize(raw, grid, params, "pt")


def kernel_from_source(
    x0_cell: tuple[int, int],
    t: int,
    schedule: KernelSchedule,
    grid: GridMap,
    params: KernelParams | None = None,
    solver: SolverParams | None = None,
) -> ProbabilityField:
    """Collision-avoiding kernel p0t(.|x0): a unit delta evolved to level t."""
    raw = delta_field(grid, [x0_cell], [1.0])
    steps = steps_for_dispersion_time(schedule.k(t), solver)
    evolved = evolve(raw, grid, steps, solver)
    return finalize(evolved, grid, params, "p0t")


def build_level_stack(
    p0: ProbabilityField,
    schedule: KernelSchedule,
    grid: GridMap,
    params: KernelParams | None = None,
    solver: SolverParams | None = None,
) -> list[ProbabilityField]:
    """Perturbed distributions for every level, sharing the evolution prefix.

    Bit-identical to perturbed_distribution level by level.
    """
    counts = schedule.level_steps(solver)
    snaps = evolve_snapshots(HeatField(p0.values), grid, counts, solver)
    return [finalize(s, grid, params, "pt") for s in snaps]
