"""Benchmark protocol: success rate and KL divergence per model and scenario kind.

Each scenario kind runs n_episodes seeded scenarios with n_samples final
states per model; frozen samples score at their frozen location, and a model
failure on an episode freezes that episode's samples at their initial
states. KL compares the reachable-goal ground truth against the smoothed
per-episode empirical histogram and is averaged over episodes.
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .baselines import (
    RRTStarConfig,
    bc_fit,
    bc_rollout_batch,
    gaussian_diffusion_batch,
    gaussian_plus_rrt,
)
from .gridmap import Goal, GridMap, MapGenConfig, Scenario, generate_scenario
from .heat import SolverParams
from .kernel import (
    KernelParams,
    KernelSchedule,
    ProbabilityField,
    build_level_stack,
    goal_distribution,
)
from .sampler import (
    FieldStackProvider,
    SamplerConfig,
    StepSchedule,
    draw_initial_state,
    run_langevin,
)
from .score import score_field
from .seeds import hash64, make_rng


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    n_samples: int = 100
    success_radius: float = 3.0
    kl_smoothing: float = 1e-9
    base_seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 1 or self.n_samples < 1:
            raise ValueError("need at least one episode and one sample")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.kl_smoothing <= 0:
            raise ValueError("kl_smoothing must be positive")


def success_rate(final_states, scenario: Scenario, r_succ: float) -> float:
    """Percentage of finals within r_succ of any reachable goal center."""
    finals = np.asarray(final_states, dtype=np.float64).reshape(-1, 2)
    if len(finals) == 0:
        raise ValueError("no final states")
    goals = [g for g in scenario.goals if g.reachable]
    if not goals:
        return 0.0
    hit = np.zeros(len(finals), dtype=bool)
    for g in goals:
        hit |= np.hypot(finals[:, 0] - g.x, finals[:, 1] - g.y) <= r_succ
    return 100.0 * float(hit.mean())


def kl_divergence(final_states, p_goal: ProbabilityField, delta: float) -> float:
    """KL(p_goal || smoothed empirical) in nats, binned to nearest cells."""
    finals = np.asarray(final_states, dtype=np.float64).reshape(-1, 2)
    width, height = p_goal.width, p_goal.height
    cx = np.clip(np.floor(finals[:, 0] + 0.5).astype(np.intp), 0, width - 1)
    cy = np.clip(np.floor(finals[:, 1] + 0.5).astype(np.intp), 0, height - 1)
    hist = np.zeros((height, width))
    np.add.at(hist, (cy, cx), 1.0)
    hist /= hist.sum()
    free = p_goal.values > 0
    # Smoothing support: every cell that may legally carry probability mass.
    support = free | (hist > 0)
    smoothed = np.where(support, hist + delta, 0.0)
    smoothed /= smoothed.sum()
    p = p_goal.values[free]
    q = smoothed[free]
    return float(np.sum(p * np.log(p / q)))


@dataclass
class EpisodeOutcome:
    finals: np.ndarray
    frozen: np.ndarray
    n_proposals: int = 0
    n_rejections: int = 0
    failed: bool = False


class PlannerModel:
    """Common interface: prepare once per scenario, then sample a batch.

    sample(scenario, sample_seed) gives the single final state the benchmark
    protocol is defined over; sample_batch must agree with it bitwise.
    """

    name = "model"

    def prepare(self, scenario: Scenario):
        return None

    def sample_batch(self, scenario: Scenario, ctx, seeds) -> EpisodeOutcome:
        raise NotImplementedError

    def sample(self, scenario: Scenario, sample_seed: int) -> np.ndarray:
        ctx = self.prepare(scenario)
        return self.sample_batch(scenario, ctx, [sample_seed]).finals[0]


def _initial_states(scenario: Scenario, seeds) -> np.ndarray:
    return np.array([draw_initial_state(scenario, make_rng(s)) for s in seeds])


@dataclass
class HeatKernelPlanner(PlannerModel):
    """The primary method: exact score fields of the heat-kernel pipeline."""

    schedule: KernelSchedule = field(default_factory=KernelSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    kernel_params: KernelParams = field(default_factory=KernelParams)
    solver: SolverParams = field(default_factory=SolverParams)
    name = "ours"

    def prepare(self, scenario: Scenario):
        p0 = goal_distribution(scenario, self.kernel_params, "all", self.solver)
        stack = build_level_stack(
            p0, self.schedule, scenario.map, self.kernel_params, self.solver
        )
        return FieldStackProvider([score_field(p) for p in stack])

    def sample_batch(self, scenario, provider, seeds) -> EpisodeOutcome:
        rngs = [make_rng(s) for s in seeds]
        x_init = np.array([draw_initial_state(scenario, g) for g in rngs])
        steps = StepSchedule.build(self.schedule, scenario.map.width, self.sampler.epsilon)
        sim = run_langevin(
            scenario.map, provider, x_init, steps, self.sampler, rngs,
            collision="reject", seeds=list(seeds),
        )
        return EpisodeOutcome(sim.finals, sim.frozen, sim.n_proposals, sim.n_rejections)


@dataclass
class GaussianDiffusionPlanner(PlannerModel):
    """Obstacle-blind Gaussian score; first collision freezes the sample."""

    schedule: KernelSchedule = field(default_factory=KernelSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    name = "gaussian_diffusion"

    def sample_batch(self, scenario, ctx, seeds) -> EpisodeOutcome:
        sim = gaussian_diffusion_batch(scenario, self.schedule, self.sampler, seeds)
        return EpisodeOutcome(sim.finals, sim.frozen, sim.n_proposals, sim.n_rejections)


@dataclass
class GaussianRRTPlanner(PlannerModel):
    """Gaussian goal sampling on a free copy plus RRT* motion planning."""

    schedule: KernelSchedule = field(default_factory=KernelSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rrt: RRTStarConfig = field(default_factory=lambda: RRTStarConfig(stop_on_goal=True))
    name = "gaussian_rrt_star"

    def sample_batch(self, scenario, ctx, seeds) -> EpisodeOutcome:
        finals = np.empty((len(seeds), 2))
        frozen = np.zeros(len(seeds), dtype=bool)
        for i, s in enumerate(seeds):
            traj = gaussian_plus_rrt(scenario, self.schedule, self.sampler, self.rrt, s)
            finals[i] = traj.final_state
            frozen[i] = traj.frozen
        return EpisodeOutcome(finals, frozen)


# Expert runs for behaviour cloning use a cold, drift-dominated variant of the
# modified sampler so the demonstrations head for the goal from the first
# step; default-temperature chains spend their high-noise levels wandering,
# which would leave near-zero mean displacements around the start region.
EXPERT_SAMPLER = SamplerConfig(mode="modified", k1=0.35, k2=1.45, max_drift=0.02)


@dataclass
class BCPlanner(PlannerModel):
    """Behaviour cloning on trajectories of the primary method.

    One expert set per goal (the goal's single-goal scenario variant),
    pooled into a per-cell mean displacement field.
    """

    schedule: KernelSchedule = field(default_factory=KernelSchedule)
    expert_sampler: SamplerConfig = field(default_factory=lambda: EXPERT_SAMPLER)
    kernel_params: KernelParams = field(default_factory=KernelParams)
    solver: SolverParams = field(default_factory=SolverParams)
    n_experts_per_goal: int = 24
    rollout_steps: int = 1000
    name = "bc"

    def expert_trajectories(self, scenario: Scenario) -> list:
        experts = []
        steps = StepSchedule.build(
            self.schedule, scenario.map.width, self.expert_sampler.epsilon
        )
        for gi, goal in enumerate(scenario.goals):
            variant = Scenario(
                scenario.map, (goal,), scenario.initial_region, scenario.seed
            )
            p0 = goal_distribution(variant, self.kernel_params, "all", self.solver)
            stack = build_level_stack(
                p0, self.schedule, scenario.map, self.kernel_params, self.solver
            )
            provider = FieldStackProvider([score_field(p) for p in stack])
            seeds = [hash64(scenario.seed, 0xBC, gi, e) for e in range(self.n_experts_per_goal)]
            rngs = [make_rng(s) for s in seeds]
            x_init = np.array([draw_initial_state(scenario, g) for g in rngs])
            sim = run_langevin(
                scenario.map, provider, x_init, steps, self.expert_sampler, rngs,
                collision="reject", record=True, seeds=seeds,
            )
            experts.extend(sim.trajectories)
        return experts

    def prepare(self, scenario: Scenario):
        return bc_fit(self.expert_trajectories(scenario), scenario.map)

    def sample_batch(self, scenario, model, seeds) -> EpisodeOutcome:
        x_init = _initial_states(scenario, seeds)
        finals, frozen = bc_rollout_batch(model, scenario.map, x_init, self.rollout_steps)
        return EpisodeOutcome(finals, frozen)


def default_models(
    schedule: KernelSchedule | None = None,
    sampler: SamplerConfig | None = None,
    kernel_params: KernelParams | None = None,
) -> list[PlannerModel]:
    schedule = schedule or KernelSchedule()
    sampler = sampler or SamplerConfig()
    kernel_params = kernel_params or KernelParams()
    return [
        HeatKernelPlanner(schedule, sampler, kernel_params),
        BCPlanner(schedule, kernel_params=kernel_params),
        GaussianDiffusionPlanner(schedule, sampler),
        GaussianRRTPlanner(schedule, sampler),
    ]


@dataclass
class MetricsRow:
    model: str
    scenario: str
    success_rate: float
    kl_divergence: float
    stats: dict = field(default_factory=dict)


@dataclass
class MetricsTable:
    rows: list[MetricsRow]

    def row(self, model: str, scenario: str) -> MetricsRow:
        for r in self.rows:
            if r.model == model and r.scenario == scenario:
                return r
        raise KeyError((model, scenario))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "scenario", "success_rate", "kl_divergence"])
        for r in self.rows:
            writer.writerow([r.model, r.scenario, repr(r.success_rate), repr(r.kl_divergence)])
        return buf.getvalue()

    def to_report(self, config_echo: dict | None = None) -> dict:
        return {
            "build": build_id(),
            "config": config_echo or {},
            "rows": [
                {
                    "model": r.model,
                    "scenario": r.scenario,
                    "success_rate": r.success_rate,
                    "kl_divergence": r.kl_divergence,
                    "stats": r.stats,
                }
                for r in self.rows
            ],
        }


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"heatplan-{__version__}"


def _episode_task(args):
    (kind, episode, models, eval_config, map_config, kernel_params) = args
    scn_config = replace(map_config, scenario_kind=kind)
    scenario = generate_scenario(scn_config, eval_config.base_seed + episode)
    seeds = [
        hash64(eval_config.base_seed, episode, j) for j in range(eval_config.n_samples)
    ]
    p_goal = goal_distribution(scenario, kernel_params, "reachable_only")
    reachable = [g for g in scenario.goals if g.reachable]
    unreachable = [g for g in scenario.goals if not g.reachable]
    out = {}
    for model in models:
        try:
            ctx = model.prepare(scenario)
            res = model.sample_batch(scenario, ctx, seeds)
        except Exception:
            res = EpisodeOutcome(
                _initial_states(scenario, seeds),
                np.ones(len(seeds), dtype=bool),
                failed=True,
            )
        finals = res.finals
        cx = np.floor(finals[:, 0] + 0.5).astype(np.intp)
        cy = np.floor(finals[:, 1] + 0.5).astype(np.intp)
        free_finals = int((~scenario.map.occupancy[cy, cx]).sum())
        dists = np.stack(
            [np.hypot(finals[:, 0] - g.x, finals[:, 1] - g.y) for g in reachable]
        )
        hits = dists.min(axis=0) <= eval_config.success_radius
        goal_hits = [0] * len(scenario.goals)
        nearest = dists.argmin(axis=0)
        for gi, g in enumerate(scenario.goals):
            if g.reachable:
                ri = reachable.index(g)
                goal_hits[gi] = int((hits & (nearest == ri)).sum())
        near_unreachable = 0
        for g in unreachable:
            near_unreachable += int(
                (np.hypot(finals[:, 0] - g.x, finals[:, 1] - g.y)
                 <= eval_config.success_radius).sum()
            )
        out[model.name] = {
            "successes": int(hits.sum()),
            "kl": kl_divergence(finals, p_goal, eval_config.kl_smoothing),
            "frozen": int(res.frozen.sum()),
            "proposals": res.n_proposals,
            "rejections": res.n_rejections,
            "goal_hits": goal_hits,
            "near_unreachable": near_unreachable,
            "free_finals": free_finals,
            "failed": int(res.failed),
            "n": len(seeds),
        }
    return (kind, episode, out)


def run_benchmark(
    models: list[PlannerModel],
    scenario_kinds: list[str],
    config: EvalConfig | None = None,
    map_config: MapGenConfig | None = None,
    kernel_params: KernelParams | None = None,
    n_workers: int = 1,
) -> MetricsTable:
    """Aggregate success and KL for every (model, kind) pair.

    Deterministic for a fixed base seed and independent of n_workers: episode
    seeds are base_seed + i, sample seeds hash64(base_seed, episode, sample),
    and results reduce in (kind, episode) order.
    """
    config = config or EvalConfig()
    map_config = map_config or MapGenConfig()
    kernel_params = kernel_params or KernelParams()
    tasks = [
        (kind, ep, models, config, map_config, kernel_params)
        for kind in scenario_kinds
        for ep in range(config.n_episodes)
    ]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_episode_task, tasks, chunksize=4))
    else:
        outcomes = [_episode_task(t) for t in tasks]
    outcomes.sort(key=lambda item: (scenario_kinds.index(item[0]), item[1]))

    rows = []
    for model in models:
        for kind in scenario_kinds:
            per_ep = [o[2][model.name] for o in outcomes if o[0] == kind]
            total = sum(e["n"] for e in per_ep)
            successes = sum(e["successes"] for e in per_ep)
            goal_hits = np.sum([e["goal_hits"] for e in per_ep], axis=0).tolist()
            stats = {
                "episodes": len(per_ep),
                "samples": total,
                "frozen": sum(e["frozen"] for e in per_ep),
                "proposals": sum(e["proposals"] for e in per_ep),
                "rejections": sum(e["rejections"] for e in per_ep),
                "goal_hits": goal_hits,
                "near_unreachable": sum(e["near_unreachable"] for e in per_ep),
                "free_finals": sum(e["free_finals"] for e in per_ep),
                "episode_failures": sum(e["failed"] for e in per_ep),
            }
            rows.append(
                MetricsRow(
                    model=model.name,
                    scenario=kind,
                    success_rate=100.0 * successes / total,
                    kl_divergence=float(np.mean([e["kl"] for e in per_ep])),
                    stats=stats,
                )
            )
    return MetricsTable(rows)
