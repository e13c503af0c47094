"""Annealed Langevin dynamics trajectory generation.

States at module boundaries are in cell units with domain
[0, width-1] x [0, height-1]. Internally the chain runs on coordinates
normalized to the unit square (scores rescaled by the chain rule): the
published step scale epsilon = 8e-4 only transports mass across a map at
that normalization. A per-step cap on the drift displacement keeps the
steep floored-log gradients next to obstacles from catapulting proposals
out of the domain.

Proposals landing on an obstacle or outside the domain are rejected with
fresh noise (state kept); a trajectory whose step exhausts max_reject
attempts freezes at its current state, matching the stationary-sample
accounting used for scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridmap import GridMap, Scenario
from .kernel import KernelSchedule
from .score import ScoreField, analytic_gaussian_score, score_at_many
from .seeds import make_rng

MODES = ("standard", "modified")


@dataclass(frozen=True)
class SamplerConfig:
    epsilon: float = 0.0008
    T: int = 10
    inner_iters: int = 100
    mode: str = "modified"
    k1: float = 0.6
    k2: float = 0.4
    max_reject: int = 32
    max_drift: float = 0.05  # per-step drift displacement cap, normalized units

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.inner_iters < 1:
            raise ValueError("need at least one Langevin iteration per level")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.max_reject < 1:
            raise ValueError("max_reject must be at least 1")
        if self.max_drift <= 0:
            raise ValueError("max_drift must be positive")


def lambda_weight(t: int, schedule: KernelSchedule, width: int) -> float:
    """lambda(t) = f(sigma_t)^2 with f saturating at half the image size."""
    sigma = schedule.sigma(t)
    return min(sigma, width / 2.0) ** 2


@dataclass(frozen=True)
class StepSchedule:
    """Per-level step sizes alpha(t) = epsilon * lambda(t) / lambda(T)."""

    lambdas: tuple
    epsilon: float

    @classmethod
    def build(cls, schedule: KernelSchedule, width: int, epsilon: float) -> "StepSchedule":
        lams = tuple(lambda_weight(t, schedule, width) for t in range(1, schedule.T + 1))
        return cls(lams, epsilon)

    @property
    def T(self) -> int:
        return len(self.lambdas)

    def lam(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"level {t} outside 1..{self.T}")
        return self.lambdas[t - 1]

    def alpha(self, t: int) -> float:
        return self.epsilon * self.lam(t) / self.lambdas[-1]


def alpha(t: int, schedule: KernelSchedule, config: SamplerConfig, width: int) -> float:
    """Step size at level t for a map of the given width."""
    return StepSchedule.build(schedule, width, config.epsilon).alpha(t)


def langevin_step(state, score, alpha_t: float, noise, mode: str = "standard",
                  k1: float = 0.6, k2: float = 0.4) -> np.ndarray:
    """One Langevin proposal; pure arithmetic, no map interaction.

    standard: s + (a/2) score + sqrt(a) z
    modified: s + (a^k1 / 2) score + a^((k1+k2)/2) z
    """
    state = np.asarray(state, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if mode == "standard":
        return state + (alpha_t / 2.0) * score + math.sqrt(alpha_t) * noise
    if mode == "modified":
        drift = alpha_t ** k1 / 2.0
        temp = alpha_t ** ((k1 + k2) / 2.0)
        return state + drift * score + temp * noise
    raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded chain: states (L, 2), per-step rejection counts, frozen flag."""

    states: np.ndarray
    rejected_counts: np.ndarray
    frozen: bool
    seed: int

    def __post_init__(self):
        st = np.ascontiguousarray(self.states, dtype=np.float64).reshape(-1, 2)
        rc = np.ascontiguousarray(self.rejected_counts, dtype=np.int64).ravel()
        if len(rc) != len(st) - 1:
            raise ValueError("need one rejection count per transition")
        st.flags.writeable = False
        rc.flags.writeable = False
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "rejected_counts", rc)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and self.frozen == other.frozen
            and self.seed == other.seed
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.rejected_counts, other.rejected_counts)
        )


class FieldStackProvider:
    """Scores from precomputed per-level ScoreFields (levels 1..T)."""

    def __init__(self, fields: list[ScoreField]):
        if not fields:
            raise ValueError("need at least one level field")
        self.fields = list(fields)

    @property
    def T(self) -> int:
        return len(self.fields)

    def score(self, xy: np.ndarray, t: int) -> np.ndarray:
        return score_at_many(self.fields[t - 1], xy)


class GaussianMixtureProvider:
    """Analytic mixture score with a per-level sigma schedule (obstacle-blind)."""

    def __init__(self, means, sigmas, weights=None):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
        self.sigmas = tuple(float(s) for s in sigmas)
        self.weights = weights

    @classmethod
    def from_schedule(cls, means, schedule: KernelSchedule, width: int,
                      weights=None) -> "GaussianMixtureProvider":
        sigmas = [min(schedule.sigma(t), width / 2.0) for t in range(1, schedule.T + 1)]
        return cls(means, sigmas, weights)

    @property
    def T(self) -> int:
        return len(self.sigmas)

    def score(self, xy: np.ndarray, t: int) -> np.ndarray:
        return analytic_gaussian_score(xy, self.means, self.sigmas[t - 1], self.weights)


class FixedGaussianProvider:
    """Same analytic Gaussian score at every level (convergence oracle)."""

    def __init__(self, means, sigma: float, weights=None):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
        self.sigma = float(sigma)
        self.weights = weights

    def score(self, xy: np.ndarray, t: int) -> np.ndarray:
        return analytic_gaussian_score(xy, self.means, self.sigma, self.weights)


def state_cell(x: float, y: float) -> tuple[int, int]:
    """Cell containing a continuous state (cell centers at integers)."""
    return (int(math.floor(x + 0.5)), int(math.floor(y + 0.5)))


def draw_initial_state(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Uniform cell of the initial region plus uniform in-cell jitter."""
    cells = scenario.initial_cells
    i = int(rng.integers(0, len(cells)))
    jitter = rng.uniform(-0.5, 0.5, 2)
    x = min(max(cells[i][0] + jitter[0], 0.0), scenario.map.width - 1.0)
    y = min(max(cells[i][1] + jitter[1], 0.0), scenario.map.height - 1.0)
    return np.array([x, y])


@dataclass
class SimResult:
    finals: np.ndarray
    frozen: np.ndarray
    n_proposals: int
    n_rejections: int
    trajectories: list[Trajectory] | None = None


def run_langevin(
    grid: GridMap,
    provider,
    x_init: np.ndarray,
    steps: StepSchedule,
    config: SamplerConfig,
    rngs: list[np.random.Generator],
    collision: str = "reject",
    record: bool = False,
    seeds=None,
) -> SimResult:
    """Vectorized annealed Langevin over a batch of trajectories.

    Each trajectory consumes noise only from its own stream, so results are
    bit-identical for any batch split. collision="reject" redraws noise up
    to max_reject times per step before freezing; collision="freeze" stops a
    trajectory at its first invalid proposal (no redraw).
    """
    if collision not in ("reject", "freeze"):
        raise ValueError("collision must be 'reject' or 'freeze'")
    if steps.T != config.T:
        raise ValueError("schedule and config disagree on the number of levels")
    occ = grid.occupancy
    height, width = occ.shape
    scale = np.array([width - 1.0, height - 1.0])
    batch = len(rngs)
    pos = np.asarray(x_init, dtype=np.float64).reshape(batch, 2).copy()
    cx0 = np.floor(pos[:, 0] + 0.5).astype(np.intp)
    cy0 = np.floor(pos[:, 1] + 0.5).astype(np.intp)
    if occ[cy0, cx0].any():
        raise ValueError("initial state lies in an obstacle cell")
    frozen = np.zeros(batch, dtype=bool)
    cap = config.T * config.inner_iters + 16
    noise = np.stack([g.standard_normal((cap, 2)) for g in rngs])
    ptr = np.zeros(batch, dtype=np.intp)
    n_prop = 0
    n_rej = 0
    if record:
        states = [[pos[b].copy()] for b in range(batch)]
        rejcounts: list[list[int]] = [[] for _ in range(batch)]

    for t in range(config.T, 0, -1):
        alpha_t = steps.alpha(t)
        drift_coef = (
            alpha_t / 2.0 if config.mode == "standard" else alpha_t ** config.k1 / 2.0
        )
        for _ in range(config.inner_iters):
            act = np.nonzero(~frozen)[0]
            if act.size == 0:
                break
            score_n = provider.score(pos[act], t) * scale
            drift_mag = np.hypot(drift_coef * score_n[:, 0], drift_coef * score_n[:, 1])
            over = drift_mag > config.max_drift
            if over.any():
                score_n[over] *= (config.max_drift / drift_mag[over])[:, None]
            base_n = pos[act] / scale
            pending = np.arange(act.size)
            rej_here = np.zeros(act.size, dtype=np.int64)
            while pending.size:
                gidx = act[pending]
                if int(ptr[gidx].max()) >= noise.shape[1]:
                    grow = np.stack([g.standard_normal((256, 2)) for g in rngs])
                    noise = np.concatenate([noise, grow], axis=1)
                z = noise[gidx, ptr[gidx]]
                ptr[gidx] += 1
                prop_n = langevin_step(
                    base_n[pending], score_n[pending], alpha_t, z,
                    config.mode, config.k1, config.k2,
                )
                prop_px = prop_n * scale
                px, py = prop_px[:, 0], prop_px[:, 1]
                in_dom = (px >= 0) & (px <= width - 1) & (py >= 0) & (py <= height - 1)
                cx = np.clip(np.floor(px + 0.5).astype(np.intp), 0, width - 1)
                cy = np.clip(np.floor(py + 0.5).astype(np.intp), 0, height - 1)
                ok = in_dom & ~occ[cy, cx]
                n_prop += pending.size
                n_rej += int((~ok).sum())
                acc = pending[ok]
                pos[act[acc]] = prop_px[ok]
                if record:
                    for local in acc:
                        b = act[local]
                        states[b].append(pos[b].copy())
                        rejcounts[b].append(int(rej_here[local]))
                rejected = pending[~ok]
                if collision == "freeze":
                    frozen[act[rejected]] = True
                    break
                rej_here[rejected] += 1
                frozen[act[rejected[rej_here[rejected] >= config.max_reject]]] = True
                pending = rejected[rej_here[rejected] < config.max_reject]

    trajectories = None
    if record:
        seeds = seeds if seeds is not None else [0] * batch
        trajectories = [
            Trajectory(
                np.array(states[b]),
                np.array(rejcounts[b], dtype=np.int64),
                bool(frozen[b]),
                int(seeds[b]),
            )
            for b in range(batch)
        ]
    return SimResult(pos, frozen, n_prop, n_rej, trajectories)


def sample_trajectory(
    scenario: Scenario,
    score_provider,
    x_init,
    schedule: KernelSchedule,
    config: SamplerConfig,
    seed: int,
) -> Trajectory:
    """Anneal levels T..1 with inner_iters Langevin steps per level.

    Deterministic for a fixed seed; the recorded length is
    T * inner_iters + 1 unless the trajectory froze early.
    """
    if schedule.T != config.T:
        raise ValueError("schedule and config disagree on the number of levels")
    steps = StepSchedule.build(schedule, scenario.map.width, config.epsilon)
    result = run_langevin(
        scenario.map,
        score_provider,
        np.asarray(x_init, dtype=np.float64).reshape(1, 2),
        steps,
        config,
        [make_rng(seed)],
        collision="reject",
        record=True,
        seeds=[seed],
    )
    return result.trajectories[0]
