"""Denoising score matching against the collision-avoiding kernel targets.

A per-map tabulated vector field per level stands in for a conditional
network: it is exactly the output object a field-predicting model would
produce, queried by bilinear interpolation, so the training objective,
targets, and level weighting carry over unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridmap import GridMap, Scenario
from .heat import HeatField, SolverParams, evolve_many_snapshots
from .kernel import KernelParams, KernelSchedule, ProbabilityField, finalize, goal_distribution
from .sampler import lambda_weight
from .score import interpolate_vectors, score_field
from .seeds import make_rng

SUPPORT_MASS = 1e-6
_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 256
    n_iterations: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_iterations < 1:
            raise ValueError("batch_size and n_iterations must be positive")


class TabulatedScoreModel:
    """Per-level vector grids; queries are bilinear like any score field."""

    def __init__(self, fields: np.ndarray):
        fields = np.ascontiguousarray(fields, dtype=np.float64)
        if fields.ndim != 4 or fields.shape[3] != 2:
            raise ValueError("fields must have shape (T, H, W, 2)")
        if not np.isfinite(fields).all():
            raise ValueError("model fields must be finite")
        self.fields = fields
        self.loss_history: np.ndarray | None = None

    @classmethod
    def zeros(cls, T: int, height: int, width: int) -> "TabulatedScoreModel":
        return cls(np.zeros((T, height, width, 2)))

    @property
    def T(self) -> int:
        return self.fields.shape[0]

    @property
    def width(self) -> int:
        return self.fields.shape[2]

    @property
    def height(self) -> int:
        return self.fields.shape[1]

    def score(self, xy: np.ndarray, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise ValueError(f"level {t} outside 1..{self.T}")
        xy = np.asarray(xy, dtype=np.float64)
        single = xy.ndim == 1
        out = interpolate_vectors(self.fields[t - 1], xy.reshape(-1, 2))
        return out[0] if single else out


def sample_from_field(p: ProbabilityField, rng: np.random.Generator) -> np.ndarray:
    """Draw a cell from p, then jitter uniformly inside it (clipped to domain)."""
    cdf = np.cumsum(p.values.ravel())
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    idx = min(idx, cdf.size - 1)
    y, x = divmod(idx, p.width)
    jitter = rng.uniform(-0.5, 0.5, 2)
    return np.array(
        [
            min(max(x + jitter[0], 0.0), p.width - 1.0),
            min(max(y + jitter[1], 0.0), p.height - 1.0),
        ]
    )


class KernelCache:
    """Per (source cell, level) kernels and score fields, computed once.

    Sources are evolved in channel batches sharing the step prefix across
    levels, then finalized per snapshot.
    """

    def __init__(
        self,
        grid: GridMap,
        schedule: KernelSchedule,
        params: KernelParams | None = None,
        solver: SolverParams | None = None,
    ):
        self.grid = grid
        self.schedule = schedule
        self.params = params or KernelParams()
        self.solver = solver or SolverParams()
        self._prob: dict[tuple[tuple[int, int], int], np.ndarray] = {}
        self._cdf: dict[tuple[tuple[int, int], int], np.ndarray] = {}
        self._score: dict[tuple[tuple[int, int], int], np.ndarray] = {}

    def ensure(self, cells) -> None:
        missing = [c for c in dict.fromkeys(map(tuple, cells)) if (c, 1) not in self._prob]
        if not missing:
            return
        counts = self.schedule.level_steps(self.solver)
        for lo in range(0, len(missing), _CHUNK):
            chunk = missing[lo : lo + _CHUNK]
            stacked = np.zeros((self.grid.height, self.grid.width, len(chunk)))
            for ci, (x, y) in enumerate(chunk):
                if not self.grid.is_free(x, y):
                    raise ValueError(f"source cell {(x, y)} is not free")
                stacked[y, x, ci] = 1.0
            snaps = evolve_many_snapshots(stacked, self.grid, counts, self.solver)
            for t, snap in enumerate(snaps, start=1):
                for ci, cell in enumerate(chunk):
                    prob = finalize(
                        HeatField(snap[:, :, ci]), self.grid, self.params, "p0t"
                    )
                    self._prob[(cell, t)] = prob.values

    def probabilities(self, cell: tuple[int, int], t: int) -> np.ndarray:
        key = (tuple(cell), int(t))
        if key not in self._prob:
            self.ensure([key[0]])
        return self._prob[key]

    def cdf(self, cell: tuple[int, int], t: int) -> np.ndarray:
        key = (tuple(cell), int(t))
        if key not in self._cdf:
            self._cdf[key] = np.cumsum(self.probabilities(*key).ravel())
        return self._cdf[key]

    def score_vectors(self, cell: tuple[int, int], t: int) -> np.ndarray:
        key = (tuple(cell), int(t))
        if key not in self._score:
            self._score[key] = score_field(self.probabilities(*key)).vectors
        return self._score[key]

    def sample_state(self, cell, t: int, rng: np.random.Generator) -> np.ndarray:
        """One draw x_t ~ p0t(.|x0, t) with in-cell jitter."""
        cdf = self.cdf(cell, t)
        idx = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), cdf.size - 1)
        cy, cx = divmod(idx, self.grid.width)
        jitter = rng.uniform(-0.5, 0.5, 2)
        return np.array(
            [
                min(max(cx + jitter[0], 0.0), self.grid.width - 1.0),
                min(max(cy + jitter[1], 0.0), self.grid.height - 1.0),
            ]
        )

    def target_scores(self, cells, ts, xy: np.ndarray) -> np.ndarray:
        """Bilinear lookups of grad log p0t(.|x0) at the given states."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(xy)
        for i in range(len(xy)):
            vec = self.score_vectors(tuple(cells[i]), int(ts[i]))
            out[i] = interpolate_vectors(vec, xy[i : i + 1])[0]
        return out


def support_cells(p0: ProbabilityField, threshold: float = SUPPORT_MASS):
    """Cells of p0 carrying at least the threshold mass, with their weights."""
    ys, xs = np.nonzero(p0.values >= threshold)
    weights = p0.values[ys, xs]
    weights = weights / weights.sum()
    return list(zip(xs.tolist(), ys.tolist())), weights


def dsm_loss(
    model: TabulatedScoreModel,
    scenario: Scenario,
    kernels: KernelCache,
    batch,
) -> float:
    """Mean of lambda(t) * ||model(x_t, t) - grad log p0t(x_t|x0)||^2."""
    ts, cells, xy = batch
    ts = np.asarray(ts, dtype=np.intp)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    targets = kernels.target_scores(cells, ts, xy)
    lams = np.array(
        [lambda_weight(int(t), kernels.schedule, scenario.map.width) for t in ts]
    )
    preds = np.empty_like(targets)
    for t in np.unique(ts):
        sel = np.nonzero(ts == t)[0]
        preds[sel] = model.score(xy[sel], int(t))
    err = preds - targets
    return float(np.mean(lams * (err * err).sum(axis=1)))


def train(
    scenario: Scenario,
    schedule: KernelSchedule,
    kernels: KernelCache,
    config: TrainConfig | None = None,
    params: KernelParams | None = None,
) -> TabulatedScoreModel:
    """SGD on the tabulated fields; gradients flow through bilinear weights.

    Deterministic for a fixed config seed; raises on divergence, naming the
    iteration. Per-iteration batch losses are kept on the returned model as
    loss_history.
    """
    config = config or TrainConfig()
    params = params or KernelParams()
    grid = scenario.map
    width, height = grid.width, grid.height
    p0 = goal_distribution(scenario, params, "all", kernels.solver)
    cells, weights = support_cells(p0)
    kernels.ensure(cells)
    src_cdf = np.cumsum(weights)

    T = schedule.T
    # Stacked cache views for vectorized batch assembly.
    cdfs = np.empty((len(cells), T, width * height), dtype=np.float32)
    scores = np.empty((len(cells), T, height, width, 2))
    for si, cell in enumerate(cells):
        for t in range(1, T + 1):
            cdfs[si, t - 1] = kernels.cdf(cell, t)
            scores[si, t - 1] = kernels.score_vectors(cell, t)

    model = TabulatedScoreModel.zeros(T, height, width)
    fields = model.fields
    lam = np.array([lambda_weight(t, schedule, width) for t in range(1, T + 1)])
    rng = make_rng(config.seed)
    bsz = config.batch_size
    losses = np.empty(config.n_iterations)
    nparams = T * height * width

    for it in range(config.n_iterations):
        ti = rng.integers(0, T, bsz)
        src = np.minimum(
            np.searchsorted(src_cdf, rng.random(bsz) * src_cdf[-1], side="right"),
            len(cells) - 1,
        )
        rows = cdfs[src, ti]
        u = (rng.random(bsz) * rows[:, -1]).astype(np.float32)
        flat = np.minimum((rows < u[:, None]).sum(axis=1), rows.shape[1] - 1)
        cy, cx = np.divmod(flat, width)
        jitter = rng.uniform(-0.5, 0.5, (bsz, 2))
        xs = np.clip(cx + jitter[:, 0], 0.0, width - 1.0)
        ys = np.clip(cy + jitter[:, 1], 0.0, height - 1.0)

        x0 = np.clip(np.floor(xs).astype(np.intp), 0, width - 2)
        y0 = np.clip(np.floor(ys).astype(np.intp), 0, height - 2)
        fx = (xs - x0)[:, None]
        fy = (ys - y0)[:, None]
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy

        tgt = (
            w00 * scores[src, ti, y0, x0]
            + w10 * scores[src, ti, y0, x0 + 1]
            + w01 * scores[src, ti, y0 + 1, x0]
            + w11 * scores[src, ti, y0 + 1, x0 + 1]
        )
        pred = (
            w00 * fields[ti, y0, x0]
            + w10 * fields[ti, y0, x0 + 1]
            + w01 * fields[ti, y0 + 1, x0]
            + w11 * fields[ti, y0 + 1, x0 + 1]
        )
        err = pred - tgt
        lam_b = lam[ti][:, None]
        loss = float(np.mean(lam[ti] * (err * err).sum(axis=1)))
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at iteration {it}")
        losses[it] = loss

        g = (config.learning_rate * 2.0 / bsz) * lam_b * err
        base = (ti * height + y0) * width + x0
        flat_fields = fields.reshape(nparams, 2)
        for comp in range(2):
            upd = np.bincount(base, weights=w00[:, 0] * g[:, comp], minlength=nparams)
            upd += np.bincount(base + 1, weights=w10[:, 0] * g[:, comp], minlength=nparams)
            upd += np.bincount(base + width, weights=w01[:, 0] * g[:, comp], minlength=nparams)
            upd += np.bincount(base + width + 1, weights=w11[:, 0] * g[:, comp], minlength=nparams)
            flat_fields[:, comp] -= upd

    model.loss_history = losses
    return model
