"""Occupancy-grid maps, seeded scenario generation, reachability, and map I/O.

Cells are addressed as (x, y) with x the column and y the row; arrays are
stored row-major with shape (height, width) and indexed [y, x]. Pixel value
255 in the PGM format is free space, 0 is an obstacle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .seeds import make_rng

SCENARIO_KINDS = ("unimodal", "multimodal", "unreachable")

# 4-connectivity structure for component labelling.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

_MIN_GEN_SIZE = 12
_INIT_BLOCK = 6
_RING_RADIUS = 3
_MAX_ATTEMPTS = 500


class MapFormatError(ValueError):
    """Raised on malformed PGM input; carries the offending byte offset."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


class InfeasibleConfigError(RuntimeError):
    """Raised when scenario generation cannot satisfy the config."""


@dataclass(frozen=True, eq=False)
class GridMap:
    """Binary occupancy grid; True in ``occupancy`` marks an obstacle."""

    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=bool)
        if occ.ndim != 2:
            raise ValueError("occupancy must be 2-D")
        if occ.shape[0] < 4 or occ.shape[1] < 4:
            raise ValueError("map must be at least 4x4")
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.occupancy

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.occupancy[y, x]

    def all_free_copy(self) -> "GridMap":
        """Same dimensions with every obstacle removed."""
        return GridMap(np.zeros_like(self.occupancy))

    def __eq__(self, other) -> bool:
        return isinstance(other, GridMap) and np.array_equal(
            self.occupancy, other.occupancy
        )


@dataclass(frozen=True)
class Goal:
    x: int
    y: int
    reachable: bool

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class InitialRegion:
    """Axis-aligned rectangle of free start cells."""

    x: int
    y: int
    w: int
    h: int

    def cells(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (x, y)
            for y in range(self.y, self.y + self.h)
            for x in range(self.x, self.x + self.w)
        )

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + (self.w - 1) / 2.0, self.y + (self.h - 1) / 2.0)


@dataclass(frozen=True, eq=False)
class Scenario:
    """A map plus goals (with reachability labels) and an initial region."""

    map: GridMap
    goals: tuple[Goal, ...]
    initial_region: InitialRegion
    seed: int

    def __post_init__(self):
        free = self.map.free_mask
        for g in self.goals:
            if not self.map.is_free(g.x, g.y):
                raise ValueError(f"goal {g.cell} is not on a free cell")
        for (x, y) in self.initial_region.cells():
            if not self.map.is_free(x, y):
                raise ValueError(f"initial-region cell {(x, y)} is not free")
        reach = _reachable_mask(free, self.initial_region.cells())
        for g in self.goals:
            if bool(reach[g.y, g.x]) != g.reachable:
                raise ValueError(f"goal {g.cell} has a wrong reachability label")

    @property
    def initial_cells(self) -> tuple[tuple[int, int], ...]:
        return self.initial_region.cells()

    def goal_cells(self, reachable_only: bool = False) -> tuple[tuple[int, int], ...]:
        return tuple(
            g.cell for g in self.goals if g.reachable or not reachable_only
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scenario)
            and self.map == other.map
            and self.goals == other.goals
            and self.initial_region == other.initial_region
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class MapGenConfig:
    """Knobs for the seeded scenario generator."""

    width: int = 64
    height: int = 64
    n_obstacles: tuple[int, int] = (2, 5)
    obstacle_size: tuple[int, int] = (5, 12)
    noise_density: float = 0.02
    scenario_kind: str = "unimodal"

    def __post_init__(self):
        if self.scenario_kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.scenario_kind!r}")
        if not 0.0 <= self.noise_density <= 1.0:
            raise ValueError("noise_density must lie in [0, 1]")
        for name, (lo, hi) in (
            ("n_obstacles", self.n_obstacles),
            ("obstacle_size", self.obstacle_size),
        ):
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
        if self.obstacle_size[0] < 1:
            raise ValueError("obstacle_size must be at least 1 cell")
        if self.width < _MIN_GEN_SIZE or self.height < _MIN_GEN_SIZE:
            raise ValueError(f"generation needs at least {_MIN_GEN_SIZE} cells per side")

    @property
    def n_goals(self) -> int:
        return 1 if self.scenario_kind == "unimodal" else 2


def _reachable_mask(free: np.ndarray, sources) -> np.ndarray:
    """4-connected free-cell closure of the source cells, as a bool mask."""
    labels, _ = ndimage.label(free, structure=_CROSS)
    wanted = {labels[y, x] for (x, y) in sources if free[y, x]}
    wanted.discard(0)
    if not wanted:
        return np.zeros_like(free)
    return np.isin(labels, sorted(wanted))


def reachable_set(grid: GridMap, sources) -> frozenset[tuple[int, int]]:
    """All cells 4-connected to the sources through free space."""
    for (x, y) in sources:
        if not grid.is_free(x, y):
            raise ValueError(f"source cell {(x, y)} is not free")
    mask = _reachable_mask(grid.free_mask, sources)
    ys, xs = np.nonzero(mask)
    return frozenset(zip(xs.tolist(), ys.tolist()))


# ---------------------------------------------------------------------------
# generation stages


def place_rectangles(config: MapGenConfig, rng: np.random.Generator) -> np.ndarray:
    """Obstacle mask with randomly placed axis-aligned rectangles."""
    occ = np.zeros((config.height, config.width), dtype=bool)
    lo, hi = config.n_obstacles
    count = int(rng.integers(lo, hi + 1))
    slo, shi = config.obstacle_size
    for _ in range(count):
        w = int(rng.integers(slo, shi + 1))
        h = int(rng.integers(slo, shi + 1))
        w = min(w, config.width - 2)
        h = min(h, config.height - 2)
        x0 = int(rng.integers(0, config.width - w + 1))
        y0 = int(rng.integers(0, config.height - h + 1))
        occ[y0 : y0 + h, x0 : x0 + w] = True
    return occ


def apply_noise(occ: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each free cell to obstacle independently with the given probability."""
    if density <= 0.0:
        return occ.copy()
    flips = rng.random(occ.shape) < density
    return occ | (flips & ~occ)


def remove_isolated(occ: np.ndarray) -> np.ndarray:
    """Drop obstacle cells with no obstacle 4-neighbour (single-cell specks)."""
    padded = np.pad(occ, 1)
    nbrs = (
        padded[:-2, 1:-1].astype(np.int8)
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
    )
    return occ & (nbrs > 0)


def _find_init_block(free: np.ndarray, rng: np.random.Generator) -> InitialRegion | None:
    h, w = free.shape
    b = _INIT_BLOCK
    for _ in range(64):
        x0 = int(rng.integers(0, w - b + 1))
        y0 = int(rng.integers(0, h - b + 1))
        if free[y0 : y0 + b, x0 : x0 + b].all():
            return InitialRegion(x0, y0, b, b)
    return None


def _ring_cells(cx: int, cy: int, radius: int) -> list[tuple[int, int]]:
    cells = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if max(abs(dx), abs(dy)) == radius:
                cells.append((cx + dx, cy + dy))
    return cells


def _pick_goals(
    config: MapGenConfig,
    occ: np.ndarray,
    region: InitialRegion,
    rng: np.random.Generator,
) -> tuple[Goal, ...] | None:
    """Choose goal cells; for the unreachable kind, seal the second goal."""
    h, w = occ.shape
    free = ~occ
    reach = _reachable_mask(free, region.cells())
    side = min(w, h)
    d_init = 0.40 * side
    d_pair = 0.30 * side
    cx, cy = region.center

    ys, xs = np.nonzero(reach)
    dist_init = np.hypot(xs - cx, ys - cy)
    cand = dist_init >= d_init
    if config.scenario_kind == "unreachable":
        # The sealed goal needs room for its ring inside the map borders.
        margin = (
            (xs >= _RING_RADIUS)
            & (xs < w - _RING_RADIUS)
            & (ys >= _RING_RADIUS)
            & (ys < h - _RING_RADIUS)
        )
    else:
        margin = np.ones_like(cand)
    idx = np.nonzero(cand)[0]
    if idx.size == 0:
        return None

    first = idx[int(rng.integers(0, idx.size))]
    gx1, gy1 = int(xs[first]), int(ys[first])
    if config.n_goals == 1:
        return (Goal(gx1, gy1, True),)

    pair_ok = cand & margin & (np.hypot(xs - gx1, ys - gy1) >= d_pair)
    idx2 = np.nonzero(pair_ok)[0]
    if idx2.size == 0:
        return None
    second = idx2[int(rng.integers(0, idx2.size))]
    gx2, gy2 = int(xs[second]), int(ys[second])

    if config.scenario_kind == "multimodal":
        return (Goal(gx1, gy1, True), Goal(gx2, gy2, True))

    # Seal the second goal behind a 1-cell-thick square ring.
    ring = _ring_cells(gx2, gy2, _RING_RADIUS)
    protected = set(region.cells()) | {(gx1, gy1)}
    interior = {
        (gx2 + dx, gy2 + dy)
        for dx in range(-_RING_RADIUS + 1, _RING_RADIUS)
        for dy in range(-_RING_RADIUS + 1, _RING_RADIUS)
    }
    if protected & (set(ring) | interior):
        return None
    for (x, y) in ring:
        occ[y, x] = True
    reach_after = _reachable_mask(~occ, region.cells())
    if not reach_after[gy1, gx1] or reach_after[gy2, gx2]:
        return None
    return (Goal(gx1, gy1, True), Goal(gx2, gy2, False))


def generate_scenario(config: MapGenConfig, seed: int) -> Scenario:
    """Deterministically generate a scenario for (config, seed).

    Raises InfeasibleConfigError when no valid layout is found after a
    bounded number of attempts (e.g. noise obliterated all free space).
    """
    rng = make_rng(seed)
    for _ in range(_MAX_ATTEMPTS):
        occ = place_rectangles(config, rng)
        occ = apply_noise(occ, config.noise_density, rng)
        occ = remove_isolated(occ)
        free = ~occ
        if free.mean() < 0.3:
            continue
        region = _find_init_block(free, rng)
        if region is None:
            continue
        goals = _pick_goals(config, occ, region, rng)
        if goals is None:
            continue
        return Scenario(GridMap(occ), goals, region, seed)
    raise InfeasibleConfigError(
        f"no feasible {config.scenario_kind} scenario for seed {seed} "
        f"after {_MAX_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# PGM map format (binary P5, maxval 255, 0 = obstacle, 255 = free)


def save_map(grid: GridMap) -> bytes:
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    body = np.where(grid.occupancy, 0, 255).astype(np.uint8).tobytes()
    return header + body


class _TokenReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip_separators(self):
        while self.pos < len(self.data):
            b = self.data[self.pos]
            if b == ord("#"):
                while self.pos < len(self.data) and self.data[self.pos] != ord("\n"):
                    self.pos += 1
            elif b in b" \t\r\n":
                self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_separators()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos] not in b" \t\r\n#":
            self.pos += 1
        if self.pos == start:
            raise MapFormatError(start, f"expected {what}, found end of data")
        return self.data[start : self.pos]

    def int_token(self, what: str) -> int:
        start = self.pos
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            raise MapFormatError(start, f"expected integer {what}, got {tok!r}") from None


def load_map(data: bytes) -> GridMap:
    reader = _TokenReader(data)
    magic = reader.token("magic")
    if magic != b"P5":
        raise MapFormatError(0, f"bad magic {magic!r}, expected b'P5'")
    width = reader.int_token("width")
    height = reader.int_token("height")
    maxval = reader.int_token("maxval")
    if width < 4 or height < 4:
        raise MapFormatError(2, f"dimensions {width}x{height} below the 4x4 minimum")
    if maxval != 255:
        raise MapFormatError(2, f"maxval must be 255, got {maxval}")
    # Exactly one whitespace byte separates the header from the raster.
    if reader.pos >= len(data) or data[reader.pos] not in b" \t\r\n":
        raise MapFormatError(reader.pos, "missing whitespace before raster")
    start = reader.pos + 1
    end = start + width * height
    if end > len(data):
        raise MapFormatError(len(data), f"raster truncated, need {end - start} bytes")
    if end != len(data):
        raise MapFormatError(end, "trailing data after raster")
    pixels = np.frombuffer(data[start:end], dtype=np.uint8).reshape(height, width)
    bad = (pixels != 0) & (pixels != 255)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise MapFormatError(
            start + first, f"pixel value {int(pixels.ravel()[first])} is not 0 or 255"
        )
    return GridMap(pixels == 0)


# ---------------------------------------------------------------------------
# scenario sidecar (JSON)


def scenario_to_json(scenario: Scenario) -> str:
    doc = {
        "seed": scenario.seed,
        "goals": [
            {"x": g.x, "y": g.y, "reachable": g.reachable} for g in scenario.goals
        ],
        "initial_region": {
            "x": scenario.initial_region.x,
            "y": scenario.initial_region.y,
            "w": scenario.initial_region.w,
            "h": scenario.initial_region.h,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def scenario_from_json(text: str, grid: GridMap) -> Scenario:
    doc = json.loads(text)
    goals = tuple(
        Goal(int(g["x"]), int(g["y"]), bool(g["reachable"])) for g in doc["goals"]
    )
    r = doc["initial_region"]
    region = InitialRegion(int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"]))
    return Scenario(grid, goals, region, int(doc["seed"]))
