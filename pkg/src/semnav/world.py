"""Procedural semantic worlds, differential-drive dynamics, and a raycast sensor.

Worlds are 2D cell grids. Cell value 0 is free space, 1 is plain structure
(walls), and values 2..17 are the 16 semantic object classes. Object cells
are non-traversable. Free space of a generated world is always a single
4-connected component.

Conventions used throughout the package:
  * world frame: x in meters along columns, y in meters along rows,
    cell (i, j) covers [j*res, (j+1)*res) x [i*res, (i+1)*res);
  * heading theta in radians, normalized to [-pi, pi), theta=0 points +x,
    theta=pi/2 points +y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

FREE = 0
OBSTACLE = 1

# 16 semantic classes; ids are offset by 2 in the grid. The first five are
# the navigation target categories.
SEMANTIC_NAMES = (
    "bed", "chair", "sink", "plant", "couch",
    "table", "tv", "cabinet", "fridge", "toilet", "bathtub",
    "shelf", "counter", "desk", "dresser", "lamp",
)
NUM_SEMANTIC_CLASSES = len(SEMANTIC_NAMES)  # K = 16
TARGET_CATEGORIES = SEMANTIC_NAMES[:5]

_CLASS_ID = {name: 2 + k for k, name in enumerate(SEMANTIC_NAMES)}


def class_id(name: str) -> int:
    """Grid cell value for a semantic class name."""
    try:
        return _CLASS_ID[name]
    except KeyError:
        raise ValueError(f"unknown semantic class {name!r}") from None


def class_name(cell_value: int) -> str:
    if not 2 <= cell_value < 2 + NUM_SEMANTIC_CLASSES:
        raise ValueError(f"cell value {cell_value} is not a semantic class")
    return SEMANTIC_NAMES[cell_value - 2]


class WorldGenerationError(RuntimeError):
    """Raised when no valid world could be generated within the retry budget."""


@dataclass(frozen=True)
class ControlLimits:
    """Velocity box for the differential drive (m/s, rad/s)."""

    v_min: float = 0.0
    v_max: float = 1.0
    omega_min: float = -1.0
    omega_max: float = 1.0

    def clamp(self, v: float, omega: float) -> tuple[float, float]:
        return (
            min(max(v, self.v_min), self.v_max),
            min(max(omega, self.omega_min), self.omega_max),
        )


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class AgentState:
    """Robot pose and velocities in the world frame."""

    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class WorldGrid:
    """Ground-truth semantic cell grid. Immutable after generation."""

    width: int
    height: int
    resolution: float
    cells: np.ndarray  # (height, width) uint8, row-major
    seed: int

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if self.cells.shape != (self.height, self.width):
            raise ValueError(
                f"cells shape {self.cells.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        self.cells.flags.writeable = False

    def in_bounds(self, i: int, j: int) -> bool:
        return 0 <= i < self.height and 0 <= j < self.width

    def to_cell(self, x: float, y: float) -> tuple[int, int]:
        """World position (m) to (row, col) cell index. May be out of bounds."""
        return (int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution)))

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return ((j + 0.5) * self.resolution, (i + 0.5) * self.resolution)

    def is_free_at(self, x: float, y: float) -> bool:
        i, j = self.to_cell(x, y)
        return self.in_bounds(i, j) and self.cells[i, j] == FREE

    @property
    def free_mask(self) -> np.ndarray:
        return self.cells == FREE

    @property
    def occupancy(self) -> np.ndarray:
        """Binary occupancy: walls and objects alike."""
        return self.cells != FREE

    def class_cells(self, name: str) -> np.ndarray:
        """Boolean mask of cells holding the named semantic class."""
        return self.cells == class_id(name)

    def save(self, path) -> None:
        payload = {
            "version": 1,
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "seed": self.seed,
            "cells": self.cells.reshape(-1).tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "WorldGrid":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("version") != 1:
            raise ValueError(f"unsupported world file version {payload.get('version')!r}")
        cells = np.array(payload["cells"], dtype=np.uint8).reshape(
            payload["height"], payload["width"]
        )
        return cls(
            width=payload["width"],
            height=payload["height"],
            resolution=payload["resolution"],
            cells=cells,
            seed=payload["seed"],
        )


@dataclass(frozen=True)
class SensorParams:
    """Fan of range/class rays: the 2D analog of a depth + segmentation camera."""

    fov: float = math.pi / 2.0
    ray_count: int = 120
    max_range: float = 5.0


@dataclass(frozen=True)
class EpisodeConfig:
    """One navigation episode: where the agent starts and what it must find."""

    world_seed: int
    start: AgentState
    target: str
    max_steps: int = 500
    dt: float = 0.1
    success_distance: float = 1.0

    def __post_init__(self):
        if self.target not in TARGET_CATEGORIES:
            raise ValueError(
                f"target {self.target!r} not in target categories {TARGET_CATEGORIES}"
            )
        if self.max_steps < 1 or self.dt <= 0.0:
            raise ValueError("max_steps must be >= 1 and dt > 0")


@dataclass(frozen=True)
class WorldGenParams:
    """Knobs of the procedural room-and-furniture generator."""

    width: int = 192
    height: int = 192
    resolution: float = 0.05
    rooms: int = 6
    object_density: float = 0.14  # expected objects per m^2 of room area
    target_presence_prob: float = 1.0
    wall_thickness: int = 2
    door_width_range: tuple[int, int] = (14, 20)  # cells
    extra_door_prob: float = 0.5
    max_retries: int = 25

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("grid size must be >= 64x64")
        if self.rooms < 2:
            raise ValueError("room count must be >= 2")
        if self.object_density < 0.0:
            raise ValueError("object density must be >= 0")


# Furniture footprint ranges in meters (length along wall, depth into room).
_OBJECT_SIZES = {
    "bed": (1.4, 2.0, 0.9, 1.4),
    "chair": (0.4, 0.6, 0.4, 0.6),
    "sink": (0.4, 0.7, 0.35, 0.5),
    "plant": (0.3, 0.5, 0.3, 0.5),
    "couch": (1.4, 2.2, 0.7, 1.0),
    "table": (0.8, 1.6, 0.6, 1.0),
    "tv": (0.8, 1.4, 0.2, 0.35),
    "cabinet": (0.6, 1.2, 0.4, 0.6),
    "fridge": (0.6, 0.8, 0.6, 0.8),
    "toilet": (0.4, 0.55, 0.55, 0.75),
    "bathtub": (1.4, 1.8, 0.7, 0.9),
    "shelf": (0.6, 1.2, 0.25, 0.4),
    "counter": (1.0, 2.0, 0.5, 0.7),
    "desk": (1.0, 1.6, 0.5, 0.8),
    "dresser": (0.8, 1.2, 0.4, 0.6),
    "lamp": (0.25, 0.4, 0.25, 0.4),
}

# Rooms are themed so object categories co-occur plausibly.
_ROOM_THEMES = (
    ("bed", "dresser", "lamp", "desk", "plant", "chair"),
    ("couch", "tv", "table", "plant", "shelf", "lamp"),
    ("sink", "toilet", "bathtub", "cabinet"),
    ("counter", "fridge", "sink", "table", "chair", "cabinet"),
    ("desk", "chair", "shelf", "plant", "lamp"),
)


def _flood_fill_connected(free: np.ndarray) -> bool:
    """True iff the free cells form one 4-connected component."""
    total = int(free.sum())
    if total == 0:
        return False
    start = np.argwhere(free)[0]
    seen = np.zeros_like(free, dtype=bool)
    stack = [(int(start[0]), int(start[1]))]
    seen[start[0], start[1]] = True
    count = 0
    h, w = free.shape
    while stack:
        i, j = stack.pop()
        count += 1
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and free[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                stack.append((ni, nj))
    return count == total


def _split_spans(total: int, parts: int, wall: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Split [0, total) into `parts` spans separated by walls, jittered."""
    inner = total - wall * (parts - 1)
    base = inner // parts
    bounds = [0]
    for k in range(1, parts):
        jitter = int(rng.integers(-base // 5, base // 5 + 1)) if base >= 10 else 0
        bounds.append(bounds[-1] + base + jitter + wall)
    spans = []
    for k in range(parts):
        start = bounds[k]
        end = bounds[k + 1] - wall if k + 1 < parts else total
        spans.append((start, end))
    return spans


def _room_layout(params: WorldGenParams, rng: np.random.Generator):
    """Pick a rows x cols room partition covering at least params.rooms rooms."""
    rows = 1
    cols = 1
    while rows * cols < params.rooms:
        if rows <= cols:
            rows += 1
        else:
            cols += 1
    return rows, cols


def generate_world(seed: int, params: WorldGenParams | None = None) -> WorldGrid:
    """Generate a deterministic room-and-furniture world for a seed.

    Raises WorldGenerationError if no connected world is found within the
    retry budget (each retry derives a fresh RNG stream from the seed).
    """
    params = params or WorldGenParams()
    for attempt in range(params.max_retries):
        rng = np.random.default_rng([np.uint64(seed), np.uint64(attempt)])
        grid = _generate_once(params, rng)
        if grid is not None and _flood_fill_connected(grid == FREE):
            return WorldGrid(
                width=params.width,
                height=params.height,
                resolution=params.resolution,
                cells=grid,
                seed=seed,
            )
    raise WorldGenerationError(
        f"no connected world for seed {seed} after {params.max_retries} attempts"
    )


def _generate_once(params: WorldGenParams, rng: np.random.Generator) -> np.ndarray | None:
    h, w, wall = params.height, params.width, params.wall_thickness
    res = params.resolution
    grid = np.full((h, w), FREE, dtype=np.uint8)
    grid[:wall, :] = OBSTACLE
    grid[-wall:, :] = OBSTACLE
    grid[:, :wall] = OBSTACLE
    grid[:, -wall:] = OBSTACLE

    rows, cols = _room_layout(params, rng)
    row_spans = _split_spans(h - 2 * wall, rows, wall, rng)
    col_spans = _split_spans(w - 2 * wall, cols, wall, rng)
    row_spans = [(a + wall, b + wall) for a, b in row_spans]
    col_spans = [(a + wall, b + wall) for a, b in col_spans]

    # interior walls
    for a, b in row_spans[:-1]:
        grid[b : b + wall, wall : w - wall] = OBSTACLE
    for a, b in col_spans[:-1]:
        grid[wall : h - wall, b : b + wall] = OBSTACLE

    rooms = [
        (ri, ci, row_spans[ri], col_spans[ci]) for ri in range(rows) for ci in range(cols)
    ]

    # connect rooms: spanning tree over the room lattice plus optional extras
    edges = []
    for ri in range(rows):
        for ci in range(cols):
            if ci + 1 < cols:
                edges.append(((ri, ci), (ri, ci + 1)))
            if ri + 1 < rows:
                edges.append(((ri, ci), (ri + 1, ci)))
    order = rng.permutation(len(edges))
    parent = {rc: rc for rc in ((ri, ci) for ri in range(rows) for ci in range(cols))}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    door_cells: list[tuple[int, int]] = []

    def carve_door(a, b) -> bool:
        (ra, ca), (rb, cb) = a, b
        width_d = int(rng.integers(params.door_width_range[0], params.door_width_range[1] + 1))
        if ra == rb:  # vertical wall between horizontally adjacent rooms
            wall_j = col_spans[min(ca, cb)][1]
            lo, hi = row_spans[ra]
            if hi - lo < width_d + 8:
                return False
            start = int(rng.integers(lo + 4, hi - width_d - 3))
            grid[start : start + width_d, wall_j : wall_j + wall] = FREE
            door_cells.extend(
                (i, j) for i in range(start, start + width_d) for j in range(wall_j, wall_j + wall)
            )
        else:  # horizontal wall between vertically adjacent rooms
            wall_i = row_spans[min(ra, rb)][1]
            lo, hi = col_spans[ca]
            if hi - lo < width_d + 8:
                return False
            start = int(rng.integers(lo + 4, hi - width_d - 3))
            grid[wall_i : wall_i + wall, start : start + width_d] = FREE
            door_cells.extend(
                (i, j) for i in range(wall_i, wall_i + wall) for j in range(start, start + width_d)
            )
        return True

    for idx in order:
        a, b = edges[idx]
        if find(a) != find(b):
            if not carve_door(a, b):
                return None
            parent[find(a)] = find(b)
        elif rng.random() < params.extra_door_prob:
            carve_door(a, b)

    # furniture, themed per room, rectangles backed against walls
    door_mask = np.zeros((h, w), dtype=bool)
    for i, j in door_cells:
        door_mask[i, j] = True
    clearance = int(round(0.35 / res))  # keep doorways passable
    placed_counts = {name: 0 for name in SEMANTIC_NAMES}

    def try_place(name: str, room, tries: int = 12) -> bool:
        _, _, (rlo, rhi), (clo, chi) = room
        lmin, lmax, dmin, dmax = _OBJECT_SIZES[name]
        for _ in range(tries):
            along = int(round(rng.uniform(lmin, lmax) / res))
            depth = int(round(rng.uniform(dmin, dmax) / res))
            side = int(rng.integers(0, 4))  # 0:N wall 1:S 2:W 3:E of the room
            if side in (0, 1):
                if (chi - clo) - along < 6:
                    continue
                j0 = int(rng.integers(clo + 2, chi - along - 1))
                i0 = rlo if side == 0 else rhi - depth
                block = (slice(i0, i0 + depth), slice(j0, j0 + along))
            else:
                if (rhi - rlo) - along < 6:
                    continue
                i0 = int(rng.integers(rlo + 2, rhi - along - 1))
                j0 = clo if side == 2 else chi - depth
                block = (slice(i0, i0 + along), slice(j0, j0 + depth))
            i_sl, j_sl = block
            if np.any(grid[i_sl, j_sl] != FREE):
                continue
            pad = 2  # separation between objects keeps semantic regions distinct
            pi = slice(max(i_sl.start - pad, 0), min(i_sl.stop + pad, h))
            pj = slice(max(j_sl.start - pad, 0), min(j_sl.stop + pad, w))
            if np.any(grid[pi, pj] >= 2):
                continue
            di = slice(max(i_sl.start - clearance, 0), min(i_sl.stop + clearance, h))
            dj = slice(max(j_sl.start - clearance, 0), min(j_sl.stop + clearance, w))
            if door_mask[di, dj].any():
                continue
            grid[block] = class_id(name)
            placed_counts[name] += 1
            return True
        return False

    if params.object_density > 0.0:
        for room in rooms:
            _, _, (rlo, rhi), (clo, chi) = room
            area_m2 = (rhi - rlo) * (chi - clo) * res * res
            theme = _ROOM_THEMES[int(rng.integers(0, len(_ROOM_THEMES)))]
            n_objects = int(rng.poisson(params.object_density * area_m2))
            for _ in range(n_objects):
                name = theme[int(rng.integers(0, len(theme)))]
                try_place(name, room)
        # guarantee requested target categories exist somewhere
        for name in TARGET_CATEGORIES:
            if placed_counts[name] == 0 and rng.random() < params.target_presence_prob:
                for ridx in rng.permutation(len(rooms)):
                    if try_place(name, rooms[int(ridx)], tries=24):
                        break

    return grid


# ---------------------------------------------------------------------------
# dynamics


def step_dynamics(
    state: AgentState,
    control: tuple[float, float],
    dt: float,
    world: WorldGrid | None = None,
) -> AgentState:
    """Advance the unicycle exactly over dt under constant (v, omega).

    With a world, motion is clamped at the first blocked cell along the
    travel chord (per-step chord-vs-arc gap is far below cell size at the
    configured dt and limits) and the linear velocity is zeroed. theta
    advances regardless: rotation in place is never blocked.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    v, omega = float(control[0]), float(control[1])
    x, y, theta = state.x, state.y, state.theta
    if abs(omega) < 1e-9:
        nx = x + v * math.cos(theta) * dt
        ny = y + v * math.sin(theta) * dt
    else:
        nx = x + (v / omega) * (math.sin(theta + omega * dt) - math.sin(theta))
        ny = y - (v / omega) * (math.cos(theta + omega * dt) - math.cos(theta))
    ntheta = normalize_angle(theta + omega * dt)

    if world is None:
        return AgentState(nx, ny, ntheta, v, omega)

    dist = math.hypot(nx - x, ny - y)
    if dist < 1e-12:
        return AgentState(x, y, ntheta, v, omega)
    n_sub = max(1, int(math.ceil(dist / (world.resolution * 0.25))))
    fx, fy = x, y
    clamped = False
    for k in range(1, n_sub + 1):
        t = k / n_sub
        px = x + (nx - x) * t
        py = y + (ny - y) * t
        if world.is_free_at(px, py):
            fx, fy = px, py
        else:
            clamped = True
            break
    if clamped:
        return AgentState(fx, fy, ntheta, 0.0, omega)
    return AgentState(nx, ny, ntheta, v, omega)


# ---------------------------------------------------------------------------
# raycast sensor


@njit(cache=True)
def _raycast_kernel(cells, x0, y0, theta0, fov, n_rays, max_range, res):  # pragma: no cover
    h, w = cells.shape
    hit_dist = np.empty(n_rays, dtype=np.float64)
    hit_class = np.full(n_rays, -1, dtype=np.int64)
    hit_ci = np.full(n_rays, -1, dtype=np.int64)
    hit_cj = np.full(n_rays, -1, dtype=np.int64)
    max_cells_per_ray = int(2.0 * max_range / res) + 4
    swept = np.empty((n_rays * max_cells_per_ray, 2), dtype=np.int64)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    cursor = 0

    for r in range(n_rays):
        if n_rays == 1:
            ang = theta0
        else:
            ang = theta0 - fov * 0.5 + fov * r / (n_rays - 1)
        dx = math.cos(ang)
        dy = math.sin(ang)
        ci = int(math.floor(y0 / res))
        cj = int(math.floor(x0 / res))
        step_i = 1 if dy > 0.0 else -1
        step_j = 1 if dx > 0.0 else -1
        # parametric distance to the next row/col boundary
        if dx > 0.0:
            t_max_x = ((cj + 1) * res - x0) / dx
        elif dx < 0.0:
            t_max_x = (cj * res - x0) / dx
        else:
            t_max_x = 1e30
        if dy > 0.0:
            t_max_y = ((ci + 1) * res - y0) / dy
        elif dy < 0.0:
            t_max_y = (ci * res - y0) / dy
        else:
            t_max_y = 1e30
        t_delta_x = res / abs(dx) if dx != 0.0 else 1e30
        t_delta_y = res / abs(dy) if dy != 0.0 else 1e30

        t = 0.0
        dist = max_range
        while True:
            inside = 0 <= ci < h and 0 <= cj < w
            if inside and cells[ci, cj] != 0:
                hit_dist[r] = t
                hit_class[r] = cells[ci, cj]
                hit_ci[r] = ci
                hit_cj[r] = cj
                dist = t
                break
            if inside:
                swept[cursor, 0] = ci
                swept[cursor, 1] = cj
                cursor += 1
            if t_max_x < t_max_y:
                t = t_max_x
                t_max_x += t_delta_x
                cj += step_j
            else:
                t = t_max_y
                t_max_y += t_delta_y
                ci += step_i
            if t > max_range:
                break
        if hit_class[r] == -1:
            hit_dist[r] = max_range
        offsets[r + 1] = cursor
    return hit_dist, hit_class, hit_ci, hit_cj, swept[:cursor], offsets


@dataclass
class Observation:
    """One sensor sweep: per-ray range/class hits plus the free cells traversed."""

    pose: AgentState
    angles: np.ndarray  # (R,) absolute ray angles
    hit_distance: np.ndarray  # (R,) meters; max_range when nothing hit
    hit_class: np.ndarray  # (R,) cell class of the hit, -1 when nothing hit
    hit_cells: np.ndarray  # (R, 2) (row, col) of the hit, -1 when nothing hit
    swept_cells: np.ndarray  # (M, 2) free cells traversed, all rays concatenated
    ray_offsets: np.ndarray  # (R+1,) slice bounds into swept_cells per ray
    max_range: float

    @property
    def ray_count(self) -> int:
        return len(self.angles)

    def swept_for_ray(self, r: int) -> np.ndarray:
        return self.swept_cells[self.ray_offsets[r] : self.ray_offsets[r + 1]]


def raycast_observe(
    world: WorldGrid, state: AgentState, sensor: SensorParams | None = None
) -> Observation:
    """Trace a fan of rays through the grid by DDA traversal.

    The first non-free cell along a ray is its hit; cells traversed before
    it are reported swept-free. Out-of-grid space is treated as free.
    """
    sensor = sensor or SensorParams()
    ci, cj = world.to_cell(state.x, state.y)
    if not world.in_bounds(ci, cj) or world.cells[ci, cj] != FREE:
        raise ValueError(f"agent at ({state.x:.3f}, {state.y:.3f}) is not in free space")
    hit_dist, hit_class, hit_ci, hit_cj, swept, offsets = _raycast_kernel(
        world.cells,
        float(state.x),
        float(state.y),
        float(state.theta),
        float(sensor.fov),
        int(sensor.ray_count),
        float(sensor.max_range),
        float(world.resolution),
    )
    if sensor.ray_count == 1:
        angles = np.array([state.theta])
    else:
        angles = state.theta - sensor.fov / 2 + sensor.fov * np.arange(
            sensor.ray_count
        ) / (sensor.ray_count - 1)
    return Observation(
        pose=state,
        angles=angles,
        hit_distance=hit_dist,
        hit_class=hit_class,
        hit_cells=np.stack([hit_ci, hit_cj], axis=1),
        swept_cells=swept,
        ray_offsets=offsets,
        max_range=sensor.max_range,
    )
