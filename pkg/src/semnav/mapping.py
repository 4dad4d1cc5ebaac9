"""The agent's semantic map stack: integration, windows, goal masks.

The map is a (C, G, G) float32 stack anchored at the episode start, with
C = 2 + K channels: obstacle mask, explored mask, then K per-class
evidence layers in [0, 1]. Evidence fuses by running max, which keeps
integration idempotent and exploration monotone. Cell indices share the
world grid's lattice (same resolution), so observations integrate by
integer offset only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .world import NUM_SEMANTIC_CLASSES, AgentState, Observation, class_id

log = logging.getLogger(__name__)

CH_OBSTACLE = 0
CH_EXPLORED = 1
CH_SEMANTIC = 2  # first of the K class-evidence channels

NUM_CHANNELS = 2 + NUM_SEMANTIC_CLASSES  # C = 18
LOCAL_SIZE = 140  # N
GLOBAL_SIZE = 420

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class LocalStack:
    """An agent-centered (C, N, N) crop of the global stack."""

    stack: np.ndarray
    origin: tuple[float, float]  # world coords of the window's (0, 0) corner
    resolution: float

    @property
    def size(self) -> int:
        return self.stack.shape[1]

    @property
    def obstacle(self) -> np.ndarray:
        return self.stack[CH_OBSTACLE]

    @property
    def explored(self) -> np.ndarray:
        return self.stack[CH_EXPLORED]

    @property
    def semantic(self) -> np.ndarray:
        return self.stack[CH_SEMANTIC:]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((y - self.origin[1]) / self.resolution)),
            int(math.floor((x - self.origin[0]) / self.resolution)),
        )


@dataclass
class GoalMask:
    """Cells believed to hold the target category, small regions removed."""

    mask: np.ndarray  # (N, N) bool
    count: int


class SemanticMapStack:
    """Start-anchored global semantic map with local-window extraction."""

    def __init__(
        self,
        anchor_xy: tuple[float, float],
        resolution: float,
        global_size: int = GLOBAL_SIZE,
        local_size: int = LOCAL_SIZE,
    ):
        if global_size < local_size:
            raise ValueError("global window must be at least the local window")
        self.resolution = float(resolution)
        self.global_size = int(global_size)
        self.local_size = int(local_size)
        anchor_i = int(math.floor(anchor_xy[1] / resolution))
        anchor_j = int(math.floor(anchor_xy[0] / resolution))
        self._origin_cell = (anchor_i - global_size // 2, anchor_j - global_size // 2)
        self.origin = (
            self._origin_cell[1] * self.resolution,
            self._origin_cell[0] * self.resolution,
        )
        self.grid = np.zeros((NUM_CHANNELS, global_size, global_size), dtype=np.float32)

    @property
    def channels(self) -> int:
        return self.grid.shape[0]

    def world_cell_to_map(self, wi: int, wj: int) -> tuple[int, int]:
        return (wi - self._origin_cell[0], wj - self._origin_cell[1])

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor(y / self.resolution)) - self._origin_cell[0],
            int(math.floor(x / self.resolution)) - self._origin_cell[1],
        )

    def in_bounds(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        g = self.global_size
        return (i >= 0) & (i < g) & (j >= 0) & (j < g)

    def explored_count(self) -> int:
        return int((self.grid[CH_EXPLORED] > 0).sum())

    def integrate_observation(self, obs: Observation, pose: AgentState) -> "SemanticMapStack":
        """Fuse one sensor sweep into the stack (in place; returns self).

        Swept cells become explored free space; hit cells become explored
        obstacles with their class evidence raised to the running max.
        Cells falling outside the global window are dropped.
        """
        pi, pj = self.cell_of(pose.x, pose.y)
        if not (0 <= pi < self.global_size and 0 <= pj < self.global_size):
            raise ValueError("pose outside the global map window")

        if len(obs.swept_cells):
            si = obs.swept_cells[:, 0] - self._origin_cell[0]
            sj = obs.swept_cells[:, 1] - self._origin_cell[1]
            ok = self.in_bounds(si, sj)
            dropped = int((~ok).sum())
            if dropped:
                log.debug("dropped %d swept cells outside the global window", dropped)
            self.grid[CH_EXPLORED, si[ok], sj[ok]] = 1.0

        hit = obs.hit_class >= 0
        if hit.any():
            hi = obs.hit_cells[hit, 0] - self._origin_cell[0]
            hj = obs.hit_cells[hit, 1] - self._origin_cell[1]
            cls = obs.hit_class[hit]
            ok = self.in_bounds(hi, hj)
            dropped = int((~ok).sum())
            if dropped:
                log.debug("dropped %d hit cells outside the global window", dropped)
            hi, hj, cls = hi[ok], hj[ok], cls[ok]
            self.grid[CH_EXPLORED, hi, hj] = 1.0
            self.grid[CH_OBSTACLE, hi, hj] = 1.0
            sem = cls >= 2
            self.grid[CH_SEMANTIC + (cls[sem] - 2), hi[sem], hj[sem]] = 1.0
        return self

    def extract_local(self, pose: AgentState) -> LocalStack:
        """Translation-only crop of the global stack centered on the agent."""
        n = self.local_size
        ci, cj = self.cell_of(pose.x, pose.y)
        half = n // 2
        i0, j0 = ci - half, cj - half
        out = np.zeros((self.channels, n, n), dtype=np.float32)
        src_i0, src_j0 = max(i0, 0), max(j0, 0)
        src_i1, src_j1 = min(i0 + n, self.global_size), min(j0 + n, self.global_size)
        if src_i0 < src_i1 and src_j0 < src_j1:
            out[:, src_i0 - i0 : src_i1 - i0, src_j0 - j0 : src_j1 - j0] = self.grid[
                :, src_i0:src_i1, src_j0:src_j1
            ]
        origin = (
            self.origin[0] + j0 * self.resolution,
            self.origin[1] + i0 * self.resolution,
        )
        return LocalStack(stack=out, origin=origin, resolution=self.resolution)

    def pool_global(self) -> np.ndarray:
        """Average-pool the global stack down to the local spatial size."""
        return pool_stack(self.grid, self.global_size // self.local_size)


def pool_stack(stack: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping factor x factor average pooling per channel."""
    c, h, w = stack.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by pooling factor {factor}")
    blocks = stack.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor)
    return (blocks.sum(axis=(2, 4)) / (factor * factor)).astype(np.float32)


def goal_mask(local: LocalStack | np.ndarray, target: str | int, min_region: int = 4) -> GoalMask:
    """Cells whose dominant class evidence is the target, small regions removed.

    Only cells with evidence above 0.5 participate; connected components
    (8-connectivity) smaller than min_region cells are discarded. An empty
    mask means the target has not been seen yet.
    """
    stack = local.stack if isinstance(local, LocalStack) else np.asarray(local)
    sem = stack[CH_SEMANTIC:]
    target_channel = (class_id(target) - 2) if isinstance(target, str) else int(target) - 2
    if not 0 <= target_channel < sem.shape[0]:
        raise ValueError(f"target {target!r} is not a semantic class")
    peak = sem.max(axis=0)
    dominant = sem.argmax(axis=0)
    candidate = (peak > 0.5) & (dominant == target_channel)
    if not candidate.any():
        return GoalMask(mask=candidate, count=0)
    labels, n_labels = ndimage.label(candidate, structure=_EIGHT_CONNECTED)
    keep = np.zeros_like(candidate)
    for lbl in range(1, n_labels + 1):
        region = labels == lbl
        if int(region.sum()) >= min_region:
            keep |= region
    return GoalMask(mask=keep, count=int(keep.sum()))
