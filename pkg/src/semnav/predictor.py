"""Cost-map prediction providers behind one request/response contract.

Three interchangeable providers fill the prediction slot of the
navigation loop:

  * GroundTruthProvider — privileged oracle; crops a precomputed geodesic
    field to the target out of the true world.
  * FrontierProvider — non-learned baseline; plans to the mapped goal when
    visible, otherwise to the exploration frontier, using only the request's
    local map stack.
  * RemoteProvider — bridges to an out-of-process learned predictor over
    the newline-delimited JSON protocol (stdio of a spawned command, or TCP).

Responses are (140, 140) navigation-cost and occupancy grids in [0, 1];
the caller fuses them into a control field.
"""

from __future__ import annotations

import math
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass

import numpy as np

from . import protocol
from .costfield import (
    UnreachableGoalError,
    clear_region_around,
    fmm_distance,
    inflate_occupancy,
    normalize_nav,
)
from .mapping import (
    CH_EXPLORED,
    CH_OBSTACLE,
    LOCAL_SIZE,
    LocalStack,
    SemanticMapStack,
    goal_mask,
)
from .protocol import ProtocolError
from .world import (
    AgentState,
    EpisodeConfig,
    Observation,
    WorldGrid,
    class_id,
    normalize_angle,
)

RESPONSE_SHAPE = (LOCAL_SIZE, LOCAL_SIZE)


def orientation_bin(theta: float) -> int:
    """Map a heading to one of 8 bins of 45 degrees each.

    Bin 1 is centered on east (theta = 0) and numbering runs
    counterclockwise, so north (pi/2) lands in bin 3.
    """
    eighth = math.tau / 8.0
    idx = int(math.floor(normalize_angle(theta) / eighth + 0.5)) % 8
    return idx + 1


@dataclass
class PredictionRequest:
    """Everything a predictor may condition on for one step.

    The wire protocol serializes the map stacks, target index, orientation
    bin, and ray summary; pose and window origin are local-process metadata
    for privileged providers and never travel.
    """

    local: np.ndarray  # (18, 140, 140) float32
    global_pooled: np.ndarray  # (18, 140, 140) float32
    target_index: int  # semantic class index, 0..K-1
    orientation_bin: int  # 1..8
    ray_depth: np.ndarray  # (R,) float32
    ray_class: np.ndarray  # (R,) int
    episode_id: int = 0
    step_id: int = 0
    pose: AgentState | None = None
    window_origin: tuple[float, float] = (0.0, 0.0)
    resolution: float = 0.05

    def __post_init__(self):
        expect = (self.local.shape[0],) + RESPONSE_SHAPE
        if self.local.shape != expect or self.global_pooled.shape != expect:
            raise ValueError(
                f"map stacks must be {expect}, got local {self.local.shape} "
                f"global {self.global_pooled.shape}"
            )
        if not 1 <= self.orientation_bin <= 8:
            raise ValueError(f"orientation bin {self.orientation_bin} outside 1..8")


@dataclass
class PredictionResponse:
    nav: np.ndarray  # (140, 140) in [0, 1]
    occ: np.ndarray  # (140, 140) in [0, 1]
    latency: float = 0.0

    def __post_init__(self):
        if self.nav.shape != RESPONSE_SHAPE or self.occ.shape != RESPONSE_SHAPE:
            raise ValueError(
                f"response grids must be {RESPONSE_SHAPE}, got nav {self.nav.shape} "
                f"occ {self.occ.shape}"
            )


def build_request(
    map_stack: SemanticMapStack,
    local: LocalStack,
    pose: AgentState,
    obs: Observation | None,
    target: str,
    episode_id: int = 0,
    step_id: int = 0,
) -> PredictionRequest:
    """Assemble the per-step request out of the live mapping state."""
    if obs is None:
        depth = np.zeros(0, dtype=np.float32)
        klass = np.zeros(0, dtype=np.int64)
    else:
        depth = obs.hit_distance.astype(np.float32)
        klass = obs.hit_class.astype(np.int64)
    return PredictionRequest(
        local=local.stack,
        global_pooled=map_stack.pool_global(),
        target_index=class_id(target) - 2,
        orientation_bin=orientation_bin(pose.theta),
        ray_depth=depth,
        ray_class=klass,
        episode_id=episode_id,
        step_id=step_id,
        pose=pose,
        window_origin=local.origin,
        resolution=local.resolution,
    )


def control_occupancy(occ: np.ndarray, goal: np.ndarray, inflate_cells: int) -> np.ndarray:
    """Inflated occupancy with the band around goal cells carved open.

    Real obstacles outside the goal mask survive the carve; only the
    inflation halo and the goal cells themselves become traversable, so a
    fast-marching front seeded on object cells can escape into free space.
    """
    inflated = inflate_occupancy(occ, inflate_cells)
    carved = clear_region_around(inflated, goal, max(inflate_cells, 1))
    return carved | (np.asarray(occ, dtype=bool) & ~np.asarray(goal, dtype=bool))


class GroundTruthProvider:
    """Privileged oracle: geodesic cost to the true target instances."""

    name = "gt"

    def __init__(self, world: WorldGrid, episode: EpisodeConfig, inflation_m: float = 0.1):
        self.world = world
        target_mask = world.class_cells(episode.target)
        if not target_mask.any():
            raise UnreachableGoalError(f"world has no {episode.target!r} instance")
        cells = max(int(round(inflation_m / world.resolution)), 0)
        occ_ctrl = control_occupancy(world.occupancy, target_mask, cells)
        self.field = fmm_distance(occ_ctrl, target_mask, world.resolution).nav
        start = episode.start
        si, sj = world.to_cell(start.x, start.y)
        if not math.isfinite(self.field[si, sj]):
            raise UnreachableGoalError(
                f"target {episode.target!r} not geodesically reachable from the start"
            )

    def predict(self, request: PredictionRequest) -> PredictionResponse:
        t0 = time.perf_counter()
        res = self.world.resolution
        oi = int(round(request.window_origin[1] / res))
        oj = int(round(request.window_origin[0] / res))
        n = LOCAL_SIZE
        nav = np.full((n, n), np.inf)
        occ = np.ones((n, n))
        src_i0, src_j0 = max(oi, 0), max(oj, 0)
        src_i1 = min(oi + n, self.world.height)
        src_j1 = min(oj + n, self.world.width)
        if src_i0 < src_i1 and src_j0 < src_j1:
            dst = (slice(src_i0 - oi, src_i1 - oi), slice(src_j0 - oj, src_j1 - oj))
            nav[dst] = self.field[src_i0:src_i1, src_j0:src_j1]
            occ[dst] = self.world.occupancy[src_i0:src_i1, src_j0:src_j1]
        norm, _ = normalize_nav(nav)
        return PredictionResponse(
            nav=norm, occ=occ, latency=time.perf_counter() - t0
        )

    def close(self) -> None:
        pass


class FrontierProvider:
    """Exploration baseline driven purely by the request's local map.

    Plans a fast-marching field to the mapped goal cells when the target is
    visible, otherwise to the frontier (explored free cells bordering
    unexplored space). With nothing left to explore and no goal in sight it
    returns a uniform max-cost field.
    """

    name = "frontier"

    def __init__(self, target: str, inflation_m: float = 0.1, min_region: int = 4):
        self.target = target
        self.inflation_m = inflation_m
        self.min_region = min_region

    def predict(self, request: PredictionRequest) -> PredictionResponse:
        t0 = time.perf_counter()
        stack = request.local
        res = request.resolution
        obstacles = stack[CH_OBSTACLE] > 0.5
        explored = stack[CH_EXPLORED] > 0.5
        gm = goal_mask(stack, self.target, min_region=self.min_region)
        cells = max(int(round(self.inflation_m / res)), 0)

        if gm.count:
            seeds = gm.mask
            occ_fmm = control_occupancy(obstacles, seeds, cells)
        else:
            seeds = _frontier_cells(explored, obstacles)
            if not seeds.any():
                return PredictionResponse(
                    nav=np.ones(RESPONSE_SHAPE),
                    occ=obstacles.astype(np.float64),
                    latency=time.perf_counter() - t0,
                )
            # distances live inside known space: unexplored cells are not
            # traversable when heading for the frontier
            occ_fmm = inflate_occupancy(obstacles, cells) | ~explored
            occ_fmm &= ~seeds
        nav = fmm_distance(occ_fmm, seeds, res).nav
        center = LOCAL_SIZE // 2
        if not math.isfinite(nav[center, center]):
            # inflation can pinch off the agent's own cell in tight mapped
            # corridors; retry without it so the field keeps a usable slope
            occ_fmm = (obstacles & ~seeds) if gm.count == 0 else control_occupancy(obstacles, seeds, 0)
            if gm.count == 0:
                occ_fmm = occ_fmm | (~explored & ~seeds)
            nav = fmm_distance(occ_fmm, seeds, res).nav
        norm, _ = normalize_nav(nav)
        return PredictionResponse(
            nav=norm, occ=obstacles.astype(np.float64), latency=time.perf_counter() - t0
        )

    def close(self) -> None:
        pass


def _frontier_cells(explored: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    """Explored free cells 4-adjacent to unexplored space."""
    free = explored & ~obstacles
    unexplored = ~explored
    neighbor_unexplored = np.zeros_like(unexplored)
    neighbor_unexplored[1:, :] |= unexplored[:-1, :]
    neighbor_unexplored[:-1, :] |= unexplored[1:, :]
    neighbor_unexplored[:, 1:] |= unexplored[:, :-1]
    neighbor_unexplored[:, :-1] |= unexplored[:, 1:]
    return free & neighbor_unexplored


class RemoteProvider:
    """Client side of the predictor wire protocol.

    endpoint accepts "host:port" for TCP or "cmd:<command line>" to spawn a
    predictor process and talk over its stdio. A broken stream triggers one
    reconnect (with a fresh handshake) before giving up.
    """

    name = "remote"

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._channel: protocol.LineChannel | None = None
        self._connect()

    def _connect(self) -> None:
        self._teardown()
        if self.endpoint.startswith("cmd:"):
            argv = shlex.split(self.endpoint[len("cmd:") :])
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
            self._channel = protocol.channel_for_subprocess(self._proc)
        else:
            host, _, port = self.endpoint.rpartition(":")
            if not host or not port.isdigit():
                raise ValueError(f"endpoint {self.endpoint!r} is not host:port or cmd:...")
            self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
            self._channel = protocol.channel_for_socket(self._sock)
        protocol.handshake(self._channel, self.timeout)

    def _teardown(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self._channel = None

    def predict(self, request: PredictionRequest) -> PredictionResponse:
        message = {
            "type": "predict",
            "episode": int(request.episode_id),
            "step": int(request.step_id),
            "target": int(request.target_index),
            "orientation_bin": int(request.orientation_bin),
            "local": protocol.encode_tensor(request.local),
            "global": protocol.encode_tensor(request.global_pooled),
            "rays": {
                "depth": [float(d) for d in request.ray_depth],
                "class": [int(c) for c in request.ray_class],
            },
        }
        t0 = time.perf_counter()
        try:
            reply = self._roundtrip(message)
        except ConnectionError:
            self._connect()  # reconnect once, then fail for good
            reply = self._roundtrip(message)
        nav = self._decode_grid(reply, "nav")
        occ = self._decode_grid(reply, "occ")
        return PredictionResponse(nav=nav, occ=occ, latency=time.perf_counter() - t0)

    def _roundtrip(self, message: dict) -> dict:
        self._channel.send(message)
        reply = self._channel.recv(self.timeout)
        if reply.get("type") == "error":
            raise ProtocolError(f"predictor error: {reply.get('message')}")
        if reply.get("type") != "costmap":
            raise ProtocolError(f"expected costmap, got {reply.get('type')!r}")
        return reply

    def _decode_grid(self, reply: dict, key: str) -> np.ndarray:
        if key not in reply:
            raise ProtocolError(f"costmap response missing {key!r}")
        tensor = protocol.decode_tensor(reply[key], expect_shape=(1,) + RESPONSE_SHAPE)
        grid = tensor.reshape(RESPONSE_SHAPE).astype(np.float64)
        if not np.isfinite(grid).all():
            raise ProtocolError(f"{key} grid contains non-finite values")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise ProtocolError(f"{key} grid outside [0, 1]")
        return grid

    def close(self) -> None:
        self._teardown()


def make_provider(
    name: str,
    world: WorldGrid | None = None,
    episode: EpisodeConfig | None = None,
    endpoint: str | None = None,
    inflation_m: float = 0.1,
):
    if name == "gt":
        if world is None or episode is None:
            raise ValueError("gt provider needs the world and episode")
        return GroundTruthProvider(world, episode, inflation_m=inflation_m)
    if name == "frontier":
        if episode is None:
            raise ValueError("frontier provider needs the episode (for the target)")
        return FrontierProvider(episode.target, inflation_m=inflation_m)
    if name == "remote":
        if not endpoint:
            raise ValueError("remote provider needs --endpoint host:port or cmd:...")
        return RemoteProvider(endpoint)
    raise ValueError(f"unknown provider {name!r}")
