"""Episode runner, navigation metrics, suite aggregation, and reports.

An episode loops observe -> integrate -> goal-reacher check -> pick a cost
map (the reacher's when active, otherwise the provider's fused prediction)
-> MPC step -> simulate, for at most max_steps. Success requires both the
agent having declared done and the true geodesic distance to the target
being within the success distance.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .controller import (
    ControlSequence,
    GoalReacherResult,
    MpcConfig,
    goal_reacher_update,
    mpc_step,
    privileged_random_policy,
)
from .costfield import fmm_distance, fuse_costmap
from .mapping import LocalStack, SemanticMapStack
from .predictor import build_request, control_occupancy, make_provider
from .protocol import ProtocolError
from .world import (
    TARGET_CATEGORIES,
    AgentState,
    EpisodeConfig,
    Observation,
    SensorParams,
    WorldGenParams,
    WorldGrid,
    generate_world,
    raycast_observe,
    step_dynamics,
)

AGENTS = ("gt", "frontier", "remote", "random")


def target_distance_field(world: WorldGrid, target: str) -> np.ndarray:
    """Geodesic meters to the nearest target instance over raw occupancy."""
    mask = world.class_cells(target)
    if not mask.any():
        raise ValueError(f"world has no {target!r} instance")
    occ = control_occupancy(world.occupancy, mask, 0)
    return fmm_distance(occ, mask, world.resolution).nav


@dataclass
class StepContext:
    """Per-step state handed to run_episode's on_step callback."""

    t: int
    state: AgentState
    obs: Observation
    local: LocalStack
    map_stack: SemanticMapStack
    reacher: GoalReacherResult


@dataclass
class EpisodeResult:
    agent: str
    world_seed: int
    episode_index: int
    target: str
    success: bool
    declared_done: bool
    steps: int
    max_steps: int
    dt: float
    path_length: float
    shortest_length: float
    dts: float
    final_distance: float
    controls: np.ndarray  # (steps, 2) executed (v, omega)
    positions: np.ndarray  # (steps + 1, 2)
    failure_reason: str = ""

    @property
    def time_seconds(self) -> float:
        return self.steps * self.dt

    @property
    def spl_term(self) -> float:
        return spl_term(self.success, self.path_length, self.shortest_length)


def spl_term(success: bool, path_length: float, shortest_length: float) -> float:
    """Per-episode success weighted by path efficiency, 0/0 read as full credit."""
    if not success:
        return 0.0
    denom = max(path_length, shortest_length)
    if denom <= 0.0:
        return 1.0
    return shortest_length / denom


def spl(results) -> float:
    """Mean success-weighted path efficiency over a result list."""
    results = list(results)
    if not results:
        raise ValueError("spl over an empty result list")
    return float(np.mean([r.spl_term for r in results]))


def dts(
    final_pose: AgentState,
    world: WorldGrid,
    episode: EpisodeConfig,
    distance_field: np.ndarray | None = None,
) -> float:
    """Geodesic distance left to the success boundary around the target."""
    fld = distance_field if distance_field is not None else target_distance_field(world, episode.target)
    i, j = world.to_cell(final_pose.x, final_pose.y)
    d = float(fld[i, j]) if world.in_bounds(i, j) else math.inf
    if not math.isfinite(d):
        finite = np.isfinite(fld)
        d = float(fld[finite].max()) if finite.any() else 0.0
    return max(d - episode.success_distance, 0.0)


def smoothness(controls: np.ndarray, dt: float) -> dict:
    """Mean absolute acceleration and jerk of a control history.

    Acceleration is the first difference over dt, jerk the second
    difference over dt^2; histories shorter than the stencil score 0.
    """
    controls = np.asarray(controls, dtype=np.float64)
    out = {}
    for k, label in ((0, "linear"), (1, "angular")):
        series = controls[:, k] if controls.ndim == 2 and len(controls) else np.zeros(0)
        acc = np.diff(series) / dt if len(series) >= 2 else np.zeros(0)
        jerk = np.diff(series, n=2) / dt**2 if len(series) >= 3 else np.zeros(0)
        out[f"{label}_acc"] = float(np.abs(acc).mean()) if len(acc) else 0.0
        out[f"{label}_jerk"] = float(np.abs(jerk).mean()) if len(jerk) else 0.0
    return out


def sample_episode(
    world: WorldGrid,
    rng: np.random.Generator,
    min_start_m: float = 2.0,
    max_steps: int = 500,
    inflation_m: float = 0.1,
) -> EpisodeConfig:
    """Draw a random reachable start pose and target category.

    Starts come from cells that reach the target through the inflated
    control occupancy, so a sampled episode is always solvable by the
    oracle agent.
    """
    present = [t for t in TARGET_CATEGORIES if world.class_cells(t).any()]
    if not present:
        raise ValueError("world contains no target category instance")
    cells = max(int(round(inflation_m / world.resolution)), 0)
    for _ in range(24):
        target = present[int(rng.integers(len(present)))]
        mask = world.class_cells(target)
        occ_ctrl = control_occupancy(world.occupancy, mask, cells)
        fld = fmm_distance(occ_ctrl, mask, world.resolution).nav
        ok = (
            np.isfinite(fld)
            & (fld >= min_start_m)
            & ~occ_ctrl
            & ~world.occupancy
        )
        candidates = np.argwhere(ok)
        if len(candidates) == 0:
            continue
        i, j = candidates[int(rng.integers(len(candidates)))]
        x, y = world.cell_center(int(i), int(j))
        theta = float(rng.uniform(-math.pi, math.pi))
        return EpisodeConfig(
            world_seed=world.seed,
            start=AgentState(x, y, theta),
            target=target,
            max_steps=max_steps,
        )
    raise ValueError("no reachable start cell found for any target")


def run_episode(
    world: WorldGrid,
    episode: EpisodeConfig,
    agent: str = "gt",
    seed: int = 0,
    mpc: MpcConfig | None = None,
    sensor: SensorParams | None = None,
    theta_occ: float = 0.5,
    theta_cost: float = 0.2,
    endpoint: str | None = None,
    provider=None,
    on_step=None,
    world_seed: int | None = None,
    episode_index: int = 0,
) -> EpisodeResult:
    """Run one navigation episode and score it.

    agent is one of gt | frontier | remote | random; random draws controls
    uniformly from the velocity box but keeps the goal reacher (privileged
    baseline). A provider instance may be passed to reuse precomputed
    state. Deterministic for fixed (world, episode, agent, seed).
    """
    if agent not in AGENTS:
        raise ValueError(f"agent must be one of {AGENTS}")
    mpc = mpc or MpcConfig(dt=episode.dt)
    sensor = sensor or SensorParams()
    dist_field = target_distance_field(world, episode.target)

    own_provider = False
    if provider is None and agent in ("gt", "frontier", "remote"):
        provider = make_provider(agent, world=world, episode=episode, endpoint=endpoint)
        own_provider = True

    map_stack = SemanticMapStack((episode.start.x, episode.start.y), world.resolution)
    seq = ControlSequence.zeros(mpc)
    state = episode.start
    step_seeds = np.random.SeedSequence([seed]).generate_state(episode.max_steps, np.uint64)
    random_rng = np.random.default_rng(seed)

    positions = [(state.x, state.y)]
    controls: list[tuple[float, float]] = []
    declared_done = False
    failure_reason = ""
    try:
        for t in range(episode.max_steps):
            obs = raycast_observe(world, state, sensor)
            map_stack.integrate_observation(obs, state)
            local = map_stack.extract_local(state)
            reacher = goal_reacher_update(
                map_stack, episode.target, state, theta_cost=theta_cost, local=local
            )
            if reacher.done:
                declared_done = True
                break
            if on_step is not None:
                on_step(StepContext(t, state, obs, local, map_stack, reacher))
            if agent == "random":
                control = privileged_random_policy(random_rng, mpc.limits)
            else:
                if reacher.active:
                    cmap = reacher.costmap
                else:
                    request = build_request(
                        map_stack, local, state, obs, episode.target,
                        episode_id=episode_index, step_id=t,
                    )
                    response = provider.predict(request)
                    cmap = fuse_costmap(
                        response.occ,
                        response.nav,
                        theta_occ,
                        resolution=world.resolution,
                        origin=local.origin,
                    )
                control, seq = mpc_step(state, seq, cmap, mpc, int(step_seeds[t]))
            state = step_dynamics(state, control, episode.dt, world)
            controls.append(control)
            positions.append((state.x, state.y))
    except (ProtocolError, ConnectionError) as exc:
        failure_reason = f"provider failure: {exc}"
    finally:
        if own_provider:
            provider.close()

    positions_arr = np.asarray(positions)
    deltas = np.diff(positions_arr, axis=0)
    path_length = float(np.hypot(deltas[:, 0], deltas[:, 1]).sum()) if len(deltas) else 0.0

    si, sj = world.to_cell(episode.start.x, episode.start.y)
    start_d = float(dist_field[si, sj])
    shortest = max(start_d - episode.success_distance, 0.0)
    fi, fj = world.to_cell(state.x, state.y)
    final_d = float(dist_field[fi, fj]) if world.in_bounds(fi, fj) else math.inf
    success = declared_done and final_d <= episode.success_distance and not failure_reason

    return EpisodeResult(
        agent=agent,
        world_seed=world_seed if world_seed is not None else world.seed,
        episode_index=episode_index,
        target=episode.target,
        success=success,
        declared_done=declared_done,
        steps=len(controls),
        max_steps=episode.max_steps,
        dt=episode.dt,
        path_length=path_length,
        shortest_length=shortest,
        dts=max(final_d - episode.success_distance, 0.0) if math.isfinite(final_d) else dts(state, world, episode, dist_field),
        final_distance=final_d,
        controls=np.asarray(controls).reshape(-1, 2),
        positions=positions_arr,
        failure_reason=failure_reason,
    )


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteConfig:
    agents: tuple[str, ...] = ("gt", "frontier", "random")
    world_seeds: tuple[int, ...] = tuple(range(1, 9))
    episodes_per_world: int = 40
    suite_seed: int = 0
    worldgen: WorldGenParams = field(default_factory=WorldGenParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    sensor: SensorParams = field(default_factory=SensorParams)
    theta_occ: float = 0.5
    theta_cost: float = 0.2
    min_start_m: float = 2.0
    max_steps: int = 500
    endpoint: str | None = None
    workers: int = 1
    render: bool = False

    def __post_init__(self):
        if not self.agents or not self.world_seeds or self.episodes_per_world < 1:
            raise ValueError("suite needs at least one agent, world, and episode")
        for agent in self.agents:
            if agent not in AGENTS:
                raise ValueError(f"unknown agent {agent!r}")

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["worldgen"] = dataclasses.asdict(self.worldgen)
        out["mpc"] = {
            k: v for k, v in dataclasses.asdict(self.mpc).items() if k != "limits"
        }
        out["mpc"]["limits"] = dataclasses.asdict(self.mpc.limits)
        out["sensor"] = dataclasses.asdict(self.sensor)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "SuiteConfig":
        from .world import ControlLimits

        payload = dict(payload)
        if "worldgen" in payload:
            wg = dict(payload["worldgen"])
            if "door_width_range" in wg:
                wg["door_width_range"] = tuple(wg["door_width_range"])
            payload["worldgen"] = WorldGenParams(**wg)
        if "mpc" in payload:
            mp = dict(payload["mpc"])
            if "limits" in mp:
                mp["limits"] = ControlLimits(**mp["limits"])
            payload["mpc"] = MpcConfig(**mp)
        if "sensor" in payload:
            payload["sensor"] = SensorParams(**payload["sensor"])
        for key in ("agents", "world_seeds"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload)


@dataclass
class SuiteReport:
    config: SuiteConfig
    results: list[EpisodeResult]

    def per_agent(self) -> dict:
        out = {}
        for agent in self.config.agents:
            rows = [r for r in self.results if r.agent == agent]
            if not rows:
                continue
            smooth = [smoothness(r.controls, r.dt) for r in rows]
            per_target = {}
            for target in sorted({r.target for r in rows}):
                t_rows = [r for r in rows if r.target == target]
                per_target[target] = {
                    "episodes": len(t_rows),
                    "sr": float(np.mean([r.success for r in t_rows])),
                    "spl": spl(t_rows),
                }
            out[agent] = {
                "episodes": len(rows),
                "sr": float(np.mean([r.success for r in rows])),
                "spl": spl(rows),
                "dts_mean": float(np.mean([r.dts for r in rows])),
                "steps_mean": float(np.mean([r.steps for r in rows])),
                "time_s_mean": float(np.mean([r.time_seconds for r in rows])),
                "linear_acc_mean": float(np.mean([s["linear_acc"] for s in smooth])),
                "angular_acc_mean": float(np.mean([s["angular_acc"] for s in smooth])),
                "linear_jerk_mean": float(np.mean([s["linear_jerk"] for s in smooth])),
                "angular_jerk_mean": float(np.mean([s["angular_jerk"] for s in smooth])),
                "failures": sum(1 for r in rows if r.failure_reason),
                "per_target": per_target,
            }
        return out

    def summary(self) -> dict:
        return {"config": self.config.to_json(), "agents": self.per_agent()}


_EPISODE_COLUMNS = (
    "agent", "world_seed", "episode_index", "target", "success", "declared_done",
    "steps", "path_length", "shortest_length", "spl_term", "dts", "time_s",
    "linear_acc", "angular_acc", "linear_jerk", "angular_jerk", "failure_reason",
)


def episodes_csv(results) -> str:
    """Stable CSV over episode results (sorted, fixed float format)."""
    rows = sorted(results, key=lambda r: (r.agent, r.world_seed, r.episode_index))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_EPISODE_COLUMNS)
    for r in rows:
        sm = smoothness(r.controls, r.dt)
        writer.writerow(
            [
                r.agent, r.world_seed, r.episode_index, r.target,
                int(r.success), int(r.declared_done), r.steps,
                f"{r.path_length:.9g}", f"{r.shortest_length:.9g}",
                f"{r.spl_term:.9g}", f"{r.dts:.9g}", f"{r.time_seconds:.9g}",
                f"{sm['linear_acc']:.9g}", f"{sm['angular_acc']:.9g}",
                f"{sm['linear_jerk']:.9g}", f"{sm['angular_jerk']:.9g}",
                r.failure_reason,
            ]
        )
    return buf.getvalue()


@lru_cache(maxsize=16)
def _cached_world(seed: int, params: WorldGenParams) -> WorldGrid:
    return generate_world(seed, params)


def _episode_task(config: SuiteConfig, agent: str, world_seed: int, e_idx: int) -> EpisodeResult:
    world = _cached_world(world_seed, config.worldgen)
    rng = np.random.default_rng(
        [np.uint64(config.suite_seed), np.uint64(world_seed), np.uint64(e_idx)]
    )
    episode = sample_episode(
        world, rng, min_start_m=config.min_start_m, max_steps=config.max_steps
    )
    agent_idx = AGENTS.index(agent)
    master = np.random.SeedSequence(
        [config.suite_seed, world_seed, e_idx, agent_idx]
    ).generate_state(1, np.uint64)[0]
    return run_episode(
        world, episode, agent=agent, seed=int(master), mpc=config.mpc,
        sensor=config.sensor, theta_occ=config.theta_occ,
        theta_cost=config.theta_cost, endpoint=config.endpoint,
        world_seed=world_seed, episode_index=e_idx,
    )


def run_suite(config: SuiteConfig, out_dir=None, progress=None) -> SuiteReport:
    """Run every (agent, world, episode) combination and aggregate.

    Episodes are shared across agents (same start pose and target per
    (world, index) pair). With workers > 1 episodes run in separate
    processes; results are order-independent. Individual failures are
    recorded on their rows and do not stop the suite.
    """
    tasks = [
        (agent, w, e)
        for agent in config.agents
        for w in config.world_seeds
        for e in range(config.episodes_per_world)
    ]
    results: list[EpisodeResult] = []
    if config.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_episode_task, config, *task) for task in tasks]
            for done, fut in enumerate(futures):
                results.append(fut.result())
                if progress:
                    progress(done + 1, len(tasks))
    else:
        for done, task in enumerate(tasks):
            results.append(_episode_task(config, *task))
            if progress:
                progress(done + 1, len(tasks))

    report = SuiteReport(config=config, results=results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.json", "w") as fh:
            json.dump(report.summary(), fh, indent=1)
        with open(out / "episodes.csv", "w") as fh:
            fh.write(episodes_csv(results))
        if config.render:
            from .render import render_episode

            render_dir = out / "renders"
            render_dir.mkdir(exist_ok=True)
            for r in results:
                world = _cached_world(r.world_seed, config.worldgen)
                render_episode(
                    world, r, render_dir / f"{r.agent}_w{r.world_seed}_e{r.episode_index}.png"
                )
    return report
