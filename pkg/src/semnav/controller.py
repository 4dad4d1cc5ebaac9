"""Sampling-based MPC over cost maps, plus the goal reacher.

Each control step perturbs a nominal (v, omega) sequence with Gaussian
noise, rolls every sample through the exact unicycle model, prices the
visited cells against the active cost map plus a quadratic control effort,
and blends the noise back with softmin importance weights. Rollouts ignore
collisions on purpose: obstacles are priced by the cost map, and the
simulator clamps the actually executed motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .costfield import (
    CostMap,
    clear_region_around,
    fmm_distance,
    inflate_occupancy,
    normalize_nav,
)
from .mapping import CH_OBSTACLE, LocalStack, SemanticMapStack, goal_mask
from .world import AgentState, ControlLimits, step_dynamics

GOAL_INACTIVE = "inactive"
GOAL_ACTIVE = "active"
GOAL_DONE = "done"


@dataclass(frozen=True)
class MpcConfig:
    """Tuning of the sampling controller (defaults are the shipped setup)."""

    horizon: int = 50
    samples: int = 256
    noise_sigma: float = 0.35
    noise_mu: float = 0.0
    temperature: float = 0.5
    q_v: float = 0.1
    q_omega: float = 0.05
    dt: float = 0.1
    limits: ControlLimits = field(default_factory=ControlLimits)

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValueError("horizon and samples must be >= 1")
        if self.noise_sigma <= 0 or self.temperature <= 0:
            raise ValueError("noise sigma and temperature must be > 0")
        if self.q_v < 0 or self.q_omega < 0:
            raise ValueError("control effort weights must be >= 0")


@dataclass
class ControlSequence:
    """Nominal horizon controls plus the last iteration's sampling state."""

    controls: np.ndarray  # (H, 2)
    perturbations: np.ndarray | None = None  # (K, H, 2)
    costs: np.ndarray | None = None  # (K,)
    weights: np.ndarray | None = None  # (K,)

    @classmethod
    def zeros(cls, cfg: MpcConfig) -> "ControlSequence":
        return cls(controls=np.zeros((cfg.horizon, 2)))


def sample_perturbations(cfg: MpcConfig, rng_seed: int) -> np.ndarray:
    """(K, H, 2) Gaussian control noise, deterministic for a seed."""
    rng = np.random.default_rng(rng_seed)
    return rng.normal(cfg.noise_mu, cfg.noise_sigma, size=(cfg.samples, cfg.horizon, 2))


def _clamp_controls(controls: np.ndarray, limits: ControlLimits) -> np.ndarray:
    out = np.empty_like(controls)
    out[..., 0] = np.clip(controls[..., 0], limits.v_min, limits.v_max)
    out[..., 1] = np.clip(controls[..., 1], limits.omega_min, limits.omega_max)
    return out


def rollout(state: AgentState, controls: np.ndarray, dt: float) -> np.ndarray:
    """Poses x_1..x_H from iterating the exact unicycle step (no collisions)."""
    controls = np.asarray(controls, dtype=np.float64)
    poses = np.empty((len(controls), 3))
    s = state
    for t, (v, omega) in enumerate(controls):
        s = step_dynamics(s, (v, omega), dt, world=None)
        poses[t] = (s.x, s.y, s.theta)
    return poses


def _rollout_batch(state: AgentState, controls: np.ndarray, dt: float) -> np.ndarray:
    """(K, H, 2) positions for a (K, H, 2) control batch, vectorized over K."""
    k, h, _ = controls.shape
    poses = np.empty((k, h, 2))
    x = np.full(k, state.x)
    y = np.full(k, state.y)
    th = np.full(k, state.theta)
    for t in range(h):
        v = controls[:, t, 0]
        om = controls[:, t, 1]
        straight = np.abs(om) < 1e-9
        om_safe = np.where(straight, 1.0, om)
        nth = th + om * dt
        x = np.where(
            straight,
            x + v * np.cos(th) * dt,
            x + (v / om_safe) * (np.sin(nth) - np.sin(th)),
        )
        y = np.where(
            straight,
            y + v * np.sin(th) * dt,
            y - (v / om_safe) * (np.cos(nth) - np.cos(th)),
        )
        th = nth
        poses[:, t, 0] = x
        poses[:, t, 1] = y
    return poses


def _field_lookup(cmap: CostMap, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    fld = cmap.control_field()
    h, w = fld.shape
    ii = np.floor((py - cmap.origin[1]) / cmap.resolution).astype(np.int64)
    jj = np.floor((px - cmap.origin[0]) / cmap.resolution).astype(np.int64)
    inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    vals = fld[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)]
    return np.where(inside, vals, cmap.obstacle_cost)


def trajectory_cost(
    poses: np.ndarray,
    controls: np.ndarray,
    cmap: CostMap,
    q: tuple[float, float] = (0.1, 0.05),
) -> float:
    """Map cost at each visited pose plus quadratic control effort, summed.

    Poses outside the cost-map window are priced at the obstacle cost.
    """
    poses = np.asarray(poses, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    cell_costs = _field_lookup(cmap, poses[:, 0], poses[:, 1])
    effort = q[0] * controls[:, 0] ** 2 + q[1] * controls[:, 1] ** 2
    return float(cell_costs.sum() + effort.sum())


def importance_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Softmin weights over sample costs, shifted by the minimum for stability.

    Non-finite costs get weight zero; raises if no finite cost remains.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise ValueError("all sample costs are non-finite")
    best = costs[finite].min()
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - best) / temperature)
    return w / w.sum()


def update_controls(
    seq: ControlSequence,
    weights: np.ndarray,
    perturbations: np.ndarray,
    limits: ControlLimits | None = None,
) -> ControlSequence:
    """Blend weighted noise into the nominal sequence and clamp to limits."""
    weights = np.asarray(weights, dtype=np.float64)
    perturbations = np.asarray(perturbations, dtype=np.float64)
    if perturbations.shape[0] != weights.shape[0] or perturbations.shape[1:] != seq.controls.shape:
        raise ValueError(
            f"perturbations {perturbations.shape} do not match weights "
            f"{weights.shape} and controls {seq.controls.shape}"
        )
    blended = seq.controls + np.tensordot(weights, perturbations, axes=(0, 0))
    if limits is not None:
        blended = _clamp_controls(blended, limits)
    return ControlSequence(
        controls=blended, perturbations=perturbations, costs=seq.costs, weights=weights
    )


def mpc_step(
    state: AgentState,
    seq: ControlSequence,
    cmap: CostMap,
    cfg: MpcConfig,
    rng_seed: int,
) -> tuple[tuple[float, float], ControlSequence]:
    """One receding-horizon iteration: returns the control to apply now and
    the shifted nominal sequence (last entry duplicated)."""
    noise = sample_perturbations(cfg, rng_seed)
    candidates = _clamp_controls(seq.controls[None, :, :] + noise, cfg.limits)
    positions = _rollout_batch(state, candidates, cfg.dt)
    cell_costs = _field_lookup(
        cmap, positions[..., 0].reshape(-1), positions[..., 1].reshape(-1)
    ).reshape(cfg.samples, cfg.horizon)
    effort = cfg.q_v * candidates[..., 0] ** 2 + cfg.q_omega * candidates[..., 1] ** 2
    costs = cell_costs.sum(axis=1) + effort.sum(axis=1)
    weights = importance_weights(costs, cfg.temperature)
    # blend the executed (clamped) perturbations: raw noise that was cut off
    # at the velocity box would otherwise bias the update into the limit
    effective = candidates - seq.controls[None, :, :]
    updated = update_controls(
        ControlSequence(seq.controls, costs=costs), weights, effective, cfg.limits
    )
    apply = (float(updated.controls[0, 0]), float(updated.controls[0, 1]))
    shifted = np.vstack([updated.controls[1:], updated.controls[-1:]])
    return apply, ControlSequence(
        controls=shifted, perturbations=noise, costs=costs, weights=weights
    )


@dataclass
class GoalReacherResult:
    status: str  # GOAL_INACTIVE | GOAL_ACTIVE | GOAL_DONE
    costmap: CostMap | None = None
    agent_cost: float | None = None  # normalized field value at the agent

    @property
    def active(self) -> bool:
        return self.status == GOAL_ACTIVE

    @property
    def done(self) -> bool:
        return self.status == GOAL_DONE


def goal_reacher_update(
    map_stack: SemanticMapStack,
    target: str,
    state: AgentState,
    theta_cost: float = 0.2,
    min_region: int = 4,
    inflation_m: float = 0.1,
    theta_cost_units: str = "meters",
    local: LocalStack | None = None,
) -> GoalReacherResult:
    """Drive-to-goal mode once the target shows up in the local map.

    Builds a fast-marching field from the goal mask over the mapped
    occupancy (inflated for control, with the band around the goal carved
    so the front can escape the object cells; unexplored space counts as
    traversable). Declares done when the field value at the agent drops to
    theta_cost — measured in meters on the raw field by default, or on the
    window-normalized field with theta_cost_units="normalized" (that
    variant can trigger outside the success radius in large windows).
    Falls back to inactive when the goal is unreachable through the mapped
    obstacles.
    """
    if theta_cost_units not in ("meters", "normalized"):
        raise ValueError("theta_cost_units must be 'meters' or 'normalized'")
    local = local if local is not None else map_stack.extract_local(state)
    gm = goal_mask(local, target, min_region=min_region)
    if gm.count == 0:
        return GoalReacherResult(GOAL_INACTIVE)
    res = local.resolution
    inflate_cells = max(int(round(inflation_m / res)), 0)
    occ_raw = local.stack[CH_OBSTACLE] > 0.5
    occ_ctrl = inflate_occupancy(occ_raw, inflate_cells)
    carved = clear_region_around(occ_ctrl, gm.mask, max(inflate_cells, 1))
    # carving must not knock out real mapped walls, only the inflation band
    occ_ctrl = carved | (occ_raw & ~gm.mask)
    cm = fmm_distance(occ_ctrl, gm.mask, res, origin=local.origin)
    norm, _ = normalize_nav(cm.nav)
    ai, aj = local.cell_of(state.x, state.y)
    if not (0 <= ai < norm.shape[0] and 0 <= aj < norm.shape[1]):
        return GoalReacherResult(GOAL_INACTIVE)
    if not math.isfinite(cm.nav[ai, aj]):
        return GoalReacherResult(GOAL_INACTIVE)
    agent_cost = float(norm[ai, aj]) if theta_cost_units == "normalized" else float(cm.nav[ai, aj])
    fused = np.where(occ_ctrl, cm.obstacle_cost, norm)
    out = replace(cm, fused=fused, normalized=True, occ=occ_ctrl.astype(np.float64))
    if agent_cost <= theta_cost:
        return GoalReacherResult(GOAL_DONE, costmap=out, agent_cost=agent_cost)
    return GoalReacherResult(GOAL_ACTIVE, costmap=out, agent_cost=agent_cost)


def privileged_random_policy(
    rng: np.random.Generator | int, limits: ControlLimits | None = None
) -> tuple[float, float]:
    """Uniform draw over the velocity box (the random baseline's action)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    limits = limits or ControlLimits()
    return (
        float(rng.uniform(limits.v_min, limits.v_max)),
        float(rng.uniform(limits.omega_min, limits.omega_max)),
    )
