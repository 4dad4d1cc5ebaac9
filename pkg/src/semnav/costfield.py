"""Geodesic cost fields and the numeric losses/metrics defined over them.

The fast-marching solver propagates a first-order upwind eikonal front
(|grad T| = 1) over free cells from a set of seed cells, producing
distances in meters. The update stencil combines the classic two-axis
quadratic solve with direct axial and diagonal relaxations, so values stay
within a few percent of an 8-connected shortest path on grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage


class UnreachableGoalError(ValueError):
    """No usable (traversable) seed cell for a distance solve."""


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the three cost-map training losses."""

    occupancy: float = 1.0
    cost: float = 1.5
    direction: float = 1.0

    def __post_init__(self):
        if min(self.occupancy, self.cost, self.direction) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class CostMap:
    """Navigation cost field plus occupancy, optionally fused for control.

    nav holds nonnegative costs with np.inf marking unreachable or occupied
    cells; occ holds occupancy probabilities in [0, 1]. fused (when set)
    overlays the obstacle cost on top of nav wherever occupancy crosses the
    configured threshold. origin georeferences cell (0, 0)'s corner so
    controllers can map world poses to cells.
    """

    nav: np.ndarray
    occ: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    normalized: bool = False
    obstacle_cost: float = 1.0
    fused: np.ndarray | None = None

    def __post_init__(self):
        if self.nav.shape != self.occ.shape:
            raise ValueError(f"nav {self.nav.shape} / occ {self.occ.shape} shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.nav.shape

    def control_field(self) -> np.ndarray:
        """Field a controller should price against: fused if present, else nav."""
        return self.fused if self.fused is not None else self.nav

    def value_at(self, x: float, y: float) -> float:
        """Control-field value at a world position; obstacle cost outside."""
        i = int(math.floor((y - self.origin[1]) / self.resolution))
        j = int(math.floor((x - self.origin[0]) / self.resolution))
        f = self.control_field()
        if 0 <= i < f.shape[0] and 0 <= j < f.shape[1]:
            return float(f[i, j])
        return self.obstacle_cost


# ---------------------------------------------------------------------------
# fast marching


@njit(cache=True)
def _heap_push(keys, items, size, key, item):  # pragma: no cover
    keys[size] = key
    items[size] = item
    child = size
    while child > 0:
        parent = (child - 1) >> 1
        if keys[parent] <= keys[child]:
            break
        keys[parent], keys[child] = keys[child], keys[parent]
        items[parent], items[child] = items[child], items[parent]
        child = parent
    return size + 1


@njit(cache=True)
def _heap_pop(keys, items, size):  # pragma: no cover
    top_key = keys[0]
    top_item = items[0]
    size -= 1
    keys[0] = keys[size]
    items[0] = items[size]
    parent = 0
    while True:
        left = 2 * parent + 1
        if left >= size:
            break
        right = left + 1
        small = left
        if right < size and keys[right] < keys[left]:
            small = right
        if keys[parent] <= keys[small]:
            break
        keys[parent], keys[small] = keys[small], keys[parent]
        items[parent], items[small] = items[small], items[parent]
        parent = small
    return top_key, top_item, size


@njit(cache=True)
def _fmm_solve(occ, seed, h):  # pragma: no cover
    height, width = occ.shape
    inf = np.inf
    dist = np.full((height, width), inf)
    frozen = np.zeros((height, width), dtype=np.uint8)
    cap = 12 * height * width + 16
    heap_keys = np.empty(cap, dtype=np.float64)
    heap_items = np.empty(cap, dtype=np.int64)
    size = 0
    for i in range(height):
        for j in range(width):
            if seed[i, j] != 0 and occ[i, j] == 0:
                dist[i, j] = 0.0
                size = _heap_push(heap_keys, heap_items, size, 0.0, i * width + j)
    diag_h = h * math.sqrt(2.0)

    while size > 0:
        _, item, size = _heap_pop(heap_keys, heap_items, size)
        ci = item // width
        cj = item % width
        if frozen[ci, cj] != 0:
            continue
        frozen[ci, cj] = 1
        for di in range(-1, 2):
            for dj in range(-1, 2):
                if di == 0 and dj == 0:
                    continue
                ni = ci + di
                nj = cj + dj
                if ni < 0 or ni >= height or nj < 0 or nj >= width:
                    continue
                if occ[ni, nj] != 0 or frozen[ni, nj] != 0:
                    continue
                # axial one-sided minima over frozen neighbors
                a = inf
                if ni > 0 and frozen[ni - 1, nj] != 0:
                    a = dist[ni - 1, nj]
                if ni < height - 1 and frozen[ni + 1, nj] != 0 and dist[ni + 1, nj] < a:
                    a = dist[ni + 1, nj]
                b = inf
                if nj > 0 and frozen[ni, nj - 1] != 0:
                    b = dist[ni, nj - 1]
                if nj < width - 1 and frozen[ni, nj + 1] != 0 and dist[ni, nj + 1] < b:
                    b = dist[ni, nj + 1]
                cand = inf
                if a < inf and b < inf:
                    diff = a - b if a > b else b - a
                    if diff >= h:
                        cand = (a if a < b else b) + h
                    else:
                        cand = 0.5 * (a + b + math.sqrt(2.0 * h * h - diff * diff))
                elif a < inf:
                    cand = a + h
                elif b < inf:
                    cand = b + h
                d = inf
                if ni > 0 and nj > 0 and frozen[ni - 1, nj - 1] != 0:
                    d = dist[ni - 1, nj - 1]
                if ni > 0 and nj < width - 1 and frozen[ni - 1, nj + 1] != 0 and dist[ni - 1, nj + 1] < d:
                    d = dist[ni - 1, nj + 1]
                if ni < height - 1 and nj > 0 and frozen[ni + 1, nj - 1] != 0 and dist[ni + 1, nj - 1] < d:
                    d = dist[ni + 1, nj - 1]
                if ni < height - 1 and nj < width - 1 and frozen[ni + 1, nj + 1] != 0 and dist[ni + 1, nj + 1] < d:
                    d = dist[ni + 1, nj + 1]
                if d < inf and d + diag_h < cand:
                    cand = d + diag_h
                if cand < dist[ni, nj]:
                    dist[ni, nj] = cand
                    size = _heap_push(heap_keys, heap_items, size, cand, ni * width + nj)
    return dist


def fmm_distance(
    occ: np.ndarray,
    seeds: np.ndarray,
    resolution: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> CostMap:
    """Geodesic distance field (meters) from seed cells over free space.

    occ is a binary occupancy grid; seeds a boolean mask (or an (N, 2) array
    of row/col indices). Occupied seed cells are ignored; raises
    UnreachableGoalError if no traversable seed remains. Occupied and
    unreached cells come back as np.inf.
    """
    occ = np.asarray(occ)
    if occ.ndim != 2:
        raise ValueError("occupancy grid must be 2D")
    seed_mask = np.zeros(occ.shape, dtype=np.uint8)
    seeds = np.asarray(seeds)
    if seeds.shape == occ.shape:
        seed_mask[seeds.astype(bool)] = 1
    else:
        if seeds.size == 0:
            raise ValueError("seed set is empty")
        if seeds.ndim != 2 or seeds.shape[1] != 2:
            raise ValueError("seeds must be a mask or an (N, 2) index array")
        rows = seeds[:, 0].astype(int)
        cols = seeds[:, 1].astype(int)
        if rows.min() < 0 or rows.max() >= occ.shape[0] or cols.min() < 0 or cols.max() >= occ.shape[1]:
            raise ValueError("seed cell out of bounds")
        seed_mask[rows, cols] = 1
    if not seed_mask.any():
        raise ValueError("seed set is empty")
    occ_u8 = np.ascontiguousarray(occ != 0, dtype=np.uint8)
    if not (seed_mask.astype(bool) & (occ_u8 == 0)).any():
        raise UnreachableGoalError("unreachable goal set: all seeds occupied")
    nav = _fmm_solve(occ_u8, seed_mask, float(resolution))
    return CostMap(nav=nav, occ=occ_u8.astype(np.float64), resolution=float(resolution), origin=origin)


def inflate_occupancy(occ: np.ndarray, radius_cells: int) -> np.ndarray:
    """Chebyshev dilation of a binary occupancy grid by radius_cells."""
    if radius_cells <= 0:
        return occ.astype(bool)
    return ndimage.binary_dilation(
        occ.astype(bool), structure=np.ones((3, 3), dtype=bool), iterations=radius_cells
    )


def clear_region_around(occ: np.ndarray, mask: np.ndarray, radius_cells: int) -> np.ndarray:
    """Occupancy with cells within radius of the mask forced traversable.

    Used to let a distance front escape goal cells that sit inside objects
    (and their inflation band).
    """
    region = ndimage.binary_dilation(
        mask.astype(bool), structure=np.ones((3, 3), dtype=bool), iterations=max(radius_cells, 1)
    )
    out = occ.astype(bool).copy()
    out[region] = False
    return out


def normalize_nav(nav: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale finite costs into [0, 1] by the max finite cost.

    Non-finite cells (occupied or unreachable) become 1.0. Returns the
    normalized field and the scale used (0.0 when no positive finite cost
    exists).
    """
    finite = np.isfinite(nav)
    scale = float(nav[finite].max()) if finite.any() else 0.0
    if scale <= 0.0:
        out = np.where(finite, 0.0, 1.0)
        return out, 0.0
    out = np.where(finite, nav / scale, 1.0)
    return out, scale


def fuse_costmap(
    occ_pred: np.ndarray,
    nav_pred: np.ndarray,
    theta_occ: float,
    resolution: float = 1.0,
    origin: tuple[float, float] = (0.0, 0.0),
    obstacle_cost: float = 1.0,
) -> CostMap:
    """Overlay a binary occupancy mask on a normalized navigation cost.

    Cells with predicted occupancy >= theta_occ take the obstacle cost;
    all others keep nav_pred.
    """
    occ_pred = np.asarray(occ_pred, dtype=np.float64)
    nav_pred = np.asarray(nav_pred, dtype=np.float64)
    if occ_pred.shape != nav_pred.shape:
        raise ValueError(f"occ {occ_pred.shape} / nav {nav_pred.shape} shape mismatch")
    fused = np.where(occ_pred >= theta_occ, obstacle_cost, nav_pred)
    return CostMap(
        nav=nav_pred,
        occ=occ_pred,
        resolution=resolution,
        origin=origin,
        normalized=True,
        obstacle_cost=obstacle_cost,
        fused=fused,
    )


# ---------------------------------------------------------------------------
# gradients


@dataclass
class GradientField:
    """Per-cell cost gradient (d/dx, d/dy) with a validity mask.

    Central differences in the interior, one-sided where a stencil neighbor
    is a border or occupied; invalid where no usable stencil remains on
    either axis or the cell itself is occupied/non-finite.
    """

    gx: np.ndarray
    gy: np.ndarray
    valid: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


def gradient_field(values: np.ndarray, occ: np.ndarray | None = None) -> GradientField:
    """Finite-difference gradient of a cost grid (x = columns, y = rows)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or min(values.shape) < 3:
        raise ValueError("gradient fields need a grid of at least 3x3")
    if occ is None:
        occ = np.zeros_like(values, dtype=bool)
    occ = np.asarray(occ) != 0
    good = np.isfinite(values) & ~occ

    def axis_grad(axis: int):
        prev_ok = np.zeros_like(good)
        next_ok = np.zeros_like(good)
        prev_val = np.zeros_like(values)
        next_val = np.zeros_like(values)

        def spans(dst_lo, dst_hi, src_lo, src_hi):
            dst = [slice(None), slice(None)]
            srcs = [slice(None), slice(None)]
            dst[axis] = slice(dst_lo, dst_hi)
            srcs[axis] = slice(src_lo, src_hi)
            return tuple(dst), tuple(srcs)

        d, s = spans(1, None, None, -1)
        prev_ok[d] = good[s]
        prev_val[d] = values[s]
        d, s = spans(None, -1, 1, None)
        next_ok[d] = good[s]
        next_val[d] = values[s]

        central = next_ok & prev_ok
        fwd = next_ok & ~prev_ok
        bwd = prev_ok & ~next_ok
        g = np.zeros_like(values)
        g[central] = (next_val[central] - prev_val[central]) * 0.5
        g[fwd] = next_val[fwd] - values[fwd]
        g[bwd] = values[bwd] - prev_val[bwd]
        usable = central | fwd | bwd
        return g, usable

    gy, ok_y = axis_grad(0)
    gx, ok_x = axis_grad(1)
    valid = good & ok_x & ok_y
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    return GradientField(gx=gx, gy=gy, valid=valid)


# ---------------------------------------------------------------------------
# losses


_EPS_CLAMP = 1e-7
_GRAD_EPS = 1e-8


def occupancy_loss(gt: np.ndarray, pred: np.ndarray) -> float:
    """Mean binary cross entropy between occupancy grids."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"gt {gt.shape} / pred {pred.shape} shape mismatch")
    p = np.clip(pred, _EPS_CLAMP, 1.0 - _EPS_CLAMP)
    bce = -(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p))
    return float(bce.mean())


def costmap_loss(gt_nav: np.ndarray, pred_nav: np.ndarray, gt_occ: np.ndarray) -> float:
    """L1 regression of the navigation cost over free cells, averaged over
    the whole grid (occupied cells contribute zero, not excluded from the
    denominator)."""
    gt_nav = np.asarray(gt_nav, dtype=np.float64)
    pred_nav = np.asarray(pred_nav, dtype=np.float64)
    gt_occ = np.asarray(gt_occ, dtype=np.float64)
    if not (gt_nav.shape == pred_nav.shape == gt_occ.shape):
        raise ValueError("shape mismatch between nav grids and occupancy")
    return float((np.abs(gt_nav - pred_nav) * (1.0 - gt_occ)).mean())


def gradient_direction_loss(
    gt_nav: np.ndarray, pred_nav: np.ndarray, gt_occ: np.ndarray
) -> float:
    """Cosine misalignment of cost gradients over free cells, grid-averaged.

    Cells where either gradient magnitude falls below 1e-8 (goal cells,
    plateaus) contribute zero; per-cell terms live in [0, 2].
    """
    gt_nav = np.asarray(gt_nav, dtype=np.float64)
    pred_nav = np.asarray(pred_nav, dtype=np.float64)
    gt_occ = np.asarray(gt_occ, dtype=np.float64)
    if not (gt_nav.shape == pred_nav.shape == gt_occ.shape):
        raise ValueError("shape mismatch between nav grids and occupancy")
    g = gradient_field(gt_nav, gt_occ)
    p = gradient_field(pred_nav, gt_occ)
    mg = g.magnitude
    mp = p.magnitude
    use = g.valid & p.valid & (mg >= _GRAD_EPS) & (mp >= _GRAD_EPS)
    cos = np.ones_like(gt_nav)
    cos[use] = np.clip(
        (g.gx[use] * p.gx[use] + g.gy[use] * p.gy[use]) / (mg[use] * mp[use]), -1.0, 1.0
    )
    terms = (1.0 - cos) * (1.0 - gt_occ) * use
    return float(terms.sum() / gt_nav.size)


def combine_losses(l_occ: float, l_cost: float, l_dir: float, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return weights.occupancy * l_occ + weights.cost * l_cost + weights.direction * l_dir


def total_loss(
    gt_occ: np.ndarray,
    gt_nav: np.ndarray,
    pred_occ: np.ndarray,
    pred_nav: np.ndarray,
    weights: LossWeights | None = None,
) -> float:
    """Weighted combination of occupancy, cost, and gradient-direction losses."""
    return combine_losses(
        occupancy_loss(gt_occ, pred_occ),
        costmap_loss(gt_nav, pred_nav, gt_occ),
        gradient_direction_loss(gt_nav, pred_nav, gt_occ),
        weights,
    )


# ---------------------------------------------------------------------------
# prediction-quality metrics

# Candidate moves in fixed tie-break order: stay first, then the 4 axial
# moves, then diagonals. (di, dj) with +i = north (+y), +j = east (+x).
_ACTIONS_9 = (
    (0, 0),  # stay
    (0, 1),  # E
    (1, 0),  # N
    (0, -1),  # W
    (-1, 0),  # S
    (1, 1),  # NE
    (1, -1),  # NW
    (-1, -1),  # SW
    (-1, 1),  # SE
)


def _best_actions(field: np.ndarray, n_actions: int) -> np.ndarray:
    h, w = field.shape
    stacked = np.full((n_actions, h, w), np.inf)
    padded = np.pad(field, 1, constant_values=np.inf)
    for k, (di, dj) in enumerate(_ACTIONS_9[:n_actions]):
        stacked[k] = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
    return np.argmin(stacked, axis=0)  # first minimum wins ties


def action_prediction_accuracy(gt: CostMap, pred: CostMap, neighborhood: int = 9) -> float:
    """Percent of navigable cells whose locally cost-minimizing move agrees.

    neighborhood 5 uses stay + 4 axial moves; 9 adds the diagonals.
    Navigable cells are the ground truth's free cells.
    """
    if neighborhood not in (5, 9):
        raise ValueError("neighborhood must be 5 or 9")
    if gt.shape != pred.shape:
        raise ValueError("cost map shape mismatch")
    navigable = np.asarray(gt.occ) < 0.5
    count = int(navigable.sum())
    if count == 0:
        raise ValueError("no navigable cells")
    gt_best = _best_actions(np.asarray(gt.control_field(), dtype=np.float64), neighborhood)
    pred_best = _best_actions(np.asarray(pred.control_field(), dtype=np.float64), neighborhood)
    agree = int((gt_best[navigable] == pred_best[navigable]).sum())
    return 100.0 * agree / count


def occupancy_metrics(gt: np.ndarray, pred: np.ndarray) -> dict:
    """Mean pixel accuracy, macro F1 and IOU over {occupied, free}.

    A class absent from both grids scores 1.0 by convention. All values are
    percentages.
    """
    gt = np.asarray(gt) != 0
    pred = np.asarray(pred) != 0
    if gt.shape != pred.shape:
        raise ValueError("shape mismatch")
    per_f1 = {}
    per_iou = {}
    per_acc = {}
    for label, mask_gt, mask_pred in (
        ("occupied", gt, pred),
        ("free", ~gt, ~pred),
    ):
        tp = int((mask_gt & mask_pred).sum())
        fp = int((~mask_gt & mask_pred).sum())
        fn = int((mask_gt & ~mask_pred).sum())
        if tp + fp + fn == 0:
            f1 = iou = acc = 1.0
        else:
            f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
            iou = tp / (tp + fp + fn)
            acc = tp / (tp + fn) if (tp + fn) else (1.0 if fp == 0 else 0.0)
        per_f1[label] = 100.0 * f1
        per_iou[label] = 100.0 * iou
        per_acc[label] = 100.0 * acc
    return {
        "mpa": float(np.mean(list(per_acc.values()))),
        "mf1": float(np.mean(list(per_f1.values()))),
        "miou": float(np.mean(list(per_iou.values()))),
        "f1": per_f1,
        "iou": per_iou,
        "accuracy": per_acc,
    }
