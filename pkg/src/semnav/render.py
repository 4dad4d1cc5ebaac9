"""Static PNG renders of episodes over the ground-truth map."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from .world import FREE, NUM_SEMANTIC_CLASSES, OBSTACLE, WorldGrid, class_id

_BASE_COLORS = [
    (1.0, 1.0, 1.0),  # free
    (0.25, 0.25, 0.25),  # structure
]
_SEM_CMAP = plt.get_cmap("tab20")
_COLORS = _BASE_COLORS + [_SEM_CMAP(k % 20)[:3] for k in range(NUM_SEMANTIC_CLASSES)]
WORLD_CMAP = ListedColormap(_COLORS)


def render_world(world: WorldGrid, ax=None):
    ax = ax or plt.gca()
    extent = (0, world.width * world.resolution, 0, world.height * world.resolution)
    ax.imshow(
        world.cells,
        cmap=WORLD_CMAP,
        vmin=FREE,
        vmax=OBSTACLE + NUM_SEMANTIC_CLASSES,
        origin="lower",
        extent=extent,
        interpolation="nearest",
    )
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    return ax


def render_episode(world: WorldGrid, result, path) -> None:
    """Trajectory over the true map, with start, end, and target cells marked."""
    fig, ax = plt.subplots(figsize=(6, 6))
    render_world(world, ax)
    pos = np.asarray(result.positions)
    ax.plot(pos[:, 0], pos[:, 1], "-", color="tab:blue", linewidth=1.2, label="path")
    ax.plot(pos[0, 0], pos[0, 1], "o", color="tab:green", label="start")
    ax.plot(pos[-1, 0], pos[-1, 1], "x", color="tab:red", label="end")
    targets = np.argwhere(world.cells == class_id(result.target))
    if len(targets):
        ax.scatter(
            (targets[:, 1] + 0.5) * world.resolution,
            (targets[:, 0] + 0.5) * world.resolution,
            s=2.0,
            color="tab:orange",
            label=result.target,
        )
    status = "success" if result.success else "failure"
    ax.set_title(
        f"{result.agent} -> {result.target}: {status}, "
        f"{result.steps} steps, path {result.path_length:.1f} m"
    )
    ax.legend(loc="upper right", fontsize=7)
    fig.savefig(path, dpi=110)
    plt.close(fig)
