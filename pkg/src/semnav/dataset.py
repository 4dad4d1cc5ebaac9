"""Expert-trajectory dataset generation and bit-exact tensor serialization.

Tensors are stored in the SMT format: magic ``SMT1``, a u8 rank, rank
little-endian u32 dims, then the row-major little-endian float32 payload.
Every fourth step of a ground-truth-driven episode becomes one sample
directory holding the local/global map stacks, the ground-truth cost and
occupancy grids, the egocentric ray summary, and a JSON metadata file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mapping import LOCAL_SIZE, NUM_CHANNELS
from .predictor import GroundTruthProvider, build_request, orientation_bin
from .world import EpisodeConfig, WorldGrid, class_id

SMT_MAGIC = b"SMT1"
_MAX_ELEMENTS = 1 << 32

LOCAL_SHAPE = (NUM_CHANNELS, LOCAL_SIZE, LOCAL_SIZE)
GLOBAL_SHAPE = (NUM_CHANNELS, 420, 420)
GRID_SHAPE = (LOCAL_SIZE, LOCAL_SIZE)
SAMPLE_STRIDE = 4


class SmtFormatError(ValueError):
    """Bad magic, truncated payload, or out-of-range dimensions."""


def write_tensor(path, tensor: np.ndarray) -> None:
    """Serialize a float32 tensor to the SMT on-disk format."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim > 255:
        raise SmtFormatError(f"rank {arr.ndim} exceeds the u8 rank field")
    if arr.size >= _MAX_ELEMENTS or any(d >= _MAX_ELEMENTS for d in arr.shape):
        raise SmtFormatError("dimension overflow")
    with open(path, "wb") as fh:
        fh.write(SMT_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an SMT tensor, validating magic, rank, dims, and payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SMT_MAGIC:
        raise SmtFormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 5:
        raise SmtFormatError("truncated header")
    ndim = blob[4]
    header_end = 5 + 4 * ndim
    if len(blob) < header_end:
        raise SmtFormatError("truncated dimension table")
    dims = struct.unpack(f"<{ndim}I", blob[5:header_end])
    count = 1
    for d in dims:
        count *= d
        if count >= _MAX_ELEMENTS:
            raise SmtFormatError("dimension overflow")
    if len(blob) != header_end + 4 * count:
        raise SmtFormatError(
            f"payload is {len(blob) - header_end} bytes, expected {4 * count}"
        )
    return np.frombuffer(blob[header_end:], dtype="<f4").reshape(dims).copy()


@dataclass
class DatasetSample:
    """One training sample: map stacks, ground-truth grids, ray summary."""

    local: np.ndarray  # (18, 140, 140)
    global_stack: np.ndarray  # (18, 420, 420)
    nav: np.ndarray  # (140, 140) normalized ground-truth cost
    occ: np.ndarray  # (140, 140) ground-truth occupancy
    ray_depth: np.ndarray
    ray_class: np.ndarray
    pose: tuple[float, float, float]  # x, y, theta
    orientation_bin: int
    target: str
    episode_id: int
    step_id: int

    def __post_init__(self):
        if tuple(self.local.shape) != LOCAL_SHAPE:
            raise ValueError(f"local stack must be {LOCAL_SHAPE}, got {self.local.shape}")
        if tuple(self.global_stack.shape) != GLOBAL_SHAPE:
            raise ValueError(
                f"global stack must be {GLOBAL_SHAPE}, got {self.global_stack.shape}"
            )
        if tuple(self.nav.shape) != GRID_SHAPE or tuple(self.occ.shape) != GRID_SHAPE:
            raise ValueError("cost grids must be (140, 140)")
        if self.step_id % SAMPLE_STRIDE:
            raise ValueError(f"step id {self.step_id} is not a multiple of {SAMPLE_STRIDE}")


def save_sample(directory, sample: DatasetSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "local.smt", sample.local)
    write_tensor(directory / "global.smt", sample.global_stack)
    write_tensor(directory / "nav.smt", sample.nav)
    write_tensor(directory / "occ.smt", sample.occ)
    write_tensor(directory / "ray_depth.smt", sample.ray_depth)
    write_tensor(directory / "ray_class.smt", np.asarray(sample.ray_class, dtype=np.float32))
    meta = {
        "pose": list(sample.pose),
        "orientation_bin": sample.orientation_bin,
        "target": sample.target,
        "target_index": class_id(sample.target) - 2,
        "episode_id": sample.episode_id,
        "step_id": sample.step_id,
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh)


def load_sample(directory) -> DatasetSample:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    return DatasetSample(
        local=read_tensor(directory / "local.smt"),
        global_stack=read_tensor(directory / "global.smt"),
        nav=read_tensor(directory / "nav.smt"),
        occ=read_tensor(directory / "occ.smt"),
        ray_depth=read_tensor(directory / "ray_depth.smt"),
        ray_class=read_tensor(directory / "ray_class.smt").astype(np.int64),
        pose=tuple(meta["pose"]),
        orientation_bin=meta["orientation_bin"],
        target=meta["target"],
        episode_id=meta["episode_id"],
        step_id=meta["step_id"],
    )


def collect_episode(
    world: WorldGrid,
    episode: EpisodeConfig,
    mpc_cfg=None,
    out_dir=None,
    seed: int = 0,
    episode_id: int = 0,
    sensor=None,
) -> int:
    """Drive the oracle agent and record a sample every fourth step.

    The agent runs on the ground-truth cost map; samples carry the map
    state at steps 0, 4, 8, ... before the done check of that step has
    acted. Returns the number of samples written (the episode's samples
    stay on disk even when it times out).
    """
    from .harness import run_episode  # runner lives above this module

    out_dir = Path(out_dir)
    provider = GroundTruthProvider(world, episode)
    written = 0

    def on_step(ctx) -> None:
        nonlocal written
        if ctx.t % SAMPLE_STRIDE:
            return
        request = build_request(
            ctx.map_stack, ctx.local, ctx.state, ctx.obs, episode.target,
            episode_id=episode_id, step_id=ctx.t,
        )
        labels = provider.predict(request)
        sample = DatasetSample(
            local=ctx.local.stack,
            global_stack=ctx.map_stack.grid,
            nav=labels.nav.astype(np.float32),
            occ=labels.occ.astype(np.float32),
            ray_depth=ctx.obs.hit_distance.astype(np.float32),
            ray_class=ctx.obs.hit_class.astype(np.int64),
            pose=(ctx.state.x, ctx.state.y, ctx.state.theta),
            orientation_bin=orientation_bin(ctx.state.theta),
            target=episode.target,
            episode_id=episode_id,
            step_id=ctx.t,
        )
        save_sample(out_dir / f"t{ctx.t:04d}", sample)
        written += 1

    run_episode(
        world, episode, agent="gt", seed=seed, mpc=mpc_cfg, sensor=sensor,
        provider=provider, on_step=on_step,
    )
    return written


@dataclass
class DatasetManifest:
    split: str
    samples: list[str]
    episodes: list[dict]
    counts: dict

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "split": self.split,
                    "samples": self.samples,
                    "episodes": self.episodes,
                    "counts": self.counts,
                },
                fh,
                indent=1,
            )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            split=payload["split"],
            samples=payload["samples"],
            episodes=payload["episodes"],
            counts=payload["counts"],
        )


def build_split(
    world_seeds,
    episodes_per_world: int,
    split: str,
    out_dir,
    worldgen=None,
    mpc_cfg=None,
    split_seed: int = 0,
    max_steps: int = 500,
) -> DatasetManifest:
    """Collect a named dataset split over a list of world seeds.

    Deterministic for (seeds, split_seed); rejects duplicate world seeds.
    Writes <out_dir>/<split>/manifest.json plus one directory per episode.
    """
    from .harness import sample_episode
    from .world import generate_world

    world_seeds = list(world_seeds)
    if len(set(world_seeds)) != len(world_seeds):
        raise ValueError("duplicate world seeds in split")
    out_root = Path(out_dir) / split
    out_root.mkdir(parents=True, exist_ok=True)

    samples: list[str] = []
    episodes: list[dict] = []
    episode_id = 0
    for w_seed in world_seeds:
        world = generate_world(w_seed, worldgen)
        for e_idx in range(episodes_per_world):
            rng = np.random.default_rng(
                [np.uint64(split_seed), np.uint64(w_seed), np.uint64(e_idx)]
            )
            episode = sample_episode(world, rng, max_steps=max_steps)
            ep_dir = out_root / f"w{w_seed:04d}_e{e_idx:02d}"
            count = collect_episode(
                world, episode, mpc_cfg=mpc_cfg, out_dir=ep_dir,
                seed=int(rng.integers(2**31)), episode_id=episode_id,
            )
            sample_dirs = sorted(p.name for p in ep_dir.iterdir() if p.is_dir())
            samples.extend(f"{ep_dir.name}/{name}" for name in sample_dirs)
            episodes.append(
                {
                    "world_seed": w_seed,
                    "episode_index": e_idx,
                    "episode_id": episode_id,
                    "target": episode.target,
                    "start": [episode.start.x, episode.start.y, episode.start.theta],
                    "sample_count": count,
                }
            )
            episode_id += 1
    manifest = DatasetManifest(
        split=split,
        samples=samples,
        episodes=episodes,
        counts={"episodes": len(episodes), "samples": len(samples)},
    )
    manifest.save(out_root / "manifest.json")
    return manifest
