"""Demonstration corpora: synthetic generation, on-disk format and training pairs.

On disk a DemoSet is a directory holding ``manifest.json`` and one
``episode_XXXX.bin`` per trajectory. Each episode file is little-endian: three
uint32 (frame count, N, A) followed, frame by frame, by ``N * 3`` float32
coordinates and ``A`` float32 action values.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fvp.env import SceneConfig, env_observe, initial_state, rollout_expert

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
_HEADER = struct.Struct("<3I")


class DemoSetError(ValueError):
    """Base class for corpus loading failures."""


class ManifestError(DemoSetError):
    pass


class MissingEpisodeError(DemoSetError):
    pass


class ContentMismatchError(DemoSetError):
    pass


class ShapeMismatchError(DemoSetError):
    pass


class TruncatedDataError(DemoSetError):
    pass


@dataclass
class Trajectory:
    observations: np.ndarray  # (L, N, 3) float32
    actions: np.ndarray  # (L, A) float32

    def __post_init__(self):
        if self.observations.ndim != 3 or self.observations.shape[2] != 3:
            raise ValueError(f"observations must be (L, N, 3), got {self.observations.shape}")
        if self.actions.ndim != 2 or self.actions.shape[0] != self.observations.shape[0]:
            raise ValueError("actions must be (L, A) with one row per observation")

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class DemoSet:
    trajectories: list[Trajectory]
    manifest: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.trajectories[0].observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class TrainingPair:
    history: np.ndarray  # (k, N, 3), frames t-k .. t-1
    history_actions: np.ndarray  # (k, A)
    target: np.ndarray  # (N, 3), frame t
    trajectory: int
    frame: int


def _episode_name(i: int) -> str:
    return f"episode_{i:04d}.bin"


def build_manifest(trajectories: list[Trajectory], generator: dict | None, seed: int | None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n_points": int(trajectories[0].observations.shape[1]),
        "action_dim": int(trajectories[0].actions.shape[1]),
        "n_trajectories": len(trajectories),
        "total_frames": int(sum(len(t) for t in trajectories)),
        "episodes": [{"file": _episode_name(i), "frames": len(t)} for i, t in enumerate(trajectories)],
        "generator": generator,
        "seed": seed,
    }


def _scripted_episode(scene: SceneConfig, seed_seq: np.random.SeedSequence):
    """Rejection-sample a start state until the expert finishes within the frame bounds."""
    rng = np.random.default_rng(seed_seq)
    for _ in range(1000):
        start = initial_state(scene, rng)
        frames = rollout_expert(start, scene, scene.max_frames)
        if frames[-1][0].done and scene.min_frames <= len(frames) <= scene.max_frames:
            return start, frames
    raise ValueError("scene parameters never yield an episode within [min_frames, max_frames]")


def synthetic_initial_states(scene: SceneConfig, n_trajectories: int, rng_seed: int) -> list:
    """Start states of the episodes ``generate_synthetic`` would produce, for open-loop replay."""
    streams = np.random.SeedSequence(rng_seed).spawn(n_trajectories)
    return [_scripted_episode(scene, ss)[0] for ss in streams]


def generate_synthetic(scene: SceneConfig, n_trajectories: int, rng_seed: int) -> DemoSet:
    """Scripted pick-and-place episodes with randomized object and goal placement."""
    if n_trajectories < 1:
        raise ValueError(f"n_trajectories must be >= 1, got {n_trajectories}")
    trajectories = []
    for ss in np.random.SeedSequence(rng_seed).spawn(n_trajectories):
        _, frames = _scripted_episode(scene, ss)
        obs = np.stack([env_observe(s, scene) for s, _ in frames])
        act = np.stack([a for _, a in frames]).astype(np.float32)
        trajectories.append(Trajectory(obs, act))
    manifest = build_manifest(trajectories, scene.model_dump(mode="json"), rng_seed)
    return DemoSet(trajectories, manifest)


def save_demoset(demos: DemoSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(demos.manifest) if demos.manifest else {}
    manifest.update(build_manifest(demos.trajectories, manifest.get("generator"), manifest.get("seed")))
    for i, traj in enumerate(demos.trajectories):
        obs = traj.observations.astype("<f4", copy=False)
        act = traj.actions.astype("<f4", copy=False)
        n_frames, n, _ = obs.shape
        body = np.concatenate([obs.reshape(n_frames, -1), act], axis=1)
        with open(path / _episode_name(i), "wb") as fh:
            fh.write(_HEADER.pack(n_frames, n, act.shape[1]))
            fh.write(np.ascontiguousarray(body, dtype="<f4").tobytes())
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (path / MANIFEST).write_text(text + "\n", encoding="utf-8")
    demos.manifest = manifest


def _read_episode(file: Path, n_points: int, action_dim: int) -> Trajectory:
    raw = file.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedDataError(f"{file.name}: file shorter than its header")
    n_frames, n, a = _HEADER.unpack_from(raw)
    if n != n_points or a != action_dim:
        raise ShapeMismatchError(
            f"{file.name}: header says N={n}, A={a} but manifest says N={n_points}, A={action_dim}"
        )
    expected = _HEADER.size + 4 * n_frames * (n * 3 + a)
    if len(raw) < expected:
        raise TruncatedDataError(f"{file.name}: truncated, {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise ContentMismatchError(f"{file.name}: {len(raw) - expected} trailing bytes")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_frames, n * 3 + a)
    obs = body[:, : n * 3].reshape(n_frames, n, 3).astype(np.float32)
    act = body[:, n * 3 :].astype(np.float32)
    return Trajectory(obs, act)


def load_demoset(path) -> DemoSet:
    path = Path(path)
    mfile = path / MANIFEST
    if not mfile.is_file():
        raise ManifestError(f"{mfile}: manifest not found")
    try:
        manifest = json.loads(mfile.read_text(encoding="utf-8"))
        version = manifest["schema_version"]
        n_points = int(manifest["n_points"])
        action_dim = int(manifest["action_dim"])
        episodes = manifest["episodes"]
        n_traj = int(manifest["n_trajectories"])
        total = int(manifest["total_frames"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{mfile}: malformed manifest ({exc})") from exc
    if version != SCHEMA_VERSION:
        raise ManifestError(f"{mfile}: unsupported schema version {version}")

    trajectories = []
    for ep in episodes:
        file = path / ep["file"]
        if not file.is_file():
            raise MissingEpisodeError(f"missing episode file {file.name}")
        traj = _read_episode(file, n_points, action_dim)
        if len(traj) != ep["frames"]:
            raise ContentMismatchError(
                f"manifest/content mismatch: {file.name} holds {len(traj)} frames, manifest says {ep['frames']}"
            )
        trajectories.append(traj)
    actual_total = sum(len(t) for t in trajectories)
    if n_traj != len(trajectories) or total != actual_total:
        raise ContentMismatchError(
            f"manifest/content mismatch in {mfile.name}: counts say {n_traj} trajectories / {total} frames, "
            f"found {len(trajectories)} / {actual_total}"
        )
    if not trajectories:
        raise ContentMismatchError(f"manifest/content mismatch in {mfile.name}: no episodes")
    for traj in trajectories:
        if not np.isfinite(traj.observations).all():
            raise ContentMismatchError(f"non-finite coordinates in {path}")
    return DemoSet(trajectories, manifest)


def valid_targets(demos: DemoSet, k_history: int) -> list[tuple[int, int]]:
    if k_history < 1:
        raise ValueError(f"k_history must be >= 1, got {k_history}")
    shortest = min(len(t) for t in demos.trajectories)
    if k_history + 1 > shortest:
        raise ValueError(f"k_history={k_history} needs trajectories of length >= {k_history + 1}, shortest is {shortest}")
    return [(i, t) for i, traj in enumerate(demos.trajectories) for t in range(k_history, len(traj))]


def make_pair(demos: DemoSet, traj_index: int, frame: int, k_history: int) -> TrainingPair:
    traj = demos.trajectories[traj_index]
    return TrainingPair(
        history=traj.observations[frame - k_history : frame],
        history_actions=traj.actions[frame - k_history : frame],
        target=traj.observations[frame],
        trajectory=traj_index,
        frame=frame,
    )


def sample_pairs(demos: DemoSet, k_history: int, batch_size: int, rng_seed: int) -> list[TrainingPair]:
    """Draw ``batch_size`` pairs uniformly over every (trajectory, frame) with a full history."""
    targets = valid_targets(demos, k_history)
    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(0, len(targets), size=batch_size)
    return [make_pair(demos, *targets[j], k_history) for j in picks]


def write_ply(path, points) -> None:
    """ASCII PLY with vertex coordinates only."""
    pts = np.asarray(points, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    start = lines.index("end_header") + 1
    return np.array([[float(v) for v in ln.split()] for ln in lines[start:] if ln.strip()])
