"""Deterministic kinematic pick-and-place scene shared by the data generator and the probe.

Coordinates are meters in a table frame: the table is ``z = 0`` and the
workspace is ``[-1, 1] x [-1, 1] x [0, 1]``. Three bodies are observed: the
end-effector sphere, the object cube (its bottom face rests on the table and
is never sampled) and the flat goal pad. ``EnvState.goal`` is the resting
position of the object center on the pad.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from fvp.pointops import farthest_point_sample


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_points: int = 256
    step_limit: float = 0.06
    grasp_radius: float = 0.2
    success_scale: float = 1.5
    horizon: int = 60
    effector_radius: float = 0.08
    object_half: float = 0.08
    goal_half: float = 0.15
    home: tuple[float, float, float] = (0.0, 0.0, 0.7)
    placement_range: float = 0.5
    min_separation: float = 0.5
    max_separation: float = 1.0
    min_frames: int = 20
    max_frames: int = 40
    surface_seed: int = 0
    oversample: int = 4

    @model_validator(mode="after")
    def _check(self):
        if self.n_points < 3:
            raise ValueError("n_points must be >= 3 (one per body)")
        positive = ("step_limit", "grasp_radius", "success_scale", "effector_radius",
                    "object_half", "goal_half", "placement_range")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.min_separation <= self.max_separation:
            raise ValueError("need 0 < min_separation <= max_separation")
        if not 2 <= self.min_frames <= self.max_frames:
            raise ValueError("need 2 <= min_frames <= max_frames")
        if self.horizon < 1 or self.oversample < 1:
            raise ValueError("horizon and oversample must be >= 1")
        if self.placement_range + self.goal_half > 1.0:
            raise ValueError("placement_range + goal_half must stay inside the workspace")
        return self

    @property
    def success_tolerance(self) -> float:
        return self.success_scale * self.grasp_radius


WORKSPACE_LO = np.array([-1.0, -1.0, 0.0])
WORKSPACE_HI = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class EnvState:
    effector: np.ndarray
    object: np.ndarray
    goal: np.ndarray
    grasped: bool = False
    step_count: int = 0
    done: bool = False


def is_success(state: EnvState, tolerance: float) -> bool:
    return bool(np.linalg.norm(state.object - state.goal) <= tolerance)


def env_step(state: EnvState, action, scene: SceneConfig) -> EnvState:
    """Move the effector by the clipped action, then apply the grasp and release rules."""
    a = np.clip(np.asarray(action, dtype=np.float64), -scene.step_limit, scene.step_limit)
    eff = np.clip(state.effector + a, WORKSPACE_LO, WORKSPACE_HI)
    moved = eff - state.effector
    obj = state.object
    grasped = state.grasped
    if grasped:
        obj = obj + moved
    elif not state.done and np.linalg.norm(eff - obj) < scene.grasp_radius:
        grasped = True
    nxt = EnvState(eff, obj, state.goal, grasped, state.step_count + 1, state.done)
    if grasped and is_success(nxt, scene.success_tolerance):
        nxt = replace(nxt, grasped=False, done=True)
    return nxt


def expert_action(state: EnvState, scene: SceneConfig) -> np.ndarray:
    """Scripted straight-line expert: reach the object, then carry it to the goal."""
    if state.done:
        return np.zeros(3)
    if state.grasped:
        delta = state.goal - state.object
    else:
        delta = state.object - state.effector
    dist = float(np.linalg.norm(delta))
    if dist <= scene.step_limit:
        return delta.copy()
    return delta * (scene.step_limit / dist)


def initial_state(scene: SceneConfig, rng: np.random.Generator) -> EnvState:
    """Random object and goal placement with the configured separation."""
    r = scene.placement_range
    obj_xy = rng.uniform(-r, r, size=2)
    while True:
        goal_xy = rng.uniform(-r, r, size=2)
        sep = float(np.linalg.norm(goal_xy - obj_xy))
        if scene.min_separation <= sep <= scene.max_separation:
            break
    h = scene.object_half
    return EnvState(
        effector=np.array(scene.home, dtype=np.float64),
        object=np.array([obj_xy[0], obj_xy[1], h]),
        goal=np.array([goal_xy[0], goal_xy[1], h]),
    )


def body_point_counts(scene: SceneConfig, n_points: int) -> tuple[int, int, int]:
    """Points per body (effector, object, goal), proportional to visible surface area."""
    areas = np.array([
        4.0 * np.pi * scene.effector_radius**2,
        5.0 * (2.0 * scene.object_half) ** 2,
        (2.0 * scene.goal_half) ** 2,
    ])
    counts = np.maximum(1, np.floor(n_points * areas / areas.sum()).astype(int))
    counts[2] = n_points - counts[0] - counts[1]
    if counts[2] < 1:
        raise ValueError(f"n_points={n_points} too small to cover every body")
    return int(counts[0]), int(counts[1]), int(counts[2])


def _sample_sphere(rng, n, radius):
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_open_cube(rng, n, half):
    # five faces, bottom excluded; all faces have equal area
    face = rng.integers(0, 5, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    for f, (axis, sign) in enumerate([(2, 1), (0, 1), (0, -1), (1, 1), (1, -1)]):
        m = face == f
        others = [i for i in range(3) if i != axis]
        pts[m, axis] = sign * half
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _sample_pad(rng, n, half, below):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-half, half, size=(n, 2))
    pts[:, 2] = -below
    return pts


@lru_cache(maxsize=32)
def _templates(scene: SceneConfig, n_points: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    counts = body_point_counts(scene, n_points)
    raw = [
        _sample_sphere(rng, counts[0] * scene.oversample, scene.effector_radius),
        _sample_open_cube(rng, counts[1] * scene.oversample, scene.object_half),
        # pad points are expressed relative to the object rest position
        _sample_pad(rng, counts[2] * scene.oversample, scene.goal_half, scene.object_half),
    ]
    out = tuple(farthest_point_sample(r, c, 0) for r, c in zip(raw, counts))
    for t in out:
        t.setflags(write=False)
    return out


def env_observe(state: EnvState, scene: SceneConfig, n_points: int | None = None,
                rng_seed: int | None = None) -> np.ndarray:
    """Surface-sampled point cloud of the scene, ``(n_points, 3)`` float32.

    Each body's points come from a fixed surface sample (seeded by
    ``rng_seed``, default ``scene.surface_seed``) reduced by farthest-point
    sampling in the body frame, so row ``i`` tracks the same surface point
    across frames.
    """
    n = scene.n_points if n_points is None else n_points
    seed = scene.surface_seed if rng_seed is None else rng_seed
    eff_t, obj_t, goal_t = _templates(scene, n, seed)
    cloud = np.concatenate([eff_t + state.effector, obj_t + state.object, goal_t + state.goal])
    return cloud.astype(np.float32)


def rollout_expert(state: EnvState, scene: SceneConfig, max_steps: int) -> list[tuple[EnvState, np.ndarray]]:
    """Run the expert until success or ``max_steps``; returns (state, action) per frame."""
    frames = []
    for _ in range(max_steps):
        if state.done:
            break
        a = expert_action(state, scene)
        frames.append((state, a))
        state = env_step(state, a, scene)
    frames.append((state, np.zeros(3)))
    return frames
