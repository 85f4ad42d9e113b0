"""Behavior-cloning probe of encoder quality, closed-loop evaluation and the ablation matrix."""
from __future__ import annotations

import copy
import csv
import json
import statistics
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import nn

from fvp.dataset import DemoSet
from fvp.encoders import EncoderConfig, PointEncoder, init_encoder
from fvp.env import EnvState, SceneConfig, env_observe, env_step, expert_action, initial_state
from fvp.trainer import Checkpoint, NumericalError, PretrainConfig, batch_seed, pretrain

ARMS = ("pretrained", "random_init", "current_frame", "frozen",
        "history_1", "history_2", "history_3", "history_4")


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    head_width: int = 64
    step_size: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    steps_per_epoch: int = 25
    n_episodes: int = 20
    eval_seed: int = 10_000
    seeds: tuple[int, ...] = (0, 1, 2)
    arms: tuple[str, ...] = ARMS


class Controller(Protocol):
    def reset(self) -> None: ...

    def act(self, observation: np.ndarray, state: EnvState) -> np.ndarray: ...


class ExpertController:
    def __init__(self, scene: SceneConfig):
        self.scene = scene

    def reset(self) -> None:
        pass

    def act(self, observation, state):
        return expert_action(state, self.scene)


class RandomController:
    """Uniform random actions inside the per-step limit."""

    def __init__(self, scene: SceneConfig, rng_seed: int):
        self.scene = scene
        self.rng_seed = rng_seed
        self.episode = 0
        self.rng = None

    def reset(self) -> None:
        self.rng = np.random.default_rng([self.rng_seed, self.episode])
        self.episode += 1

    def act(self, observation, state):
        lim = self.scene.step_limit
        return self.rng.uniform(-lim, lim, size=3)


class BCPolicy(nn.Module):
    """Encoder plus a feed-forward head on the pooled (order-independent) channels.

    The head predicts actions divided by the scene's step limit.
    """

    def __init__(self, encoder: PointEncoder, action_dim: int, head_width: int,
                 freeze_encoder: bool, action_scale: float):
        super().__init__()
        self.encoder = encoder
        self.freeze_encoder = freeze_encoder
        self.action_scale = action_scale
        self.head = nn.Sequential(
            nn.Linear(encoder.config.pooled_channels, head_width), nn.ReLU(),
            nn.Linear(head_width, head_width), nn.ReLU(),
            nn.Linear(head_width, action_dim),
        )
        self._frames: deque = deque()
        self._actions: deque = deque()

    @property
    def history_frames(self) -> int:
        return self.encoder.config.history_frames

    def forward(self, history: torch.Tensor, actions: torch.Tensor | None = None) -> torch.Tensor:
        if self.freeze_encoder:
            with torch.no_grad():
                feat = self.encoder.pooled(history, actions)
        else:
            feat = self.encoder.pooled(history, actions)
        return self.head(feat)

    def reset(self) -> None:
        self._frames.clear()
        self._actions.clear()

    @torch.no_grad()
    def act(self, observation: np.ndarray, state: EnvState | None = None) -> np.ndarray:
        k = self.history_frames
        if not self._frames:
            self._frames.extend([observation] * k)
            self._actions.extend([np.zeros(3, dtype=np.float32)] * k)
        else:
            self._frames.append(observation)
        while len(self._frames) > k:
            self._frames.popleft()
        hist = torch.as_tensor(np.stack(self._frames), dtype=torch.float32)[None]
        acts = None
        if self.encoder.config.use_actions:
            acts = torch.as_tensor(np.stack(self._actions), dtype=torch.float32)[None]
        out = self(hist, acts)[0].numpy().astype(np.float64) * self.action_scale
        self._actions.append(out.astype(np.float32))
        while len(self._actions) > k:
            self._actions.popleft()
        return out


def _bc_windows(demos: DemoSet, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index table of (trajectory, frame) plus per-frame history indices padded at episode start."""
    rows = [(i, t) for i, traj in enumerate(demos.trajectories) for t in range(len(traj))]
    idx = np.array(rows, dtype=np.int64)
    offsets = np.arange(-k + 1, 1)
    hist = np.clip(idx[:, 1:2] + offsets[None, :], 0, None)
    return idx[:, 0], idx[:, 1], hist


def bc_batch(demos: DemoSet, k: int, picks: np.ndarray, action_scale: float):
    traj_i, frame_i, hist_i = _bc_windows(demos, k)
    obs, prev_act, target = [], [], []
    for j in picks:
        traj = demos.trajectories[traj_i[j]]
        obs.append(traj.observations[hist_i[j]])
        # actions that preceded each history frame (zero before the episode start)
        prev = np.stack([traj.actions[h - 1] if h > 0 else np.zeros(traj.actions.shape[1], np.float32)
                         for h in hist_i[j]])
        prev_act.append(prev)
        target.append(traj.actions[frame_i[j]])
    return (torch.as_tensor(np.stack(obs)),
            torch.as_tensor(np.stack(prev_act)) / action_scale,
            torch.as_tensor(np.stack(target)) / action_scale)


def bc_loss(policy: BCPolicy, demos: DemoSet, picks: np.ndarray) -> torch.Tensor:
    hist, prev, target = bc_batch(demos, policy.history_frames, picks, policy.action_scale)
    pred = policy(hist, prev if policy.encoder.config.use_actions else None)
    return ((pred - target) ** 2).mean()


@dataclass
class BCResult:
    policy: BCPolicy
    initial_loss: float
    final_loss: float
    loss_history: list[float] = field(default_factory=list)


def train_bc(
    demos: DemoSet,
    encoder_init: Checkpoint | PointEncoder | int,
    freeze_encoder: bool,
    config: ProbeConfig,
    scene: SceneConfig,
    encoder_config: EncoderConfig | None = None,
    rng_seed: int = 0,
) -> BCResult:
    """Regress demonstrated actions from observations.

    ``encoder_init`` is a pre-training checkpoint, an encoder, or an int seed
    for a fresh encoder built from ``encoder_config``.
    """
    if isinstance(encoder_init, Checkpoint):
        encoder = copy.deepcopy(encoder_init.encoder)
    elif isinstance(encoder_init, PointEncoder):
        encoder = copy.deepcopy(encoder_init)
    else:
        if encoder_config is None:
            raise ValueError("a fresh encoder needs encoder_config")
        encoder = init_encoder(encoder_config, int(encoder_init))
    if encoder_config is not None and encoder.config != encoder_config:
        raise ValueError("encoder_config does not match the checkpoint encoder")
    encoder.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed + 7)
        policy = BCPolicy(encoder, demos.action_dim, config.head_width, freeze_encoder, scene.step_limit)
    if freeze_encoder:
        for p in policy.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in policy.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.step_size)

    n_rows = len(_bc_windows(demos, policy.history_frames)[0])
    all_rows = np.arange(n_rows)
    with torch.no_grad():
        initial = float(bc_loss(policy, demos, all_rows))
    history = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for step in range(config.steps_per_epoch):
            seed = batch_seed(rng_seed, epoch, step)
            picks = np.random.default_rng(seed).integers(0, n_rows, size=config.batch_size)
            loss = bc_loss(policy, demos, picks)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite BC loss at epoch {epoch}, batch seed {seed}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        history.append(total / config.steps_per_epoch)
    policy.eval()
    with torch.no_grad():
        final = float(bc_loss(policy, demos, all_rows))
    return BCResult(policy, initial, final, history)


def evaluate_policy(controller: Controller, scene: SceneConfig, n_episodes: int, rng_seed: int,
                    tolerance: float | None = None) -> dict:
    """Closed-loop rollouts; success means the object came to rest within tolerance of the goal."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    tol = scene.success_tolerance if tolerance is None else tolerance
    outcomes = []
    for ep in range(n_episodes):
        rng = np.random.default_rng([rng_seed, ep])
        state = initial_state(scene, rng)
        controller.reset()
        success = False
        steps = 0
        for _ in range(scene.horizon):
            obs = env_observe(state, scene)
            state = env_step(state, controller.act(obs, state), scene)
            steps += 1
            if np.linalg.norm(state.object - state.goal) <= tol:
                success = True
            if success or state.done:
                break
        outcomes.append({"episode": ep, "success": bool(success), "steps": steps,
                         "final_distance": float(np.linalg.norm(state.object - state.goal))})
    rate = sum(o["success"] for o in outcomes) / n_episodes
    return {"success_rate": rate, "episodes": outcomes}


# -- ablation matrix -------------------------------------------------------


def arm_settings(arm: str) -> dict:
    if arm == "pretrained":
        return {"init": "pretrained", "condition_mode": "previous_frame", "history_frames": 1, "freeze": False}
    if arm == "random_init":
        return {"init": "random", "condition_mode": "previous_frame", "history_frames": 1, "freeze": False}
    if arm == "current_frame":
        return {"init": "pretrained", "condition_mode": "current_frame", "history_frames": 1, "freeze": False}
    if arm == "frozen":
        return {"init": "pretrained", "condition_mode": "previous_frame", "history_frames": 1, "freeze": True}
    if arm.startswith("history_"):
        k = int(arm.split("_", 1)[1])
        if not 1 <= k <= 4:
            raise ValueError(f"history arm must use 1..4 frames, got {k}")
        return {"init": "pretrained", "condition_mode": "previous_frame", "history_frames": k, "freeze": False}
    raise ValueError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")


def arm_pretrain_config(base: PretrainConfig, arm: str, seed: int) -> PretrainConfig:
    s = arm_settings(arm)
    enc = base.encoder.model_copy(update={"history_frames": s["history_frames"]})
    return base.model_copy(update={"encoder": enc, "condition_mode": s["condition_mode"], "rng_seed": seed})


def run_ablation_matrix(
    demos: DemoSet,
    scene: SceneConfig,
    pretrain_config: PretrainConfig,
    probe_config: ProbeConfig,
    checkpoint: Checkpoint | None = None,
    cache: dict | None = None,
    log=None,
) -> dict:
    """Success rate per (arm, seed) plus the median per arm.

    Pre-training runs are shared between arms through ``cache`` keyed by
    ``(condition_mode, history_frames, seed)``. A supplied ``checkpoint``
    replaces the previous-frame, single-frame pre-training for every seed.
    """
    cache = {} if cache is None else cache
    rows = []
    for arm in probe_config.arms:
        settings = arm_settings(arm)
        per_seed = {}
        details = {}
        for seed in probe_config.seeds:
            pcfg = arm_pretrain_config(pretrain_config, arm, seed)
            key = (pcfg.condition_mode, pcfg.encoder.history_frames, seed)
            if settings["init"] == "pretrained":
                if checkpoint is not None and key[:2] == ("previous_frame", 1):
                    init = checkpoint
                else:
                    if key not in cache:
                        if log:
                            log(f"pre-training {key}")
                        cache[key] = pretrain(demos, pcfg)
                    init = cache[key]
            else:
                init = seed
            bc = train_bc(demos, init, settings["freeze"], probe_config, scene,
                          encoder_config=pcfg.encoder, rng_seed=seed)
            result = evaluate_policy(bc.policy, scene, probe_config.n_episodes,
                                     probe_config.eval_seed + seed)
            per_seed[seed] = result["success_rate"]
            details[seed] = {"bc_initial_loss": bc.initial_loss, "bc_final_loss": bc.final_loss}
            if log:
                log(f"{arm} seed={seed} success={result['success_rate']:.2f} bc_loss={bc.final_loss:.4f}")
        rows.append({
            "arm": arm,
            "per_seed": per_seed,
            "median": statistics.median(per_seed.values()),
            "settings": settings,
            "pretrain_config": arm_pretrain_config(pretrain_config, arm, 0).model_dump(mode="json"),
            "probe_config": probe_config.model_dump(mode="json"),
            "details": details,
        })
    return {"seeds": list(probe_config.seeds), "n_episodes": probe_config.n_episodes, "rows": rows}


def write_report(report: dict, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (arm, one column per seed, median) and ``<path>.json``."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    seeds = report["seeds"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm"] + [f"seed_{s}" for s in seeds] + ["median"])
        for row in report["rows"]:
            w.writerow([row["arm"]] + [row["per_seed"][s] for s in seeds] + [row["median"]])
    serial = json.loads(json.dumps(report, default=str))
    json_path.write_text(json.dumps(serial, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path
