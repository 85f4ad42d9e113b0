"""Next-frame diffusion pre-training, checkpoints and prediction-quality evaluation."""
from __future__ import annotations

import csv
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from fvp.dataset import DemoSet, TrainingPair, sample_pairs
from fvp.denoiser import Denoiser, DenoiserConfig, init_denoiser
from fvp.diffusion import (
    NoiseSchedule,
    diffusion_loss,
    forward_sample,
    make_linear_schedule,
    sample_next_frames,
)
from fvp.encoders import EncoderConfig, PointEncoder, init_encoder
from fvp.pointops import chamfer_distance

CHECKPOINT_VERSION = 1
MAGIC = b"FVPCKPT\x00"
_LEN = struct.Struct("<Q")


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.num_steps, self.beta_min, self.beta_max)


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig = EncoderConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 200
    steps_per_epoch: int = 40
    condition_mode: Literal["previous_frame", "current_frame"] = "previous_frame"
    rng_seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if min(self.batch_size, self.epochs, self.steps_per_epoch) < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be positive")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.denoiser.parameterization == "residual" and self.encoder.z_mode != "split":
            raise ValueError("the residual parameterization needs z_mode='split' (raw coordinates lead z)")
        return self


@dataclass
class Checkpoint:
    encoder: PointEncoder
    denoiser: Denoiser
    config: PretrainConfig
    n_points: int
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    corpus_seed: int | None = None

    @property
    def schedule(self) -> NoiseSchedule:
        return self.config.schedule.build()


def batch_seed(rng_seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([rng_seed, epoch, step]).generate_state(1)[0])


def condition_frames(pairs: list[TrainingPair], mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack encoder inputs ``(B, k, N, 3)`` and actions ``(B, k, A)`` for ``pairs``.

    ``current_frame`` shifts the window forward by one so it ends at the clean
    target itself.
    """
    if mode == "previous_frame":
        hist = np.stack([p.history for p in pairs])
    else:
        hist = np.stack([np.concatenate([p.history[1:], p.target[None]]) for p in pairs])
    acts = np.stack([p.history_actions for p in pairs])
    return hist, acts


def fresh_checkpoint(config: PretrainConfig, n_points: int) -> Checkpoint:
    enc = init_encoder(config.encoder, config.rng_seed)
    den = init_denoiser(config.encoder.channels, config.denoiser, config.schedule.build(),
                        config.rng_seed + 1)
    return Checkpoint(enc, den, config, n_points)


def training_loss(ckpt: Checkpoint, pairs: list[TrainingPair], gen: torch.Generator,
                  schedule: NoiseSchedule) -> torch.Tensor:
    cfg = ckpt.config
    dtype = next(ckpt.denoiser.parameters()).dtype
    hist, acts = condition_frames(pairs, cfg.condition_mode)
    x0 = torch.as_tensor(np.stack([p.target for p in pairs]), dtype=dtype)
    b = x0.shape[0]
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
    xt = forward_sample(x0, t, eps, schedule)
    z = ckpt.encoder(torch.as_tensor(hist, dtype=dtype),
                     torch.as_tensor(acts, dtype=dtype) if cfg.encoder.use_actions else None)
    pred = ckpt.denoiser(torch.cat([xt, z], dim=-1), t)
    return diffusion_loss(pred, eps)


def pretrain(
    demos: DemoSet,
    config: PretrainConfig,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> Checkpoint:
    """Jointly train encoder and denoiser to predict the noise on the next frame."""
    ckpt = fresh_checkpoint(config, demos.n_points)
    ckpt.corpus_seed = demos.manifest.get("seed")
    schedule = config.schedule.build()
    k = config.encoder.history_frames
    params = list(ckpt.encoder.parameters()) + list(ckpt.denoiser.parameters())
    opt = torch.optim.Adam(params, lr=config.step_size, betas=(config.beta1, config.beta2))
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for step in range(config.steps_per_epoch):
            seed = batch_seed(config.rng_seed, epoch, step)
            pairs = sample_pairs(demos, k, config.batch_size, seed)
            gen = torch.Generator().manual_seed(seed)
            loss = training_loss(ckpt, pairs, gen, schedule)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch seed {seed}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        mean = total / config.steps_per_epoch
        ckpt.loss_history.append(mean)
        ckpt.epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, mean, time.perf_counter() - start)
    return ckpt


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "wall_seconds"])
        for epoch, loss, wall in rows:
            writer.writerow([epoch, repr(float(loss)), f"{wall:.3f}"])


# -- evaluation -------------------------------------------------------------


def _check_n_points(ckpt: Checkpoint, demos: DemoSet) -> None:
    if demos.n_points != ckpt.n_points:
        raise ValueError(
            f"shape mismatch: checkpoint was trained on N={ckpt.n_points} points, corpus has N={demos.n_points}"
        )


@torch.no_grad()
def predict_pairs(ckpt: Checkpoint, demos: DemoSet, n_pairs: int, rng_seed: int,
                  chunk: int = 16) -> list[dict]:
    """Sample next frames for ``n_pairs`` random pairs.

    Each record holds the condition frame, the prediction, the ground truth and
    both Chamfer values.
    """
    _check_n_points(ckpt, demos)
    cfg = ckpt.config
    schedule = ckpt.schedule
    dtype = next(ckpt.denoiser.parameters()).dtype
    pairs = sample_pairs(demos, cfg.encoder.history_frames, n_pairs, rng_seed)
    ckpt.encoder.eval()
    ckpt.denoiser.eval()
    hist, acts = condition_frames(pairs, cfg.condition_mode)
    preds = []
    for lo in range(0, len(pairs), chunk):
        h = torch.as_tensor(hist[lo : lo + chunk], dtype=dtype)
        a = torch.as_tensor(acts[lo : lo + chunk], dtype=dtype) if cfg.encoder.use_actions else None
        seeds = [batch_seed(rng_seed, 0xE7A1, j) for j in range(lo, lo + h.shape[0])]
        preds.extend(sample_next_frames(ckpt.denoiser, ckpt.encoder(h, a), schedule, seeds))
    out = []
    for pair, condition, pred in zip(pairs, hist[:, -1], preds):
        out.append({
            "trajectory": pair.trajectory,
            "frame": pair.frame,
            "condition": condition,
            "predicted": pred,
            "target": pair.target,
            "predicted_chamfer": chamfer_distance(pred, pair.target),
            "copy_chamfer": chamfer_distance(condition, pair.target),
        })
    return out


def evaluate_prediction(ckpt: Checkpoint, held_out: DemoSet, n_eval_pairs: int, rng_seed: int) -> dict:
    held_seed = held_out.manifest.get("seed")
    if ckpt.corpus_seed is not None and held_seed == ckpt.corpus_seed:
        raise ValueError(f"held-out corpus shares generator seed {held_seed} with the training corpus")
    records = predict_pairs(ckpt, held_out, n_eval_pairs, rng_seed)
    pred = [r["predicted_chamfer"] for r in records]
    copy = [r["copy_chamfer"] for r in records]
    return {
        "metric": "chamfer_squared_mean",
        "n_pairs": len(records),
        "rng_seed": rng_seed,
        "condition_mode": ckpt.config.condition_mode,
        "predicted_chamfer_mean": float(np.mean(pred)),
        "copy_chamfer_mean": float(np.mean(copy)),
        "pairs": [
            {"trajectory": r["trajectory"], "frame": r["frame"],
             "predicted_chamfer": r["predicted_chamfer"], "copy_chamfer": r["copy_chamfer"]}
            for r in records
        ],
    }


# -- checkpoint container ---------------------------------------------------


def _blocks(ckpt: Checkpoint):
    for prefix, module in (("encoder", ckpt.encoder), ("denoiser", ckpt.denoiser)):
        for name, tensor in module.state_dict().items():
            yield f"{prefix}.{name}", tensor.detach().cpu().numpy().astype("<f4")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blocks, payload, offset = [], [], 0
    for name, arr in _blocks(ckpt):
        raw = np.ascontiguousarray(arr).tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    body = b"".join(payload)
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "config": ckpt.config.model_dump(mode="json"),
        "n_points": ckpt.n_points,
        "epoch": ckpt.epoch,
        "loss_history": [float(x) for x in ckpt.loss_history],
        "corpus_seed": ckpt.corpus_seed,
        "blocks": blocks,
        "payload_bytes": len(body),
        "payload_crc32": zlib.crc32(body),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(hb)) + hb + body


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + _LEN.size or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path.name}: not a checkpoint file")
    (hlen,) = _LEN.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + hlen > len(raw):
        raise CorruptCheckpointError(f"{path.name}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path.name}: unreadable header ({exc})") from exc
    version = header.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path.name}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    body = raw[start + hlen :]
    if len(body) != header["payload_bytes"]:
        raise CorruptCheckpointError(f"{path.name}: payload is {len(body)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(body) != header["payload_crc32"]:
        raise CorruptCheckpointError(f"{path.name}: payload checksum mismatch")

    config = PretrainConfig.model_validate(header["config"])
    ckpt = fresh_checkpoint(config, int(header["n_points"]))
    states = {"encoder": {}, "denoiser": {}}
    for blk in header["blocks"]:
        prefix, name = blk["name"].split(".", 1)
        arr = np.frombuffer(body, dtype="<f4", count=blk["nbytes"] // 4, offset=blk["offset"])
        states[prefix][name] = torch.from_numpy(arr.reshape(blk["shape"]).astype(np.float32))
    try:
        ckpt.encoder.load_state_dict(states["encoder"])
        ckpt.denoiser.load_state_dict(states["denoiser"])
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"{path.name}: weights do not match the stored config ({exc})") from exc
    ckpt.epoch = int(header["epoch"])
    ckpt.loss_history = [float(x) for x in header["loss_history"]]
    ckpt.corpus_seed = header.get("corpus_seed")
    return ckpt
