"""SGD-with-momentum training over the combined triplet / pseudo-label objective."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLIP_SECONDS, ClipSample, VideoStreams, assign_pseudo_labels, random_clips
from .losses import LossConfig, LossTerms, TripletBatch, margin_at, total_loss
from .model import ModelConfig, ModelParameters, bgm_embed, is_bias, joint_embed, parameter_shapes, save_checkpoint
from .numerics import Parameter, Tape, zero_grads
from .seeding import derive_rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    momentum: float = 0.9
    epochs: int = 100
    batch_pairs: int = 16
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    clips_per_video: int = 1
    clip_len_s: float = CLIP_SECONDS

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2: a triplet needs a negative")
        if self.epochs < 0 or self.clips_per_video < 1:
            raise ValueError("epochs must be >= 0 and clips_per_video >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    triplet: float
    pseudo_label: float
    margin: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoint_path: str | None = None

    def loss_trace(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def digest(self) -> str:
        """SHA-256 over the exact per-epoch (L, L1, L2, alpha) values."""
        h = hashlib.sha256()
        for e in self.epochs:
            h.update(np.array([e.loss, e.triplet, e.pseudo_label, e.margin], dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "wall_time_s": self.wall_time_s,
            "checkpoint_path": self.checkpoint_path,
            "loss_trace_digest": self.digest(),
        }


def init_parameters(cfg: ModelConfig, seed: int) -> ModelParameters:
    """Glorot-uniform weights, zero biases; each tensor has its own labelled stream."""
    values = {}
    for name, shape in parameter_shapes(cfg).items():
        if is_bias(name):
            values[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            values[name] = derive_rng(seed, f"init/{name}").uniform(-bound, bound, size=shape)
    return ModelParameters(cfg, values)


def sgd_momentum_step(
    params: Sequence[Parameter], velocity: dict[str, np.ndarray], lr: float, momentum: float
) -> None:
    """Heavy-ball update in place: v = momentum * v + g; p = p - lr * v."""
    for p in params:
        if p.grad.shape != p.value.shape:
            raise ValueError(f"{p.name}: gradient shape {p.grad.shape} != value shape {p.value.shape}")
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = p.grad.copy()
        else:
            v *= momentum
            v += p.grad
        p.value -= lr * v


def make_batches(clips: Sequence[ClipSample], batch_pairs: int, rng: np.random.Generator) -> list[list[ClipSample]]:
    """Shuffle, then pack clips into batches whose pseudo-labels are all distinct.

    Batches that end up with a single pair are dropped since they have no negative.
    """
    batches: list[list[ClipSample]] = []
    labels: list[set[int]] = []
    for i in rng.permutation(len(clips)):
        clip = clips[i]
        for b, used in zip(batches, labels):
            if len(b) < batch_pairs and clip.pseudo_label not in used:
                b.append(clip)
                used.add(clip.pseudo_label)
                break
        else:
            batches.append([clip])
            labels.append({clip.pseudo_label})
    return [b for b in batches if len(b) >= 2]


def stack(clips: Sequence[ClipSample], stream: str) -> np.ndarray:
    return np.stack([getattr(c, stream).values for c in clips])


def batch_loss(clips: Sequence[ClipSample], params: ModelParameters, alpha: float, loss_cfg: LossConfig) -> LossTerms:
    joint = joint_embed(stack(clips, "video_fast"), stack(clips, "video_slow"), stack(clips, "voiceover"), params)
    bgm = bgm_embed(stack(clips, "bgm"), params)
    batch = TripletBatch(joint, bgm, np.array([c.pseudo_label for c in clips]))
    return total_loss(batch, alpha, loss_cfg, params["classifier_wj"], params["classifier_wm"])


def train_step(
    clips: Sequence[ClipSample], params: ModelParameters, velocity: dict, alpha: float, cfg: TrainConfig
) -> tuple[float, float, float]:
    zero_grads(params)
    with Tape() as tape:
        terms = batch_loss(clips, params, alpha, cfg.loss)
    values = terms.floats()
    if not all(math.isfinite(v) for v in values):
        raise DivergenceError(f"non-finite loss {values} (alpha={alpha})")
    tape.backward(terms.total)
    # only parameters that took part in this step move
    sgd_momentum_step(tape.parameters(), velocity, cfg.learning_rate, cfg.momentum)
    return values


def train(
    videos: Sequence[VideoStreams],
    params: ModelParameters,
    cfg: TrainConfig,
    out_dir=None,
    header: dict | None = None,
) -> TrainReport:
    """Run ``cfg.epochs`` epochs in place on ``params``.

    Each epoch draws fresh random clips, assigns pseudo-labels, packs
    label-distinct batches and takes one optimizer step per batch.
    """
    report = TrainReport()
    velocity: dict[str, np.ndarray] = {}
    t0 = time.perf_counter()
    seq_len = params.config.seq_len
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, f"train/epoch/{epoch}")
        clips = assign_pseudo_labels(random_clips(videos, rng, cfg.clips_per_video, cfg.clip_len_s, seq_len))
        n_labels = 1 + max(c.pseudo_label for c in clips)
        if n_labels > params.config.n_labels:
            raise ValueError(f"epoch {epoch} produced {n_labels} pseudo-labels, model has {params.config.n_labels}")
        batches = make_batches(clips, cfg.batch_pairs, rng)
        if not batches:
            raise ValueError("no batch with two distinct pseudo-labels; need more videos")
        alpha = margin_at(epoch, cfg.loss)
        sums = np.zeros(3)
        for batch in batches:
            try:
                sums += train_step(batch, params, velocity, alpha, cfg)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        mean = sums / len(batches)
        report.epochs.append(EpochStats(epoch, float(mean[0]), float(mean[1]), float(mean[2]), float(alpha)))
        log.info("epoch %d  L=%.6g  L1=%.6g  L2=%.6g  alpha=%g", epoch, *mean, alpha)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(Path(out_dir) / f"epoch{epoch + 1:04d}", params, cfg, report, epoch + 1, header)
    report.wall_time_s = time.perf_counter() - t0
    if out_dir is not None:
        path = _checkpoint(Path(out_dir) / "final", params, cfg, report, cfg.epochs, header)
        report.checkpoint_path = str(path)
    return report


def _checkpoint(path: Path, params, cfg: TrainConfig, report: TrainReport, epoch: int, header: dict | None) -> Path:
    extra = {"train": cfg.to_dict(), "epoch": epoch, "seed": cfg.seed, "loss_trace_digest": report.digest()}
    extra.update(header or {})
    return save_checkpoint(path, params, extra)


def write_report(path, report: TrainReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
