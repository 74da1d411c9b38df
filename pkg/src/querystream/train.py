"""Streaming training with early-frame detach, plus online inference helpers."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from querystream.autodiff.tensor import Tape, backward, no_tape
from querystream.engine import StepOutput, StreamEngine
from querystream.errors import ConfigError, DivergenceError
from querystream.evaluate import Detection, detections_from_output, evaluate, truths_from_frame
from querystream.losses import LossWeights, detection_loss, frame_targets
from querystream.optim import AdamW
from querystream.sim import FrameTruth, TokenSet

log = logging.getLogger(__name__)

Scene = tuple[Sequence[FrameTruth], Sequence[TokenSet]]


@dataclass(frozen=True)
class TrainConfig:
    seq_len: int = 8
    detach_prefix: int = 6
    frame_skip: bool = True
    updates: int = 600
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    warmup: int = 20
    seed: int = 0
    aux_loss: bool = True
    loss: LossWeights = LossWeights(l1=5.0, center=20.0)

    def __post_init__(self) -> None:
        problems = []
        if self.seq_len < 1:
            problems.append("seq_len must be >= 1")
        if not 0 <= self.detach_prefix < self.seq_len:
            problems.append(f"detach_prefix must lie in [0, seq_len), got {self.detach_prefix}")
        if self.updates < 0:
            problems.append("updates must be >= 0")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))

    @classmethod
    def for_length(cls, seq_len: int, **kw) -> "TrainConfig":
        """Loss on the last two frames (or the only one), earlier frames detached."""
        return cls(seq_len=seq_len, detach_prefix=max(0, seq_len - 2), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d)


@dataclass
class TrainResult:
    losses: list[float]
    grad_norms: list[float]


def sample_window(rng: np.random.Generator, n_frames: int, cfg: TrainConfig) -> list[int]:
    """Frame indices of one training window; frame skip removes one interior frame."""
    skip = cfg.frame_skip and cfg.seq_len > 1 and n_frames > cfg.seq_len and rng.uniform() < 0.5
    span = cfg.seq_len + (1 if skip else 0)
    if n_frames < span:
        raise ConfigError(f"scene has {n_frames} frames, training window needs {span}")
    start = int(rng.integers(0, n_frames - span + 1))
    idx = list(range(start, start + span))
    if skip:
        idx.pop(int(rng.integers(1, span)))
    return idx


def train_streaming(engine: StreamEngine, scenes: Sequence[Scene], cfg: TrainConfig,
                    callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """One optimiser update per sampled window of ``cfg.seq_len`` frames."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    params = engine.params.tensors()
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm, total_steps=cfg.updates, warmup=cfg.warmup)
    ecfg = engine.cfg
    losses, norms = [], []
    for it in range(cfg.updates):
        frames, tokens = scenes[int(rng.integers(len(scenes)))]
        window = sample_window(rng, len(frames), cfg)
        engine.reset()
        with no_tape():
            for j in window[:cfg.detach_prefix]:
                engine.step(tokens[j].tokens, tokens[j].points, frames[j].ego_pose, frames[j].timestamp)
        total = None
        with Tape() as tape:
            for j in window[cfg.detach_prefix:]:
                out = engine.step(tokens[j].tokens, tokens[j].points, frames[j].ego_pose, frames[j].timestamp,
                                  aux=cfg.aux_loss)
                tgt = frame_targets(frames[j], ecfg.bounds_lo, ecfg.bounds_hi)
                for logits, reg in [*out.aux, (out.logits, out.reg)]:
                    loss, _ = detection_loss(logits, reg, out.anchors, tgt, cfg.loss)
                    total = loss if total is None else total + loss
        value = float(total.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at update {it} (window {window})")
        grads = backward(total, tape, params)
        norms.append(opt.step(grads))
        losses.append(value)
        engine.reset()
        if callback is not None:
            callback(it, value)
    return TrainResult(losses, norms)


def run_stream(engine: StreamEngine, frames: Sequence[FrameTruth], tokens: Sequence[TokenSet],
               memoryless: bool = False, score_floor: float = 0.02) -> list[list[Detection]]:
    """Online inference over a whole stream; ``memoryless`` resets before every frame."""
    engine.reset()
    dets = []
    with no_tape():
        for f, t in zip(frames, tokens):
            if memoryless:
                engine.reset()
            out: StepOutput = engine.step(t.tokens, t.points, f.ego_pose, f.timestamp)
            dets.append(detections_from_output(out, score_floor))
    engine.reset()
    return dets


def evaluate_engine(engine: StreamEngine, scenes: Sequence[Scene], memoryless: bool = False,
                    split_speed: float | None = 1.0):
    all_dets, all_truths = [], []
    for frames, tokens in scenes:
        all_dets.extend(run_stream(engine, frames, tokens, memoryless))
        all_truths.extend(truths_from_frame(f) for f in frames)
    return evaluate(all_dets, all_truths, split_speed, classes=list(range(engine.cfg.n_classes)))
