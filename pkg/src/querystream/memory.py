"""FIFO memory of per-frame top-K object queries with motion metadata."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.checkpoint import decode_array, encode_array
from querystream.autodiff.tensor import Tensor
from querystream.errors import ConfigError, OrderingError, ShapeError
from querystream.geometry import Pose


@dataclass
class QueryRecord:
    """One stored object query."""

    q_c: np.ndarray
    q_p: np.ndarray
    v: np.ndarray
    e: Pose
    timestamp: float
    score: float
    padded: bool = False

    def __post_init__(self) -> None:
        self.q_c = np.asarray(self.q_c, dtype=np.float64)
        self.q_p = np.asarray(self.q_p, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(2)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"record score must lie in [0, 1], got {self.score}")
        if not np.isfinite(self.timestamp):
            raise ValueError("record timestamp must be finite")


@dataclass
class FrameBlock:
    """Exactly ``K`` records from one frame, stored column-wise.

    ``q_c`` stays a :class:`Tensor` so that, inside a tape, gradients flow
    from later frames back into the frame that wrote the block.
    """

    q_c: Tensor  # [K, d]
    q_p: np.ndarray  # [K, 3], ego frame of the record's timestamp
    v: np.ndarray  # [K, 2], global
    e: np.ndarray  # [K, 4, 4]
    times: np.ndarray  # [K]
    scores: np.ndarray  # [K]
    padded: np.ndarray  # [K] bool
    timestamp: float

    def __len__(self) -> int:
        return self.q_p.shape[0]

    def records(self) -> list[QueryRecord]:
        return [
            QueryRecord(self.q_c.data[i].copy(), self.q_p[i], self.v[i], Pose(self.e[i], validate=False),
                        float(self.times[i]), float(self.scores[i]), bool(self.padded[i]))
            for i in range(len(self))
        ]

    def detached(self) -> "FrameBlock":
        return FrameBlock(self.q_c.detach(), self.q_p, self.v, self.e, self.times, self.scores,
                          self.padded, self.timestamp)

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "q_c": encode_array(self.q_c.data),
            "q_p": encode_array(self.q_p),
            "v": encode_array(self.v),
            "e": encode_array(self.e),
            "times": encode_array(self.times),
            "scores": encode_array(self.scores),
            "padded": [bool(p) for p in self.padded],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FrameBlock":
        return cls(
            Tensor(decode_array(d["q_c"])),
            decode_array(d["q_p"]),
            decode_array(d["v"]),
            decode_array(d["e"]),
            decode_array(d["times"]),
            decode_array(d["scores"]),
            np.asarray(d["padded"], dtype=bool),
            float(d["timestamp"]),
        )


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; ties keep the lower index first."""
    if k <= 0:
        raise ConfigError(f"top-k needs k >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    return np.argsort(-s, kind="stable")[:k]


def select_block(
    q_c: Tensor,
    q_p: np.ndarray,
    v: np.ndarray,
    e: Pose,
    timestamp: float,
    scores: np.ndarray,
    k: int,
) -> FrameBlock:
    """Top-``k`` rows of one frame's predictions, padded to exactly ``k``."""
    idx = topk_indices(scores, k)
    n_real = len(idx)
    n_pad = k - n_real
    d = q_c.shape[1]
    rows = T.take_rows(q_c, idx)
    if n_pad:
        rows = T.concat([rows, Tensor(np.zeros((n_pad, d)))], axis=0)

    def pad(a: np.ndarray, width: int) -> np.ndarray:
        return np.concatenate([a[idx].reshape(n_real, width), np.zeros((n_pad, width))], axis=0)

    return FrameBlock(
        q_c=rows,
        q_p=pad(np.asarray(q_p, dtype=np.float64), 3),
        v=pad(np.asarray(v, dtype=np.float64), 2),
        e=np.broadcast_to(e.matrix, (k, 4, 4)).copy(),
        times=np.full(k, float(timestamp)),
        scores=np.concatenate([np.asarray(scores, dtype=np.float64)[idx], np.zeros(n_pad)]),
        padded=np.concatenate([np.zeros(n_real, dtype=bool), np.ones(n_pad, dtype=bool)]),
        timestamp=float(timestamp),
    )


def select_topk(detections: Sequence[tuple[QueryRecord, float]], k: int) -> FrameBlock:
    """Build a frame block from the ``k`` best-scoring records."""
    if k <= 0:
        raise ConfigError(f"top-k needs k >= 1, got {k}")
    if not detections:
        raise ValueError("select_topk needs at least one detection to fix the embedding width")
    recs = [r for r, _ in detections]
    scores = np.array([s for _, s in detections], dtype=np.float64)
    idx = topk_indices(scores, k)
    d = recs[0].q_c.shape[0]
    n_pad = k - len(idx)
    chosen = [recs[i] for i in idx]
    ts = max(r.timestamp for r in recs)

    def stack(rows, width):
        return np.concatenate([np.array(rows).reshape(len(rows), width), np.zeros((n_pad, width))])

    return FrameBlock(
        q_c=Tensor(stack([r.q_c for r in chosen], d)),
        q_p=stack([r.q_p for r in chosen], 3),
        v=stack([r.v for r in chosen], 2),
        e=np.concatenate([np.array([r.e.matrix for r in chosen]).reshape(-1, 4, 4),
                          np.broadcast_to(np.eye(4), (n_pad, 4, 4))]),
        times=np.concatenate([[r.timestamp for r in chosen], np.full(n_pad, ts)]),
        scores=np.concatenate([scores[idx], np.zeros(n_pad)]),
        padded=np.concatenate([np.zeros(len(idx), dtype=bool), np.ones(n_pad, dtype=bool)]),
        timestamp=ts,
    )


@dataclass
class MemoryView:
    """All stored records stacked oldest frame first."""

    q_c: Tensor  # [M, d]
    q_p: np.ndarray  # [M, 3]
    v: np.ndarray  # [M, 2]
    e: np.ndarray  # [M, 4, 4]
    dt: np.ndarray  # [M]
    scores: np.ndarray  # [M]
    padded: np.ndarray  # [M]

    def __len__(self) -> int:
        return self.q_p.shape[0]


def should_save(step_index: int, tau: int) -> bool:
    if tau < 1:
        raise ConfigError(f"saving interval must be >= 1, got {tau}")
    return step_index % tau == 0


@dataclass
class MemoryQueue:
    capacity_frames: int
    records_per_frame: int
    save_interval: int = 1
    blocks: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.capacity_frames < 1 or self.records_per_frame < 1 or self.save_interval < 1:
            raise ConfigError(
                f"memory sizes must be positive: N={self.capacity_frames} K={self.records_per_frame} "
                f"tau={self.save_interval}"
            )

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def n_records(self) -> int:
        return len(self.blocks) * self.records_per_frame

    @property
    def newest_timestamp(self) -> float | None:
        return self.blocks[-1].timestamp if self.blocks else None

    def push_frame(self, block: FrameBlock) -> None:
        if len(block) != self.records_per_frame:
            raise ShapeError(f"frame block has {len(block)} records, queue expects {self.records_per_frame}")
        newest = self.newest_timestamp
        if newest is not None and not block.timestamp > newest:
            raise OrderingError(f"block timestamp {block.timestamp} is not after newest stored {newest}")
        self.blocks.append(block)
        while len(self.blocks) > self.capacity_frames:
            self.blocks.popleft()

    def gather(self, now: float, d: int | None = None) -> MemoryView:
        newest = self.newest_timestamp
        if newest is not None and now < newest:
            raise OrderingError(f"gather time {now} precedes newest stored {newest}")
        if not self.blocks:
            width = d if d is not None else 0
            return MemoryView(Tensor(np.zeros((0, width))), np.zeros((0, 3)), np.zeros((0, 2)),
                              np.zeros((0, 4, 4)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
        bs = list(self.blocks)
        return MemoryView(
            q_c=T.concat([b.q_c for b in bs], axis=0),
            q_p=np.concatenate([b.q_p for b in bs]),
            v=np.concatenate([b.v for b in bs]),
            e=np.concatenate([b.e for b in bs]),
            dt=now - np.concatenate([b.times for b in bs]),
            scores=np.concatenate([b.scores for b in bs]),
            padded=np.concatenate([b.padded for b in bs]),
        )

    def detach(self) -> None:
        """Drop tape links held by stored embeddings."""
        self.blocks = deque(b.detached() for b in self.blocks)

    def clear(self) -> None:
        self.blocks.clear()

    def snapshot(self) -> dict[str, Any]:
        return {
            "capacity_frames": self.capacity_frames,
            "records_per_frame": self.records_per_frame,
            "save_interval": self.save_interval,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    @classmethod
    def from_snapshot(cls, d: dict[str, Any]) -> "MemoryQueue":
        q = cls(int(d["capacity_frames"]), int(d["records_per_frame"]), int(d["save_interval"]))
        for b in d["blocks"]:
            q.blocks.append(FrameBlock.from_dict(b))
        return q
