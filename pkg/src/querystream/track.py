"""Greedy centre-distance tracker with constant-velocity prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from querystream.errors import ConfigError


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = 2.0  # metres
    max_age: int = 3  # frames a track may go unmatched before it dies
    min_score: float = 0.3  # detections below this never start a track
    dt: float = 0.5

    def __post_init__(self) -> None:
        if not self.gate > 0 or self.max_age < 0 or self.dt <= 0:
            raise ConfigError(f"invalid tracker config {self}")


@dataclass
class _Track:
    tid: int
    center: np.ndarray
    velocity: np.ndarray
    label: int
    misses: int = 0


def greedy_track(stream: Sequence[Sequence], cfg: TrackerConfig = TrackerConfig(),
                 dts: Sequence[float] | None = None) -> list[list[int | None]]:
    """Track ids per frame, aligned with each frame's detections.

    Detections need ``center``, ``velocity``, ``score`` and ``label``
    attributes in one fixed frame of reference.  Unmatched low-score
    detections get ``None``.
    """
    tracks: list[_Track] = []
    next_id = 0
    out = []
    for fi, dets in enumerate(stream):
        dt = cfg.dt if dts is None or fi == 0 else float(dts[fi])
        for t in tracks:
            t.center = t.center + np.r_[t.velocity[:2], np.zeros(len(t.center) - 2)] * dt
        ids: list[int | None] = [None] * len(dets)
        order = sorted(range(len(dets)), key=lambda i: -float(dets[i].score))
        pairs = []
        for di in order:
            c = np.asarray(dets[di].center, dtype=np.float64)
            for ti, t in enumerate(tracks):
                if t.label != int(dets[di].label):
                    continue
                dist = float(np.hypot(*(c[:2] - t.center[:2])))
                if dist <= cfg.gate:
                    pairs.append((dist, -float(dets[di].score), di, ti))
        pairs.sort()
        used_d, used_t = set(), set()
        for _, _, di, ti in pairs:
            if di in used_d or ti in used_t:
                continue
            used_d.add(di)
            used_t.add(ti)
            t = tracks[ti]
            t.center = np.asarray(dets[di].center, dtype=np.float64)
            t.velocity = np.asarray(dets[di].velocity, dtype=np.float64)
            t.misses = 0
            ids[di] = t.tid
        for ti, t in enumerate(tracks):
            if ti not in used_t:
                t.misses += 1
        tracks = [t for t in tracks if t.misses <= cfg.max_age]
        for di in order:
            if di in used_d or float(dets[di].score) < cfg.min_score:
                continue
            d = dets[di]
            tracks.append(_Track(next_id, np.asarray(d.center, dtype=np.float64),
                                 np.asarray(d.velocity, dtype=np.float64), int(d.label)))
            ids[di] = next_id
            next_id += 1
        out.append(ids)
    return out


def id_switches(ids_per_frame: Sequence[Sequence[int | None]], gt_ids_per_frame: Sequence[Sequence[int]]) -> int:
    """Count changes of the track id assigned to each ground-truth object."""
    last: dict[int, int] = {}
    switches = 0
    for ids, gts in zip(ids_per_frame, gt_ids_per_frame):
        for tid, gid in zip(ids, gts):
            if tid is None:
                continue
            if gid in last and last[gid] != tid:
                switches += 1
            last[gid] = tid
    return switches
