"""Centre-distance detection metrics with a static/moving split."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from querystream.geometry import rigid_inverse, transform_points

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Detection:
    center: np.ndarray  # ego frame
    label: int
    score: float
    velocity: np.ndarray  # global


@dataclass
class GroundTruth:
    center: np.ndarray  # ego frame
    label: int
    velocity: np.ndarray  # global

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass
class EvalReport:
    split: str
    ap: dict[float, float]  # threshold -> AP averaged over classes
    mAP: float
    mATE: float | None
    mAVE: float | None
    n_gt: int
    per_class: dict[int, dict[float, float]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"split": self.split, "threshold": th, "ap": self.ap[th], "mate": self.mATE, "mave": self.mAVE}
                for th in sorted(self.ap)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap"] = {str(k): v for k, v in self.ap.items()}
        d["per_class"] = {str(c): {str(k): v for k, v in a.items()} for c, a in self.per_class.items()}
        return d


def detections_from_output(out, score_floor: float = 0.0) -> list[Detection]:
    """One detection per query: its best class and that class's score."""
    labels = out.scores.argmax(axis=1)
    best = out.scores.max(axis=1)
    order = np.argsort(-best, kind="stable")
    return [Detection(out.centers[i], int(labels[i]), float(best[i]), out.velocities[i])
            for i in order if best[i] >= score_floor]


def truths_from_frame(frame) -> list[GroundTruth]:
    if not frame.objects:
        return []
    inv = rigid_inverse(frame.ego_pose.matrix)
    centers = transform_points(inv, np.array([o.center for o in frame.objects]))
    return [GroundTruth(centers[i], o.cls, o.velocity) for i, o in enumerate(frame.objects)]


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall + 1e-12, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _match_class(dets, gts, keep_gt, threshold):
    """Greedy score-ordered matching of one class across frames.

    Returns (tp flags for counted detections, matched (det, gt) pairs).
    Detections that match a ground truth outside the split are dropped.
    """
    entries = [(d.score, fi, di) for fi, frame_dets in enumerate(dets) for di, d in enumerate(frame_dets)]
    entries.sort(key=lambda e: -e[0])
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    flags, pairs = [], []
    for _, fi, di in entries:
        d = dets[fi][di]
        frame_gts = gts[fi]
        best, best_j = np.inf, -1
        for j, g in enumerate(frame_gts):
            if taken[fi][j]:
                continue
            dist = float(np.hypot(*(d.center[:2] - g.center[:2])))
            if dist < best:
                best, best_j = dist, j
        if best_j >= 0 and best <= threshold:
            taken[fi][best_j] = True
            if keep_gt[fi][best_j]:
                flags.append(1)
                pairs.append((d, frame_gts[best_j], best))
            continue
        flags.append(0)
    return np.array(flags, dtype=np.int64), pairs


def evaluate_split(dets_per_frame: Sequence[Sequence[Detection]], truths: Sequence[Sequence[GroundTruth]],
                   split: str = "all", split_speed: float = 1.0, classes: Sequence[int] | None = None,
                   thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    if split == "all":
        keep = [[True] * len(g) for g in truths]
    elif split == "static":
        keep = [[gt.speed < split_speed for gt in g] for g in truths]
    elif split == "moving":
        keep = [[gt.speed >= split_speed for gt in g] for g in truths]
    else:
        raise ValueError(f"unknown split {split!r}")
    if classes is None:
        classes = sorted({gt.label for g in truths for gt in g} | {d.label for f in dets_per_frame for d in f})
    per_class: dict[int, dict[float, float]] = {}
    tp_pairs = []
    n_gt_total = 0
    for c in classes:
        dets_c = [[d for d in f if d.label == c] for f in dets_per_frame]
        gts_c, keep_c = [], []
        for g, k in zip(truths, keep):
            idx = [j for j, gt in enumerate(g) if gt.label == c]
            gts_c.append([g[j] for j in idx])
            keep_c.append([k[j] for j in idx])
        n_gt = sum(sum(k) for k in keep_c)
        if n_gt == 0:
            continue
        n_gt_total += n_gt
        per_class[c] = {}
        for th in thresholds:
            flags, pairs = _match_class(dets_c, gts_c, keep_c, th)
            per_class[c][th] = interpolated_ap(flags, n_gt)
            if th == TP_THRESHOLD:
                tp_pairs.extend(pairs)
    ap = {th: (float(np.mean([per_class[c][th] for c in per_class])) if per_class else 0.0) for th in thresholds}
    m_ap = float(np.mean(list(ap.values()))) if per_class else 0.0
    mate = float(np.mean([p[2] for p in tp_pairs])) if tp_pairs else None
    mave = float(np.mean([np.hypot(*(d.velocity - g.velocity)) for d, g, _ in tp_pairs])) if tp_pairs else None
    return EvalReport(split, ap, m_ap, mate, mave, n_gt_total, per_class)


def evaluate(dets_per_frame, truths, split_speed: float | None = 1.0, classes=None) -> dict[str, EvalReport]:
    """Reports for ``all`` and, when ``split_speed`` is given, ``static`` and ``moving``."""
    splits = ["all"] if split_speed is None else ["all", "static", "moving"]
    return {s: evaluate_split(dets_per_frame, truths, s, split_speed or 1.0, classes) for s in splits}


def write_metrics(outdir: str | Path, reports: dict[str, EvalReport]) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["split", "threshold", "ap", "mate", "mave"])
        w.writeheader()
        for rep in reports.values():
            for row in rep.rows():
                w.writerow(row)
    (out / "metrics.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2,
                                                 sort_keys=True))
