"""Set-prediction loss: Hungarian matching, sigmoid focal classification, L1 regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.tensor import Tensor
from querystream.geometry import Pose, rigid_inverse, transform_points
from querystream.matching import MatchResult, hungarian_match
from querystream import mln as M


# Raw centre outputs are scaled by this before being added to anchors, so the
# network regresses offsets at a resolution its updates can resolve.
OFFSET_SCALE = 0.1


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0  # lambda_cls, used in both matching cost and loss
    l1: float = 0.25  # lambda_L1, used in both matching cost and loss
    center: float = 1.0
    size: float = 0.2
    heading: float = 0.2
    velocity: float = 0.2
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class Targets:
    """Ground truth of one frame in the current ego frame."""

    centers_n: np.ndarray  # [g, 3] normalised
    labels: np.ndarray  # [g]
    log_sizes: np.ndarray  # [g, 3]
    sincos: np.ndarray  # [g, 2]
    vel_ego: np.ndarray  # [g, 2]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def reg(self) -> np.ndarray:
        return np.concatenate([self.centers_n, self.log_sizes, self.sincos, self.vel_ego], axis=1)


def frame_targets(frame, bounds_lo, bounds_hi) -> Targets:
    objs = frame.objects
    if not objs:
        z = np.zeros((0, 3))
        return Targets(z, np.zeros(0, dtype=np.int64), z, np.zeros((0, 2)), np.zeros((0, 2)))
    ego: Pose = frame.ego_pose
    inv = rigid_inverse(ego.matrix)
    centers = transform_points(inv, np.array([o.center for o in objs]))
    yaw = np.array([o.heading for o in objs]) - ego.yaw
    r2 = ego.rotation[:2, :2]
    vel = np.array([o.velocity for o in objs]) @ r2
    return Targets(
        M.normalize_points(centers, bounds_lo, bounds_hi),
        np.array([o.cls for o in objs], dtype=np.int64),
        np.log(np.array([o.size for o in objs])),
        np.stack([np.sin(yaw), np.cos(yaw)], axis=1),
        vel,
    )


def sigmoid_focal_loss(logits: Tensor, onehot: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed focal loss; ``onehot`` is a constant target of the same shape."""
    t = onehot
    log_p = T.log_sigmoid(logits)
    log_q = T.log_sigmoid(T.neg(logits))
    p = T.sigmoid(logits)
    q = T.sigmoid(T.neg(logits))
    pos = T.mul(T.mul(T.square(q) if gamma == 2.0 else T.exp(T.mul(log_q, gamma)), log_p), Tensor(-alpha * t))
    neg = T.mul(T.mul(T.square(p) if gamma == 2.0 else T.exp(T.mul(log_p, gamma)), log_q),
                Tensor(-(1.0 - alpha) * (1.0 - t)))
    return T.sum_(T.add(pos, neg))


def matching_cost(logits: np.ndarray, reg: np.ndarray, anchors: np.ndarray, tgt: Targets,
                  w: LossWeights) -> np.ndarray:
    scores = 1.0 / (1.0 + np.exp(-logits))
    centers = anchors + OFFSET_SCALE * reg[:, 0:3]
    cls_cost = 1.0 - scores[:, tgt.labels]
    l1 = np.abs(centers[:, None, :] - tgt.centers_n[None, :, :]).sum(axis=2)
    return w.cls * cls_cost + w.l1 * l1


def detection_loss(logits: Tensor, reg: Tensor, anchors: Tensor, tgt: Targets,
                   w: LossWeights = LossWeights(), match: MatchResult | None = None) -> tuple[Tensor, MatchResult]:
    """Scalar loss for one frame plus the matching that produced it.

    A given ``match`` is used as is; the loss is then smooth in the inputs
    except at L1 kinks.
    """
    n, n_cls = logits.shape
    if match is None:
        match = hungarian_match(matching_cost(logits.data, reg.data, anchors.data, tgt, w)) if len(tgt) else \
            MatchResult([], 0.0)
    onehot = np.zeros((n, n_cls))
    norm = max(1.0, float(len(tgt)))
    if match.pairs:
        onehot[match.pred_indices, tgt.labels[match.gt_indices]] = 1.0
    loss = T.mul(sigmoid_focal_loss(logits, onehot, w.alpha, w.gamma), w.cls / norm)
    if match.pairs:
        pi = match.pred_indices
        gi = match.gt_indices
        pred = T.take_rows(reg, pi)
        centers = T.add(T.mul(T.columns(pred, 0, 3), OFFSET_SCALE), T.take_rows(anchors, pi))
        target = tgt.reg[gi]
        comp_w = np.concatenate([np.full(3, w.center), np.full(3, w.size), np.full(2, w.heading),
                                 np.full(2, w.velocity)])
        pred_full = T.concat([centers, T.columns(pred, 3, 10)], axis=1)
        l1 = T.sum_(T.mul(T.abs_(T.sub(pred_full, Tensor(target))), Tensor(comp_w)))
        loss = T.add(loss, T.mul(l1, w.l1 / norm))
    return loss, match
