"""Deterministic synthetic streaming scenes standing in for an image backbone.

Every object moves at constant global velocity.  Objects that leave the
sensing range or every camera frustum are replaced by a fresh object with a
new id, so each reported object is always inside some camera view; an
occlusion episode only suppresses its tokens.

Tokens are a fixed random linear code of the object's ego-frame attributes
plus noise.  The code matrix depends on ``encoder_seed`` only, so it plays the
role of a frozen backbone shared by all scenes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from querystream.autodiff.checkpoint import decode_array, encode_array
from querystream.errors import ConfigError, ParseError
from querystream.geometry import Camera, Pose, project_point, transform_points, rigid_inverse

CLASS_NAMES = ("car", "pedestrian", "cyclist")
# base (l, w, h) per class
CLASS_SIZES = np.array([[4.5, 1.9, 1.6], [0.8, 0.7, 1.75], [1.8, 0.7, 1.5]])
ATTR_DIM_FIXED = 3 + 3 + 2  # center, size, heading sin/cos


def default_cameras() -> list[Camera]:
    return [Camera.looking(0.0, 90.0), Camera.looking(np.pi, 90.0)]


@dataclass
class SceneConfig:
    n_objects: int = 8
    bounds_lo: tuple[float, float, float] = (-16.0, -16.0, -2.0)
    bounds_hi: tuple[float, float, float] = (16.0, 16.0, 4.0)
    spawn_radius: tuple[float, float] = (3.0, 15.0)
    speed_range: tuple[float, float] = (0.0, 6.0)
    moving_fraction: float = 0.5
    n_classes: int = 3
    frame_interval: float = 0.5
    frames: int = 40
    ego_speed_range: tuple[float, float] = (0.0, 6.0)
    ego_yaw_rate: float = 0.15
    ego_segment_frames: tuple[int, int] = (4, 12)
    cameras: list[Camera] = field(default_factory=default_cameras)
    occlusion_prob: float = 0.25
    occlusion_frames: tuple[int, int] = (2, 6)
    distractors: int = 4
    token_dim: int = 32
    token_noise: float = 0.01
    point_noise: float = 0.2
    encoder_seed: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        lo, hi = np.asarray(self.bounds_lo), np.asarray(self.bounds_hi)
        problems = []
        if self.n_objects < 0:
            problems.append("n_objects < 0")
        if self.frames < 0:
            problems.append("frames < 0")
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            problems.append("bounds_hi must exceed bounds_lo on every axis")
        if not 0 < self.spawn_radius[0] < self.spawn_radius[1]:
            problems.append("spawn_radius must satisfy 0 < min < max")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            problems.append("speed_range must satisfy 0 <= min <= max")
        if not 0 <= self.ego_speed_range[0] <= self.ego_speed_range[1]:
            problems.append("ego_speed_range must satisfy 0 <= min <= max")
        if not 0.0 <= self.moving_fraction <= 1.0:
            problems.append("moving_fraction outside [0, 1]")
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            problems.append(f"n_classes must be in 1..{len(CLASS_NAMES)}")
        if self.frame_interval <= 0:
            problems.append("frame_interval must be positive")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            problems.append("occlusion_prob outside [0, 1]")
        if not 1 <= self.occlusion_frames[0] <= self.occlusion_frames[1]:
            problems.append("occlusion_frames must satisfy 1 <= min <= max")
        if not 1 <= self.ego_segment_frames[0] <= self.ego_segment_frames[1]:
            problems.append("ego_segment_frames must satisfy 1 <= min <= max")
        if self.distractors < 1:
            problems.append("distractors must be >= 1 so every frame has a token")
        if self.token_dim < self.attr_dim:
            problems.append(f"token_dim must be >= {self.attr_dim}")
        if self.token_noise < 0 or self.point_noise < 0:
            problems.append("noise levels must be non-negative")
        if not self.cameras:
            problems.append("at least one camera is required")
        if problems:
            raise ConfigError("invalid scene config: " + "; ".join(problems))

    @property
    def attr_dim(self) -> int:
        return ATTR_DIM_FIXED + self.n_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cameras"] = [c.to_dict() for c in self.cameras]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown scene config keys {sorted(unknown)}")
        if "cameras" in d:
            d["cameras"] = [c if isinstance(c, Camera) else Camera.from_dict(c) for c in d["cameras"]]
        for k in ("bounds_lo", "bounds_hi", "spawn_radius", "speed_range", "ego_speed_range",
                  "occlusion_frames", "ego_segment_frames"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ObjectState:
    id: int
    cls: int
    center: np.ndarray  # global
    size: np.ndarray
    heading: float  # global yaw
    velocity: np.ndarray  # global (vx, vy)
    visible: bool

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class": self.cls,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "heading": self.heading,
            "velocity": self.velocity.tolist(),
            "visible": self.visible,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectState":
        return cls(int(d["id"]), int(d["class"]), np.asarray(d["center"], dtype=np.float64),
                   np.asarray(d["size"], dtype=np.float64), float(d["heading"]),
                   np.asarray(d["velocity"], dtype=np.float64), bool(d["visible"]))

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass
class FrameTruth:
    index: int
    timestamp: float
    ego_pose: Pose
    objects: list[ObjectState]

    def ego_centers(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 3))
        return transform_points(rigid_inverse(self.ego_pose.matrix), np.array([o.center for o in self.objects]))


@dataclass
class TokenSet:
    tokens: np.ndarray  # [n_tok, token_dim]
    points: np.ndarray  # [n_tok, 3], ego frame
    object_ids: np.ndarray  # [n_tok], -1 for distractors

    def __len__(self) -> int:
        return self.tokens.shape[0]


# -- generation -------------------------------------------------------------

def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _in_view(p_ego: np.ndarray, cfg: SceneConfig) -> bool:
    lo, hi = np.asarray(cfg.bounds_lo), np.asarray(cfg.bounds_hi)
    if np.any(p_ego < lo) or np.any(p_ego > hi):
        return False
    return any(project_point(p_ego, cam) is not None for cam in cfg.cameras)


def _ego_trajectory(cfg: SceneConfig) -> list[Pose]:
    rng = _rng(cfg.seed, 1)
    poses = []
    x = y = yaw = 0.0
    yaw = rng.uniform(-np.pi, np.pi)
    speed = yaw_rate = 0.0
    left = 0
    dt = cfg.frame_interval
    for _ in range(cfg.frames):
        poses.append(Pose.from_yaw(yaw, x, y, 0.0))
        if left == 0:
            speed = rng.uniform(*cfg.ego_speed_range)
            yaw_rate = rng.uniform(-cfg.ego_yaw_rate, cfg.ego_yaw_rate)
            left = int(rng.integers(cfg.ego_segment_frames[0], cfg.ego_segment_frames[1] + 1))
        left -= 1
        # exact integration of a constant-speed, constant-yaw-rate arc
        if abs(yaw_rate) > 1e-12:
            x += speed / yaw_rate * (np.sin(yaw + yaw_rate * dt) - np.sin(yaw))
            y += speed / yaw_rate * (np.cos(yaw) - np.cos(yaw + yaw_rate * dt))
        else:
            x += speed * dt * np.cos(yaw)
            y += speed * dt * np.sin(yaw)
        yaw = float(np.arctan2(np.sin(yaw + yaw_rate * dt), np.cos(yaw + yaw_rate * dt)))
    return poses


class _Track:
    __slots__ = ("id", "cls", "origin", "t0", "size", "heading", "velocity", "occluded_until")

    def center_at(self, t: float) -> np.ndarray:
        dt = t - self.t0
        return self.origin + np.array([self.velocity[0] * dt, self.velocity[1] * dt, 0.0])


def _spawn(rng: np.random.Generator, cfg: SceneConfig, ego: Pose, t: float, new_id: int) -> _Track:
    for _ in range(1000):
        cam = cfg.cameras[int(rng.integers(len(cfg.cameras)))]
        r = rng.uniform(*cfg.spawn_radius)
        half = np.arctan2(cam.cx, cam.fx) * 0.9
        ang = rng.uniform(-half, half)
        cam_yaw = Pose(rigid_inverse(cam.extrinsic.matrix), validate=False).apply([0.0, 0.0, 1.0])
        center_yaw = np.arctan2(cam_yaw[1], cam_yaw[0]) + ang
        cls = int(rng.integers(cfg.n_classes))
        size = CLASS_SIZES[cls] * rng.uniform(0.9, 1.1, size=3)
        p_ego = np.array([r * np.cos(center_yaw), r * np.sin(center_yaw), size[2] / 2.0])
        if _in_view(p_ego, cfg):
            break
    else:  # pragma: no cover - spawn wedges always intersect a frustum for sane configs
        raise ConfigError("could not place an object inside any camera view")
    tr = _Track()
    tr.id = new_id
    tr.cls = cls
    tr.size = size
    tr.t0 = t
    p_glob = ego.apply(p_ego)
    tr.origin = p_glob
    moving = rng.uniform() < cfg.moving_fraction
    speed = rng.uniform(*cfg.speed_range) if moving else cfg.speed_range[0]
    direction = rng.uniform(-np.pi, np.pi)
    tr.velocity = np.array([speed * np.cos(direction), speed * np.sin(direction)])
    tr.heading = float(direction) if speed > 0 else float(rng.uniform(-np.pi, np.pi))
    tr.occluded_until = -1
    return tr


def generate_scene(config: SceneConfig) -> list[FrameTruth]:
    """Ground-truth frames for one seeded stream."""
    config.validate()
    poses = _ego_trajectory(config)
    rng = _rng(config.seed, 2)
    frames: list[FrameTruth] = []
    tracks: list[_Track] = []
    next_id = 0
    for j, ego in enumerate(poses):
        t = j * config.frame_interval
        inv = rigid_inverse(ego.matrix)
        kept = []
        for tr in tracks:
            if _in_view(transform_points(inv, tr.center_at(t)), config):
                kept.append(tr)
        tracks = kept
        while len(tracks) < config.n_objects:
            tracks.append(_spawn(rng, config, ego, t, next_id))
            tracks[-1].occluded_until = j  # newborn objects are seen on arrival
            next_id += 1
        objs = []
        for tr in tracks:
            if tr.occluded_until < j and rng.uniform() < config.occlusion_prob:
                lo, hi = config.occlusion_frames
                tr.occluded_until = j + int(rng.integers(lo, hi + 1)) - 1
            visible = not (tr.occluded_until >= j and tr.t0 != t)
            objs.append(ObjectState(tr.id, tr.cls, tr.center_at(t), tr.size.copy(), tr.heading,
                                    tr.velocity.copy(), visible))
        frames.append(FrameTruth(j, t, ego, objs))
    return frames


def code_matrix(config: SceneConfig) -> np.ndarray:
    """Fixed ``[attr_dim, token_dim]`` linear code of the stand-in backbone."""
    rng = _rng(config.encoder_seed, 99, config.attr_dim, config.token_dim)
    return rng.normal(size=(config.attr_dim, config.token_dim)) / np.sqrt(config.attr_dim)


def object_attributes(center_ego: np.ndarray, cls: int, size: np.ndarray, yaw_ego: float,
                      config: SceneConfig) -> np.ndarray:
    lo, hi = np.asarray(config.bounds_lo), np.asarray(config.bounds_hi)
    onehot = np.zeros(config.n_classes)
    onehot[cls] = 1.0
    return np.concatenate([(center_ego - lo) / (hi - lo) * 2.0 - 1.0, onehot, np.log(size),
                           [np.sin(yaw_ego), np.cos(yaw_ego)]])


def render_tokens(frame: FrameTruth, config: SceneConfig) -> TokenSet:
    """One token per (visible object, camera seeing it) plus distractors."""
    rng = _rng(config.seed, 3, frame.index)
    code = code_matrix(config)
    inv = rigid_inverse(frame.ego_pose.matrix)
    ego_yaw = frame.ego_pose.yaw
    toks, pts, ids = [], [], []
    for obj in frame.objects:
        c_ego = transform_points(inv, obj.center)
        n_cams = sum(project_point(c_ego, cam) is not None for cam in config.cameras)
        if not obj.visible:
            continue
        attr = object_attributes(c_ego, obj.cls, obj.size, obj.heading - ego_yaw, config)
        for _ in range(n_cams):
            toks.append(attr @ code + rng.normal(scale=config.token_noise, size=config.token_dim)
                        if config.token_noise > 0 else attr @ code)
            pts.append(c_ego + (rng.normal(scale=config.point_noise, size=3) if config.point_noise > 0 else 0.0))
            ids.append(obj.id)
    lo, hi = np.asarray(config.bounds_lo), np.asarray(config.bounds_hi)
    for _ in range(config.distractors):
        p = rng.uniform(lo, hi)
        attr = np.concatenate([(p - lo) / (hi - lo) * 2.0 - 1.0, np.zeros(config.n_classes),
                               rng.normal(scale=0.5, size=3), rng.normal(size=2)])
        toks.append(attr @ code + rng.normal(scale=config.token_noise, size=config.token_dim))
        pts.append(p)
        ids.append(-1)
    order = rng.permutation(len(toks))
    return TokenSet(np.array(toks)[order], np.array(pts)[order], np.array(ids, dtype=np.int64)[order])


def occluded_fraction(frames: Sequence[FrameTruth]) -> float:
    total = sum(len(f.objects) for f in frames)
    hidden = sum(not o.visible for f in frames for o in f.objects)
    return hidden / total if total else 0.0


# -- scene files ------------------------------------------------------------

def _frame_line(frame: FrameTruth, tokens: TokenSet) -> str:
    return json.dumps({
        "index": frame.index,
        "timestamp": frame.timestamp,
        "ego_pose": frame.ego_pose.matrix.reshape(-1).tolist(),
        "objects": [o.to_dict() for o in frame.objects],
        "tokens": encode_array(tokens.tokens),
        "token_points": encode_array(tokens.points),
        "token_ids": tokens.object_ids.tolist(),
    })


def write_scene(path: str | Path, frames: Sequence[FrameTruth], tokens: Sequence[TokenSet]) -> None:
    if len(frames) != len(tokens):
        raise ValueError(f"{len(frames)} frames but {len(tokens)} token sets")
    with open(path, "w", encoding="utf-8") as fh:
        for f, t in zip(frames, tokens):
            fh.write(_frame_line(f, t) + "\n")


def read_scene(path: str | Path) -> tuple[list[FrameTruth], list[TokenSet]]:
    frames, tokens = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                frame = FrameTruth(int(d["index"]), float(d["timestamp"]),
                                   Pose(np.asarray(d["ego_pose"], dtype=np.float64).reshape(4, 4)),
                                   [ObjectState.from_dict(o) for o in d["objects"]])
                ts = TokenSet(decode_array(d["tokens"]), decode_array(d["token_points"]),
                              np.asarray(d["token_ids"], dtype=np.int64))
            except ParseError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed scene line: {exc}", line=lineno) from exc
            frames.append(frame)
            tokens.append(ts)
    return frames, tokens


def simulate(config: SceneConfig) -> tuple[list[FrameTruth], list[TokenSet]]:
    frames = generate_scene(config)
    return frames, [render_tokens(f, config) for f in frames]


def scene_seeds(base: int, count: int) -> Iterable[int]:
    return (base * 1000 + i for i in range(count))
