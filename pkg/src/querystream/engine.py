"""Streaming detection engine: query propagation, hybrid attention, memory update.

One :class:`StreamEngine` owns the learned parameters plus the per-stream
state (memory queue, propagation cache, step counter).  ``step`` consumes
one frame of tokens and returns the boxes for that frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from querystream.autodiff import checkpoint
from querystream.autodiff import tensor as T
from querystream.autodiff.nn import (
    AttentionParams,
    Params,
    add_attention,
    add_linear,
    add_mlp,
    linear,
    mlp_forward,
    mlp_layers,
    multi_head_attention,
)
from querystream.autodiff.tensor import Tensor
from querystream.errors import ConfigError, EmptyInputError, OrderingError, ParseError
from querystream.geometry import Pose, relative_ego_poses, transform_points
from querystream.losses import OFFSET_SCALE
from querystream.memory import FrameBlock, MemoryQueue, MemoryView, select_block, should_save
from querystream import mln as M

REG_DIM = 10  # center offset (3), log size (3), sin/cos heading (2), velocity (2)
FOCAL_PRIOR = 0.01


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 3
    n_random: int = 64
    n_prop: int = 16
    memory_frames: int = 4  # N
    records_per_frame: int = 24  # K
    save_interval: int = 1  # tau
    n_classes: int = 3
    token_dim: int = 32
    ffn_dim: int = 128
    n_freq: int = 16
    bounds_lo: tuple[float, float, float] = (-16.0, -16.0, -2.0)
    bounds_hi: tuple[float, float, float] = (16.0, 16.0, 4.0)
    mln_hidden: bool = True
    mln_inputs: tuple[str, ...] = M.ALL_MOTION_INPUTS
    use_memory: bool = True  # hybrid attention sees stored queries
    propagate: bool = True  # last-frame queries join the decoder input
    attn_sigma: float | None = 1.0  # metres; width of the planar prior on query-token attention
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        for name in ("d", "heads", "layers", "n_random", "memory_frames", "records_per_frame",
                     "save_interval", "n_classes", "token_dim", "ffn_dim", "n_freq"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.n_prop < 0:
            problems.append("n_prop must be non-negative")
        if self.heads >= 1 and self.d % self.heads:
            problems.append(f"d={self.d} is not divisible by heads={self.heads}")
        if self.n_prop > self.records_per_frame:
            problems.append(f"n_prop={self.n_prop} exceeds K={self.records_per_frame}")
        if self.records_per_frame > self.n_random + self.n_prop:
            problems.append("K exceeds the number of decoder queries")
        if self.attn_sigma is not None and not self.attn_sigma > 0:
            problems.append("attn_sigma must be positive or null")
        if any(h <= l for l, h in zip(self.bounds_lo, self.bounds_hi)):
            problems.append("bounds_hi must exceed bounds_lo")
        unknown = set(self.mln_inputs) - set(M.ALL_MOTION_INPUTS)
        if unknown:
            problems.append(f"unknown mln inputs {sorted(unknown)}")
        if problems:
            raise ConfigError("invalid decoder config: " + "; ".join(problems))

    @classmethod
    def full_size(cls, **overrides) -> "DecoderConfig":
        """Query and memory counts of the full-size model."""
        base = dict(d=256, heads=8, layers=6, n_random=644, n_prop=256, memory_frames=4,
                    records_per_frame=256, ffn_dim=512)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DecoderConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown decoder config keys {sorted(unknown)}")
        d = dict(d)
        for k in ("bounds_lo", "bounds_hi", "mln_inputs"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def hybrid_keys(self) -> int:
        """Key count of hybrid attention once warm."""
        mem = self.memory_frames * self.records_per_frame if self.use_memory else 0
        return self.n_random + (self.n_prop if self.propagate else 0) + mem


@dataclass
class QuerySet:
    q_c: Tensor  # [n, d]
    q_pe: Tensor  # [n, d]
    anchors: Tensor  # [n, 3] normalised world coordinates

    def __len__(self) -> int:
        return self.q_c.shape[0]


@dataclass
class Box3D:
    center: np.ndarray  # ego frame
    size: np.ndarray
    heading: float  # ego frame, (-pi, pi]
    velocity: np.ndarray  # global
    scores: np.ndarray

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def score(self) -> float:
        return float(np.max(self.scores))


@dataclass
class StepOutput:
    """Everything one frame produces; tensors stay on the tape for training."""

    logits: Tensor  # [n, classes]
    reg: Tensor  # [n, REG_DIM]
    anchors: Tensor  # [n, 3]
    centers: np.ndarray  # [n, 3] ego frame
    sizes: np.ndarray
    headings: np.ndarray
    velocities: np.ndarray  # [n, 2] global
    scores: np.ndarray  # [n, classes]
    hybrid_keys: int
    n_propagated: int
    timestamp: float
    ego_pose: Pose
    aux: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # (logits, reg) of earlier layers

    @property
    def boxes(self) -> list[Box3D]:
        return [Box3D(self.centers[i], self.sizes[i], float(self.headings[i]), self.velocities[i], self.scores[i])
                for i in range(len(self.centers))]

    def __len__(self) -> int:
        return len(self.centers)


def wrap_angle(a):
    """Wrap into ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def init_params(cfg: DecoderConfig) -> Params:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    p = Params()
    p["anchors"] = rng.uniform(0.0, 1.0, size=(cfg.n_random, 3))
    M.add_position_encoder(p, "pe", cfg.d, cfg.n_freq, rng)
    M.add_mln_params(p, "mln", M.MlnSpec(cfg.d, cfg.mln_hidden, cfg.mln_inputs), rng)
    add_linear(p, "token_proj", cfg.token_dim, cfg.d, rng)
    for i in range(cfg.layers):
        add_attention(p, f"layer{i}.hybrid", cfg.d, rng)
        add_attention(p, f"layer{i}.cross", cfg.d, rng)
        add_mlp(p, f"layer{i}.ffn", (cfg.d, cfg.ffn_dim, cfg.d), rng)
    add_mlp(p, "head.cls", (cfg.d, cfg.d, cfg.n_classes), rng)
    p["head.cls.1.b"] = np.full(cfg.n_classes, -np.log((1 - FOCAL_PRIOR) / FOCAL_PRIOR))
    add_mlp(p, "head.reg", (cfg.d, cfg.d, REG_DIM), rng)
    return p


# -- stateless building blocks ---------------------------------------------

def init_queries(cfg: DecoderConfig, params: Params) -> QuerySet:
    """Learned anchors with zero context embeddings (position encoding raw)."""
    anchors = params["anchors"]
    pe = M.position_encode(anchors, params, "pe", cfg.n_freq)
    return QuerySet(Tensor(np.zeros((cfg.n_random, cfg.d))), pe, anchors)


def hybrid_attention_layer(cur: QuerySet, mem_c: Tensor | None, mem_pe: Tensor | None,
                           params: Params, name: str, heads: int, eps: float = 1e-5) -> Tensor:
    """Current queries attend to themselves plus every stored query."""
    q = T.add(cur.q_c, cur.q_pe)
    if mem_c is None or mem_c.shape[0] == 0:
        k, v = q, cur.q_c
    else:
        v = T.concat([cur.q_c, mem_c], axis=0)
        k = T.add(v, T.concat([cur.q_pe, mem_pe], axis=0))
    out = multi_head_attention(q, k, v, heads, AttentionParams.from_params(params, name))
    return T.layer_norm(T.add(cur.q_c, out), eps)


def spatial_prior(anchors_n: np.ndarray, points_n: np.ndarray, cfg: DecoderConfig) -> np.ndarray | None:
    """Additive attention logits ``-d^2 / (2 sigma^2)`` from planar query-token distance."""
    if cfg.attn_sigma is None:
        return None
    span = (np.asarray(cfg.bounds_hi) - np.asarray(cfg.bounds_lo))[:2]
    diff = (anchors_n[:, None, :2] - points_n[None, :, :2]) * span
    return -(diff ** 2).sum(axis=2) / (2.0 * cfg.attn_sigma ** 2)


def cross_attention_layer(cur: QuerySet, tokens: Tensor, token_pe: Tensor, params: Params,
                          attn_name: str, ffn_name: str, heads: int, eps: float = 1e-5,
                          bias: np.ndarray | None = None) -> Tensor:
    """Query-to-token attention over every token, then a residual feed-forward block."""
    if tokens.shape[0] == 0:
        raise EmptyInputError("cross attention needs at least one token")
    q = T.add(cur.q_c, cur.q_pe)
    k = T.add(tokens, token_pe)
    out = multi_head_attention(q, k, tokens, heads, AttentionParams.from_params(params, attn_name), bias)
    x = T.layer_norm(T.add(cur.q_c, out), eps)
    return T.layer_norm(T.add(x, mlp_forward(x, mlp_layers(params, ffn_name), "relu")), eps)


def detection_head(q_c: Tensor, q_pe: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Class logits ``[n, C]`` and raw regression ``[n, 10]``.

    The head reads context plus position encoding, so offsets can be
    expressed relative to each query's own anchor.
    """
    x = T.add(q_c, q_pe)
    return (mlp_forward(x, mlp_layers(params, "head.cls"), "relu"),
            mlp_forward(x, mlp_layers(params, "head.reg"), "relu"))


def decode_boxes(logits: np.ndarray, reg: np.ndarray, anchors: np.ndarray, cfg: DecoderConfig,
                 ego_pose: Pose) -> dict[str, np.ndarray]:
    centers = M.denormalize_points(anchors + OFFSET_SCALE * reg[:, 0:3], cfg.bounds_lo, cfg.bounds_hi)
    sizes = np.exp(reg[:, 3:6])
    headings = wrap_angle(np.arctan2(reg[:, 6], reg[:, 7]))
    r2 = ego_pose.rotation[:2, :2]
    vel_global = reg[:, 8:10] @ r2.T
    scores = 1.0 / (1.0 + np.exp(-logits))
    return {"centers": centers, "sizes": sizes, "headings": headings, "velocities": vel_global,
            "scores": scores}


def boxes_from_arrays(logits: np.ndarray, reg: np.ndarray, anchors: np.ndarray, cfg: DecoderConfig,
                      ego_pose: Pose | None = None) -> list[Box3D]:
    dec = decode_boxes(logits, reg, anchors, cfg, ego_pose or Pose.identity())
    return [Box3D(dec["centers"][i], dec["sizes"][i], float(dec["headings"][i]), dec["velocities"][i],
                  dec["scores"][i]) for i in range(len(logits))]


# -- the stateful engine ----------------------------------------------------

@dataclass
class _Cache:
    q_c: Tensor
    q_p: np.ndarray
    v: np.ndarray
    e: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return self.q_p.shape[0]


class StreamEngine:
    def __init__(self, cfg: DecoderConfig, params: Params | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.reset()

    # state ------------------------------------------------------------------
    def reset(self) -> None:
        cfg = self.cfg
        self.memory = MemoryQueue(cfg.memory_frames, cfg.records_per_frame, cfg.save_interval)
        self.cache: _Cache | None = None
        self.step_count = 0
        self.last_timestamp: float | None = None

    def detach_state(self) -> None:
        self.memory.detach()
        if self.cache is not None:
            self.cache = replace(self.cache, q_c=self.cache.q_c.detach())

    def state_records(self) -> int:
        return self.memory.n_records + (len(self.cache) if self.cache is not None else 0)

    # motion compensation ----------------------------------------------------
    def _motion_vectors(self, rel: np.ndarray, v_global: np.ndarray, dt: np.ndarray, ego: Pose) -> Tensor:
        r2 = ego.rotation[:2, :2]
        v_ego = v_global @ r2  # global -> current ego frame
        return M.mask_motion(M.motion_vector(rel, v_ego, dt), self.cfg.mln_inputs)

    def _compensate(self, q_c: Tensor, q_p: np.ndarray, v: np.ndarray, e: np.ndarray, dt: np.ndarray,
                    ego: Pose) -> tuple[Tensor, Tensor, np.ndarray]:
        cfg = self.cfg
        rel = relative_ego_poses(e, ego)
        aligned = transform_points(rel, q_p)
        aligned_n = M.normalize_points(aligned, cfg.bounds_lo, cfg.bounds_hi)
        pe_raw = M.position_encode(Tensor(aligned_n), self.params, "pe", cfg.n_freq)
        gamma, beta = M.mln_affine_params(self._motion_vectors(rel, v, dt, ego), self.params, "mln")
        c, pe = M.mln_apply(q_c, pe_raw, gamma, beta, cfg.eps)
        return c, pe, aligned_n

    def _current_mln(self, qs: QuerySet) -> QuerySet:
        n = len(qs)
        mv = M.mask_motion(M.motion_vector(np.broadcast_to(np.eye(4), (n, 4, 4)), np.zeros((n, 2)), np.zeros(n)),
                           self.cfg.mln_inputs)
        gamma, beta = M.mln_affine_params(mv, self.params, "mln")
        c, pe = M.mln_apply(qs.q_c, qs.q_pe, gamma, beta, self.cfg.eps)
        return QuerySet(c, pe, qs.anchors)

    def propagate_queries(self, ego: Pose, now: float) -> QuerySet:
        cfg = self.cfg
        if not cfg.propagate or self.cache is None or len(self.cache) == 0:
            return QuerySet(Tensor(np.zeros((0, cfg.d))), Tensor(np.zeros((0, cfg.d))), Tensor(np.zeros((0, 3))))
        c = self.cache
        q_c, pe, aligned_n = self._compensate(c.q_c, c.q_p, c.v, c.e, now - c.times, ego)
        return QuerySet(q_c, pe, Tensor(aligned_n))

    def memory_view(self, ego: Pose, now: float) -> tuple[Tensor | None, Tensor | None, MemoryView]:
        view = self.memory.gather(now, self.cfg.d)
        if not self.cfg.use_memory or len(view) == 0:
            return None, None, view
        mem_c, mem_pe, _ = self._compensate(view.q_c, view.q_p, view.v, view.e, view.dt, ego)
        return mem_c, mem_pe, view

    def encode_tokens(self, tokens, points) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        tok = linear(Tensor(tokens), self.params["token_proj.w"], self.params["token_proj.b"])
        pts = M.normalize_points(np.asarray(points, dtype=np.float64), cfg.bounds_lo, cfg.bounds_hi)
        return tok, M.position_encode(Tensor(pts), self.params, "pe", cfg.n_freq)

    # one frame ---------------------------------------------------------------
    def step(self, tokens, token_points, ego_pose: Pose, now: float, aux: bool = False) -> StepOutput:
        """Process one frame.  ``aux`` also decodes every intermediate layer."""
        cfg = self.cfg
        if self.last_timestamp is not None and not now > self.last_timestamp:
            raise OrderingError(f"frame time {now} does not advance past {self.last_timestamp}")
        tok, tok_pe = self.encode_tokens(tokens, token_points)

        # (1) motion compensation of everything in memory
        mem_c, mem_pe, _ = self.memory_view(ego_pose, now)

        # (2) decoder input: learned queries followed by propagated ones
        init = self._current_mln(init_queries(cfg, self.params))
        prop = self.propagate_queries(ego_pose, now)
        if len(prop):
            cur = QuerySet(T.concat([init.q_c, prop.q_c]), T.concat([init.q_pe, prop.q_pe]),
                           T.concat([init.anchors, prop.anchors]))
        else:
            cur = init

        # (3) spatial-temporal interaction
        n_keys = len(cur) + (0 if mem_c is None else mem_c.shape[0])
        pts_n = M.normalize_points(np.asarray(token_points, dtype=np.float64), cfg.bounds_lo, cfg.bounds_hi)
        prior = spatial_prior(cur.anchors.data, pts_n, cfg)
        aux_out = []
        for i in range(cfg.layers):
            if aux and i > 0:
                aux_out.append(detection_head(cur.q_c, cur.q_pe, self.params))
            q_c = hybrid_attention_layer(cur, mem_c, mem_pe, self.params, f"layer{i}.hybrid", cfg.heads, cfg.eps)
            cur = QuerySet(q_c, cur.q_pe, cur.anchors)
            q_c = cross_attention_layer(cur, tok, tok_pe, self.params, f"layer{i}.cross", f"layer{i}.ffn",
                                        cfg.heads, cfg.eps, prior)
            cur = QuerySet(q_c, cur.q_pe, cur.anchors)

        # (4) head and memory update
        logits, reg = detection_head(cur.q_c, cur.q_pe, self.params)
        dec = decode_boxes(logits.data, reg.data, cur.anchors.data, cfg, ego_pose)
        best = dec["scores"].max(axis=1)
        block = select_block(cur.q_c, dec["centers"], dec["velocities"], ego_pose, now, best,
                             cfg.records_per_frame)
        if should_save(self.step_count, cfg.save_interval):
            self.memory.push_frame(block)
        n_cache = min(cfg.n_prop, len(block))
        self.cache = _Cache(T.take_rows(block.q_c, np.arange(n_cache)), block.q_p[:n_cache], block.v[:n_cache],
                            block.e[:n_cache], block.times[:n_cache]) if n_cache else None
        self.step_count += 1
        self.last_timestamp = float(now)
        return StepOutput(logits, reg, cur.anchors, dec["centers"], dec["sizes"], dec["headings"],
                          dec["velocities"], dec["scores"], n_keys, len(prop), float(now), ego_pose, aux_out)

    # persistence -------------------------------------------------------------
    def state_dict(self) -> dict[str, Any]:
        cache = None
        if self.cache is not None:
            c = self.cache
            cache = {"q_c": checkpoint.encode_array(c.q_c.data), "q_p": checkpoint.encode_array(c.q_p),
                     "v": checkpoint.encode_array(c.v), "e": checkpoint.encode_array(c.e),
                     "times": checkpoint.encode_array(c.times)}
        return {"memory": self.memory.snapshot(), "cache": cache, "step_count": self.step_count,
                "last_timestamp": self.last_timestamp}

    def load_state_dict(self, d: dict[str, Any]) -> None:
        self.memory = MemoryQueue.from_snapshot(d["memory"])
        c = d.get("cache")
        self.cache = None if c is None else _Cache(
            Tensor(checkpoint.decode_array(c["q_c"])), checkpoint.decode_array(c["q_p"]),
            checkpoint.decode_array(c["v"]), checkpoint.decode_array(c["e"]), checkpoint.decode_array(c["times"]))
        self.step_count = int(d["step_count"])
        ts = d.get("last_timestamp")
        self.last_timestamp = None if ts is None else float(ts)

    def save(self, path: str | Path, include_state: bool = True, extra: dict[str, Any] | None = None) -> None:
        meta = {"kind": "engine", "config": self.cfg.to_dict(), "state": self.state_dict() if include_state else None}
        if extra:
            meta["extra"] = extra
        checkpoint.save(path, self.params.arrays(), meta)

    @classmethod
    def load(cls, path: str | Path, with_state: bool = True) -> "StreamEngine":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "engine":
            raise ParseError(f"{path} is not an engine checkpoint")
        cfg = DecoderConfig.from_dict(meta["config"])
        eng = cls(cfg)
        eng.params.load_arrays(arrays)
        if with_state and meta.get("state"):
            eng.load_state_dict(meta["state"])
        return eng


def memoryless_decode(cfg: DecoderConfig, params: Params, tokens, token_points) -> tuple[Tensor, Tensor]:
    """Single-frame decoder pass with no temporal branches; a reference for cold starts."""
    tok = linear(Tensor(tokens), params["token_proj.w"], params["token_proj.b"])
    pts = M.normalize_points(np.asarray(token_points, dtype=np.float64), cfg.bounds_lo, cfg.bounds_hi)
    tok_pe = M.position_encode(Tensor(pts), params, "pe", cfg.n_freq)
    n = cfg.n_random
    anchors = params["anchors"]
    prior = spatial_prior(anchors.data, pts, cfg)
    pe_raw = M.position_encode(anchors, params, "pe", cfg.n_freq)
    mv = M.mask_motion(M.motion_vector(np.broadcast_to(np.eye(4), (n, 4, 4)), np.zeros((n, 2)), np.zeros(n)),
                       cfg.mln_inputs)
    gamma, beta = M.mln_affine_params(mv, params, "mln")
    q_c, q_pe = M.mln_apply(Tensor(np.zeros((n, cfg.d))), pe_raw, gamma, beta, cfg.eps)
    for i in range(cfg.layers):
        # plain self-attention over the current queries
        q = T.add(q_c, q_pe)
        sa = multi_head_attention(q, q, q_c, cfg.heads, AttentionParams.from_params(params, f"layer{i}.hybrid"))
        q_c = T.layer_norm(T.add(q_c, sa), cfg.eps)
        ca = multi_head_attention(T.add(q_c, q_pe), T.add(tok, tok_pe), tok, cfg.heads,
                                  AttentionParams.from_params(params, f"layer{i}.cross"), prior)
        x = T.layer_norm(T.add(q_c, ca), cfg.eps)
        q_c = T.layer_norm(T.add(x, mlp_forward(x, mlp_layers(params, f"layer{i}.ffn"), "relu")), cfg.eps)
    return detection_head(q_c, q_pe, params)
