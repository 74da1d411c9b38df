"""Competing temporal-fusion formulations and a latency/state benchmark.

Dense BEV fusion (warp, concatenate or recurrent mixing) and perspective
temporal fusion (cross-attention repeated over stored frames) are tiny
reference implementations; they exist to show how per-step cost and state
scale with history, not to be accurate detectors.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.nn import AttentionParams, Params, add_attention, add_mlp, mlp_forward, mlp_layers, \
    multi_head_attention
from querystream.autodiff.tensor import Tensor, no_tape
from querystream.engine import DecoderConfig, QuerySet, StreamEngine, init_queries
from querystream.errors import ConfigError, ShapeError
from querystream.geometry import Pose

CSV_FIELDS = ("method", "history", "latency_us_median", "latency_us_p90", "state_bytes")
BYTES = 8  # float64


# -- dense BEV ----------------------------------------------------------------

@dataclass
class BevGrid:
    """``data`` is ``[C, H, W]``; rows run along y, columns along x, centred on the ego."""

    data: np.ndarray
    cell: float = 1.0  # metres per cell

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"BEV grid needs positive [C, H, W], got {self.data.shape}")
        if not self.cell > 0:
            raise ConfigError("cell size must be positive")
        if not np.isfinite(self.data).all():
            raise ShapeError("BEV grid holds non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.size * BYTES

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        _, h, w = self.shape
        xs = (np.arange(w) + 0.5 - w / 2) * self.cell
        ys = (np.arange(h) + 0.5 - h / 2) * self.cell
        return np.meshgrid(xs, ys)


def _planar(rel: Pose) -> tuple[float, np.ndarray]:
    r = rel.rotation
    return float(np.arctan2(r[1, 0], r[0, 0])), rel.t[:2].copy()


def bev_warp(prev: BevGrid, rel: Pose) -> BevGrid:
    """Resample ``prev`` into the current frame; ``rel`` maps old ego coordinates to new ones."""
    _, h, w = prev.shape
    yaw, t = _planar(rel)
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = prev.cell_centers()
    # inverse planar transform: old = R^T (new - t)
    dx, dy = x - t[0], y - t[1]
    ox = c * dx + s * dy
    oy = -s * dx + c * dy
    fx = ox / prev.cell + w / 2 - 0.5 + 1.0  # +1 for the zero border
    fy = oy / prev.cell + h / 2 - 0.5 + 1.0
    fx = np.clip(fx, 0.0, w + 1.0)
    fy = np.clip(fy, 0.0, h + 1.0)
    padded = np.pad(prev.data, ((0, 0), (1, 1), (1, 1)))
    x0 = np.clip(np.floor(fx).astype(int), 0, w + 1)
    y0 = np.clip(np.floor(fy).astype(int), 0, h + 1)
    x1 = np.minimum(x0 + 1, w + 1)
    y1 = np.minimum(y0 + 1, h + 1)
    ax = fx - x0
    ay = fy - y0
    out = (padded[:, y0, x0] * ((1 - ax) * (1 - ay)) + padded[:, y0, x1] * (ax * (1 - ay))
           + padded[:, y1, x0] * ((1 - ax) * ay) + padded[:, y1, x1] * (ax * ay))
    return BevGrid(out, prev.cell)


@dataclass
class Mixer:
    """1x1 channel projection ``[C_out, C_in]`` plus bias."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def random(cls, channels: int, inputs: int, seed: int = 0) -> "Mixer":
        rng = np.random.default_rng(seed)
        c_in = channels * inputs
        return cls(rng.uniform(-1, 1, (channels, c_in)) / np.sqrt(c_in), np.zeros(channels))


def _check_geometry(grids: Sequence[BevGrid]) -> None:
    ref = grids[0]
    for g in grids[1:]:
        if g.shape[1:] != ref.shape[1:] or g.cell != ref.cell:
            raise ShapeError(f"BEV geometry mismatch: {g.shape}@{g.cell} vs {ref.shape}@{ref.cell}")


def bev_fuse_concat(history: Sequence[BevGrid], cur: BevGrid, mixer: Mixer) -> BevGrid:
    """Concatenate current and aligned history channels, project back to C channels."""
    grids = [cur, *history]
    _check_geometry(grids)
    stacked = np.concatenate([g.data for g in grids], axis=0)
    if mixer.weight.shape[1] != stacked.shape[0]:
        raise ShapeError(f"mixer expects {mixer.weight.shape[1]} channels, got {stacked.shape[0]}")
    out = np.einsum("oc,chw->ohw", mixer.weight, stacked) + mixer.bias[:, None, None]
    return BevGrid(out, cur.cell)


def bev_fuse_recurrent(hidden: BevGrid, cur: BevGrid, mixer: Mixer) -> BevGrid:
    """Mix current features with the hidden grid; the result is the next hidden grid."""
    return bev_fuse_concat([hidden], cur, mixer)


# -- perspective temporal fusion -------------------------------------------------

@dataclass
class TokenHistory:
    """Ring of the last ``k`` frames of (token features, token position encodings)."""

    k: int
    frames: deque = field(default_factory=deque)

    def push(self, tokens: Tensor, pe: Tensor) -> None:
        if self.k == 0:
            return
        self.frames.append((tokens, pe))
        while len(self.frames) > self.k:
            self.frames.popleft()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def nbytes(self) -> int:
        return sum((t.data.size + p.data.size) * BYTES for t, p in self.frames)


def perspective_contributions(queries: QuerySet, history: TokenHistory, tokens: Tensor, token_pe: Tensor,
                              params: Params, attn_name: str, heads: int) -> list[Tensor]:
    """Per-frame attention outputs, current frame first."""
    q = T.add(queries.q_c, queries.q_pe)
    p = AttentionParams.from_params(params, attn_name)
    return [multi_head_attention(q, T.add(tok, pe), tok, heads, p)
            for tok, pe in [(tokens, token_pe), *history.frames]]


def perspective_temporal(queries: QuerySet, history: TokenHistory, tokens: Tensor, token_pe: Tensor,
                         params: Params, attn_name: str, ffn_name: str, heads: int, eps: float = 1e-5) -> Tensor:
    """Summed cross-attention over the current and every stored frame, then residual, LN and FFN."""
    if len(history) != history.k:
        raise ShapeError(f"token history holds {len(history)} frames, expected {history.k}")
    parts = perspective_contributions(queries, history, tokens, token_pe, params, attn_name, heads)
    total = parts[0]
    for part in parts[1:]:
        total = T.add(total, part)
    x = T.layer_norm(T.add(queries.q_c, total), eps)
    return T.layer_norm(T.add(x, mlp_forward(x, mlp_layers(params, ffn_name), "relu")), eps)


# -- benchmark -------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    n_tokens: int = 2000
    bev_channels: int = 16
    bev_size: int = 32
    trials: int = 15
    warmup: int = 3
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


def random_frame(rng: np.random.Generator, cfg: DecoderConfig, n_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.asarray(cfg.bounds_lo), np.asarray(cfg.bounds_hi)
    return rng.normal(size=(n_tokens, cfg.token_dim)), rng.uniform(lo, hi, size=(n_tokens, 3))


def ego_pose_at(i: int) -> Pose:
    return Pose.from_yaw(0.01 * i, x=0.5 * i, y=0.05 * i)


def stream_latencies(engine: StreamEngine, n_steps: int, n_tokens: int, seed: int = 0) -> np.ndarray:
    """Wall time in seconds of each ``step`` call over one synthetic stream."""
    rng = np.random.default_rng(seed)
    frames = [random_frame(rng, engine.cfg, n_tokens) for _ in range(min(n_steps, 8))]
    engine.reset()
    out = np.empty(n_steps)
    with no_tape():
        for i in range(n_steps):
            tok, pts = frames[i % len(frames)]
            t0 = time.perf_counter()
            engine.step(tok, pts, ego_pose_at(i), 0.5 * i)
            out[i] = time.perf_counter() - t0
    engine.reset()
    return out


def position_latencies(engine: StreamEngine, positions: Sequence[int], repeats: int, n_tokens: int,
                       seed: int = 0) -> dict[int, np.ndarray]:
    """Per-step wall time at given stream positions.

    The stream runs once to record the engine state before each position;
    the step at each position is then re-timed ``repeats`` times from that
    state, cycling through positions (alternating direction) so slow drift in
    machine load hits all of them alike.
    """
    rng = np.random.default_rng(seed)
    frames = [random_frame(rng, engine.cfg, n_tokens) for _ in range(8)]
    wanted = sorted(set(positions))
    states = {}
    engine.reset()
    with no_tape():
        for i in range(wanted[-1] + 1):
            if i in wanted:
                states[i] = engine.state_dict()
            tok, pts = frames[i % len(frames)]
            engine.step(tok, pts, ego_pose_at(i), 0.5 * i)
        out = {p: np.empty(repeats) for p in wanted}
        for r in range(repeats):
            for p in (wanted if r % 2 == 0 else wanted[::-1]):
                engine.load_state_dict(states[p])
                tok, pts = frames[p % len(frames)]
                t0 = time.perf_counter()
                engine.step(tok, pts, ego_pose_at(p), 0.5 * p)
                out[p][r] = time.perf_counter() - t0
    engine.reset()
    return out


def memory_latencies(cfg: BenchConfig, lengths: Sequence[int], repeats: int) -> dict[int, np.ndarray]:
    """Per-step wall time of the object-centric engine with a full memory of each length.

    Same round-robin re-timing as ``position_latencies``, across memory lengths.
    """
    rng = np.random.default_rng(cfg.seed)
    frames = [random_frame(rng, cfg.decoder, cfg.n_tokens) for _ in range(8)]
    engines, states = {}, {}
    with no_tape():
        for n in sorted(set(lengths)):
            eng = StreamEngine(DecoderConfig.from_dict({**cfg.decoder.to_dict(), "memory_frames": n}))
            warm = n + cfg.warmup
            for i in range(warm):
                tok, pts = frames[i % len(frames)]
                eng.step(tok, pts, ego_pose_at(i), 0.5 * i)
            engines[n], states[n] = eng, (warm, eng.state_dict())
        out = {n: np.empty(repeats) for n in engines}
        order = list(engines)
        for r in range(repeats):
            for n in (order if r % 2 == 0 else order[::-1]):
                eng = engines[n]
                p, state = states[n]
                eng.load_state_dict(state)
                tok, pts = frames[p % len(frames)]
                t0 = time.perf_counter()
                eng.step(tok, pts, ego_pose_at(p), 0.5 * p)
                out[n][r] = time.perf_counter() - t0
    return out


def object_state_bytes(cfg: DecoderConfig) -> int:
    """Memory queue plus propagation cache: context, centre, velocity, pose and time per record."""
    per_record = cfg.d + 3 + 2 + 16 + 1
    return (cfg.memory_frames * cfg.records_per_frame + cfg.n_prop) * per_record * BYTES


def perspective_state_bytes(cfg: DecoderConfig, k: int, n_tokens: int) -> int:
    return k * n_tokens * 2 * cfg.d * BYTES


def bev_state_bytes(channels: int, size: int, k: int) -> int:
    return k * channels * size * size * BYTES


class _PerspectiveModel:
    def __init__(self, cfg: DecoderConfig, seed: int, k: int):
        self.engine = StreamEngine(cfg)
        self.cfg = cfg
        params = self.engine.params
        rng = np.random.default_rng(seed)
        add_attention(params, "persp.cross", cfg.d, rng)
        add_mlp(params, "persp.ffn", [cfg.d, cfg.ffn_dim, cfg.d], rng)
        self.history = TokenHistory(k)
        self.queries = init_queries(cfg, params)

    def step(self, tokens, points) -> Tensor:
        tok, pe = self.engine.encode_tokens(tokens, points)
        out = perspective_temporal(self.queries, self.history, tok, pe, self.engine.params, "persp.cross",
                                   "persp.ffn", self.cfg.heads, self.cfg.eps)
        self.history.push(tok, pe)
        return out


def _summary(times: np.ndarray) -> tuple[float, float]:
    us = np.asarray(times) * 1e6
    return float(np.median(us)), float(np.percentile(us, 90))


def bench_object(cfg: BenchConfig, n_memory: int) -> dict:
    dcfg = DecoderConfig.from_dict({**cfg.decoder.to_dict(), "memory_frames": n_memory})
    eng = StreamEngine(dcfg)
    warm = n_memory + cfg.warmup
    times = stream_latencies(eng, warm + cfg.trials, cfg.n_tokens, cfg.seed)[warm:]
    med, p90 = _summary(times)
    return {"method": "object_centric", "history": n_memory, "latency_us_median": med, "latency_us_p90": p90,
            "state_bytes": object_state_bytes(dcfg)}


def bench_perspective(cfg: BenchConfig, k: int) -> dict:
    model = _PerspectiveModel(cfg.decoder, cfg.seed, k)
    rng = np.random.default_rng(cfg.seed)
    frames = [random_frame(rng, cfg.decoder, cfg.n_tokens) for _ in range(4)]
    times = []
    with no_tape():
        for i in range(k):
            model.history.push(*model.engine.encode_tokens(*frames[i % len(frames)]))
        for i in range(cfg.warmup + cfg.trials):
            tok, pts = frames[i % len(frames)]
            t0 = time.perf_counter()
            model.step(tok, pts)
            if i >= cfg.warmup:
                times.append(time.perf_counter() - t0)
    med, p90 = _summary(np.array(times))
    return {"method": "perspective", "history": k, "latency_us_median": med, "latency_us_p90": p90,
            "state_bytes": perspective_state_bytes(cfg.decoder, k, cfg.n_tokens)}


def bench_bev(cfg: BenchConfig, k: int, recurrent: bool) -> dict:
    rng = np.random.default_rng(cfg.seed)
    c, s = cfg.bev_channels, cfg.bev_size
    grid = lambda: BevGrid(rng.normal(size=(c, s, s)), 1.0)
    rel = Pose.from_yaw(0.02, x=0.4, y=0.1)
    if recurrent:
        mixer = Mixer.random(c, 2, cfg.seed)
        hidden = grid()
    else:
        mixer = Mixer.random(c, k + 1, cfg.seed)
        history = deque([grid() for _ in range(k)], maxlen=k)
    times = []
    for i in range(cfg.warmup + cfg.trials):
        cur = grid()
        t0 = time.perf_counter()
        if recurrent:
            hidden = bev_fuse_recurrent(bev_warp(hidden, rel), cur, mixer)
        else:
            bev_fuse_concat([bev_warp(g, rel) for g in history], cur, mixer)
            if k:
                history.append(cur)
        if i >= cfg.warmup:
            times.append(time.perf_counter() - t0)
    med, p90 = _summary(np.array(times))
    state = bev_state_bytes(c, s, 1 if recurrent else k)
    return {"method": "bev_recurrent" if recurrent else "bev_concat", "history": k, "latency_us_median": med,
            "latency_us_p90": p90, "state_bytes": state}


METHODS = ("object_centric", "perspective", "bev_concat", "bev_recurrent")


def benchmark(methods: Sequence[str] = METHODS, histories: Sequence[int] = (1, 4), cfg: BenchConfig = BenchConfig()
              ) -> list[dict]:
    """One row per (method, history length); methods run one after another in this thread."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown benchmark methods {sorted(unknown)}")
    rows = []
    for m in methods:
        for k in histories:
            if m == "object_centric":
                rows.append(bench_object(cfg, max(1, k)))
            elif m == "perspective":
                rows.append(bench_perspective(cfg, k))
            else:
                rows.append(bench_bev(cfg, k, m == "bev_recurrent"))
    return rows


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_FIELDS})
