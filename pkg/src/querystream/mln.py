"""Motion-aware layer normalisation and the 3-D position encoder.

Motion attributes (relative ego pose, velocity, time gap) are mapped by two
small networks to per-record scale and shift vectors, which then modulate the
affine-free layer norm of both the context embedding and the position
encoding of that record.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.nn import Params, add_linear, mlp_forward, mlp_layers, uniform_init
from querystream.autodiff.tensor import Tensor
from querystream.errors import ConfigError, ShapeError
from querystream.geometry import Pose

MOTION_DIM = 15
MOTION_SLOTS = {
    "ego": slice(0, 12),
    "velocity": slice(12, 14),
    "time": slice(14, 15),
}
ALL_MOTION_INPUTS = ("ego", "time", "velocity")


def motion_vector(rel, v, dt) -> Tensor:
    """``[R row-major (9), t (3), vx, vy, dt]`` per record.

    ``rel`` is a :class:`Pose`, a ``[4, 4]`` or a ``[M, 4, 4]`` array; ``v`` and
    ``dt`` follow the same leading shape.
    """
    m = rel.matrix if isinstance(rel, Pose) else np.asarray(rel, dtype=np.float64)
    lead = m.shape[:-2]
    out = np.empty(lead + (MOTION_DIM,))
    out[..., 0:9] = m[..., :3, :3].reshape(lead + (9,))
    out[..., 9:12] = m[..., :3, 3]
    out[..., 12:14] = np.asarray(v, dtype=np.float64).reshape(lead + (2,))
    out[..., 14] = np.asarray(dt, dtype=np.float64).reshape(lead)
    return Tensor(out)


def mask_motion(mv: Tensor, inputs: Sequence[str]) -> Tensor:
    """Zero the slots of motion attributes that are not in ``inputs``."""
    unknown = set(inputs) - set(ALL_MOTION_INPUTS)
    if unknown:
        raise ConfigError(f"unknown motion inputs {sorted(unknown)}")
    if set(inputs) == set(ALL_MOTION_INPUTS):
        return mv
    keep = np.zeros(MOTION_DIM)
    for name in inputs:
        keep[MOTION_SLOTS[name]] = 1.0
    return Tensor(mv.data * keep)


@dataclass(frozen=True)
class MlnSpec:
    d: int
    hidden: bool = True  # one ReLU hidden layer of width d; False -> single linear map
    inputs: tuple[str, ...] = ALL_MOTION_INPUTS


def add_mln_params(params: Params, name: str, spec: MlnSpec, rng: np.random.Generator) -> None:
    """Scale network starts at the constant 1, shift network at 0."""
    for net, bias in (("xi1", 1.0), ("xi2", 0.0)):
        if spec.hidden:
            add_linear(params, f"{name}.{net}.0", MOTION_DIM, spec.d, rng)
            last, fan = f"{name}.{net}.1", spec.d
        else:
            last, fan = f"{name}.{net}.0", MOTION_DIM
        params[f"{last}.w"] = np.zeros((fan, spec.d))
        params[f"{last}.b"] = np.full(spec.d, bias)


def mln_affine_params(mv: Tensor, params: Params, name: str) -> tuple[Tensor, Tensor]:
    if mv.shape[-1] != MOTION_DIM:
        raise ShapeError(f"motion vectors must have width {MOTION_DIM}, got {mv.shape}")
    gamma = mlp_forward(mv, mlp_layers(params, f"{name}.xi1"), "relu")
    beta = mlp_forward(mv, mlp_layers(params, f"{name}.xi2"), "relu")
    return gamma, beta


def mln_apply(q_c: Tensor, pe_raw: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """``gamma * LN(x) + beta`` on both streams with the same modulation."""
    if not (q_c.shape == pe_raw.shape == gamma.shape == beta.shape):
        raise ShapeError(
            f"mln_apply shapes differ: q_c {q_c.shape}, pe {pe_raw.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    out_c = T.add(T.mul(gamma, T.layer_norm(q_c, eps)), beta)
    out_pe = T.add(T.mul(gamma, T.layer_norm(pe_raw, eps)), beta)
    return out_c, out_pe


# -- position encoding ------------------------------------------------------

MAX_OCTAVE = 4.0
Z_SHRINK = 0.25  # vertical extent is small, keep vertical frequencies low


def frequency_matrix(n_freq: int) -> np.ndarray:
    """``[3, 3 * n_freq]`` map from coordinates to sinusoid angles.

    Columns are fixed pseudo-random directions whose norms are spaced
    geometrically from pi to ``pi * 2**MAX_OCTAVE``.  Mixing axes makes the
    inner product of two encodings fall off with planar distance rather than
    per axis.
    """
    m = 3 * n_freq
    rng = np.random.default_rng(20240)
    dirs = rng.normal(size=(3, m))
    dirs[2] *= Z_SHRINK
    dirs /= np.linalg.norm(dirs, axis=0)
    radii = np.pi * 2.0 ** np.linspace(0.0, MAX_OCTAVE, m)
    return dirs * radii


def add_position_encoder(params: Params, name: str, d: int, n_freq: int, rng: np.random.Generator) -> None:
    width = 6 * n_freq
    params[f"{name}.0.w"] = uniform_init(rng, (width, d), width)
    params[f"{name}.0.b"] = uniform_init(rng, (d,), width)
    params[f"{name}.1.w"] = uniform_init(rng, (d, d), d)
    params[f"{name}.1.b"] = uniform_init(rng, (d,), d)


def normalize_points(points, lo, hi):
    """Map world coordinates into ``[0, 1]`` per axis (works on tensors too)."""
    lo = np.asarray(lo, dtype=np.float64)
    span = np.asarray(hi, dtype=np.float64) - lo
    if isinstance(points, Tensor):
        return T.mul(T.add(points, Tensor(-lo)), Tensor(1.0 / span))
    return (np.asarray(points, dtype=np.float64) - lo) / span


def denormalize_points(points, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    span = np.asarray(hi, dtype=np.float64) - lo
    if isinstance(points, Tensor):
        return T.add(T.mul(points, Tensor(span)), Tensor(lo))
    return np.asarray(points, dtype=np.float64) * span + lo


def position_encode(points_norm: Tensor, params: Params, name: str, n_freq: int) -> Tensor:
    """Sinusoidal expansion of normalised points followed by a 2-layer MLP."""
    pts = points_norm if isinstance(points_norm, Tensor) else Tensor(points_norm)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"position_encode expects [n, 3] points, got {pts.shape}")
    angles = T.matmul(pts, Tensor(frequency_matrix(n_freq)))
    feats = T.concat([T.sin(angles), T.cos(angles)], axis=1)
    return mlp_forward(feats, mlp_layers(params, name), "relu")
