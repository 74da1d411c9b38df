"""Parameter containers and the small neural building blocks built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.tensor import Tensor
from querystream.errors import ConfigError, EmptyInputError, ShapeError

ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "identity": lambda x: x,
}


class Params:
    """Ordered name -> leaf tensor map.  Names are dotted paths."""

    def __init__(self) -> None:
        self._items: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._items[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def group(self, prefix: str) -> list[Tensor]:
        return [t for k, t in self._items.items() if k == prefix or k.startswith(prefix + ".")]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._items.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._items) - set(arrays)
        extra = set(arrays) - set(self._items)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in arrays.items():
            if arr.shape != self._items[k].shape:
                raise ShapeError(f"checkpoint tensor {k}: shape {arr.shape} != {self._items[k].shape}")
            self._items[k].data = np.array(arr, dtype=np.float64)

    def n_values(self) -> int:
        return sum(t.data.size for t in self._items.values())


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def add_linear(params: Params, name: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    params[f"{name}.w"] = uniform_init(rng, (d_in, d_out), d_in)
    params[f"{name}.b"] = uniform_init(rng, (d_out,), d_in)


def add_mlp(params: Params, name: str, dims: Sequence[int], rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        add_linear(params, f"{name}.{i}", dims[i], dims[i + 1], rng)


def mlp_layers(params: Params, name: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"{name}.{i}.w" in params:
        layers.append((params[f"{name}.{i}.w"], params[f"{name}.{i}.b"]))
        i += 1
    if not layers:
        raise ConfigError(f"no MLP named {name!r}")
    return layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of a 2-D input."""
    if x.ndim != 2:
        raise ShapeError(f"linear expects a 2-D input, got {x.shape}")
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]], activation: str = "relu") -> Tensor:
    """Affine + activation for every hidden layer; the last layer is affine only."""
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ConfigError(f"unknown activation {activation!r}") from None
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"mlp layer {i}: input width {x.shape[-1]} does not match weight {w.shape}")
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = act(x)
    return x


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def from_params(cls, params: Params, name: str) -> "AttentionParams":
        return cls(*(params[f"{name}.{p}.{s}"] for p in "qkvo" for s in "wb"))


def add_attention(params: Params, name: str, d: int, rng: np.random.Generator) -> None:
    for p in "qkvo":
        add_linear(params, f"{name}.{p}", d, d, rng)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, p: AttentionParams,
                         bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with input and output projections.

    ``bias`` is an optional constant ``[n_q, n_k]`` added to every head's
    logits before the softmax.
    """
    n_q, d = q.shape
    n_k = k.shape[0]
    if d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    if n_k == 0:
        raise EmptyInputError("attention needs at least one key")
    if k.shape != v.shape or k.shape[1] != d:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    dh = d // heads
    qh = T.transpose(T.reshape(linear(q, p.wq, p.bq), (n_q, heads, dh)), (1, 0, 2))
    kh = T.transpose(T.reshape(linear(k, p.wk, p.bk), (n_k, heads, dh)), (1, 2, 0))
    vh = T.transpose(T.reshape(linear(v, p.wv, p.bv), (n_k, heads, dh)), (1, 0, 2))
    logits = T.mul(T.matmul(qh, kh), 1.0 / np.sqrt(dh))
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (n_q, n_k):
            raise ShapeError(f"attention bias has shape {b.shape}, expected {(n_q, n_k)}")
        logits = T.add(logits, Tensor(np.broadcast_to(b, (heads, n_q, n_k)).copy()))
    attn = T.softmax_rows(logits)
    out = T.reshape(T.transpose(T.matmul(attn, vh), (1, 0, 2)), (n_q, d))
    return linear(out, p.wo, p.bo)
