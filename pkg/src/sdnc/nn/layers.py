"""Transformer building blocks on top of :mod:`sdnc.nn.autodiff`."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


class ModelParams:
    """Named parameter tensors with gradient slots. Names are unique and shapes fixed."""

    def __init__(self) -> None:
        self._p: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def tensors(self) -> list[Tensor]:
        return list(self._p.values())

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._p.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self._p.values())

    def astype(self, dtype) -> ModelParams:
        out = ModelParams()
        for k, t in self._p.items():
            out.add(k, t.data.astype(dtype))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._p.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._p):
            missing = set(self._p) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, t in self._p.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.data = v.astype(t.data.dtype)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean (queries x keys) matrix; True means the key may be attended to."""

    allow: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2:
            raise ValueError("attention mask must be 2-D")
        bad = np.flatnonzero(~a.any(axis=1))
        if len(bad):
            raise ValueError(f"query rows {bad.tolist()} have no allowed key")
        a.flags.writeable = False
        object.__setattr__(self, "allow", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.allow.shape

    def additive(self, dtype=np.float64) -> np.ndarray:
        return np.where(self.allow, 0.0, NEG_INF).astype(dtype)

    @classmethod
    def full(cls, nq: int, nk: int) -> AttentionMask:
        return cls(np.ones((nq, nk), dtype=bool))

    @classmethod
    def causal(cls, n: int) -> AttentionMask:
        return cls(np.tril(np.ones((n, n), dtype=bool)))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_linear(params: ModelParams, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params.add(f"{name}.w", glorot(rng, n_in, n_out))
    params.add(f"{name}.b", np.zeros(n_out))


def init_layer_norm(params: ModelParams, name: str, dim: int) -> None:
    params.add(f"{name}.g", np.ones(dim))
    params.add(f"{name}.b", np.zeros(dim))


def init_attention(params: ModelParams, name: str, dim: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", dim, dim, rng)


def init_ffn(params: ModelParams, name: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", dim, hidden, rng)
    init_linear(params, f"{name}.fc2", hidden, dim, rng)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, g, b, eps)


def apply_linear(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return linear(x, params[f"{name}.w"], params[f"{name}.b"])


def apply_layer_norm(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: ModelParams,
    name: str,
    num_heads: int,
    mask: AttentionMask | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention of (Nq, d) queries over (Nk, d) keys/values.

    ``bias``, if given, is added to the (heads, Nq, Nk) scores before masking.
    """
    nq, d = q_in.shape
    nk = kv_in.shape[0]
    if d % num_heads:
        raise ValueError(f"model dim {d} not divisible by {num_heads} heads")
    if kv_in.shape[1] != d:
        raise ValueError(f"query dim {d} != key dim {kv_in.shape[1]}")
    if mask is not None and mask.shape != (nq, nk):
        raise ValueError(f"mask shape {mask.shape} != ({nq}, {nk})")
    dk = d // num_heads

    def heads(x: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (n, num_heads, dk)), (1, 0, 2))

    q = heads(apply_linear(params, f"{name}.q", q_in), nq)
    k = heads(apply_linear(params, f"{name}.k", kv_in), nk)
    v = heads(apply_linear(params, f"{name}.v", kv_in), nk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    if bias is not None:
        scores = ad.add(scores, bias)
    weights = ad.masked_softmax(scores, None if mask is None else mask.additive(scores.dtype))
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (nq, d))
    return apply_linear(params, f"{name}.o", ctx)


def feed_forward(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return apply_linear(params, f"{name}.fc2", ad.gelu(apply_linear(params, f"{name}.fc1", x)))


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
