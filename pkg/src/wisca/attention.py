"""Reference forward passes: multi-head / grouped-query attention and LoRA.

Weights follow the row-vector convention ``y = x @ W + b``. Projections into
head space are split into contiguous column blocks of ``head_dim``; query
head ``h`` reads key/value head ``h // group_factor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError
from .tensor import Matrix, as_matrix, softmax_last_axis


@dataclass(frozen=True)
class AttentionLayout:
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    has_bias: bool = False

    def __post_init__(self):
        for field in ("d_model", "n_q_heads", "n_kv_heads", "head_dim"):
            if getattr(self, field) < 1:
                raise ShapeError(f"AttentionLayout.{field} must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ShapeError(
                f"n_q_heads={self.n_q_heads} is not a multiple of n_kv_heads={self.n_kv_heads}"
            )

    @property
    def group_factor(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def q_width(self) -> int:
        return self.n_q_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "q": (self.d_model, self.q_width),
            "k": (self.d_model, self.kv_width),
            "v": (self.d_model, self.kv_width),
            "o": (self.q_width, self.d_model),
            "b_q": (self.q_width,),
            "b_k": (self.kv_width,),
            "b_v": (self.kv_width,),
            "b_o": (self.d_model,),
        }


@dataclass
class AttentionWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    b_o: np.ndarray | None = None

    ROLES = ("q", "k", "v", "o")

    def __post_init__(self):
        for role in self.ROLES:
            setattr(self, f"w_{role}", as_matrix(self.matrix(role), f"w_{role}"))
            b = self.bias(role)
            if b is not None:
                setattr(self, f"b_{role}", np.asarray(b, dtype=np.float64).reshape(-1))

    @property
    def has_bias(self) -> bool:
        return any(self.bias(r) is not None for r in self.ROLES)

    def matrix(self, role: str) -> Matrix:
        return getattr(self, f"w_{role}")

    def bias(self, role: str) -> np.ndarray | None:
        return getattr(self, f"b_{role}")

    def validate(self, layout: AttentionLayout) -> None:
        shapes = layout.expected_shapes()
        for role in self.ROLES:
            got = np.shape(self.matrix(role))
            if got != shapes[role]:
                raise ShapeError(f"w_{role}: expected {shapes[role]}, got {got}")
            b = self.bias(role)
            if b is not None and np.shape(b) != shapes[f"b_{role}"]:
                raise ShapeError(f"b_{role}: expected {shapes[f'b_{role}']}, got {np.shape(b)}")

    def copy(self) -> AttentionWeights:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return AttentionWeights(**{k: None if v is None else v.copy() for k, v in values.items()})


@dataclass
class LoraPair:
    """Low-rank update ``delta = a @ b`` with ``a: m x r`` and ``b: r x n``."""

    a: Matrix
    b: Matrix

    def __post_init__(self):
        self.a = as_matrix(self.a, "lora a")
        self.b = as_matrix(self.b, "lora b")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"LoRA rank mismatch: a {self.a.shape}, b {self.b.shape}")
        m, n = self.a.shape[0], self.b.shape[1]
        if self.rank > min(m, n):
            raise ShapeError(f"LoRA rank {self.rank} exceeds min({m}, {n})")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def copy(self) -> LoraPair:
        return LoraPair(self.a.copy(), self.b.copy())


def _project(x: Matrix, w: Matrix, b: np.ndarray | None) -> Matrix:
    y = x @ w
    if b is not None:
        y = y + b
    return y


def _split_heads(y: Matrix, n_heads: int, head_dim: int) -> np.ndarray:
    # (tokens, heads*head_dim) -> (heads, tokens, head_dim)
    return y.reshape(y.shape[0], n_heads, head_dim).transpose(1, 0, 2)


def attention_probs(x, w: AttentionWeights, layout: AttentionLayout, causal: bool = False) -> np.ndarray:
    """Per-query-head softmax score matrices, shape ``(n_q_heads, tokens, tokens)``."""
    return _probs(_check_input(x, w, layout), w, layout, causal)


def _probs(x: Matrix, w: AttentionWeights, layout: AttentionLayout, causal: bool) -> np.ndarray:
    q = _split_heads(_project(x, w.w_q, w.b_q), layout.n_q_heads, layout.head_dim)
    k = _split_heads(_project(x, w.w_k, w.b_k), layout.n_kv_heads, layout.head_dim)
    k = np.repeat(k, layout.group_factor, axis=0)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(layout.head_dim)
    if causal:
        n = x.shape[0]
        logits = np.where(np.tri(n, dtype=bool), logits, -np.inf)
    return softmax_last_axis(logits)


def _check_input(x, w: AttentionWeights, layout: AttentionLayout) -> Matrix:
    x = as_matrix(x, "attention input")
    if x.shape[1] != layout.d_model:
        raise ShapeError(f"input width {x.shape[1]} != d_model {layout.d_model}")
    w.validate(layout)
    return x


def gqa_forward(x, w: AttentionWeights, layout: AttentionLayout, causal: bool = False) -> Matrix:
    """Grouped-query attention; ``group_factor == 1`` is plain multi-head attention."""
    x = _check_input(x, w, layout)
    probs = _probs(x, w, layout, causal)
    v = _split_heads(_project(x, w.w_v, w.b_v), layout.n_kv_heads, layout.head_dim)
    v = np.repeat(v, layout.group_factor, axis=0)
    heads = probs @ v
    concat = heads.transpose(1, 0, 2).reshape(x.shape[0], layout.q_width)
    return _project(concat, w.w_o, w.b_o)


def mha_forward(x, w: AttentionWeights, layout: AttentionLayout, causal: bool = False) -> Matrix:
    if layout.group_factor != 1:
        raise ShapeError(
            f"mha_forward needs n_q_heads == n_kv_heads, got {layout.n_q_heads}/{layout.n_kv_heads}"
        )
    return gqa_forward(x, w, layout, causal=causal)


def lora_forward(x, w, p: LoraPair) -> Matrix:
    """``x @ (w + a @ b)``."""
    x = as_matrix(x, "lora input")
    w = as_matrix(w, "lora base weight")
    delta = p.a @ p.b
    if w.shape != delta.shape:
        raise ShapeError(f"base weight {w.shape} does not match adapter product {delta.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} != weight rows {w.shape[0]}")
    return x @ (w + delta)


ACTIVATIONS = {
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
}


def activation_fn(name: str, negative_slope: float = 0.01):
    if name == "leaky_relu":
        return lambda z: np.where(z >= 0, z, negative_slope * z)
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def two_layer_forward(x, w1, w2, activation: str = "relu", b1=None, negative_slope: float = 0.01) -> Matrix:
    """``act(x @ w1 + b1) @ w2`` for a pair of consecutive linear layers."""
    x = as_matrix(x, "input")
    w1 = as_matrix(w1, "w1")
    w2 = as_matrix(w2, "w2")
    if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"incompatible shapes x{x.shape} w1{w1.shape} w2{w2.shape}")
    act = activation_fn(activation, negative_slope)
    return act(_project(x, w1, b1)) @ w2
