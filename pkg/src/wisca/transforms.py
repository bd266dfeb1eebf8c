"""WISCA rescaling: norm-balancing reparameterizations that keep outputs fixed.

Every transform multiplies one member of a weight pair by a positive factor
and its partner by the reciprocal, so the product the model actually uses
(``W_q W_k^T`` per head, ``W_v W_o``, ``A B``) is unchanged. Factors are
chosen so the pair's norms become equal (or, for grouped-query attention,
match the group-averaged target).

Channel-wise variants work per projection column. A query column pairs with
the key column at the same offset inside its head; under GQA the ``g``
query columns that share a key column are balanced against it jointly, with
one factor per (kv head, channel). On the value side, column ``j`` of
``W_v`` pairs with every ``W_o`` row that reads it.

Zero-norm pairs cannot be balanced. They are left untouched and the plan
records a warning instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import ACTIVATIONS, AttentionLayout, AttentionWeights, LoraPair
from .errors import PlanError
from .tensor import Matrix, as_matrix, norm_fn

STRATEGIES = (
    "qk_tensor",
    "qk_channel",
    "vo_tensor",
    "vo_channel",
    "gqa_tensor",
    "gqa_channel",
    "lora",
    "linear_pair",
)

ZERO_NORM_WARNING = "zero-norm pair skipped"

# axis along which a vector factor is laid out: 1 = per column, 0 = per row
ROLE_AXIS = {"q": 1, "k": 1, "v": 1, "o": 0, "lora_a": 1, "lora_b": 0, "w1": 1, "w2": 0}
ATTENTION_ROLES = frozenset("qkvo")
LORA_ROLES = frozenset({"lora_a", "lora_b"})
BIASED_ROLES = frozenset("qkv")  # b_o sits after the compensating factor and never scales


@dataclass
class ScalePlan:
    strategy: str
    factors: dict[str, float | np.ndarray]
    warnings: list[str] = field(default_factory=list)
    norm: str = "l1"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PlanError(f"unknown strategy {self.strategy!r}")
        for role, f in self.factors.items():
            if role not in ROLE_AXIS:
                raise PlanError(f"unknown role {role!r}")
            arr = np.asarray(f, dtype=np.float64)
            if not (np.all(np.isfinite(arr)) and np.all(arr > 0)):
                raise PlanError(f"factor for {role!r} must be finite and > 0")

    def is_identity(self) -> bool:
        return all(np.all(np.asarray(f) == 1.0) for f in self.factors.values())

    def max_deviation_from_one(self) -> float:
        return max((float(np.max(np.abs(np.asarray(f) - 1.0))) for f in self.factors.values()), default=0.0)

    def summary(self) -> dict:
        out = {"strategy": self.strategy, "norm": self.norm, "factors": {}, "warnings": list(self.warnings)}
        for role, f in self.factors.items():
            if np.ndim(f) == 0:
                out["factors"][role] = float(f)
            else:
                arr = np.asarray(f)
                out["factors"][role] = {
                    "channels": int(arr.size),
                    "min": float(arr.min()),
                    "max": float(arr.max()),
                    "geomean": float(np.exp(np.log(arr).mean())),
                }
        return out


def _scale(m: Matrix, factor, axis: int) -> Matrix:
    if np.ndim(factor) == 0:
        return m * float(factor)
    f = np.asarray(factor, dtype=np.float64)
    if f.shape != (m.shape[axis],):
        raise PlanError(f"factor vector of length {f.size} does not fit axis {axis} of {m.shape}")
    return m * (f[None, :] if axis == 1 else f[:, None])


def _scale_bias(b: np.ndarray | None, factor) -> np.ndarray | None:
    if b is None:
        return None
    if np.ndim(factor) and np.shape(factor) != b.shape:
        raise PlanError(f"factor vector of length {np.size(factor)} does not fit bias {b.shape}")
    return b * factor


def _pair_factors(n_first: float, n_second: float, target: float = 1.0):
    """Factors (f1, f2) with f1*f2 == 1 and f1*n_first == target * f2*n_second."""
    if n_first == 0.0 or n_second == 0.0:
        return None
    return math.sqrt(target * n_second / n_first), math.sqrt(n_first / (target * n_second))


def _tensor_plan(strategy: str, roles: tuple[str, str], first, second, norm: str, target: float = 1.0) -> ScalePlan:
    nf = norm_fn(norm)
    pair = _pair_factors(nf(first), nf(second), target)
    if pair is None:
        return ScalePlan(strategy, {roles[0]: 1.0, roles[1]: 1.0}, [ZERO_NORM_WARNING], norm)
    return ScalePlan(strategy, {roles[0]: pair[0], roles[1]: pair[1]}, [], norm)


def qk_tensor_scale(w_q, w_k, norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Balance ``||W_q|| == ||W_k||`` with one scalar per matrix."""
    w_q, w_k = as_matrix(w_q, "w_q"), as_matrix(w_k, "w_k")
    plan = _tensor_plan("qk_tensor", ("q", "k"), w_q, w_k, norm)
    return _scale(w_q, plan.factors["q"], 1), _scale(w_k, plan.factors["k"], 1), plan


def vo_tensor_scale(w_v, w_o, norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Balance ``||W_v|| == ||W_o||`` with one scalar per matrix."""
    w_v, w_o = as_matrix(w_v, "w_v"), as_matrix(w_o, "w_o")
    plan = _tensor_plan("vo_tensor", ("v", "o"), w_v, w_o, norm)
    return _scale(w_v, plan.factors["v"], 1), _scale(w_o, plan.factors["o"], 0), plan


def gqa_tensor_scale(w_q, w_k, g: int, norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Group-averaged target ``||W_q|| == g * ||W_k||``; ``g == 1`` is :func:`qk_tensor_scale`."""
    if g < 1:
        raise PlanError(f"group factor must be >= 1, got {g}")
    w_q, w_k = as_matrix(w_q, "w_q"), as_matrix(w_k, "w_k")
    strategy = "gqa_tensor" if g > 1 else "qk_tensor"
    plan = _tensor_plan(strategy, ("q", "k"), w_q, w_k, norm, target=float(g))
    return _scale(w_q, plan.factors["q"], 1), _scale(w_k, plan.factors["k"], 1), plan


def _column_norms(m: Matrix, axis: int, norm: str) -> np.ndarray:
    if norm == "l1":
        return np.abs(m).sum(axis=axis)
    norm_fn(norm)
    return np.sqrt(np.square(m).sum(axis=axis))


def _grouped_factors(
    shared: np.ndarray, grouped: np.ndarray, layout: AttentionLayout, shared_role: str, grouped_role: str
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-(kv head, channel) factors balancing one shared channel against its g partners.

    ``shared`` holds one norm per kv-side channel (length n_kv*head_dim);
    ``grouped`` one norm per query-side channel (length n_q*head_dim).
    """
    g, hd = layout.group_factor, layout.head_dim
    group_sum = grouped.reshape(layout.n_kv_heads, g, hd).sum(axis=1).reshape(-1)
    f_shared = np.ones_like(shared)
    f_group = np.ones_like(shared)
    ok = (shared > 0) & (group_sum > 0)
    f_shared[ok] = np.sqrt(group_sum[ok] / shared[ok])
    f_group[ok] = np.sqrt(shared[ok] / group_sum[ok])
    warnings = [
        f"{ZERO_NORM_WARNING}: {shared_role}/{grouped_role} channel {int(c)}" for c in np.flatnonzero(~ok)
    ]
    expanded = np.repeat(f_group.reshape(layout.n_kv_heads, 1, hd), g, axis=1).reshape(-1)
    return f_shared, expanded, warnings


def _check_layout(layout: AttentionLayout, **mats) -> None:
    shapes = layout.expected_shapes()
    for role, m in mats.items():
        if m.shape != shapes[role]:
            raise PlanError(f"w_{role} shape {m.shape} does not match layout {shapes[role]}")


def qk_channel_scale(w_q, w_k, layout: AttentionLayout, norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Per-channel QK balancing; group-aware when ``layout.group_factor > 1``."""
    w_q, w_k = as_matrix(w_q, "w_q"), as_matrix(w_k, "w_k")
    _check_layout(layout, q=w_q, k=w_k)
    f_k, f_q, warnings = _grouped_factors(
        _column_norms(w_k, 0, norm), _column_norms(w_q, 0, norm), layout, "k", "q"
    )
    strategy = "gqa_channel" if layout.group_factor > 1 else "qk_channel"
    plan = ScalePlan(strategy, {"q": f_q, "k": f_k}, warnings, norm)
    return _scale(w_q, f_q, 1), _scale(w_k, f_k, 1), plan


def vo_channel_scale(w_v, w_o, layout: AttentionLayout, norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Per-channel VO balancing: column j of W_v against the W_o rows that read it."""
    w_v, w_o = as_matrix(w_v, "w_v"), as_matrix(w_o, "w_o")
    _check_layout(layout, v=w_v, o=w_o)
    f_v, f_o, warnings = _grouped_factors(
        _column_norms(w_v, 0, norm), _column_norms(w_o, 1, norm), layout, "v", "o"
    )
    plan = ScalePlan("vo_channel", {"v": f_v, "o": f_o}, warnings, norm)
    return _scale(w_v, f_v, 1), _scale(w_o, f_o, 0), plan


def lora_scale(p: LoraPair, norm: str = "l1") -> tuple[LoraPair, ScalePlan]:
    """Balance the two LoRA factors; a zero ``B`` (fresh adapter) is skipped."""
    plan = _tensor_plan("lora", ("lora_a", "lora_b"), p.a, p.b, norm)
    return apply_plan(p, plan), plan


def linear_pair_scale(w1, w2, activation: str = "relu", norm: str = "l1") -> tuple[Matrix, Matrix, ScalePlan]:
    """Balance two consecutive linear layers around a positively homogeneous activation."""
    if activation not in ACTIVATIONS and activation != "leaky_relu":
        raise PlanError(f"activation {activation!r} is not positively homogeneous")
    w1, w2 = as_matrix(w1, "w1"), as_matrix(w2, "w2")
    plan = _tensor_plan("linear_pair", ("w1", "w2"), w1, w2, norm)
    return _scale(w1, plan.factors["w1"], 1), _scale(w2, plan.factors["w2"], 0), plan


def apply_plan(weights: AttentionWeights | LoraPair, plan: ScalePlan):
    """Replay recorded factors on a weight set, biases included."""
    roles = set(plan.factors)
    if isinstance(weights, AttentionWeights):
        if not roles <= ATTENTION_ROLES:
            raise PlanError(f"plan roles {sorted(roles)} do not apply to attention weights")
        out = weights.copy()
        for role, f in plan.factors.items():
            setattr(out, f"w_{role}", _scale(weights.matrix(role), f, ROLE_AXIS[role]))
            if role in BIASED_ROLES:
                setattr(out, f"b_{role}", _scale_bias(weights.bias(role), f))
        return out
    if isinstance(weights, LoraPair):
        if not roles <= LORA_ROLES:
            raise PlanError(f"plan roles {sorted(roles)} do not apply to a LoRA pair")
        a = _scale(weights.a, plan.factors.get("lora_a", 1.0), ROLE_AXIS["lora_a"])
        b = _scale(weights.b, plan.factors.get("lora_b", 1.0), ROLE_AXIS["lora_b"])
        return LoraPair(a, b)
    raise PlanError(f"cannot apply a plan to {type(weights).__name__}")


def plan_for(weights: AttentionWeights, layout: AttentionLayout, strategy: str, norm: str = "l1") -> ScalePlan:
    """Compute (without applying) the plan for one attention strategy."""
    if strategy == "qk_tensor":
        return qk_tensor_scale(weights.w_q, weights.w_k, norm)[2]
    if strategy == "gqa_tensor":
        return gqa_tensor_scale(weights.w_q, weights.w_k, layout.group_factor, norm)[2]
    if strategy in ("qk_channel", "gqa_channel"):
        return qk_channel_scale(weights.w_q, weights.w_k, layout, norm)[2]
    if strategy == "vo_tensor":
        return vo_tensor_scale(weights.w_v, weights.w_o, norm)[2]
    if strategy == "vo_channel":
        return vo_channel_scale(weights.w_v, weights.w_o, layout, norm)[2]
    raise PlanError(f"{strategy!r} is not an attention strategy")


def transform_attention(
    weights: AttentionWeights, layout: AttentionLayout, strategy: str, norm: str = "l1"
) -> tuple[AttentionWeights, ScalePlan]:
    plan = plan_for(weights, layout, strategy, norm)
    return apply_plan(weights, plan), plan


def pair_norms(weights: AttentionWeights | LoraPair, norm: str = "l1") -> dict[str, float]:
    nf = norm_fn(norm)
    if isinstance(weights, LoraPair):
        return {"lora_a": nf(weights.a), "lora_b": nf(weights.b)}
    return {role: nf(weights.matrix(role)) for role in AttentionWeights.ROLES}
