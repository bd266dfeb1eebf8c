"""Checkpoint-level workflows: rescale, verify and report on resolved layers."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights, LoraPair, gqa_forward
from .checkpoint import CheckpointFile
from .errors import DomainError, StructuralInequivalenceError
from .layout import STRATEGY_ORDER, ResolvedLayer, read_weights, store_weights
from .tensor import l1_norm, l2_norm
from .transforms import ScalePlan, lora_scale, pair_norms, transform_attention
from .verify import DEFAULT_TOKENS, EquivalenceReport, make_battery, verify_equivalence

# CLI strategy name -> transform-engine strategy (qk-channel picks its GQA form itself)
ENGINE_NAMES = {
    "qk-tensor": "qk_tensor",
    "gqa-tensor": "gqa_tensor",
    "qk-channel": "qk_channel",
    "vo-tensor": "vo_tensor",
    "vo-channel": "vo_channel",
    "lora": "lora",
}

# default equivalence tolerance by the coarsest stored dtype in a layer
DTYPE_TOL = {"F64": 1e-10, "F32": 1e-6, "F16": 5e-3, "BF16": 2e-2}
_COARSENESS = ("F64", "F32", "F16", "BF16")

REPORT_COLUMNS = (
    "layer",
    "pair",
    "l1_first",
    "l1_second",
    "l2_first",
    "l2_second",
    "l1_ratio",
    "implied_factor",
    "group_factor",
    "group_implied_factor",
)


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def ordered_strategies(selected) -> list[str]:
    chosen = set(selected)
    unknown = chosen - set(STRATEGY_ORDER)
    if unknown:
        raise DomainError(f"unknown strategies {sorted(unknown)}")
    return [s for s in STRATEGY_ORDER if s in chosen]


def default_tol(cp: CheckpointFile, layer: ResolvedLayer) -> float:
    coarsest = max((cp[t].dtype for t in layer.tensors), key=_COARSENESS.index)
    return DTYPE_TOL[coarsest]


def layer_forward(layer: ResolvedLayer, weights: AttentionWeights | LoraPair):
    if layer.kind == "lora":
        return lambda x: (x @ weights.a) @ weights.b
    return lambda x: gqa_forward(x, weights, layer.layout)


def transform_layer(layer: ResolvedLayer, strategies: list[str], norm: str = "l1"):
    """Apply the applicable strategies in fixed order; returns (weights, plans)."""
    w, plans = layer.weights, []
    for s in strategies:
        if layer.kind == "lora" and s == "lora":
            w, plan = lora_scale(w, norm)
        elif layer.kind == "attention" and s != "lora":
            w, plan = transform_attention(w, layer.layout, ENGINE_NAMES[s], norm)
        else:
            continue
        plans.append(plan)
    return w, plans


@dataclass
class LayerRecord:
    layer_id: str
    kind: str
    plans: list[ScalePlan]
    norms_before: dict[str, float]
    norms_after: dict[str, float]
    changed_tensors: list[str]
    equivalence: EquivalenceReport | None = None

    def as_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "kind": self.kind,
            "plans": [p.summary() for p in self.plans],
            "l1_norms_before": self.norms_before,
            "l1_norms_after": self.norms_after,
            "changed_tensors": self.changed_tensors,
            "equivalence": None if self.equivalence is None else self.equivalence.as_dict(),
        }


@dataclass
class ApplyResult:
    checkpoint: CheckpointFile
    records: list[LayerRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.equivalence is None or r.equivalence.passed for r in self.records)

    @property
    def warnings(self) -> list[str]:
        return [f"{r.layer_id}: {w}" for r in self.records for p in r.plans for w in p.warnings]


def _batteries(layers: list[ResolvedLayer], size: int, seed: int) -> dict[int, list]:
    return {d: make_battery(size, DEFAULT_TOKENS, d, seed) for d in sorted({l.d_model for l in layers})}


def _check(f_a, f_b, battery, tol) -> EquivalenceReport:
    try:
        return verify_equivalence(f_a, f_b, battery, tol)
    except FloatingPointError:
        return EquivalenceReport(len(battery), math.inf, math.inf, tol, False, 0)


def apply_strategies(
    cp: CheckpointFile,
    layers: list[ResolvedLayer],
    strategies,
    norm: str = "l1",
    verify: bool = True,
    tol: float | None = None,
    battery: int = 32,
    seed: int = 0,
    workers: int = 1,
) -> ApplyResult:
    """Rescale every resolved layer, write the result into a copy of ``cp`` and verify it.

    Verification compares the original stored weights against the rounded,
    re-read output weights, so the check covers the bytes that would be
    written. Layers are independent; ``workers`` only changes wall time.
    """
    order = ordered_strategies(strategies)
    out = cp.copy()
    transformed = []

    def work(layer):
        return transform_layer(layer, order, norm)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            transformed = list(pool.map(work, layers))
    else:
        transformed = [work(l) for l in layers]

    result = ApplyResult(out)
    batteries = _batteries(layers, battery, seed) if verify and layers else {}
    for layer, (w_new, plans) in zip(layers, transformed):
        changed = store_weights(out, layer, w_new)
        stored = read_weights(out, layer)
        rec = LayerRecord(layer.layer_id, layer.kind, plans, pair_norms(layer.weights), pair_norms(stored), changed)
        if verify:
            t = tol if tol is not None else default_tol(cp, layer)
            rec.equivalence = _check(
                layer_forward(layer, layer.weights), layer_forward(layer, stored), batteries[layer.d_model], t
            )
        result.records.append(rec)
    return result


def verify_checkpoints(
    cp_a: CheckpointFile,
    layers_a: list[ResolvedLayer],
    cp_b: CheckpointFile,
    layers_b: list[ResolvedLayer],
    tol: float | None = None,
    battery: int = 32,
    seed: int = 0,
) -> list[tuple[str, EquivalenceReport]]:
    """Per-layer equivalence of two checkpoints resolved with the same descriptor.

    Raises :class:`StructuralInequivalenceError` when the layer sets or any
    weight shapes differ.
    """
    ids_a = [(l.layer_id, l.kind) for l in layers_a]
    ids_b = [(l.layer_id, l.kind) for l in layers_b]
    if ids_a != ids_b:
        raise StructuralInequivalenceError(f"layer sets differ: {ids_a} vs {ids_b}")
    reports = []
    batteries = _batteries(layers_a, battery, seed)
    for la, lb in zip(layers_a, layers_b):
        if la.layout != lb.layout or _shapes(la.weights) != _shapes(lb.weights):
            raise StructuralInequivalenceError(f"layer {la.layer_id}: weight shapes differ")
        t = tol if tol is not None else max(default_tol(cp_a, la), default_tol(cp_b, lb))
        rep = _check(layer_forward(la, la.weights), layer_forward(lb, lb.weights), batteries[la.d_model], t)
        reports.append((la.layer_id, rep))
    return reports


def _shapes(w: AttentionWeights | LoraPair) -> dict:
    if isinstance(w, LoraPair):
        return {"a": w.a.shape, "b": w.b.shape}
    return {f"{p}_{r}": np.shape(getattr(w, f"{p}_{r}")) for p in "wb" for r in w.ROLES}


@dataclass(frozen=True)
class NormRow:
    layer: str
    pair: str
    l1_first: float
    l1_second: float
    l2_first: float
    l2_second: float
    group_factor: int

    @property
    def l1_ratio(self) -> float:
        return self.l1_first / self.l1_second if self.l1_second else math.nan

    @property
    def implied_factor(self) -> float:
        """Tensor-wise factor that would multiply the first matrix to equalize L1 norms."""
        if not (self.l1_first and self.l1_second):
            return math.nan
        return math.sqrt(self.l1_second / self.l1_first)

    @property
    def group_implied_factor(self) -> float:
        if not (self.l1_first and self.l1_second):
            return math.nan
        return math.sqrt(self.group_factor * self.l1_second / self.l1_first)

    def values(self) -> list:
        return [
            self.layer,
            self.pair,
            self.l1_first,
            self.l1_second,
            self.l2_first,
            self.l2_second,
            self.l1_ratio,
            self.implied_factor,
            self.group_factor,
            self.group_implied_factor,
        ]


def norm_report(layers: list[ResolvedLayer]) -> list[NormRow]:
    rows = []
    for layer in layers:
        w = layer.weights
        if layer.kind == "lora":
            pairs = [("lora", w.a, w.b, 1)]
        else:
            pairs = [("qk", w.w_q, w.w_k, layer.layout.group_factor), ("vo", w.w_v, w.w_o, 1)]
        for name, first, second, g in pairs:
            rows.append(NormRow(layer.layer_id, name, l1_norm(first), l1_norm(second), l2_norm(first), l2_norm(second), g))
    return rows


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def report_csv(rows: list[NormRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def report_table(rows: list[NormRow]) -> str:
    cells = [list(REPORT_COLUMNS)] + [[_fmt(v) for v in r.values()] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.rjust(wd) if j > 1 else c.ljust(wd) for j, (c, wd) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(line.rstrip() for line in lines) + "\n"
