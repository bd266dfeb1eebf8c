"""Bind checkpoint tensor names to attention and LoRA roles.

A layout descriptor is a JSON object::

    {
      "preset": "llama",                  # optional base, overlaid by the keys below
      "transposed": true,                 # stored matrices are (out, in)
      "n_q_heads": 8, "n_kv_heads": 2, "head_dim": 64,
      "attention": {
        "q": "model.layers.{layer}.self_attn.q_proj.weight",
        "k": "...", "v": "...", "o": "...",
        "q_bias": "...", "k_bias": "...", "v_bias": "...", "o_bias": "...",
        "qkv": "...", "qkv_bias": "...", "qkv_offsets": [0, 512, 640]
      },
      "lora": [{"a": "...{layer}.{module}.lora_A.weight", "b": "...lora_B.weight"}],
      "strategies": ["qk-tensor", "vo-tensor"]
    }

Patterns are exact names or templates with ``{layer}`` (digits) and
``{module}`` (any text) placeholders. A fused ``qkv`` tensor replaces the
separate ``q``/``k``/``v`` entries; ``qkv_offsets`` are the starting columns
of the three blocks and default to back-to-back packing.

All math-side matrices use the ``y = x @ W`` orientation. With
``transposed`` set, stored tensors are transposed on the way in and out.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .attention import AttentionLayout, AttentionWeights, LoraPair
from .checkpoint import CheckpointFile, encode
from .errors import ResolutionError, ShapeError

PLACEHOLDERS = {"layer": r"\d+", "module": r".+?"}
_FIELD = re.compile(r"\{(\w+)\}")

MATRIX_KEYS = ("q", "k", "v", "o")
BIAS_KEYS = ("q_bias", "k_bias", "v_bias", "o_bias")
FUSED_KEYS = ("qkv", "qkv_bias")
ATTENTION_KEYS = MATRIX_KEYS + BIAS_KEYS + FUSED_KEYS + ("qkv_offsets",)
TOP_KEYS = ("preset", "transposed", "n_q_heads", "n_kv_heads", "head_dim", "attention", "lora", "strategies")

# CLI strategy names, in the fixed order they are applied within a layer
STRATEGY_ORDER = ("qk-tensor", "gqa-tensor", "qk-channel", "vo-tensor", "vo-channel", "lora")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in (resources.files("wisca") / "presets").iterdir() if p.name.endswith(".json"))


def _preset(name: str) -> dict:
    path = resources.files("wisca") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ResolutionError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(path.read_text())


@dataclass(frozen=True)
class LayoutDescriptor:
    attention: dict[str, str] = field(default_factory=dict)
    qkv_offsets: tuple[int, int, int] | None = None
    lora: tuple[tuple[str, str], ...] = ()
    n_q_heads: int | None = None
    n_kv_heads: int | None = None
    head_dim: int | None = None
    transposed: bool = False
    strategies: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, raw: dict) -> LayoutDescriptor:
        if not isinstance(raw, dict):
            raise ResolutionError("layout descriptor must be a JSON object")
        raw = dict(raw)
        if "preset" in raw:
            base = _preset(raw.pop("preset"))
            attn = {**base.get("attention", {}), **raw.pop("attention", {})}
            raw = {**base, **raw}
            if attn:
                raw["attention"] = attn
        unknown = set(raw) - set(TOP_KEYS)
        if unknown:
            raise ResolutionError(f"unknown descriptor keys: {sorted(unknown)}")

        attn = dict(raw.get("attention") or {})
        bad = set(attn) - set(ATTENTION_KEYS)
        if bad:
            raise ResolutionError(f"unknown attention keys: {sorted(bad)}")
        offsets = attn.pop("qkv_offsets", None)
        if offsets is not None:
            if not (isinstance(offsets, list) and len(offsets) == 3 and all(isinstance(o, int) and o >= 0 for o in offsets)):
                raise ResolutionError(f"qkv_offsets must be three non-negative integers, got {offsets!r}")
            offsets = tuple(offsets)
        if attn:
            if "o" not in attn:
                raise ResolutionError("attention block needs an 'o' pattern")
            separate = [k for k in ("q", "k", "v") if k in attn]
            if "qkv" in attn and separate:
                raise ResolutionError(f"fused 'qkv' cannot be combined with separate {separate}")
            if "qkv" not in attn and len(separate) != 3:
                raise ResolutionError("attention block needs 'q', 'k' and 'v' patterns, or a fused 'qkv'")
            if "qkv_bias" in attn and "qkv" not in attn:
                raise ResolutionError("'qkv_bias' requires a fused 'qkv' pattern")
            if "qkv" in attn and any(k in attn for k in ("q_bias", "k_bias", "v_bias")):
                raise ResolutionError("use 'qkv_bias' for biases of a fused qkv tensor")
            for key in ("n_q_heads", "n_kv_heads", "head_dim"):
                if not (isinstance(raw.get(key), int) and raw[key] >= 1):
                    raise ResolutionError(f"attention layouts need a positive integer {key!r}")

        pairs = []
        for item in raw.get("lora") or []:
            if not (isinstance(item, dict) and set(item) == {"a", "b"}):
                raise ResolutionError(f"lora entries must be {{'a': pattern, 'b': pattern}}, got {item!r}")
            pairs.append((item["a"], item["b"]))

        strategies = tuple(raw.get("strategies") or ())
        bad = [s for s in strategies if s not in STRATEGY_ORDER]
        if bad:
            raise ResolutionError(f"unknown strategies {bad}; choose from {list(STRATEGY_ORDER)}")

        for p in [*attn.values(), *(x for pair in pairs for x in pair)]:
            if not isinstance(p, str):
                raise ResolutionError(f"patterns must be strings, got {p!r}")
            compile_pattern(p)

        return cls(
            attention=attn,
            qkv_offsets=offsets,
            lora=tuple(pairs),
            n_q_heads=raw.get("n_q_heads"),
            n_kv_heads=raw.get("n_kv_heads"),
            head_dim=raw.get("head_dim"),
            transposed=bool(raw.get("transposed", False)),
            strategies=strategies,
        )

    def to_dict(self) -> dict:
        out: dict = {"transposed": self.transposed}
        if self.attention:
            out["attention"] = dict(self.attention)
            if self.qkv_offsets is not None:
                out["attention"]["qkv_offsets"] = list(self.qkv_offsets)
            out.update(n_q_heads=self.n_q_heads, n_kv_heads=self.n_kv_heads, head_dim=self.head_dim)
        if self.lora:
            out["lora"] = [{"a": a, "b": b} for a, b in self.lora]
        if self.strategies:
            out["strategies"] = list(self.strategies)
        return out

    def patterns(self) -> list[str]:
        return [*self.attention.values(), *(p for pair in self.lora for p in pair)]

    @property
    def fused(self) -> bool:
        return "qkv" in self.attention


def load_descriptor(source) -> LayoutDescriptor:
    """Load from a JSON file, or from a bare preset name such as ``llama``."""
    path = Path(source)
    if not path.exists() and str(source) in preset_names():
        return LayoutDescriptor.from_dict({"preset": str(source)})
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ResolutionError(f"layout descriptor {source}: invalid JSON: {exc}") from None
    return LayoutDescriptor.from_dict(raw)


def compile_pattern(pattern: str) -> re.Pattern:
    parts, pos, seen = [], 0, set()
    for m in _FIELD.finditer(pattern):
        name = m.group(1)
        if name not in PLACEHOLDERS:
            raise ResolutionError(f"unknown placeholder {{{name}}} in pattern {pattern!r}")
        parts.append(re.escape(pattern[pos : m.start()]))
        parts.append(f"(?P={name})" if name in seen else f"(?P<{name}>{PLACEHOLDERS[name]})")
        seen.add(name)
        pos = m.end()
    parts.append(re.escape(pattern[pos:]))
    return re.compile("".join(parts))


def fill_pattern(pattern: str, captures: dict[str, str]) -> str:
    return _FIELD.sub(lambda m: captures[m.group(1)], pattern)


def _matches(pattern: str, names) -> list[dict[str, str]]:
    rx = compile_pattern(pattern)
    return [m.groupdict() for n in names if (m := rx.fullmatch(n))]


def _natural(captures: dict[str, str]):
    return tuple((0, int(v), "") if v.isdigit() else (1, 0, v) for v in captures.values())


def _layer_id(captures: dict[str, str], fallback: str) -> str:
    return "/".join(captures.values()) if captures else fallback


@dataclass(frozen=True)
class Binding:
    """Where one role lives: a tensor, its orientation and an optional column range."""

    tensor: str
    transposed: bool = False
    cols: tuple[int, int] | None = None

    def _view(self, arr: np.ndarray) -> np.ndarray:
        view = arr.T if self.transposed and arr.ndim == 2 else arr
        if self.cols is None:
            return view
        lo, hi = self.cols
        return view[..., lo:hi]

    def take(self, cp: CheckpointFile) -> np.ndarray:
        return np.ascontiguousarray(self._view(cp[self.tensor].to_f64()))

    def put(self, storage: np.ndarray, values: np.ndarray) -> None:
        """Write already-encoded ``values`` (math orientation) into a storage array in place."""
        self._view(storage)[...] = values


@dataclass
class ResolvedLayer:
    layer_id: str
    kind: str  # "attention" or "lora"
    weights: AttentionWeights | LoraPair
    layout: AttentionLayout | None
    bindings: dict[str, Binding]

    @property
    def tensors(self) -> list[str]:
        return sorted({b.tensor for b in self.bindings.values()})

    @property
    def d_model(self) -> int:
        return self.layout.d_model if self.layout else self.weights.a.shape[0]


def _role_values(weights: AttentionWeights | LoraPair) -> dict[str, np.ndarray | None]:
    if isinstance(weights, LoraPair):
        return {"lora_a": weights.a, "lora_b": weights.b}
    out = {r: weights.matrix(r) for r in AttentionWeights.ROLES}
    out.update({f"b_{r}": weights.bias(r) for r in AttentionWeights.ROLES})
    return out


def read_weights(cp: CheckpointFile, layer: ResolvedLayer) -> AttentionWeights | LoraPair:
    """Re-read a resolved layer's weights from ``cp`` (e.g. after a write-back)."""
    vals = {role: b.take(cp) for role, b in layer.bindings.items()}
    if layer.kind == "lora":
        return LoraPair(vals["lora_a"], vals["lora_b"])
    return AttentionWeights(**{("w_" + r if len(r) == 1 else r): v for r, v in vals.items()})


def store_weights(cp: CheckpointFile, layer: ResolvedLayer, weights: AttentionWeights | LoraPair) -> list[str]:
    """Encode ``weights`` into ``cp`` at the layer's bindings; returns the tensors whose bytes changed.

    Tensors whose encoded values equal the stored ones keep their original
    payload object.
    """
    values = _role_values(weights)
    by_tensor: dict[str, list[tuple[str, Binding]]] = {}
    for role, b in layer.bindings.items():
        by_tensor.setdefault(b.tensor, []).append((role, b))
    changed = []
    for name, binds in by_tensor.items():
        entry = cp[name]
        storage = entry.storage().copy()
        for role, b in binds:
            b.put(storage, encode(values[role], entry.dtype))
        if storage.tobytes() != entry.data:
            cp.set_storage(name, storage)
            changed.append(name)
    return sorted(changed)


def split_columns(storage: np.ndarray, bounds: list[tuple[int, int]], transposed: bool = False) -> list[np.ndarray]:
    """Cut a fused storage array into blocks given by math-orientation column ``bounds``.

    Blocks keep the stored orientation, so a transposed tensor is cut along rows.
    """
    axis = 0 if transposed and storage.ndim == 2 else storage.ndim - 1
    return [np.ascontiguousarray(np.take(storage, np.arange(lo, hi), axis=axis)) for lo, hi in bounds]


def fuse_columns(parts: list[np.ndarray], transposed: bool = False) -> np.ndarray:
    """Inverse of :func:`split_columns` for blocks that tile the columns in order."""
    axis = 0 if transposed and parts[0].ndim == 2 else parts[0].ndim - 1
    return np.ascontiguousarray(np.concatenate(parts, axis=axis))


class _Problems(list):
    def need(self, cp: CheckpointFile, layer: str, role: str, name: str) -> bool:
        if name not in cp:
            self.append(f"layer {layer}: {role} expects tensor {name!r}, not found")
            return False
        return True


def _fused_bounds(ld: LayoutDescriptor, q_width: int, kv_width: int) -> list[tuple[int, int]]:
    starts = ld.qkv_offsets or (0, q_width, q_width + kv_width)
    return [(starts[0], starts[0] + q_width), (starts[1], starts[1] + kv_width), (starts[2], starts[2] + kv_width)]


def _resolve_attention(cp: CheckpointFile, ld: LayoutDescriptor, problems: _Problems) -> list[ResolvedLayer]:
    attn, t = ld.attention, ld.transposed
    driver = attn["qkv"] if ld.fused else attn["q"]
    layers = []
    for caps in sorted(_matches(driver, cp.names), key=_natural):
        lid = _layer_id(caps, "attention")
        names = {key: fill_pattern(p, caps) for key, p in attn.items()}
        if not all(problems.need(cp, lid, key, n) for key, n in names.items()):
            continue
        first = Binding(names["qkv" if ld.fused else "q"], t).take(cp)
        if first.ndim != 2:
            problems.append(f"layer {lid}: {names['qkv' if ld.fused else 'q']!r} is not a matrix (shape {first.shape})")
            continue
        try:
            layout = AttentionLayout(first.shape[0], ld.n_q_heads, ld.n_kv_heads, ld.head_dim, has_bias=False)
        except ShapeError as exc:
            problems.append(f"layer {lid}: {exc}")
            continue

        binds: dict[str, Binding] = {"o": Binding(names["o"], t)}
        if ld.fused:
            bounds = _fused_bounds(ld, layout.q_width, layout.kv_width)
            width = first.shape[1]
            expected = layout.q_width + 2 * layout.kv_width
            if width != expected or any(hi > width for _, hi in bounds):
                problems.append(
                    f"layer {lid}: fused qkv {names['qkv']!r} has {width} output columns, "
                    f"geometry needs {expected} with blocks at {bounds}"
                )
                continue
            for role, cols in zip("qkv", bounds):
                binds[role] = Binding(names["qkv"], t, cols)
                if "qkv_bias" in names:
                    binds[f"b_{role}"] = Binding(names["qkv_bias"], False, cols)
        else:
            for role in "qkv":
                binds[role] = Binding(names[role], t)
                if f"{role}_bias" in names:
                    binds[f"b_{role}"] = Binding(names[f"{role}_bias"], False)
        if "o_bias" in names:
            binds["b_o"] = Binding(names["o_bias"], False)

        expected_shapes = layout.expected_shapes()
        bad = False
        for role, b in binds.items():
            got = b.take(cp).shape
            if got != expected_shapes[role]:
                problems.append(
                    f"layer {lid}: {role} from {b.tensor!r} has shape {got} (math orientation), expected "
                    f"{expected_shapes[role]} for d_model={layout.d_model}, n_q_heads={layout.n_q_heads}, "
                    f"n_kv_heads={layout.n_kv_heads}, head_dim={layout.head_dim}"
                )
                bad = True
        if bad:
            continue
        has_bias = any(r.startswith("b_") for r in binds)
        layout = AttentionLayout(layout.d_model, layout.n_q_heads, layout.n_kv_heads, layout.head_dim, has_bias)
        layer = ResolvedLayer(lid, "attention", None, layout, binds)
        layer.weights = read_weights(cp, layer)
        layers.append(layer)
    return layers


def _resolve_lora(cp: CheckpointFile, ld: LayoutDescriptor, pair: tuple[str, str], problems: _Problems):
    pa, pb = pair
    layers = []
    for caps in sorted(_matches(pa, cp.names), key=_natural):
        lid = _layer_id(caps, pa)
        na, nb = fill_pattern(pa, caps), fill_pattern(pb, caps)
        if not problems.need(cp, lid, "lora b", nb):
            continue
        binds = {"lora_a": Binding(na, ld.transposed), "lora_b": Binding(nb, ld.transposed)}
        layer = ResolvedLayer(lid, "lora", None, None, binds)
        try:
            layer.weights = read_weights(cp, layer)
        except ShapeError as exc:
            problems.append(f"layer {lid}: {na!r} / {nb!r}: {exc}")
            continue
        layers.append(layer)
    return layers


def resolve_layout(cp: CheckpointFile, ld: LayoutDescriptor) -> list[ResolvedLayer]:
    """Resolve every descriptor pattern against ``cp``; attention layers first, then LoRA pairs."""
    unmatched = [p for p in ld.patterns() if not _matches(p, cp.names)]
    if unmatched:
        raise ResolutionError("patterns matched no tensor:\n" + "\n".join(f"  {p}" for p in unmatched))
    problems = _Problems()
    layers = []
    if ld.attention:
        layers += _resolve_attention(cp, ld, problems)
    for pair in ld.lora:
        layers += _resolve_lora(cp, ld, pair, problems)
    if problems:
        raise ResolutionError("layout does not fit the checkpoint:\n" + "\n".join(f"  {p}" for p in problems))
    return layers
