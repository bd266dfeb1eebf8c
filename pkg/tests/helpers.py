"""Builders shared by the test modules."""

from __future__ import annotations

import json

import numpy as np

from wisca.attention import AttentionLayout, AttentionWeights
from wisca.checkpoint import CheckpointFile, write_checkpoint


def random_weights(
    layout: AttentionLayout, rng: np.random.Generator, bias: bool = False, spread: bool = True, base: float = 1.0
):
    """Gaussian weights; with ``spread`` each matrix gets its own scale so norms start unbalanced."""
    shapes = layout.expected_shapes()
    scale = (lambda: base * float(np.exp(rng.uniform(-2, 2)))) if spread else (lambda: base)
    kw = {f"w_{r}": rng.normal(0.0, scale(), shapes[r]) for r in "qkvo"}
    if bias:
        kw.update({f"b_{r}": rng.normal(0.0, 0.5, shapes[f"b_{r}"]) for r in "qkvo"})
    return AttentionWeights(**kw)


def random_layout(rng: np.random.Generator, max_d: int = 64, groups=(1, 2, 4, 8), bias: bool = False) -> AttentionLayout:
    g = int(rng.choice(groups))
    n_kv = int(rng.integers(1, 3))
    n_q = g * n_kv
    head_dim = int(rng.integers(1, max(2, max_d // n_q) + 1))
    d_model = int(rng.integers(2, max_d + 1))
    return AttentionLayout(d_model, n_q, n_kv, min(head_dim, 8), bias)


def llama_checkpoint(path, layout: AttentionLayout, n_layers: int, rng, dtype="F32", bias=False, extra=True):
    """Write a checkpoint with Llama/Qwen-style names (stored transposed) and return the arrays written.

    Weights use a 1/sqrt(d_model) base scale, as trained checkpoints roughly do.
    """
    arrays = {}
    for layer in range(n_layers):
        w = random_weights(layout, rng, bias=bias, base=layout.d_model**-0.5)
        p = f"model.layers.{layer}.self_attn."
        for r in "qkvo":
            arrays[f"{p}{r}_proj.weight"] = (dtype, w.matrix(r).T)
            if bias and r != "o":
                arrays[f"{p}{r}_proj.bias"] = (dtype, w.bias(r))
        if extra:
            arrays[f"model.layers.{layer}.mlp.up_proj.weight"] = (dtype, rng.normal(size=(2 * layout.d_model, layout.d_model)))
    if extra:
        arrays["model.embed_tokens.weight"] = (dtype, rng.normal(size=(11, layout.d_model)))
    write_checkpoint(CheckpointFile.from_arrays(arrays), path)
    return arrays


def write_descriptor(path, **fields) -> str:
    path.write_text(json.dumps(fields))
    return str(path)
