"""Norm-balancing rescaling of paired weight matrices with unchanged model outputs."""

from .attention import AttentionLayout, AttentionWeights, LoraPair, gqa_forward, mha_forward
from .checkpoint import CheckpointFile, read_checkpoint, write_checkpoint
from .layout import LayoutDescriptor, load_descriptor, resolve_layout
from .transforms import ScalePlan, apply_plan, transform_attention
from .verify import EquivalenceReport, verify_equivalence

__version__ = "0.1.0"

__all__ = [
    "AttentionLayout",
    "AttentionWeights",
    "CheckpointFile",
    "EquivalenceReport",
    "LayoutDescriptor",
    "LoraPair",
    "ScalePlan",
    "apply_plan",
    "gqa_forward",
    "load_descriptor",
    "mha_forward",
    "read_checkpoint",
    "resolve_layout",
    "transform_attention",
    "verify_equivalence",
    "write_checkpoint",
]
