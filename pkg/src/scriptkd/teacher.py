"""Frozen teacher model with trainable low-rank (LoRA) adapters.

The teacher is a larger instance of the student's block family (sequential
blocks, no QK-norm).  LoRA wraps the attention q/k/v/o projections: the base
weight stays frozen while a rank-r pair (A, B) learns the task delta
``(alpha/r) * (x @ A) @ B``.  B starts at zero so attaching adapters leaves
the forward pass bit-identical; merging folds the delta into the dense
weight for zero inference overhead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .errors import ParameterError, StateError
from .layers import Linear
from .ndgrad import GradTensor
from .student import DecoderLM, StudentConfig

LORA_TARGETS = ("q", "k", "v", "o")


def teacher_config(hidden: int = 512, blocks: int = 8, vocab: int = 512,
                   max_seq: int = 256) -> StudentConfig:
    """Default desk-scale teacher: sequential blocks, no QK-norm."""
    return StudentConfig(hidden=hidden, blocks=blocks, heads=max(1, hidden // 64),
                         vocab=vocab, max_seq=max_seq,
                         use_parallel_attention=False, use_qk_norm=False)


@dataclass
class LoraAdapter:
    """Low-rank pair wrapping one projection: delta = (alpha/r) * (x@A) @ B."""

    a: GradTensor  # [d_in x r], small Gaussian init
    b: GradTensor  # [r x d_out], zero init
    rank: int
    alpha: float
    target: str  # e.g. "blocks.3.attn.q"


class LoraLinear:
    """A Linear plus its adapter; callable like the Linear it wraps."""

    def __init__(self, base: Linear, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter

    def __call__(self, x):
        ad = self.adapter
        delta = ng.scale(ng.matmul(ng.matmul(x, ad.a), ad.b), ad.alpha / ad.rank)
        return ng.add(self.base(x), delta)


def attach_lora(lm: DecoderLM, rank: int, rng, alpha: float | None = None,
                targets=LORA_TARGETS) -> list[LoraAdapter]:
    """Freeze the model and wrap the target projections with fresh adapters.

    ``alpha`` defaults to ``rank`` (scale 1).  Adapter parameters are
    registered as ``lora.<target>.{a,b}`` so they checkpoint as their own
    section.
    """
    if rank < 1 or rank > lm.config.hidden:
        raise ParameterError(f"rank must be in [1, {lm.config.hidden}], got {rank}")
    for t in targets:
        if t not in LORA_TARGETS:
            raise ParameterError(f"unknown LoRA target {t!r}; known: {LORA_TARGETS}")
    if getattr(lm, "lora_adapters", None):
        raise StateError("model already carries adapters")
    alpha = float(rank) if alpha is None else float(alpha)

    lm.params.freeze()
    adapters = []
    for i, block in enumerate(lm.blocks):
        for t in targets:
            proj = getattr(block.attn, f"{t}_proj")
            name = f"blocks.{i}.attn.{t}"
            a = lm.params.register(
                f"lora.{name}.a",
                GradTensor(rng.normal(0.0, 0.02, size=(proj.d_in, rank)).astype(np.float32),
                           requires_grad=True))
            b = lm.params.register(
                f"lora.{name}.b",
                GradTensor(np.zeros((rank, proj.d_out), dtype=np.float32),
                           requires_grad=True))
            adapter = LoraAdapter(a=a, b=b, rank=rank, alpha=alpha, target=name)
            setattr(block.attn, f"{t}_proj", LoraLinear(proj, adapter))
            adapters.append(adapter)
    lm.lora_adapters = adapters
    return adapters


def merge_lora(lm: DecoderLM) -> DecoderLM:
    """Fold adapter deltas into the dense weights and drop the wrappers.

    The merged forward matches the adapter forward to float precision.
    Merging twice is a state error.
    """
    if not getattr(lm, "lora_adapters", None):
        raise StateError("no adapters attached; nothing to merge")
    for block in lm.blocks:
        for t in LORA_TARGETS:
            proj = getattr(block.attn, f"{t}_proj")
            if isinstance(proj, LoraLinear):
                ad = proj.adapter
                delta = (ad.alpha / ad.rank) * (ad.a.data @ ad.b.data)
                proj.base.w.data = proj.base.w.data + delta.astype(proj.base.w.dtype)
                setattr(block.attn, f"{t}_proj", proj.base)
    lm.lora_adapters = []
    return lm


def adapter_tensors(lm: DecoderLM) -> list[GradTensor]:
    out = []
    for ad in getattr(lm, "lora_adapters", []) or []:
        out.extend([ad.a, ad.b])
    return out


def base_checksum(lm: DecoderLM) -> str:
    """Checksum over everything except the LoRA section."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(lm.params.names()):
        if not name.startswith("lora."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(lm.params[name].data).tobytes())
    return h.hexdigest()
