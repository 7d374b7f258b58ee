"""Causal decoder language model with parallel attention and QK-normalization.

The same block family also backs the frozen teacher (sequential form,
QK-norm off) so teacher and student differ only in configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .encoder import EmbeddingSeq
from .errors import CapacityError, ParameterError
from .layers import Block, Embedding, LayerNorm, Linear, ParamSet, causal_mask
from .ndgrad import GradTensor

# (hidden size, block count) per variant, as published
_PAPER_PRESETS = {"S": (256, 6), "M": (512, 13), "L": (768, 18), "XL": (1024, 21)}
_PAPER_VOCAB = 32000
_DESK_VOCAB = 512
HEAD_WIDTH = 64  # heads = hidden // 64, minimum 1


@dataclass
class StudentConfig:
    hidden: int
    blocks: int
    heads: int
    vocab: int
    max_seq: int = 256
    use_parallel_attention: bool = True
    use_qk_norm: bool = True

    def __post_init__(self):
        if self.blocks < 1:
            raise ParameterError(f"need at least one block, got {self.blocks}")
        if self.hidden % self.heads:
            raise ParameterError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")


def preset(name: str, scale: str = "desk") -> StudentConfig:
    """Named model size.  ``paper`` scale matches the published variants;
    ``desk`` divides hidden by 4 and blocks by 3 (rounded up)."""
    if name not in _PAPER_PRESETS:
        raise ParameterError(f"unknown preset {name!r}; pick one of {sorted(_PAPER_PRESETS)}")
    hidden, blocks = _PAPER_PRESETS[name]
    if scale == "paper":
        vocab = _PAPER_VOCAB
    elif scale == "desk":
        hidden //= 4
        blocks = math.ceil(blocks / 3)
        vocab = _DESK_VOCAB
    else:
        raise ParameterError(f"unknown scale {scale!r}; pick 'paper' or 'desk'")
    heads = max(1, hidden // HEAD_WIDTH)
    return StudentConfig(hidden=hidden, blocks=blocks, heads=heads, vocab=vocab)


class DecoderLM:
    """Stack of decoder blocks over a combined image+text embedding sequence."""

    def __init__(self, config: StudentConfig, rng, params: ParamSet | None = None,
                 prefix: str = "lm"):
        self.config = config
        self.params = params if params is not None else ParamSet()
        d = config.hidden
        self.tok_embed = Embedding(self.params, f"{prefix}.tok", config.vocab, d, rng)
        self.pos = self.params.register(
            f"{prefix}.pos",
            GradTensor(rng.normal(0.0, 0.02, size=(config.max_seq, d)).astype(np.float32),
                       requires_grad=True))
        self.blocks = [
            Block(self.params, f"{prefix}.blocks.{i}", d, config.heads, rng,
                  parallel=config.use_parallel_attention,
                  qk_norm=config.use_qk_norm)
            for i in range(config.blocks)
        ]
        self.final_ln = LayerNorm(self.params, f"{prefix}.final_ln", d)
        self.unembed = Linear(self.params, f"{prefix}.unembed", d, config.vocab, rng,
                              bias=False)
        self._mask_cache = {}

    def embed_tokens(self, ids) -> EmbeddingSeq:
        return EmbeddingSeq(self.tok_embed(ids), role="text")

    def _mask(self, length: int) -> np.ndarray:
        if length not in self._mask_cache:
            self._mask_cache[length] = causal_mask(length)
        return self._mask_cache[length]

    def forward(self, zc) -> tuple[GradTensor, GradTensor]:
        """Combined embeddings -> (final hidden states, next-token logits).

        Causal over the whole combined sequence: position i never sees j > i.
        """
        x = zc.tensor if isinstance(zc, EmbeddingSeq) else zc
        length, d = x.shape
        if d != self.config.hidden:
            raise ParameterError(f"input width {d} != model hidden {self.config.hidden}")
        if length > self.config.max_seq:
            raise CapacityError(f"sequence length {length} exceeds max {self.config.max_seq}")
        x = ng.add(x, ng.embedding(self.pos, np.arange(length)))
        mask = self._mask(length)
        for block in self.blocks:
            x = block(x, mask=mask)
        hidden = self.final_ln(x)
        logits = self.unembed(hidden)
        return hidden, logits

    def generate(self, image_embeds: EmbeddingSeq, bos_id: int, eos_id: int,
                 pad_id: int, max_len: int = 32) -> list[int]:
        """Greedy decoding from BOS conditioned on the image prefix.

        Stops at EOS or ``max_len`` tokens; PAD is masked out of the argmax.
        Returned ids exclude BOS/EOS.
        """
        out: list[int] = []
        ids = [bos_id]
        prefix = image_embeds.tensor.detach()
        budget = min(max_len, self.config.max_seq - prefix.shape[0] - 1)
        for _ in range(max(0, budget)):
            zc = ng.concat_seq(prefix, self.tok_embed(ids).detach(), axis=0)
            _, logits = self.forward(EmbeddingSeq(zc, role="combined"))
            last = np.array(logits.data[-1], dtype=np.float64)
            last[pad_id] = -np.inf
            nxt = int(last.argmax())
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
        return out

    def param_count(self) -> int:
        return self.params.count()


def param_count_for(config: StudentConfig) -> int:
    """Analytic parameter count of a DecoderLM, without allocating one."""
    d, v, n = config.hidden, config.vocab, config.blocks
    attn = 4 * (d * d + d) + config.heads
    mlp = (d * 4 * d + 4 * d) + (4 * d * d + d)
    lns = 2 * (2 * d)
    per_block = attn + mlp + lns
    return v * d + config.max_seq * d + n * per_block + 2 * d + d * v
