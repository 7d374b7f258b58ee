"""scriptkd: desk-scale image-to-text transliteration via knowledge distillation.

Subpackages by concern:

- ``ndgrad``    dense tensors with reverse-mode autodiff
- ``imaging``   scan preprocessing (denoise, binarize, deskew, resize)
- ``tokenizer`` byte-level BPE
- ``encoder``   vision encoder and MLP projector
- ``student``   causal decoder (parallel attention, QK-norm) and presets
- ``teacher``   frozen teacher with LoRA adapters
- ``distill``   fusion, combined objective, training loops, checkpoints
- ``evalkit``   BLEU, character accuracy, throughput, CO2
- ``data``      manifests, splits, synthetic glyph corpora
- ``cli``       command-line pipeline
"""

from . import (  # noqa: F401
    data,
    distill,
    encoder,
    errors,
    evalkit,
    imaging,
    layers,
    ndgrad,
    student,
    teacher,
    tokenizer,
)

__version__ = "0.1.0"
