"""Evaluation metrics: BLEU, character accuracy, throughput, CO2 estimate.

BLEU follows the classic recipe: modified (clipped) n-gram precisions,
geometric mean under the given weights, and a brevity penalty from the
closest reference length.  Tokenization for transliteration scoring is
whitespace splitting over the raw text (no Unicode normalization) so scores
are reproducible.
"""

from __future__ import annotations

import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MeasurementError, ParameterError

SMOOTH_EPS = 1e-9


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuReport:
    bleu: float
    bp: float
    precisions: tuple
    len_c: int
    len_r: int
    weights: tuple
    smoothing: bool = False


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def ngram_precision(candidate, references, n: int):
    """(clipped matches, total candidate n-grams) for order ``n``.

    Candidate counts are clipped by the maximum count of each n-gram across
    the references (modified precision).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    cand_counts = Counter(_ngrams(list(candidate), n))
    total = max(0, len(candidate) - n + 1)
    if not cand_counts:
        return 0, total
    clipped = 0
    for gram, count in cand_counts.items():
        best_ref = max((Counter(_ngrams(list(r), n))[gram] for r in references),
                       default=0)
        clipped += min(count, best_ref)
    return clipped, total


def brevity_penalty(len_c: int, len_r: int) -> float:
    """1 when the candidate is longer than the reference, else
    exp(1 - len_r/len_c); a zero-length candidate gets 0 by convention."""
    if len_c == 0:
        return 0.0
    if len_c > len_r:
        return 1.0
    return math.exp(1.0 - len_r / len_c)


def closest_ref_len(len_c: int, references) -> int:
    """Reference length closest to ``len_c`` (ties favor the shorter)."""
    if not references:
        raise ContractError("at least one reference is required")
    return min((len(r) for r in references),
               key=lambda ref_len: (abs(ref_len - len_c), ref_len))


def _combine(clipped, totals, len_c, len_r, weights, smoothing):
    precisions = []
    for m, t in zip(clipped, totals):
        p = m / t if t > 0 else 0.0
        precisions.append(p)
    bp = brevity_penalty(len_c, len_r)
    used = [max(p, SMOOTH_EPS) if smoothing else p for p in precisions]
    if any(p == 0.0 for p in used):
        bleu_val = 0.0
    else:
        s = sum(w * math.log(p) for w, p in zip(weights, used))
        bleu_val = bp * math.exp(s)
    return BleuReport(bleu=bleu_val, bp=bp, precisions=tuple(precisions),
                      len_c=len_c, len_r=len_r, weights=tuple(weights),
                      smoothing=smoothing)


def bleu(candidate, references, weights=(0.25, 0.25, 0.25, 0.25),
         smoothing: bool = False) -> BleuReport:
    """Sentence BLEU of one candidate against one or more references."""
    if not references:
        raise ContractError("at least one reference is required")
    candidate = list(candidate)
    len_c = len(candidate)
    len_r = closest_ref_len(len_c, references)
    clipped, totals = [], []
    for n in range(1, len(weights) + 1):
        m, t = ngram_precision(candidate, references, n)
        clipped.append(m)
        totals.append(t)
    return _combine(clipped, totals, len_c, len_r, weights, smoothing)


def corpus_bleu(pairs, weights=(0.25, 0.25, 0.25, 0.25),
                smoothing: bool = False) -> BleuReport:
    """Corpus BLEU: n-gram matches and totals aggregate across segments
    before the geometric mean.  ``pairs`` is a list of
    (candidate tokens, list of reference token lists)."""
    if not pairs:
        raise ContractError("corpus_bleu needs at least one segment")
    orders = len(weights)
    clipped = [0] * orders
    totals = [0] * orders
    len_c = len_r = 0
    for candidate, references in pairs:
        if not references:
            raise ContractError("every segment needs at least one reference")
        candidate = list(candidate)
        len_c += len(candidate)
        len_r += closest_ref_len(len(candidate), references)
        for n in range(1, orders + 1):
            m, t = ngram_precision(candidate, references, n)
            clipped[n - 1] += m
            totals[n - 1] += t
    return _combine(clipped, totals, len_c, len_r, weights, smoothing)


# ---------------------------------------------------------------------------
# character accuracy
# ---------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Edit distance over Unicode scalar values."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def char_accuracy(prediction: str, reference: str) -> float:
    """1 - normalized edit distance, clamped to [0, 1]."""
    if not reference:
        raise ContractError("reference must be non-empty")
    dist = levenshtein(prediction, reference)
    return max(0.0, min(1.0, 1.0 - dist / max(len(prediction), len(reference))))


# ---------------------------------------------------------------------------
# CO2 estimate
# ---------------------------------------------------------------------------


@dataclass
class Co2Estimate:
    gpu_count: int
    kw_per_gpu: float
    hours: float
    intensity: float  # kg CO2 per kWh
    total_kw: float
    kwh: float
    kg_co2: float


def co2_estimate(gpu_count: int, kw_per_gpu: float, hours: float,
                 intensity: float) -> Co2Estimate:
    """Power -> energy -> emissions chain: total_kw = gpus * kw_per_gpu,
    kwh = total_kw * hours, kg = kwh * intensity."""
    if gpu_count < 0 or kw_per_gpu < 0 or hours < 0 or intensity < 0:
        raise ParameterError("all CO2 inputs must be nonnegative")
    total_kw = gpu_count * kw_per_gpu
    kwh = total_kw * hours
    kg = kwh * intensity
    return Co2Estimate(gpu_count=gpu_count, kw_per_gpu=kw_per_gpu, hours=hours,
                       intensity=intensity, total_kw=total_kw, kwh=kwh, kg_co2=kg)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


def throughput_bench(lm, prefix_len: int = 8, duration: float = 0.5,
                     trials: int = 3, seed: int = 0) -> float:
    """Greedy-generation tokens per second: median of ``trials`` timed runs,
    warmup excluded.  Raises MeasurementError when ``duration`` is shorter
    than the time to produce a single token."""
    from . import ndgrad as ng
    from .encoder import EmbeddingSeq

    if trials < 1:
        raise ParameterError(f"need at least one trial, got {trials}")
    rng = np.random.default_rng(seed)
    d = lm.config.hidden
    prefix = rng.normal(0.0, 1.0, size=(prefix_len, d)).astype(np.float32)

    def run(budget, max_tokens):
        ids = [0]
        start = time.perf_counter()
        produced = 0
        while produced < max_tokens:
            zc = ng.concat_seq(ng.GradTensor(prefix), lm.tok_embed(ids).detach(), axis=0)
            _, logits = lm.forward(EmbeddingSeq(zc, role="combined"))
            nxt = int(np.asarray(logits.data[-1]).argmax())
            ids.append(nxt)
            produced += 1
            elapsed = time.perf_counter() - start
            if produced == 1 and elapsed > budget:
                raise MeasurementError(
                    f"duration {budget}s shorter than one token ({elapsed:.3f}s)")
            if elapsed >= budget:
                break
        return produced / (time.perf_counter() - start)

    max_tokens = lm.config.max_seq - prefix_len - 2
    run(float("inf"), min(4, max_tokens))  # warmup
    rates = [run(duration, max_tokens) for _ in range(trials)]
    return statistics.median(rates)
