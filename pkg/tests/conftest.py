"""Shared fixtures, the finite-difference gradient oracle, and the
acceptance-line reporter (one PASS/FAIL line per criterion at session end)."""

import os

# BLAS threading loses to overhead at this problem's matrix sizes and
# inflates the acceptance suite's CPU-hour budget; must be set before numpy
# initializes its backend.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from scriptkd import ndgrad as ng
from scriptkd.ndgrad import GradTensor

_ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    _ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def fd_gradcheck(fn, tensors, step=1e-3, tol=1e-3, extra=()):
    """Central-difference gradient check.

    ``fn(*tensors, *extra)`` must return a scalar GradTensor.  Tensors are
    upcast to float64 so the differences measure the backward formulas, not
    float32 roundoff; values are float32-representable.  Returns the max
    relative error across all inputs (normalized by the largest finite
    difference magnitude per input).
    """
    tensors = [GradTensor(t.data.astype(np.float64), requires_grad=True)
               for t in tensors]
    out = fn(*tensors, *extra)
    ng.backward(out)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached an input"
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*tensors, *extra).data)
            flat[i] = orig - step
            lo = float(fn(*tensors, *extra).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2 * step)
        scale = max(np.abs(fd).max(), 1e-8)
        err = np.abs(t.grad - fd).max() / scale
        worst = max(worst, float(err))
    assert worst < tol, f"max relative gradient error {worst} >= {tol}"
    return worst


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    """Random float32-representable values as a GradTensor."""
    data = (rng.standard_normal(shape) * scale).astype(np.float32)
    return GradTensor(data, requires_grad=requires_grad)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_task():
    """16-sample glyph-image memorization task shared by training tests."""
    from scriptkd.data import DEVANAGARI_CONSONANTS, build_atlas, make_random_texts, render_text
    from scriptkd.tokenizer import bpe_train, encode

    alphabet = DEVANAGARI_CONSONANTS[:8]
    atlas = build_atlas(alphabet, n_styles=1, seed=1)
    texts = make_random_texts(16, alphabet, seed=2, n_words=(2, 3), word_len=(1, 3))
    vocab = bpe_train(texts, 280)
    samples = [(render_text(t, atlas, style=0).pixels, encode(vocab, t), t)
               for t in texts]
    return {"vocab": vocab, "samples": samples, "texts": texts, "atlas": atlas}
