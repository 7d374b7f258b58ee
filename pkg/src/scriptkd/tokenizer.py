"""Byte-level BPE tokenizer: lossless on arbitrary UTF-8, Devanagari included.

Ids 0..255 are the raw bytes, followed by PAD/BOS/EOS, then merge tokens in
training order.  Training merges the most frequent adjacent pair, breaking
ties by the lexicographically smaller (left, right) byte-sequence pair.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import DataFormatError, TrainingError, VocabularyError

N_BYTES = 256
RESERVED = ("<pad>", "<bos>", "<eos>")


@dataclass
class BpeVocab:
    """Ordered merge list plus the id <-> byte-sequence table."""

    merges: list = field(default_factory=list)  # list[(bytes, bytes)]
    pad_id: int = N_BYTES
    bos_id: int = N_BYTES + 1
    eos_id: int = N_BYTES + 2

    def __post_init__(self):
        self._token_bytes = {i: bytes([i]) for i in range(N_BYTES)}
        self._bytes_to_id = {v: k for k, v in self._token_bytes.items()}
        self._pair_to_id = {}
        merges, self.merges = self.merges, []
        for left, right in merges:
            self.add_merge(left, right)

    def add_merge(self, left: bytes, right: bytes) -> int:
        new_id = N_BYTES + len(RESERVED) + len(self._pair_to_id)
        merged = left + right
        self.merges.append((left, right))
        self._token_bytes[new_id] = merged
        self._bytes_to_id[merged] = new_id
        self._pair_to_id[(left, right)] = new_id
        return new_id

    @property
    def size(self) -> int:
        return N_BYTES + len(RESERVED) + len(self.merges)

    @property
    def reserved_ids(self):
        return (self.pad_id, self.bos_id, self.eos_id)

    def bytes_of(self, token_id: int) -> bytes:
        if token_id in self.reserved_ids:
            return b""
        try:
            return self._token_bytes[token_id]
        except KeyError:
            raise VocabularyError(f"unknown token id {token_id}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"BPE1 {self.size}\n")
            for left, right in self.merges:
                f.write(f"{left.hex()} {right.hex()}\n")

    @classmethod
    def load(cls, path) -> "BpeVocab":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith("BPE1 "):
            raise DataFormatError(f"{path}: missing BPE1 header")
        declared = int(lines[0].split()[1])
        merges = []
        for line in lines[1:]:
            if not line.strip():
                continue
            try:
                left, right = line.split()
                merges.append((bytes.fromhex(left), bytes.fromhex(right)))
            except ValueError as e:
                raise DataFormatError(f"{path}: bad merge line {line!r}") from e
        vocab = cls(merges=merges)
        if vocab.size != declared:
            raise DataFormatError(
                f"{path}: header declares {declared} tokens, file defines {vocab.size}")
        return vocab


def bpe_train(corpus, vocab_size: int) -> BpeVocab:
    """Learn merges from ``corpus`` until ``vocab_size`` is reached.

    Stops early when no adjacent pair occurs at least twice.  Pairs whose
    concatenation collides with an existing token are skipped so the id <->
    byte-sequence table stays a bijection.
    """
    min_size = N_BYTES + len(RESERVED)
    if vocab_size < min_size:
        raise TrainingError(f"vocab_size must be >= {min_size}, got {vocab_size}")
    texts = [t for t in corpus if t]
    if not texts:
        raise TrainingError("cannot train BPE on an empty corpus")

    vocab = BpeVocab()
    sequences = [[bytes([b]) for b in t.encode("utf-8")] for t in texts]
    known = set(vocab._token_bytes.values())

    while vocab.size < vocab_size:
        counts = Counter()
        for seq in sequences:
            for i in range(len(seq) - 1):
                counts[(seq[i], seq[i + 1])] += 1
        best = None
        for pair, count in counts.items():
            if count < 2 or (pair[0] + pair[1]) in known:
                continue
            if best is None or count > best[1] or (count == best[1] and pair < best[0]):
                best = (pair, count)
        if best is None:
            break
        left, right = best[0]
        vocab.add_merge(left, right)
        known.add(left + right)
        sequences = [_merge_pair(seq, left, right) for seq in sequences]
    return vocab


def _merge_pair(seq, left: bytes, right: bytes):
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def encode(vocab: BpeVocab, text: str):
    """Token ids for ``text``: byte split, then merges in training order."""
    seq = [bytes([b]) for b in text.encode("utf-8")]
    for left, right in vocab.merges:
        if len(seq) < 2:
            break
        seq = _merge_pair(seq, left, right)
    return [vocab._bytes_to_id[tok] for tok in seq]


def decode(vocab: BpeVocab, ids) -> str:
    """Text for ``ids``; reserved ids decode to the empty string."""
    buf = b"".join(vocab.bytes_of(i) for i in ids)
    try:
        return buf.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(f"token ids decode to invalid UTF-8: {e}") from e


def decode_lossy(vocab: BpeVocab, ids) -> str:
    """Like ``decode`` but replaces invalid UTF-8 with U+FFFD.

    Model-generated id sequences are arbitrary bytes until the model has
    learned the script; scoring paths use this variant.
    """
    return b"".join(vocab.bytes_of(i) for i in ids).decode("utf-8", errors="replace")
