"""Dataset manifests, the 80:10:10 split, and synthetic glyph-image corpora.

The synthetic corpus stands in for scanned documents: each text is rendered
as a row of procedurally generated 16x16 glyph bitmaps hanging from a
continuous top rule line, in one of two "font" styles, on a 128x256 page.
Everything is deterministic under the provided seeds.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    ContractError,
    DataFormatError,
    ParameterError,
    VocabularyError,
)
from .imaging import BLACK, WHITE, GrayImage, rotate_image, write_pgm

# Devanagari consonants; the desk-scale rendering alphabet draws from these.
DEVANAGARI_CONSONANTS = "कखगघङचछजझञटठडढणतथदधनपफबभमयरलवशषसह"

CELL = 16
# cells sit on the 16px grid so every power-of-two patch size sees whole glyphs
MARGIN = 0
RULE_ROWS = (30, 31)
GLYPH_TOP = 32
PAGE_H, PAGE_W = 128, 256
MAX_CELLS = (PAGE_W - 2 * MARGIN) // CELL


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _text_key(text: str) -> list[int]:
    return list(text.encode("utf-8"))


# ---------------------------------------------------------------------------
# manifest and split
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    text: str
    tag: str | None = None
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataFormatError("manifest paths must be unique")

    def __len__(self):
        return len(self.records)

    def by_split(self, name: str):
        return [r for r in self.records if r.split == name]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("# path<TAB>text<TAB>tag\n")
            for r in self.records:
                cols = [r.path, r.text] + ([r.tag] if r.tag else [])
                f.write("\t".join(cols) + "\n")

    @classmethod
    def load(cls, path, seed: int = 0) -> "DatasetManifest":
        records = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) < 2:
                    raise DataFormatError(f"{path}: manifest line needs >= 2 columns: {line!r}")
                records.append(ManifestRecord(path=cols[0], text=cols[1],
                                              tag=cols[2] if len(cols) > 2 else None))
        return cls(records=records, seed=seed)


def _largest_remainder(group_sizes, quota: int, n: int):
    """Allocate ``quota`` across groups proportionally to size, floors first,
    remainders by largest fraction (ties in group order)."""
    ideals = [quota * g / n for g in group_sizes]
    base = [math.floor(x) for x in ideals]
    short = quota - sum(base)
    order = sorted(range(len(base)), key=lambda i: (-(ideals[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1),
          seed: int | None = None) -> DatasetManifest:
    """Assign every record to train/test/val.

    Sizes follow the floor-remainder rule: test = floor(r_test * n),
    val = floor(r_val * n), train = remainder.  Assignment is a seeded
    shuffle; when records carry tags the split is stratified so each tag
    contributes proportionally (largest-remainder rounding), while the
    global sizes stay exact.
    """
    n = len(manifest)
    if n < 10:
        raise ContractError(f"need at least 10 records to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be three fractions summing to 1, got {ratios}")
    seed = manifest.seed if seed is None else seed
    n_test = math.floor(ratios[1] * n)
    n_val = math.floor(ratios[2] * n)

    groups: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r.tag or "", []).append(i)
    keys = sorted(groups)
    sizes = [len(groups[k]) for k in keys]
    test_quota = _largest_remainder(sizes, n_test, n)
    val_quota = _largest_remainder(sizes, n_val, n)

    for gi, key in enumerate(keys):
        idx = np.array(groups[key])
        order = _rng(seed, 101, gi).permutation(len(idx))
        shuffled = idx[order]
        q_test, q_val = test_quota[gi], val_quota[gi]
        if q_test + q_val > len(idx):
            raise ContractError(f"tag group {key!r} too small for its quota")
        for j, rec_index in enumerate(shuffled):
            if j < q_test:
                part = "test"
            elif j < q_test + q_val:
                part = "val"
            else:
                part = "train"
            manifest.records[rec_index].split = part
    return manifest


# ---------------------------------------------------------------------------
# glyph atlas
# ---------------------------------------------------------------------------


@dataclass
class GlyphAtlas:
    """Per-symbol 16x16 ink bitmaps, one per style, deterministic per seed."""

    alphabet: list[str]
    styles: int
    seed: int
    bitmaps: dict = field(default_factory=dict)  # (symbol, style) -> bool [16x16]

    def bitmap(self, symbol: str, style: int) -> np.ndarray:
        try:
            return self.bitmaps[(symbol, style)]
        except KeyError:
            raise VocabularyError(f"symbol {symbol!r} style {style} not in atlas") from None


def _draw_glyph(rng: np.random.Generator, min_ink: float) -> np.ndarray:
    bmp = np.zeros((CELL, CELL), dtype=bool)
    target = math.ceil(min_ink * CELL * CELL)
    for _ in range(64):
        kind = rng.integers(0, 3)
        thick = 2
        if kind == 0:  # vertical stroke
            x = int(rng.integers(0, CELL - thick))
            y0, y1 = sorted(rng.integers(0, CELL, size=2))
            bmp[y0:y1 + 1, x:x + thick] = True
        elif kind == 1:  # horizontal stroke
            y = int(rng.integers(0, CELL - thick))
            x0, x1 = sorted(rng.integers(0, CELL, size=2))
            bmp[y:y + thick, x0:x1 + 1] = True
        else:  # diagonal stroke
            x0 = int(rng.integers(0, CELL))
            y0 = int(rng.integers(0, CELL))
            length = int(rng.integers(4, CELL))
            sx = 1 if rng.integers(0, 2) else -1
            for t in range(length):
                x, y = x0 + sx * t, y0 + t
                if 0 <= x < CELL - 1 and 0 <= y < CELL - 1:
                    bmp[y:y + 2, x:x + 2] = True
        if bmp.sum() >= target:
            break
    while bmp.sum() < target:  # fallback: sprinkle until quota
        bmp[rng.integers(0, CELL), rng.integers(0, CELL)] = True
    return bmp


def build_atlas(alphabet, n_styles: int = 2, seed: int = 0,
                min_ink: float = 0.40) -> GlyphAtlas:
    """Deterministic atlas; every bitmap has >= ``min_ink`` coverage and is
    unique within its style (collisions are perturbed pixel by pixel)."""
    alphabet = list(alphabet)
    if not alphabet:
        raise ParameterError("alphabet must be non-empty")
    if len(set(alphabet)) != len(alphabet):
        raise ParameterError("alphabet symbols must be unique")
    if " " in alphabet:
        raise ParameterError("space is the word separator, not an atlas symbol")
    atlas = GlyphAtlas(alphabet=alphabet, styles=n_styles, seed=seed)
    for style in range(n_styles):
        seen = set()
        for symbol in alphabet:
            rng = _rng(seed, 7, style, *_text_key(symbol))
            bmp = _draw_glyph(rng, min_ink)
            while bmp.tobytes() in seen:
                bmp = bmp.copy()
                if bmp.all():  # nothing left to add; removing one keeps coverage
                    bmp[rng.integers(0, CELL), rng.integers(0, CELL)] = False
                    continue
                # add ink so the coverage floor survives the perturbation
                y, x = rng.integers(0, CELL), rng.integers(0, CELL)
                while bmp[y, x]:
                    y, x = rng.integers(0, CELL), rng.integers(0, CELL)
                bmp[y, x] = True
            seen.add(bmp.tobytes())
            atlas.bitmaps[(symbol, style)] = bmp
    return atlas


# ---------------------------------------------------------------------------
# rendering and corpus generation
# ---------------------------------------------------------------------------


def render_text(text: str, atlas: GlyphAtlas, style: int = 0,
                rotation: float = 0.0, noise: float = 0.0,
                seed: int = 0) -> GrayImage:
    """Render ``text`` as glyph cells under a full-width rule line.

    Spaces leave an empty cell.  ``rotation`` (degrees) and ``noise``
    (salt-and-pepper fraction) are applied with a generator seeded by
    (seed, style, text), so rendering is deterministic.
    """
    if style < 0 or style >= atlas.styles:
        raise ParameterError(f"style {style} outside 0..{atlas.styles - 1}")
    cells = list(text)
    if len(cells) > MAX_CELLS:
        raise CapacityError(f"text needs {len(cells)} cells; page fits {MAX_CELLS}")
    page = np.full((PAGE_H, PAGE_W), WHITE, dtype=np.uint8)
    for row in RULE_ROWS:
        page[row, :] = BLACK
    for i, ch in enumerate(cells):
        if ch == " ":
            continue
        bmp = atlas.bitmap(ch, style)  # raises VocabularyError when unknown
        x0 = MARGIN + i * CELL
        region = page[GLYPH_TOP:GLYPH_TOP + CELL, x0:x0 + CELL]
        region[bmp] = BLACK
    img = GrayImage(page)
    rng = _rng(seed, 13, style, *_text_key(text))
    if rotation != 0.0:
        img = rotate_image(img, rotation, fill=WHITE)
    if noise > 0.0:
        flip = rng.random(img.pixels.shape) < noise
        values = rng.integers(0, 2, size=img.pixels.shape).astype(np.uint8) * WHITE
        pixels = img.pixels.copy()
        pixels[flip] = values[flip]
        img = GrayImage(pixels)
    return img


def gen_synth_corpus(texts, atlas: GlyphAtlas, out_dir=None, n_styles: int | None = None,
                     max_rotation: float = 0.0, noise: float = 0.0, seed: int = 0):
    """Render ``n_styles`` images per text (one per style).

    Returns (manifest, images dict path -> GrayImage); when ``out_dir`` is
    given the images are also written there as PGM.  Per-image rotations are
    drawn uniformly from [-max_rotation, +max_rotation].
    """
    texts = list(texts)
    if not texts:
        raise ContractError("texts must be non-empty")
    n_styles = atlas.styles if n_styles is None else n_styles
    if n_styles < 1 or n_styles > atlas.styles:
        raise ParameterError(f"n_styles {n_styles} outside 1..{atlas.styles}")
    records = []
    images = {}
    for ti, text in enumerate(texts):
        for style in range(n_styles):
            rot = 0.0
            if max_rotation > 0:
                rot = float(_rng(seed, 17, ti, style).uniform(-max_rotation, max_rotation))
            img = render_text(text, atlas, style=style, rotation=rot, noise=noise,
                              seed=seed)
            name = f"img_{ti:05d}_s{style}.pgm"
            records.append(ManifestRecord(path=name, text=text, tag=f"style{style}"))
            images[name] = img
    manifest = DatasetManifest(records=records, seed=seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for name, img in images.items():
            write_pgm(img, os.path.join(out_dir, name))
    return manifest, images


def make_random_texts(n: int, alphabet, seed: int = 0, n_words=(4, 5),
                      word_len=(1, 3), max_cells: int = MAX_CELLS) -> list[str]:
    """``n`` unique texts of short space-separated words."""
    alphabet = list(alphabet)
    rng = _rng(seed, 23)
    out: list[str] = []
    seen = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise ContractError(f"could not sample {n} unique texts; alphabet too small?")
        k = int(rng.integers(n_words[0], n_words[1] + 1))
        words = ["".join(rng.choice(alphabet, size=rng.integers(word_len[0], word_len[1] + 1)))
                 for _ in range(k)]
        text = " ".join(words)
        if len(text) > max_cells or text in seen:
            continue
        seen.add(text)
        out.append(text)
    return out


# ---------------------------------------------------------------------------
# model-facing samples
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    image: np.ndarray  # uint8 [H x W]
    ids: list
    text: str
    tag: str | None = None


def load_samples(manifest: DatasetManifest, vocab, images=None, root=None):
    """Materialize (image, token ids) samples per split.

    ``images`` is an in-memory dict path -> GrayImage; otherwise images load
    from ``root``/path as PGM.  Returns dict split name -> list[TrainSample].
    """
    from .imaging import read_pgm
    from .tokenizer import encode

    out = {"train": [], "test": [], "val": []}
    for r in manifest.records:
        if r.split not in out:
            raise ContractError(f"record {r.path} has no split; run split() first")
        if images is not None:
            img = images[r.path]
        else:
            img = read_pgm(os.path.join(root or ".", r.path))
        out[r.split].append(TrainSample(image=img.pixels, ids=encode(vocab, r.text),
                                        text=r.text, tag=r.tag))
    return out
