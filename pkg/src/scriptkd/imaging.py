"""Document-image preprocessing: grayscale, denoise, binarize, deskew, resize.

All stages are pure functions of (input, parameters).  Images travel as
``GrayImage`` (8-bit, row-major).  Binary PGM (P5, maxval 255) is the
interchange format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ParameterError

WHITE = 255
BLACK = 0


@dataclass
class GrayImage:
    """ 2-D 8-bit intensity image; ``pixels`` is a [height x width] array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.size == 0:
            raise DataFormatError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        self.pixels = arr.astype(np.uint8)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def copy(self):
        return GrayImage(self.pixels.copy())


@dataclass
class ThresholdParams:
    """Adaptive-threshold settings: scale factor k (0.5 < k < 2) and odd window."""

    k: float = 1.0
    window: int = 31

    def __post_init__(self):
        if not (0.5 < self.k < 2.0):
            raise ParameterError(f"k must satisfy 0.5 < k < 2, got {self.k}")
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 3, got {self.window}")


@dataclass
class PreprocessConfig:
    """Parameters for the full scan-to-model-input chain."""

    bilateral_kernel: int = 3
    sigma_space: float = 1.0
    sigma_range: float = 25.0
    threshold: ThresholdParams = field(default_factory=ThresholdParams)
    threshold_rule: str = "mean-offset"  # or "literal"
    deskew_max_angle: float = 15.0
    deskew_step: float = 0.25
    out_height: int = 128
    out_width: int = 256


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_pgm(img: GrayImage, path):
    """Write binary PGM with the exact header ``P5\\n<w> <h>\\n255\\n``."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.pixels.tobytes())


def read_pgm(path) -> GrayImage:
    """Read binary PGM (maxval must be 255; ``#`` comments tolerated)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise DataFormatError(f"{path}: not a P5 PGM file")
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if start == i:
            raise DataFormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:i])
    i += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise DataFormatError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise DataFormatError(f"{path}: expected maxval 255, got {maxval}")
    body = raw[i:i + width * height]
    if len(body) != width * height:
        raise DataFormatError(f"{path}: expected {width * height} pixels, got {len(body)}")
    return GrayImage(np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def to_grayscale(rgb, width, height) -> GrayImage:
    """Convert interleaved 8-bit RGB triples to luma (BT.601 weights)."""
    buf = np.frombuffer(bytes(rgb), dtype=np.uint8) if not isinstance(rgb, np.ndarray) else rgb
    buf = np.asarray(buf, dtype=np.uint8).ravel()
    if buf.size != 3 * width * height:
        raise DataFormatError(
            f"RGB buffer length {buf.size} != 3*{width}*{height}")
    rgbf = buf.reshape(height, width, 3).astype(np.float64)
    luma = 0.299 * rgbf[..., 0] + 0.587 * rgbf[..., 1] + 0.114 * rgbf[..., 2]
    return GrayImage(np.clip(np.rint(luma), 0, 255).astype(np.uint8))


def _gaussian_kernel_1d(window: int) -> np.ndarray:
    half = (window - 1) // 2
    # OpenCV's default sigma for a given aperture, a widely used convention
    sigma = 0.3 * (half - 1) + 0.8
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_separable(arr: np.ndarray, window: int) -> np.ndarray:
    """Gaussian blur with a window x window kernel, edge-replicated borders."""
    half = (window - 1) // 2
    k = _gaussian_kernel_1d(window)
    padded = np.pad(arr, ((half, half), (0, 0)), mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    for i, w in enumerate(k):
        out += w * padded[i:i + arr.shape[0], :]
    padded = np.pad(out, ((0, 0), (half, half)), mode="edge")
    out2 = np.zeros_like(arr, dtype=np.float64)
    for i, w in enumerate(k):
        out2 += w * padded[:, i:i + arr.shape[1]]
    return out2


def bilateral_filter(img: GrayImage, kernel=3, sigma_space=1.0, sigma_range=25.0) -> GrayImage:
    """Edge-preserving smoothing: spatial x range Gaussian weighted mean.

    Borders replicate the edge row/column.  Output values always lie within
    the local window's min/max (convex combination).
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"kernel must be odd, got {kernel}")
    if sigma_space <= 0 or sigma_range <= 0:
        raise ParameterError("bilateral sigmas must be positive")
    half = kernel // 2
    src = img.pixels.astype(np.float64)
    padded = np.pad(src, half, mode="edge")
    h, w = src.shape
    num = np.zeros_like(src)
    den = np.zeros_like(src)
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            neigh = padded[half + dy:half + dy + h, half + dx:half + dx + w]
            ws = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma_space ** 2))
            wr = np.exp(-((neigh - src) ** 2) / (2.0 * sigma_range ** 2))
            weight = ws * wr
            num += weight * neigh
            den += weight
    return GrayImage(np.clip(np.rint(num / den), 0, 255).astype(np.uint8))


def gaussian_adaptive_threshold(img: GrayImage, params: ThresholdParams,
                                rule: str = "mean-offset") -> GrayImage:
    """Binarize with a per-pixel threshold from local Gaussian statistics.

    Per pixel, sigma is the standard deviation of the Gaussian-weighted
    window centered there (blurred first and second moments).

    rule="literal":      pixel > k*sigma             -> white, else black
    rule="mean-offset":  pixel > local_mean - k*sigma -> white, else black

    The literal rule whitens any flat region with nonzero intensity, which
    inverts polarity on bright paper; mean-offset is the practical default
    (dark strokes map to black).
    """
    if rule not in ("literal", "mean-offset"):
        raise ParameterError(f"unknown threshold rule {rule!r}")
    if params.window > min(img.width, img.height):
        raise ParameterError(
            f"window {params.window} exceeds image extent {img.width}x{img.height}")
    src = img.pixels.astype(np.float64)
    mean = _blur_separable(src, params.window)
    second = _blur_separable(src * src, params.window)
    sigma = np.sqrt(np.maximum(second - mean * mean, 0.0))
    if rule == "literal":
        t = params.k * sigma
    else:
        t = mean - params.k * sigma
    return GrayImage(np.where(src > t, WHITE, BLACK).astype(np.uint8))


def rotate_image(img: GrayImage, degrees: float, fill: int = WHITE) -> GrayImage:
    """Rotate about the center (nearest neighbor), filling uncovered pixels.

    Nearest-neighbor keeps binary images binary.
    """
    if degrees == 0.0:
        return img.copy()
    h, w = img.pixels.shape
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.indices((h, w), dtype=np.float64)
    ys -= cy
    xs -= cx
    # inverse mapping: sample the source at the un-rotated coordinate
    src_x = c * xs + s * ys + cx
    src_y = -s * xs + c * ys + cy
    sx = np.rint(src_x).astype(np.int64)
    sy = np.rint(src_y).astype(np.int64)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full((h, w), fill, dtype=np.uint8)
    out[valid] = img.pixels[sy[valid], sx[valid]]
    return GrayImage(out)


def deskew(img: GrayImage, max_angle: float = 15.0, step: float = 0.25):
    """Estimate and undo global rotation via projection-profile variance.

    Tries candidate corrections in [-max_angle, +max_angle] (small |angle|
    first), scoring each by the variance of per-row ink sums of the rotated
    image, and applies the best one.  Returns (corrected image, angle
    applied).  A blank image (no pixel below 128) is returned unchanged with
    angle 0.
    """
    if not (0 < step <= max_angle <= 45):
        raise ParameterError(
            f"need 0 < step <= max_angle <= 45, got step={step}, max_angle={max_angle}")
    if not (img.pixels < 128).any():
        return img.copy(), 0.0
    n = int(round(max_angle / step))
    candidates = [0.0]
    for i in range(1, n + 1):
        candidates.extend((-i * step, i * step))
    best_angle = 0.0
    best_score = -1.0
    for angle in candidates:
        rotated = rotate_image(img, angle, fill=WHITE)
        ink = (WHITE - rotated.pixels).astype(np.float64)
        score = ink.sum(axis=1).var()
        if score > best_score:
            best_score = score
            best_angle = angle
    return rotate_image(img, best_angle, fill=WHITE), best_angle


def resize(img: GrayImage, out_h: int = 128, out_w: int = 256) -> GrayImage:
    """Bilinear resize (corner-aligned); exact identity when sizes match."""
    if out_h <= 0 or out_w <= 0:
        raise ParameterError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = img.pixels.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    src = img.pixels.astype(np.float64)
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return GrayImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def preprocess(img: GrayImage, config: PreprocessConfig | None = None) -> GrayImage:
    """Full chain: bilateral denoise, adaptive threshold, deskew, resize."""
    cfg = config or PreprocessConfig()
    out = bilateral_filter(img, cfg.bilateral_kernel, cfg.sigma_space, cfg.sigma_range)
    out = gaussian_adaptive_threshold(out, cfg.threshold, rule=cfg.threshold_rule)
    out, _ = deskew(out, cfg.deskew_max_angle, cfg.deskew_step)
    return resize(out, cfg.out_height, cfg.out_width)
