"""Canonical image representation, range conversions, I/O, augmentation, metrics.

Images are H×W×3 float64 arrays with an explicit range tag: "unit" for
[0, 1] storage range or "model" for the [-1, 1] network range. All
degradation operators work on unit range; conversion to model range
happens only at the trainer/denoiser boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

from .errors import ContractViolation

UNIT = "unit"
MODEL = "model"

_RANGE_BOUNDS = {UNIT: (0.0, 1.0), MODEL: (-1.0, 1.0)}
_RANGE_SLACK = 1e-6

PSNR_CAP_DB = 100.0

# Luma weights (ITU-R BT.601), used for SSIM and the JPEG luma channel.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class Image:
    """An H×W×3 float raster with a declared value range.

    Invariants: all values finite, inside the declared range within 1e-6,
    and both spatial dimensions at least 8.
    """

    data: np.ndarray
    range_tag: str = UNIT

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        validate_image(self.data, self.range_tag)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "Image":
        return Image(self.data.copy(), self.range_tag)


def validate_image(data: np.ndarray, range_tag: str) -> None:
    if range_tag not in _RANGE_BOUNDS:
        raise ContractViolation(f"unknown range tag {range_tag!r}")
    if data.ndim != 3 or data.shape[2] != 3:
        raise ContractViolation(f"image must be H×W×3, got shape {data.shape}")
    if data.shape[0] < 8 or data.shape[1] < 8:
        raise ContractViolation(f"image too small: {data.shape[0]}×{data.shape[1]} (min 8×8)")
    if not np.all(np.isfinite(data)):
        raise ContractViolation("image contains non-finite values")
    lo, hi = _RANGE_BOUNDS[range_tag]
    if data.min() < lo - _RANGE_SLACK or data.max() > hi + _RANGE_SLACK:
        raise ContractViolation(
            f"values [{data.min():.6g}, {data.max():.6g}] outside {range_tag} range"
        )


def to_model_range(img: Image) -> Image:
    """Affine map [0,1] -> [-1,1]: y = 2x - 1."""
    if img.range_tag != UNIT:
        raise ContractViolation(f"to_model_range expects unit range, got {img.range_tag!r}")
    return Image(2.0 * img.data - 1.0, MODEL)


def to_unit_range(img: Image) -> Image:
    """Inverse of `to_model_range`: x = (y + 1) / 2."""
    if img.range_tag != MODEL:
        raise ContractViolation(f"to_unit_range expects model range, got {img.range_tag!r}")
    return Image((img.data + 1.0) / 2.0, UNIT)


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

class PsnrResult(NamedTuple):
    value: float
    identical: bool


def psnr(a: Image, b: Image, peak: float = 1.0) -> PsnrResult:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    value = 10.0 * math.log10(peak * peak / mse)
    return PsnrResult(min(value, PSNR_CAP_DB), False)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def luma(img: Image) -> np.ndarray:
    return img.data @ LUMA_WEIGHTS


def ssim(a: Image, b: Image, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over the luma channel.

    11×11 Gaussian window with sigma 1.5, windows fully inside the image
    ("valid" placement). Data range is taken from the shared range tag.
    """
    _check_same_shape(a, b)
    win = 11
    if min(a.height, a.width) < win:
        raise ContractViolation(f"image smaller than the {win}×{win} SSIM window")
    lo, hi = _RANGE_BOUNDS[a.range_tag]
    data_range = hi - lo
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    x = luma(a)
    y = luma(b)
    w = _gaussian_window(win, 1.5)

    mu_x = _filter2_valid(x, w)
    mu_y = _filter2_valid(y, w)
    mu_xx = _filter2_valid(x * x, w)
    mu_yy = _filter2_valid(y * y, w)
    mu_xy = _filter2_valid(x * y, w)

    var_x = mu_xx - mu_x**2
    var_y = mu_yy - mu_y**2
    cov = mu_xy - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _filter2_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from scipy.signal import convolve2d

    return convolve2d(x, kernel, mode="valid")


def _check_same_shape(a: Image, b: Image) -> None:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.range_tag != b.range_tag:
        raise ContractViolation(f"range mismatch: {a.range_tag!r} vs {b.range_tag!r}")


@dataclass
class MetricReport:
    """Per-image and aggregate PSNR/SSIM for an evaluation run."""

    psnr: float
    ssim: float
    per_image: list = field(default_factory=list)  # (id, psnr, ssim) tuples
    lpips: float | None = None

    def __post_init__(self) -> None:
        if self.ssim > 1.0 + 1e-12:
            raise ContractViolation(f"ssim {self.ssim} exceeds 1")


# ----------------------------------------------------------------------
# PNG I/O
# ----------------------------------------------------------------------

def load_png(path: str | Path) -> Image:
    """Load an 8-bit RGB PNG as a unit-range image (values byte/255)."""
    try:
        with PILImage.open(path) as im:
            if im.mode != "RGB":
                raise ContractViolation(f"{path}: expected RGB PNG, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.float64)
    except FileNotFoundError:
        raise ContractViolation(f"cannot read image file {path}") from None
    return Image(arr / 255.0, UNIT)


def save_png(path: str | Path, img: Image) -> None:
    """Save a unit-range image as 8-bit RGB, rounding half-to-even."""
    if img.range_tag != UNIT:
        raise ContractViolation("save_png expects a unit-range image")
    quantized = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(quantized, mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------

def flip(img: Image, horizontal: bool, vertical: bool) -> Image:
    data = img.data
    if horizontal:
        data = data[:, ::-1]
    if vertical:
        data = data[::-1, :]
    return Image(np.ascontiguousarray(data), img.range_tag)


def random_crop_flip(img: Image, size: int, rng: np.random.Generator) -> Image:
    """Random `size`×`size` crop plus independent horizontal/vertical flips (p=0.5 each).

    Deterministic given the generator state.
    """
    if size > min(img.height, img.width):
        raise ContractViolation(f"crop size {size} exceeds image {img.height}×{img.width}")
    y0 = int(rng.integers(0, img.height - size + 1))
    x0 = int(rng.integers(0, img.width - size + 1))
    do_h = bool(rng.random() < 0.5)
    do_v = bool(rng.random() < 0.5)
    crop = Image(img.data[y0 : y0 + size, x0 : x0 + size].copy(), img.range_tag)
    return flip(crop, do_h, do_v)


def clip_unit(data: np.ndarray) -> np.ndarray:
    return np.clip(data, 0.0, 1.0)
