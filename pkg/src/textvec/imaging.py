"""Pixel-grid primitives shared by every other module.

Conventions:
  - RasterImage: float32/float64 ndarray of shape (H, W, 3), values in [0, 1].
  - AlphaMap: float32/float64 ndarray of shape (H, W), values in [0, 1].
  - x is the column axis, y the row axis; pixel centers sit at integer
    coordinates, so sampling an alpha map at (x=3, y=5) reads entry [5, 3].

All operations are pure functions over immutable inputs; 8-bit values appear
only at PNG boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import convolve1d

PSNR_CAP_DB = 99.0
MAX_BLUR_RADIUS = 8


class DimensionMismatchError(ValueError):
    """Two images that must share dimensions do not."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle; (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def padded(self, pad_x: float, pad_y: float) -> "Rect":
        return Rect(self.x - pad_x, self.y - pad_y, self.w + 2 * pad_x, self.h + 2 * pad_y)

    def intersect(self, other: "Rect") -> "Rect":
        x0 = max(self.x, other.x)
        y0 = max(self.y, other.y)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        return Rect(x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0))

    def round_int(self) -> tuple[int, int, int, int]:
        """Integer (x0, y0, x1, y1) covering the rectangle."""
        return (
            int(math.floor(self.x)),
            int(math.floor(self.y)),
            int(math.ceil(self.x1)),
            int(math.ceil(self.y1)),
        )

    @staticmethod
    def hull(rects: "list[Rect]") -> "Rect":
        x0 = min(r.x for r in rects)
        y0 = min(r.y for r in rects)
        x1 = max(r.x1 for r in rects)
        y1 = max(r.y1 for r in rects)
        return Rect(x0, y0, x1 - x0, y1 - y0)


def ensure_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name}: expected (H, W, 3) array, got shape {img.shape}")
    if img.dtype not in (np.float32, np.float64):
        raise ValueError(f"{name}: expected float32/float64, got {img.dtype}")
    if img.size and (float(img.min()) < 0.0 or float(img.max()) > 1.0):
        raise ValueError(f"{name}: values outside [0, 1]")
    return img


def ensure_alpha(alpha: np.ndarray, name: str = "alpha") -> np.ndarray:
    alpha = np.asarray(alpha)
    if alpha.ndim != 2:
        raise ValueError(f"{name}: expected (H, W) array, got shape {alpha.shape}")
    if alpha.dtype not in (np.float32, np.float64):
        raise ValueError(f"{name}: expected float32/float64, got {alpha.dtype}")
    if alpha.size and (float(alpha.min()) < 0.0 or float(alpha.max()) > 1.0):
        raise ValueError(f"{name}: values outside [0, 1]")
    return alpha


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_error(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99 dB."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


# --- sampling ---------------------------------------------------------------


def bilinear_sample(
    src: np.ndarray, sx: np.ndarray, sy: np.ndarray, mode: str = "zero"
) -> np.ndarray:
    """Sample a single-channel map at fractional coordinates.

    mode="zero": coordinates outside the source read 0 (zero-padded shapes).
    mode="clamp": coordinates clamp to the nearest edge pixel (opaque images).
    """
    h, w = src.shape[:2]
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    if mode == "clamp":
        sx = np.clip(sx, 0.0, w - 1.0)
        sy = np.clip(sy, 0.0, h - 1.0)
    elif mode != "zero":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out_extra = src.shape[2:]
    out = np.zeros(sx.shape + out_extra, dtype=np.float64)

    def corner(xi, yi, weight):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        if not ok.any():
            return
        vals = src[yi[ok], xi[ok]]
        if out_extra:
            out[ok] += weight[ok][..., None] * vals
        else:
            out[ok] += weight[ok] * vals

    corner(x0, y0, (1 - fx) * (1 - fy))
    corner(x0 + 1, y0, fx * (1 - fy))
    corner(x0, y0 + 1, (1 - fx) * fy)
    corner(x0 + 1, y0 + 1, fx * fy)
    return out


def affine_sample(
    src: np.ndarray, transform, out_width: int, out_height: int
) -> np.ndarray:
    """Resample an alpha map under an affine transform.

    `transform` holds 6 coefficients (a, b, c, d, e, f) mapping *output* pixel
    coordinates to *source* coordinates: sx = a*x + b*y + c, sy = d*x + e*y + f.
    Bilinear interpolation; samples outside the source read 0.
    """
    if out_width <= 0 or out_height <= 0:
        raise ValueError(f"zero-area output: {out_width}x{out_height}")
    t = np.asarray(transform, dtype=np.float64).reshape(6)
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    sx = t[0] * xs + t[1] * ys + t[2]
    sy = t[3] * xs + t[4] * ys + t[5]
    out = bilinear_sample(src, sx, sy, mode="zero")
    return np.clip(out, 0.0, 1.0).astype(src.dtype, copy=False)


def resize_bilinear(img: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Resize an image or alpha map, aligning pixel centers; edges clamp."""
    if out_width <= 0 or out_height <= 0:
        raise ValueError(f"zero-area output: {out_width}x{out_height}")
    h, w = img.shape[:2]
    if (out_width, out_height) == (w, h):
        return img.copy()
    sx = (np.arange(out_width) + 0.5) * (w / out_width) - 0.5
    sy = (np.arange(out_height) + 0.5) * (h / out_height) - 0.5
    gx, gy = np.meshgrid(sx, sy)
    out = bilinear_sample(img, gx, gy, mode="clamp")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


# --- blurring ---------------------------------------------------------------


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel, truncated at radius min(ceil(3*sigma), 8)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    radius = min(int(math.ceil(3.0 * sigma)), MAX_BLUR_RADIUS)
    if sigma == 0 or radius == 0:
        return np.ones(1, dtype=np.float64)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def gaussian_blur(src: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders; sigma=0 is the identity."""
    ensure_alpha(src, "blur source")
    if sigma == 0:
        return src.copy()
    k = blur_kernel(sigma)
    if k.size == 1:
        return src.copy()
    out = convolve1d(src.astype(np.float64), k, axis=0, mode="reflect")
    out = convolve1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(src.dtype, copy=False)


# --- PNG I/O ----------------------------------------------------------------


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize unit-range floats to 8 bits, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB or RGBA PNG as a float32 image; alpha is ignored."""
    with PILImage.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    return (arr[..., :3].astype(np.float32)) / 255.0


def write_png(path, img: np.ndarray) -> None:
    ensure_image(img, "png image")
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_alpha_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr.astype(np.float32) / 255.0


def write_alpha_png(path, alpha: np.ndarray) -> None:
    ensure_alpha(alpha, "png alpha")
    PILImage.fromarray(to_uint8(alpha), mode="L").save(path, format="PNG")
