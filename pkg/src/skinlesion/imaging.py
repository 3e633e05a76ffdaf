"""Deterministic image preprocessing on ``uint8`` rasters.

Images are numpy arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``;
masks are ``(H, W)`` arrays of 0/1. Every float to ``uint8`` conversion
rounds half to even (``np.rint``) and clamps to ``0..255``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import EmptyForegroundError, ShapeError, ValidationError
from .tensor import Tensor

DEFAULT_CROP_THRESHOLD = 10


@dataclass(frozen=True)
class PiecewiseParams:
    """Control points ``(r1, s1)`` and ``(r2, s2)`` of the intensity stretch."""

    r1: int = 70
    s1: int = 0
    r2: int = 140
    s2: int = 255

    def __post_init__(self):
        vals = (self.r1, self.s1, self.r2, self.s2)
        if any(not 0 <= v <= 255 for v in vals):
            raise ValidationError(f"piecewise params must be u8 values, got {vals}")
        if not (0 < self.r1 <= self.r2 < 255):
            raise ValidationError(f"need 0 < r1 <= r2 < 255, got r1={self.r1}, r2={self.r2}")
        if self.s1 > self.s2:
            raise ValidationError(f"need s1 <= s2, got s1={self.s1}, s2={self.s2}")


def as_image(img) -> np.ndarray:
    """Validate and normalise to a ``(H, W, C)`` uint8 array."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ShapeError("image", "(H, W, 1|3)", a.shape)
    if a.dtype != np.uint8:
        raise ValidationError(f"image pixels must be uint8, got {a.dtype}")
    return a


def to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


# --- I/O ---------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I"):
            return as_image(np.asarray(im.convert("L")))
        return as_image(np.asarray(im.convert("RGB")))


def save_image(img, path) -> None:
    a = as_image(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(a[:, :, 0] if a.shape[2] == 1 else a).save(path)


def load_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def save_mask(mask, path) -> None:
    """Write a mask as a 1-bit PNG."""
    m = np.asarray(mask).astype(bool)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(m).convert("1").save(path, format="PNG")


# --- geometry ----------------------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    a = as_image(img)
    h, w, _ = a.shape
    if (h, w) == (out_h, out_w):
        return a.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    f = a.astype(np.float64)
    top = f[y0] * (1 - fy)[:, None, None] + f[y1] * fy[:, None, None]
    out = top[:, x0] * (1 - fx)[None, :, None] + top[:, x1] * fx[None, :, None]
    return to_u8(out)


def resize_mask(mask, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour mask resize (keeps values binary)."""
    m = np.asarray(mask)
    h, w = m.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return m[rows][:, cols].astype(np.uint8)


# --- intensity ---------------------------------------------------------------


def to_grayscale(img) -> np.ndarray:
    """Luma ``0.299 R + 0.587 G + 0.114 B``; 1-channel input passes through."""
    a = as_image(img)
    if a.shape[2] == 1:
        return a.copy()
    f = a.astype(np.float64)
    luma = 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]
    return to_u8(luma)[:, :, None]


def pixel_val(pix: float, r1: float, s1: float, r2: float, s2: float) -> float:
    """Three-segment stretch for a single intensity value."""
    if 0 <= pix <= r1:
        return (s1 / r1) * pix
    elif r1 < pix <= r2:
        return ((s2 - s1) / (r2 - r1)) * (pix - r1) + s1
    else:
        return ((255 - s2) / (255 - r2)) * (pix - r2) + s2


def piecewise_lut(p: PiecewiseParams) -> np.ndarray:
    raw = np.array([pixel_val(v, p.r1, p.s1, p.r2, p.s2) for v in range(256)])
    return to_u8(raw)


def piecewise_linear(img, p: PiecewiseParams = PiecewiseParams()) -> np.ndarray:
    """Brighten/stretch contrast with a 256-entry lookup table."""
    if not isinstance(p, PiecewiseParams):
        raise ValidationError("piecewise_linear needs PiecewiseParams")
    return piecewise_lut(p)[as_image(img)]


def minkowski_distance(x, y, p: float) -> float:
    """``(sum |x_i - y_i|^p)^(1/p)``."""
    xa, ya = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ShapeError("minkowski_distance operands", xa.shape, ya.shape)
    if p < 1:
        raise ValidationError(f"Minkowski order must be >= 1, got {p}")
    return float((np.abs(xa - ya) ** p).sum() ** (1.0 / p))


def minkowski_estimates(values, p: float = 6) -> np.ndarray:
    """Per-channel Minkowski-p mean of ``values / 255`` for an (H, W, 3) array."""
    f = np.asarray(values, dtype=np.float64) / 255.0
    return np.mean(f.reshape(-1, f.shape[-1]) ** p, axis=0) ** (1.0 / p)


def shades_of_gray_float(img, p: float = 6) -> np.ndarray:
    """Colour-constancy correction before rounding and clamping."""
    a = as_image(img)
    if a.shape[2] != 3:
        raise ShapeError("shades_of_gray channels", 3, a.shape[2])
    est = minkowski_estimates(a, p)
    if np.any(est == 0):
        raise ValidationError("a colour channel is identically zero; illuminant gain undefined")
    gains = est.mean() / est
    return a.astype(np.float64) * gains


def shades_of_gray(img, p: float = 6) -> np.ndarray:
    """Equalise per-channel Minkowski-p illuminant estimates (p=6 by default)."""
    return to_u8(shades_of_gray_float(img, p))


# --- cropping and masking ----------------------------------------------------


def foreground_box(img, threshold: int = DEFAULT_CROP_THRESHOLD) -> tuple[int, int, int, int]:
    """``(top, left, height, width)`` of the crop around the bright foreground.

    The foreground is ``grayscale >= threshold``. Its horizontal and vertical
    axes run between the extreme foreground points; the longer one is the
    major axis. The returned rectangle has those lengths and is centred on the
    foreground centroid, then clipped to the image.
    """
    gray = to_grayscale(img)[:, :, 0]
    fg = gray >= threshold
    if not fg.any():
        raise EmptyForegroundError(f"no pixel >= threshold {threshold}")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    vert = int(rows[-1] - rows[0] + 1)
    horiz = int(cols[-1] - cols[0] + 1)
    # major axis keeps its own orientation, so the box is vert x horiz
    height, width = vert, horiz

    ys, xs = np.nonzero(fg)
    cy, cx = ys.mean(), xs.mean()
    top = int(np.floor(cy - (height - 1) / 2 + 0.5))
    left = int(np.floor(cx - (width - 1) / 2 + 0.5))
    h, w = gray.shape
    t0, l0 = max(top, 0), max(left, 0)
    t1, l1 = min(top + height, h), min(left + width, w)
    return t0, l0, t1 - t0, l1 - l0


def crop_black_border(img, threshold: int = DEFAULT_CROP_THRESHOLD) -> np.ndarray:
    a = as_image(img)
    t, l, hh, ww = foreground_box(a, threshold)
    return a[t : t + hh, l : l + ww].copy()


def apply_mask(img, mask) -> np.ndarray:
    """Zero every channel where ``mask`` is 0."""
    a = as_image(img)
    m = np.asarray(mask)
    if m.shape != a.shape[:2]:
        raise ShapeError("mask spatial dims", a.shape[:2], m.shape)
    return a * (m != 0)[:, :, None].astype(np.uint8)


def image_to_array(img) -> np.ndarray:
    """``[C, H, W]`` float32 in ``[0, 1]``."""
    a = as_image(img)
    return a.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def to_tensor(img) -> Tensor:
    return Tensor(image_to_array(img))


def mask_to_tensor(mask, channels: int = 3) -> np.ndarray:
    """Binary mask replicated to ``channels`` planes, float32."""
    m = (np.asarray(mask) != 0).astype(np.float32)
    return np.repeat(m[None], channels, axis=0)
