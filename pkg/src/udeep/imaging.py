"""Raster primitives: an immutable 8-bit RGB buffer plus resize, crop, color conversion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major (height, width, 3) uint8 raster.

    ``source`` is an identifier carried through crops and resizes so that
    scripted detector backends can recognise the image; it takes no part in
    equality.
    """

    pixels: np.ndarray
    source: str = field(default="", compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        if px.flags.writeable:
            px = px.copy()
            px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None

    def with_pixels(self, pixels: np.ndarray, source: str | None = None) -> ImageBuffer:
        return ImageBuffer(pixels, self.source if source is None else source)

    @classmethod
    def filled(cls, width: int, height: int, rgb=(0, 0, 0), source: str = "") -> ImageBuffer:
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = rgb
        return cls(px, source)


@dataclass(frozen=True)
class PixelRect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect must be at least 1x1, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"rect origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def compose(self, inner: PixelRect) -> PixelRect:
        """Rect ``inner`` (relative to this rect) expressed in this rect's parent frame."""
        return PixelRect(self.x + inner.x, self.y + inner.y, inner.w, inner.h)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def _axis_weights(src: int, dst: int):
    """Integer sample indices and weight numerators over a denominator of 2*dst.

    Half-pixel centers: output index i samples source position
    ((2i + 1) * src - dst) / (2 * dst), clamped to the edge pixels.
    """
    den = 2 * dst
    pos = (2 * np.arange(dst, dtype=np.int64) + 1) * src - dst
    pos = np.clip(pos, 0, (src - 1) * den)
    lo = pos // den
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo * den
    return lo, hi, frac, den


def resize_stretch(img: ImageBuffer, tw: int, th: int) -> ImageBuffer:
    """Bilinear stretch to ``tw`` x ``th`` (aspect ratio is not preserved).

    Weights are rational, so the blend is computed exactly in integers and
    rounded half up.
    """
    if tw < 1 or th < 1:
        raise ValueError(f"target size must be at least 1x1, got {tw}x{th}")
    if (tw, th) == img.size:
        return img
    src = img.pixels.astype(np.int64)
    x0, x1, fx, dx = _axis_weights(img.width, tw)
    y0, y1, fy, dy = _axis_weights(img.height, th)
    fx = fx[None, :, None]
    rows0, rows1 = src[y0], src[y1]
    top = rows0[:, x0] * (dx - fx) + rows0[:, x1] * fx
    bottom = rows1[:, x0] * (dx - fx) + rows1[:, x1] * fx
    fy = fy[:, None, None]
    den = dx * dy
    out = (top * (dy - fy) + bottom * fy + den // 2) // den
    return img.with_pixels(out.astype(np.uint8))


def crop_px(img: ImageBuffer, r: PixelRect) -> ImageBuffer:
    if r.x2 > img.width or r.y2 > img.height:
        raise OutOfBounds(f"{r} exceeds {img.width}x{img.height} image")
    if (r.x, r.y, r.w, r.h) == (0, 0, img.width, img.height):
        return img
    source = f"{img.source}#{r.x},{r.y},{r.w},{r.h}"
    return ImageBuffer(img.pixels[r.y:r.y2, r.x:r.x2], source)


def rgb_to_hsv_float(rgb: np.ndarray) -> np.ndarray:
    """Hexcone HSV of a (..., 3) array in [0, 1]; hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h / 6.0, 0.0) % 1.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb_float(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    h6 = h * 6.0
    sector = np.floor(h6).astype(np.intp) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(sector, choices_r)
    g = np.choose(sector, choices_g)
    b = np.choose(sector, choices_b)
    return np.stack([r, g, b], axis=-1)


def convert_color(img: ImageBuffer, direction: Literal["rgb_to_hsv", "hsv_to_rgb"]) -> ImageBuffer:
    """Convert between RGB and 8-bit HSV (H scaled from 0-360 degrees onto 0-255).

    The 8-bit hue grid is coarser than 1 degree, so a roundtrip of a
    high-chroma pixel can be off by up to 3 per channel.
    """
    px = img.pixels.astype(np.float64) / 255.0
    if direction == "rgb_to_hsv":
        out = rgb_to_hsv_float(px) * 255.0
        out = _round_half_up(out)
        out[..., 0] %= 256  # hue 255.5+ wraps to 0
    elif direction == "hsv_to_rgb":
        out = _round_half_up(hsv_to_rgb_float(px) * 255.0)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return img.with_pixels(np.clip(out, 0, 255).astype(np.uint8))


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luma replicated into all three channels."""
    luma = gray_values(img)
    return img.with_pixels(np.repeat(luma[..., None], 3, axis=2).astype(np.uint8))


def gray_values(img: ImageBuffer) -> np.ndarray:
    """(h, w) integer luma plane, the intensity used by segmentation."""
    px = img.pixels.astype(np.int64)
    return (299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2] + 500) // 1000


def load_png(path: str | Path) -> ImageBuffer:
    path = Path(path)
    with Image.open(path) as im:
        rgb = im.convert("RGB")  # drops alpha, expands palettes
        return ImageBuffer(np.asarray(rgb, dtype=np.uint8), path.stem)


def save_png(img: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img.pixels)).save(path, format="PNG")
