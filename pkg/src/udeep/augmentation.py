"""Offline augmentation with box-aware transforms: flip, zoom-crop, HSV shift, grayscale, mosaic."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from udeep.dataset import LabeledImage, NormalizedBox, write_label_file
from udeep.imaging import (
    ImageBuffer,
    PixelRect,
    crop_px,
    hsv_to_rgb_float,
    resize_stretch,
    rgb_to_hsv_float,
    save_png,
    to_grayscale,
)

log = logging.getLogger(__name__)

CROP_MIN_VISIBLE = 0.25
MOSAIC_MIN_AREA = 1e-4


class WrongImageCount(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    target_size: int = 416
    flip_h_p: float = 0.5
    flip_v_p: float = 0.5
    max_zoom: float = 0.49
    hue_shift_range: float = 25.0  # degrees, symmetric
    sat_shift_range: float = 0.42
    exposure_range: float = 0.22
    grayscale_p: float = 0.47
    mosaic_enabled: bool = False
    outputs_per_image: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_h_p", "flip_v_p", "grayscale_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if not 0.0 <= self.max_zoom <= 0.49:
            raise ValueError(f"max_zoom must lie in [0, 0.49], got {self.max_zoom}")
        for name in ("hue_shift_range", "sat_shift_range", "exposure_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} is a symmetric half-width and must be >= 0")
        if self.target_size < 1 or self.outputs_per_image < 0:
            raise ValueError("target_size must be >= 1 and outputs_per_image >= 0")

    @classmethod
    def from_text(cls, text: str) -> AugmentationSpec:
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                key, _, value = line.partition(":")
            key, value = key.strip(), value.strip().strip('"')
            if key not in types:
                raise ValueError(f"line {lineno}: unknown augmentation key {key!r}")
            kind = types[key]
            if kind == "bool":
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                values[key] = int(value)
            else:
                values[key] = float(value)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> AugmentationSpec:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _require_image(li: LabeledImage) -> ImageBuffer:
    if li.image is None:
        raise ValueError("augmentation needs a materialized LabeledImage")
    return li.image


def flip(li: LabeledImage, axis: Literal["horizontal", "vertical"]) -> LabeledImage:
    img = _require_image(li)
    if axis == "horizontal":
        px = img.pixels[:, ::-1]
        boxes = [NormalizedBox(b.class_id, 1.0 - b.cx, b.cy, b.w, b.h) for b in li.boxes]
    elif axis == "vertical":
        px = img.pixels[::-1, :]
        boxes = [NormalizedBox(b.class_id, b.cx, 1.0 - b.cy, b.w, b.h) for b in li.boxes]
    else:
        raise ValueError(f"unknown flip axis {axis!r}")
    return li.with_(img.with_pixels(np.ascontiguousarray(px)), boxes)


def crop_window(width: int, height: int, zoom: float, rng: np.random.Generator | None = None,
                offset: tuple[int, int] | None = None) -> PixelRect:
    ww = max(1, int(round((1.0 - zoom) * width)))
    wh = max(1, int(round((1.0 - zoom) * height)))
    if offset is None:
        if rng is None:
            raise ValueError("need an rng or an explicit offset")
        offset = (int(rng.integers(0, width - ww + 1)), int(rng.integers(0, height - wh + 1)))
    return PixelRect(offset[0], offset[1], ww, wh)


def boxes_in_window(boxes: Sequence[NormalizedBox], width: int, height: int, win: PixelRect,
                    min_visible: float = CROP_MIN_VISIBLE) -> list[NormalizedBox]:
    """Re-express boxes in window coordinates, dropping mostly hidden ones."""
    out = []
    for b in boxes:
        x1, y1, x2, y2 = b.corners
        x1, x2 = x1 * width, x2 * width
        y1, y2 = y1 * height, y2 * height
        ix1, iy1 = max(x1, win.x), max(y1, win.y)
        ix2, iy2 = min(x2, win.x2), min(y2, win.y2)
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        area = (x2 - x1) * (y2 - y1)
        if (ix2 - ix1) * (iy2 - iy1) < min_visible * area:
            continue
        out.append(NormalizedBox.from_corners(
            b.class_id,
            (ix1 - win.x) / win.w, (iy1 - win.y) / win.h,
            (ix2 - win.x) / win.w, (iy2 - win.y) / win.h,
        ))
    return out


def random_crop(li: LabeledImage, zoom: float, rng: np.random.Generator | None = None,
                offset: tuple[int, int] | None = None) -> LabeledImage:
    """Crop a (1 - zoom)-sized window and stretch it back to the original size."""
    if not 0.0 <= zoom < 1.0:
        raise ValueError(f"zoom must lie in [0, 1), got {zoom}")
    img = _require_image(li)
    win = crop_window(img.width, img.height, zoom, rng, offset)
    if (win.w, win.h) == img.size:
        return li
    cropped = resize_stretch(crop_px(img, win), img.width, img.height)
    return li.with_(cropped.with_pixels(cropped.pixels, img.source),
                    boxes_in_window(li.boxes, img.width, img.height, win))


def adjust_hsv(img: ImageBuffer, dh: float, ds: float, dv: float) -> ImageBuffer:
    """Rotate hue by ``dh`` degrees, scale saturation by (1+ds) and value by (1+dv)."""
    hsv = rgb_to_hsv_float(img.pixels.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + dh / 360.0) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + ds), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + dv), 0.0, 1.0)
    rgb = np.floor(hsv_to_rgb_float(hsv) * 255.0 + 0.5)
    return img.with_pixels(np.clip(rgb, 0, 255).astype(np.uint8))


def mosaic_quadrants(center: tuple[float, float], target: int) -> list[PixelRect]:
    """Top-left, top-right, bottom-left, bottom-right rects split at ``center``."""
    cx = int(round(center[0] * target))
    cy = int(round(center[1] * target))
    return [
        PixelRect(0, 0, cx, cy),
        PixelRect(cx, 0, target - cx, cy),
        PixelRect(0, cy, cx, target - cy),
        PixelRect(cx, cy, target - cx, target - cy),
    ]


def mosaic(lis: Sequence[LabeledImage], center: tuple[float, float], target: int = 416) -> LabeledImage:
    if len(lis) != 4:
        raise WrongImageCount(f"mosaic needs exactly 4 images, got {len(lis)}")
    if not all(0.25 <= c <= 0.75 for c in center):
        raise ValueError(f"mosaic center must lie in [0.25, 0.75]^2, got {center}")
    canvas = np.zeros((target, target, 3), dtype=np.uint8)
    boxes = []
    for li, quad in zip(lis, mosaic_quadrants(center, target)):
        img = resize_stretch(_require_image(li), target, target)
        canvas[quad.y:quad.y2, quad.x:quad.x2] = resize_stretch(img, quad.w, quad.h).pixels
        sx, sy = quad.w / target, quad.h / target
        ox, oy = quad.x / target, quad.y / target
        for b in li.boxes:
            w, h = b.w * sx, b.h * sy
            if w * h < MOSAIC_MIN_AREA:
                continue
            boxes.append(NormalizedBox(b.class_id, ox + b.cx * sx, oy + b.cy * sy, w, h))
    first = lis[0]
    return LabeledImage(first.path, tuple(boxes), ImageBuffer(canvas, "mosaic"))


def _uniform(rng: np.random.Generator, half_width: float) -> float:
    return float(rng.uniform(-half_width, half_width)) if half_width > 0 else 0.0


def plan_transforms(spec: AugmentationSpec, rng: np.random.Generator, n_sources: int) -> list[dict]:
    """Sample one output's transform chain. Consumes ``rng`` in a fixed order."""
    chain = []
    if spec.mosaic_enabled:
        partners = [int(i) for i in rng.integers(0, n_sources, size=3)]
        center = [float(c) for c in rng.uniform(0.25, 0.75, size=2)]
        chain.append({"op": "mosaic", "partners": partners, "center": center})
    if rng.random() < spec.flip_h_p:
        chain.append({"op": "flip", "axis": "horizontal"})
    if rng.random() < spec.flip_v_p:
        chain.append({"op": "flip", "axis": "vertical"})
    zoom = float(rng.uniform(0.0, spec.max_zoom)) if spec.max_zoom > 0 else 0.0
    if zoom > 0:
        size = spec.target_size
        ww = max(1, int(round((1.0 - zoom) * size)))
        offset = [int(rng.integers(0, size - ww + 1)), int(rng.integers(0, size - ww + 1))]
        chain.append({"op": "crop", "zoom": zoom, "offset": offset})
    dh = _uniform(rng, spec.hue_shift_range)
    ds = _uniform(rng, spec.sat_shift_range)
    dv = _uniform(rng, spec.exposure_range)
    if dh or ds or dv:
        chain.append({"op": "hsv", "dh": dh, "ds": ds, "dv": dv})
    if rng.random() < spec.grayscale_p:
        chain.append({"op": "grayscale"})
    return chain


def output_rng(seed: int, source_index: int, output_index: int) -> np.random.Generator:
    # one independent stream per output, so outputs can be generated in any order
    return np.random.default_rng([seed, source_index, output_index])


def apply_transforms(li: LabeledImage, chain: Sequence[dict], target: int,
                     sources: Sequence[LabeledImage] = ()) -> LabeledImage:
    img = _require_image(li)
    li = li.with_(resize_stretch(img, target, target), li.boxes)
    for step in chain:
        op = step["op"]
        if op == "mosaic":
            partners = [sources[i].materialize() for i in step["partners"]]
            li = mosaic([li, *partners], tuple(step["center"]), target)
        elif op == "flip":
            li = flip(li, step["axis"])
        elif op == "crop":
            li = random_crop(li, step["zoom"], offset=tuple(step["offset"]))
        elif op == "hsv":
            li = li.with_(adjust_hsv(li.image, step["dh"], step["ds"], step["dv"]), li.boxes)
        elif op == "grayscale":
            li = li.with_(to_grayscale(li.image), li.boxes)
        else:
            raise ValueError(f"unknown transform {op!r}")
    return li


def augment_dataset(dataset, spec: AugmentationSpec, out_dir: str | Path) -> list[dict]:
    """Write ``outputs_per_image`` augmented variants of every source image.

    ``dataset`` is a loaded Dataset or a sequence of LabeledImages. Images go
    to ``out_dir/images`` with co-named label files; ``out_dir/manifest.jsonl``
    records the transform chain of every output. Returns the manifest records.
    """
    sources = list(dataset.images()) if hasattr(dataset, "images") else list(dataset)
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for si, src in enumerate(sources):
        try:
            src = src.materialize()
        except OSError as exc:
            raise OSError(f"cannot read source image {src.path}: {exc}") from exc
        stem = Path(src.path).stem if src.path else f"img{si:05d}"
        for oi in range(spec.outputs_per_image):
            chain = plan_transforms(spec, output_rng(spec.seed, si, oi), len(sources))
            result = apply_transforms(src, chain, spec.target_size, sources)
            name = f"{stem}_aug{oi:03d}"
            image_path = image_dir / f"{name}.png"
            try:
                save_png(result.image, image_path)
                write_label_file(image_dir / f"{name}.txt", result.boxes)
            except OSError as exc:
                raise OSError(f"cannot write {image_path}: {exc}") from exc
            records.append({
                "source": str(src.path) if src.path else stem,
                "output": str(image_path.relative_to(out_dir)),
                "transforms": chain,
            })
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out_dir / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True), encoding="utf-8")
    log.info("wrote %d augmented images to %s", len(records), out_dir)
    return records
