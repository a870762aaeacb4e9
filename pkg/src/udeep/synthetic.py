"""Synthetic blob frames with YOLO labels and a matching mock-detector script.

Blobs have constant intensity on a constant background, so the GMM
segmentation recovers them exactly and the mock script can be keyed by the
exact crop each region produces (``"<stem>#x,y,w,h"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from udeep.dataset import NormalizedBox, format_label_line
from udeep.imaging import ImageBuffer, save_png

BACKGROUND = 20
INTENSITY = {0: 230, 1: 140}  # crayfish bright, plastic mid-gray


@dataclass(frozen=True)
class Blob:
    x: int
    y: int
    w: int
    h: int
    class_id: int

    def box(self, width: int, height: int) -> NormalizedBox:
        return NormalizedBox.from_corners(self.class_id, self.x / width, self.y / height,
                                          (self.x + self.w) / width, (self.y + self.h) / height)


def blob_frame(width: int, height: int, blobs, source: str = "frame", bg: int = BACKGROUND) -> ImageBuffer:
    px = np.full((height, width, 3), bg, dtype=np.uint8)
    for b in blobs:
        px[b.y:b.y + b.h, b.x:b.x + b.w] = INTENSITY[b.class_id]
    return ImageBuffer(px, source)


def _place(rng: np.random.Generator, width: int, height: int, n: int, margin: int = 3) -> list[Blob]:
    blobs: list[Blob] = []
    while len(blobs) < n:
        # area/7 must clear the 0.5% histogram-peak floor for the blob to get its own component
        w, h = (int(v) for v in rng.integers(28, 48, size=2))
        x, y = int(rng.integers(0, width - w)), int(rng.integers(0, height - h))
        if all(x + w + margin <= b.x or b.x + b.w + margin <= x or y + h + margin <= b.y or b.y + b.h + margin <= y
               for b in blobs):
            blobs.append(Blob(x, y, w, h, int(rng.integers(0, 2))))
    # distinct classes keep regions apart even if blobs were adjacent
    if n == 2 and blobs[0].class_id == blobs[1].class_id:
        b = blobs[1]
        blobs[1] = Blob(b.x, b.y, b.w, b.h, 1 - b.class_id)
    return blobs


def _det(class_id, cx, cy, w, h, conf):
    return {"class_id": class_id, "cx": cx, "cy": cy, "w": w, "h": h, "confidence": round(conf, 3)}


@dataclass(frozen=True)
class Fixture:
    image_dir: Path
    mock_path: Path
    blobs: dict[str, list[Blob]]


def make_fixture(out_dir: str | Path, n_images: int = 69, seed: int = 0, width: int = 160, height: int = 120,
                 miss_p: float = 0.1, false_p: float = 0.2) -> Fixture:
    """Write ``n_images`` frames plus labels to ``out_dir/images`` and a mock script to ``out_dir/mock.json``.

    The script answers each blob crop with a slightly inset box of the right
    class. With probability ``miss_p`` a blob gets no answer; with
    ``false_p`` a crop also yields a low-confidence box of the wrong class.
    Full-frame keys (``"<stem>"``) return every scripted blob in frame
    coordinates.
    """
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    script: dict[str, list[dict]] = {}
    all_blobs = {}
    for i in range(n_images):
        stem = f"frame_{i:03d}"
        blobs = _place(rng, width, height, int(rng.integers(1, 3)))
        all_blobs[stem] = blobs
        save_png(blob_frame(width, height, blobs, stem), image_dir / f"{stem}.png")
        (image_dir / f"{stem}.txt").write_text(
            "".join(format_label_line(b.box(width, height)) + "\n" for b in blobs), encoding="utf-8")
        full = []
        for b in blobs:
            if rng.random() < miss_p:
                continue
            conf = float(rng.uniform(0.55, 0.98))
            crop = [_det(b.class_id, 0.5, 0.5, 0.96, 0.96, conf)]
            if rng.random() < false_p:
                crop.append(_det(1 - b.class_id, 0.3, 0.3, 0.4, 0.4, float(rng.uniform(0.26, 0.5))))
            script[f"{stem}#{b.x},{b.y},{b.w},{b.h}"] = crop
            box = b.box(width, height)
            full.append(_det(b.class_id, box.cx, box.cy, box.w * 0.96, box.h * 0.96, conf))
        if full:
            script[stem] = full
    mock_path = out_dir / "mock.json"
    mock_path.write_text(json.dumps(script, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return Fixture(image_dir, mock_path, all_blobs)
