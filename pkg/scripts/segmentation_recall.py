"""How often GMM region proposals recover synthetic blobs, across fixture seeds.

A blob counts as recovered when some proposal overlaps it with IoU >= 0.8.
"""

import argparse
import tempfile
from collections import Counter

from udeep.imaging import load_png
from udeep.pipeline import PipelineConfig, propose_regions
from udeep.synthetic import make_fixture


def rect_iou(r, b):
    iw = max(0, min(r.x2, b.x + b.w) - max(r.x, b.x))
    ih = max(0, min(r.y2, b.y + b.h) - max(r.y, b.y))
    inter = iw * ih
    return inter / (r.area + b.w * b.h - inter)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--images", type=int, default=40)
    args = ap.parse_args()

    cfg = PipelineConfig()
    for seed in range(args.seeds):
        with tempfile.TemporaryDirectory() as tmp:
            fx = make_fixture(tmp, args.images, seed)
            found = total = extra = 0
            ks = Counter()
            for stem, blobs in fx.blobs.items():
                regions, k = propose_regions(load_png(fx.image_dir / f"{stem}.png"), cfg)
                ks[k] += 1
                hits = sum(any(rect_iou(r.bbox, b) >= 0.8 for r in regions) for b in blobs)
                found += hits
                total += len(blobs)
                extra += max(0, len(regions) - hits)
        print(f"seed {seed}: recovered {found}/{total} blobs, {extra} extra proposals, K histogram {dict(sorted(ks.items()))}")


if __name__ == "__main__":
    main()
