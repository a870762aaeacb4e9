"""Write a synthetic blob dataset, a mock-detector script and a pipeline config.

    python scripts/make_fixtures.py out/fixture --images 69 --seed 0
    udeep run --config out/fixture/pipeline.toml
"""

import argparse
from pathlib import Path

from udeep.synthetic import make_fixture


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--images", type=int, default=69)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--miss-p", type=float, default=0.1, help="chance a blob gets no scripted detection")
    ap.add_argument("--false-p", type=float, default=0.2, help="chance a crop also yields a wrong-class box")
    args = ap.parse_args()

    fx = make_fixture(args.out, args.images, args.seed, miss_p=args.miss_p, false_p=args.false_p)
    cfg = args.out / "pipeline.toml"
    cfg.write_text(
        'input_dir = "images"\n'
        'gt_dir = "images"\n'
        'mock_fixture = "mock.json"\n'
        'output_dir = "run"\n'
        f"seed = {args.seed}\n",
        encoding="utf-8",
    )
    n_blobs = sum(len(b) for b in fx.blobs.values())
    print(f"{args.images} images, {n_blobs} blobs -> {fx.image_dir}; mock script {fx.mock_path}; config {cfg}")


if __name__ == "__main__":
    main()
