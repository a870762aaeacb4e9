"""Command-line entry point: ``udeep <command> ...``.

Exit codes: 0 success, 1 config/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from udeep import __version__
from udeep.augmentation import AugmentationSpec, augment_dataset
from udeep.dataset import (
    DEFAULT_CLASSES,
    PUBLISHED_SPLITS,
    ClassMap,
    LabelError,
    ManifestError,
    MissingLabelFile,
    load_dataset,
    load_labeled_dir,
    parse_expected_counts,
    read_label_file,
    read_manifest,
    validate_split,
)
from udeep.detection import Detection, DetectorError
from udeep.evaluation import evaluate, write_f1_csv, write_pr_csv
from udeep.imaging import gray_values, load_png
from udeep.pipeline import (
    ConfigError,
    PhasedBackend,
    detections_json,
    list_images,
    load_config,
    make_backend,
    process_frame,
    run_batch,
)
from udeep.segmentation import (
    background_label,
    estimate_component_count,
    extract_regions,
    fit_gmm,
    label_pixels,
)
from udeep.telemetry import (
    FileCurrentSource,
    PhaseMarker,
    TelemetryRecorder,
    mean_phase_current,
    write_telemetry_csv,
)

log = logging.getLogger("udeep")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output location")
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
    return p


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mock", type=Path, help="scripted detections JSON for the mock backend")
    p.add_argument("--external", help="detector command speaking the JSON line protocol")
    p.add_argument("--mock-delay-ms", type=float)
    p.add_argument("--input-size", type=int, help="side length crops are resized to before detection")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="udeep", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"udeep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="dataset utilities", parents=[common])
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    val = ds_sub.add_parser("validate", help="check split counts of a manifest", parents=[common])
    val.add_argument("--manifest", type=Path, required=True)
    group = val.add_mutually_exclusive_group(required=True)
    group.add_argument("--expected", help="e.g. train=1740,test=249,valid=497,total=2486")
    group.add_argument("--preset", choices=sorted(PUBLISHED_SPLITS), help="published split counts")
    val.add_argument("--report", type=Path, help="write the JSON report here")
    val.add_argument("--load", action="store_true", help="also parse every label file")

    aug = sub.add_parser("augment", help="write augmented copies of a labeled image directory", parents=[common])
    aug.add_argument("--in", dest="input", type=Path, required=True)

    seg = sub.add_parser("segment", help="GMM-segment one image into region proposals", parents=[common])
    seg.add_argument("--image", type=Path, required=True)
    seg.add_argument("--k", default="auto", help="component count or 'auto'")
    seg.add_argument("--min-area", type=int, default=64)
    seg.add_argument("--keep-background", action="store_true", help="do not drop the most populous label")

    det = sub.add_parser("detect", help="run detection over images", parents=[common])
    det.add_argument("--images", type=Path, required=True, help="PNG file or directory")
    _backend_flags(det)
    _pipeline_flags(det)

    ev = sub.add_parser("eval", help="score detections against YOLO labels", parents=[common])
    ev.add_argument("--gt", type=Path, required=True, help="directory of <image>.txt label files")
    ev.add_argument("--pred", type=Path, required=True, help="detections JSON")
    ev.add_argument("--iou", type=float, default=0.5)
    ev.add_argument("--conf", type=float, default=0.25, help="confidence threshold for the confusion matrix")
    ev.add_argument("--interpolate", action="store_true", help="101-point interpolated AP")
    ev.add_argument("--report", type=Path)
    ev.add_argument("--pr-curve", type=Path)
    ev.add_argument("--f1-curve", type=Path)
    ev.add_argument("--classes", help="comma-separated class names (default crayfish,plastic)")

    bench = sub.add_parser("bench", help="sample board current, optionally while detecting", parents=[common])
    bench.add_argument("--telemetry-source", type=Path, required=True)
    bench.add_argument("--period-ms", type=float, default=100.0)
    bench.add_argument("--images", type=Path, help="images to classify while sampling")
    bench.add_argument("--duration-s", type=float, default=5.0, help="idle sampling time when no images are given")
    _backend_flags(bench)

    run = sub.add_parser("run", help="full pipeline over a directory", parents=[common])
    run.add_argument("--input", type=Path)
    run.add_argument("--gt", type=Path)
    run.add_argument("--telemetry-source", type=Path)
    run.add_argument("--period-ms", type=float)
    _backend_flags(run)
    _pipeline_flags(run)
    return parser


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--segmentation", dest="segmentation", action="store_true", default=None)
    p.add_argument("--no-segmentation", dest="segmentation", action="store_false")
    p.add_argument("--full-frame-also", action="store_true", default=None)
    p.add_argument("--conf", type=float)
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--min-area", type=int)
    p.add_argument("--k")


def _pipeline_overrides(args) -> dict:
    return {
        "input_dir": getattr(args, "input", None),
        "output_dir": getattr(args, "out", None),
        "mock_fixture": args.mock,
        "mock_delay_ms": args.mock_delay_ms,
        "external_command": args.external,
        "detector_input_size": args.input_size,
        "segmentation": getattr(args, "segmentation", None),
        "full_frame_also": getattr(args, "full_frame_also", None),
        "conf_thr": getattr(args, "conf", None),
        "nms_iou": getattr(args, "nms_iou", None),
        "min_area": getattr(args, "min_area", None),
        "k": getattr(args, "k", None),
        "gt_dir": getattr(args, "gt", None),
        "telemetry_source": getattr(args, "telemetry_source", None),
        "period_ms": getattr(args, "period_ms", None),
        "seed": getattr(args, "seed", None),
    }


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_dataset_validate(args) -> int:
    manifest = read_manifest(args.manifest)
    expected = PUBLISHED_SPLITS[args.preset] if args.preset else parse_expected_counts(args.expected)
    report = validate_split(manifest, expected)
    if args.load:
        ds = load_dataset(manifest)
        log.info("loaded %d images, %d boxes", sum(ds.counts.values()), ds.box_count)
    if args.report:
        args.report.write_text(report.to_json() + "\n", encoding="utf-8")
    for e in report.entries:
        status = "PASS" if e["pass"] else "FAIL"
        print(f"{status} {e['split']}: expected {e['expected']}, actual {e['actual']} (delta {e['delta']:+d})")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_augment(args) -> int:
    if "out" not in args:
        raise UsageError("augment needs --out <dir>")
    spec = AugmentationSpec.from_file(args.config) if "config" in args else AugmentationSpec()
    if "seed" in args:
        spec = replace(spec, seed=args.seed)
    sources = load_labeled_dir(args.input)
    records = augment_dataset(sources, spec, args.out)
    print(f"wrote {len(records)} augmented images from {len(sources)} sources to {args.out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    out = args.out if "out" in args else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    img = load_png(args.image)
    k = estimate_component_count(img) if args.k == "auto" else int(args.k)
    fit = fit_gmm(gray_values(img).reshape(-1), k, seed=getattr(args, "seed", 0))
    labels = label_pixels(img, fit.params)
    exclude = None if args.keep_background else background_label(labels)
    regions = extract_regions(labels, args.min_area, exclude)
    indexed = Image.fromarray(labels.labels.astype(np.uint8), mode="P")
    palette = [int(round(255 * i / max(labels.k - 1, 1))) for i in range(labels.k) for _ in range(3)]
    indexed.putpalette(palette)
    indexed.save(out / f"{args.image.stem}_labels.png")
    (out / f"{args.image.stem}_proposals.json").write_text(
        json.dumps([r.to_dict() for r in regions], indent=2) + "\n", encoding="utf-8")
    print(f"K={labels.k}, {len(regions)} region proposals -> {out}")
    return EXIT_OK


def _image_paths(path: Path) -> list[Path]:
    if path.is_dir():
        return list_images(path)
    if path.is_file():
        return [path]
    raise UsageError(f"no such image or directory: {path}")


def cmd_detect(args) -> int:
    cfg = load_config(args.config if "config" in args else None, _pipeline_overrides(args))
    backend = make_backend(cfg)
    results = [process_frame(load_png(p), cfg, backend) for p in _image_paths(args.images)]
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "detections.json").write_text(detections_json(results), encoding="utf-8")
    failed = sum(r.failed for r in results)
    print(f"{len(results)} images, {sum(len(r.detections) for r in results)} detections, {failed} failed -> {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def load_predictions(path: Path) -> dict[str, list[Detection]]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    return {entry["image"]: [Detection.from_dict(d) for d in entry["detections"]] for entry in raw}


def cmd_eval(args) -> int:
    class_map = ClassMap(tuple(args.classes.split(","))) if args.classes else DEFAULT_CLASSES
    preds = load_predictions(args.pred)
    pairs = {}
    for label in sorted(args.gt.glob("*.txt")):
        pairs[label.stem] = (preds.get(label.stem, []), read_label_file(label, class_map))
    unmatched = sorted(set(preds) - set(pairs))
    report = evaluate(pairs, class_map, args.iou, args.conf, args.interpolate)
    if unmatched:
        report.notes.append(f"{len(unmatched)} predicted image(s) have no label file and were ignored")
    if args.report:
        args.report.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.pr_curve:
        for name, curve in report.pr_curves.items():
            target = args.pr_curve
            if len(class_map) > 1:
                target = args.pr_curve.with_name(f"{args.pr_curve.stem}_{name}{args.pr_curve.suffix}")
            write_pr_csv(curve, target)
    if args.f1_curve:
        write_f1_csv(report.f1_curve, args.f1_curve)
    ap = ", ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in report.per_class_ap.items())
    map_text = "n/a" if report.map is None else f"{report.map:.4f}"
    print(f"mAP@{args.iou:g} = {map_text} ({ap}); best F1 {report.best_f1:.4f} at conf {report.best_f1_threshold:.2f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    source = FileCurrentSource(args.telemetry_source)
    phase = PhaseMarker("idle")
    recorder = TelemetryRecorder(source, args.period_ms, phase).start()
    n_images = 0
    try:
        if args.images:
            overrides = _pipeline_overrides(args)
            overrides["segmentation"] = False
            cfg = load_config(args.config if "config" in args else None, overrides)
            backend = PhasedBackend(make_backend(cfg), phase)
            for path in _image_paths(args.images):
                phase.set("load")
                img = load_png(path)
                phase.set("idle")
                process_frame(img, cfg, backend)
                n_images += 1
        else:
            threading.Event().wait(args.duration_s)
    finally:
        samples = recorder.stop()
    out = args.out if "out" in args else Path("telemetry.csv")
    write_telemetry_csv(samples, out)
    _print_json({
        "images": n_images,
        "samples": len(samples),
        "mean_inference_mA": mean_phase_current(samples, "inference"),
        "mean_idle_mA": mean_phase_current(samples, "idle"),
        "csv": str(out),
    })
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config if "config" in args else None, _pipeline_overrides(args))
    summary = run_batch(cfg)
    for w in summary.warnings:
        log.warning(w)
    _print_json({k: v for k, v in summary.to_dict().items() if k != "eval_report"})
    return EXIT_OK


COMMANDS = {
    "augment": cmd_augment,
    "segment": cmd_segment,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = cmd_dataset_validate if args.command == "dataset" else COMMANDS[args.command]
    try:
        return handler(args)
    except (UsageError, ConfigError, ManifestError, ValueError) as exc:
        if isinstance(exc, LabelError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MissingLabelFile, DetectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
