"""End-to-end workflow: segment each frame, detect on proposed regions, aggregate and report."""

from __future__ import annotations

import json
import logging
import sys
import time
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image, ImageDraw

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from udeep.dataset import DEFAULT_CLASSES, ClassMap, label_path_for, read_label_file
from udeep.detection import (
    DEFAULT_CONF,
    DEFAULT_INPUT_SIZE,
    DEFAULT_NMS_IOU,
    Detection,
    DetectorBackend,
    detect_on_regions,
    external_detect,
    full_frame,
    mock_detect,
    nms,
)
from udeep.evaluation import evaluate
from udeep.imaging import ImageBuffer, gray_values, load_png
from udeep.segmentation import (
    DEFAULT_MIN_AREA,
    RegionProposal,
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

log = logging.getLogger(__name__)

CLASS_COLORS = [(230, 57, 70), (29, 161, 242), (255, 183, 3), (106, 176, 76), (155, 89, 182)]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: Path | None = None
    output_dir: Path = Path("out")
    mock_fixture: Path | None = None
    mock_delay_ms: float = 0.0
    external_command: str | None = None
    detector_input_size: int | None = DEFAULT_INPUT_SIZE
    segmentation: bool = True
    min_area: int = DEFAULT_MIN_AREA
    k: str | int = "auto"
    full_frame_also: bool = False
    conf_thr: float = DEFAULT_CONF
    nms_iou: float = DEFAULT_NMS_IOU
    gt_dir: Path | None = None
    eval_iou: float = 0.5
    telemetry_source: Path | None = None
    period_ms: float = 100.0
    seed: int = 0
    annotate: bool = True
    classes: tuple[str, ...] = DEFAULT_CLASSES.names

    def __post_init__(self):
        for name in ("input_dir", "output_dir", "mock_fixture", "gt_dir", "telemetry_source"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, Path):
                object.__setattr__(self, name, Path(v))
        object.__setattr__(self, "classes", tuple(self.classes))
        for name in ("conf_thr", "nms_iou", "eval_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.k != "auto":
            try:
                k = int(self.k)
            except (TypeError, ValueError):
                raise ConfigError(f"k must be 'auto' or a positive integer, got {self.k!r}") from None
            if k < 1:
                raise ConfigError(f"k must be >= 1, got {k}")
            object.__setattr__(self, "k", k)
        if self.min_area < 1:
            raise ConfigError("min_area must be >= 1")
        if self.mock_fixture is not None and self.external_command is not None:
            raise ConfigError("choose one detector backend: mock_fixture or external_command")

    @property
    def class_map(self) -> ClassMap:
        return ClassMap(self.classes)

    def with_overrides(self, overrides: Mapping[str, Any]) -> PipelineConfig:
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Flat TOML keys matching :class:`PipelineConfig` fields; ``overrides`` win."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = Path(path).parent
        for key in ("input_dir", "output_dir", "mock_fixture", "gt_dir", "telemetry_source"):
            if key in values and not Path(values[key]).is_absolute():
                values[key] = base / values[key]
    try:
        cfg = PipelineConfig().with_overrides(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.with_overrides(overrides or {})


@dataclass
class FrameResult:
    image_id: str
    detections: list[Detection]
    counts: dict[str, int]
    regions: list[RegionProposal]
    latency_ms: dict[str, float]
    failed: bool = False
    error: str | None = None
    k: int | None = None


def count_by_class(dets, class_map: ClassMap) -> dict[str, int]:
    c = Counter(d.class_id for d in dets)
    return {name: c[i] for i, name in enumerate(class_map.names)}


def propose_regions(img: ImageBuffer, cfg: PipelineConfig) -> tuple[list[RegionProposal], int]:
    """GMM segmentation of ``img``; the most populous component is treated as background."""
    k = estimate_component_count(img) if cfg.k == "auto" else int(cfg.k)
    fit = fit_gmm(gray_values(img).reshape(-1), k, seed=cfg.seed)
    labels = label_pixels(img, fit.params)
    if fit.params.k == 1:
        return [], 1
    return extract_regions(labels, cfg.min_area, exclude_label=background_label(labels)), fit.params.k


def process_frame(img: ImageBuffer, cfg: PipelineConfig, backend: DetectorBackend) -> FrameResult:
    latency = {}
    t0 = time.perf_counter()
    regions: list[RegionProposal] = []
    k = None
    if cfg.segmentation:
        regions, k = propose_regions(img, cfg)
    t1 = time.perf_counter()
    latency["segmentation"] = (t1 - t0) * 1000
    dets: list[Detection] = []
    try:
        if cfg.segmentation and regions:
            dets.extend(detect_on_regions(img, regions, backend, cfg.conf_thr, cfg.nms_iou))
        if cfg.full_frame_also or not cfg.segmentation:
            dets.extend(detect_on_regions(img, [full_frame(img)], backend, cfg.conf_thr, cfg.nms_iou))
    except Exception as exc:  # noqa: BLE001 - a failing backend fails only this frame
        log.error("frame %s failed: %s", img.source, exc)
        latency["detection"] = (time.perf_counter() - t1) * 1000
        latency["total"] = (time.perf_counter() - t0) * 1000
        return FrameResult(img.source, [], count_by_class([], cfg.class_map), regions, latency, True, str(exc), k)
    dets = nms(dets, cfg.nms_iou)
    t2 = time.perf_counter()
    latency["detection"] = (t2 - t1) * 1000
    latency["total"] = (t2 - t0) * 1000
    return FrameResult(img.source, dets, count_by_class(dets, cfg.class_map), regions, latency, k=k)


class PhasedBackend:
    """Flips the phase marker to ``inference`` for the duration of each backend call."""

    def __init__(self, inner: DetectorBackend, phase: PhaseMarker):
        self.inner = inner
        self.phase = phase
        self.input_size = getattr(inner, "input_size", None)

    def detect(self, image, conf_threshold):
        previous = self.phase.get()
        self.phase.set("inference")
        try:
            return self.inner.detect(image, conf_threshold)
        finally:
            self.phase.set(previous)


def make_backend(cfg: PipelineConfig) -> DetectorBackend:
    if cfg.mock_fixture is not None:
        return mock_detect(cfg.mock_fixture, input_size=cfg.detector_input_size, delay_s=cfg.mock_delay_ms / 1000)
    if cfg.external_command is not None:
        return external_detect(cfg.external_command, input_size=cfg.detector_input_size)
    raise ConfigError("no detector backend configured (mock_fixture or external_command)")


def annotate(img: ImageBuffer, dets, class_map: ClassMap) -> Image.Image:
    canvas = Image.fromarray(np.ascontiguousarray(img.pixels))
    draw = ImageDraw.Draw(canvas)
    for d in dets:
        x1, y1, x2, y2 = d.corners
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        box = [x1 * img.width, y1 * img.height, x2 * img.width - 1, y2 * img.height - 1]
        draw.rectangle(box, outline=color, width=2)
        name = class_map.name(d.class_id) if d.class_id in class_map else str(d.class_id)
        draw.text((box[0] + 3, box[1] + 2), f"{name} {d.confidence:.2f}", fill=color)
    return canvas


def detections_json(results: list[FrameResult]) -> str:
    payload = [{"image": r.image_id, "detections": [d.to_dict() for d in r.detections]} for r in results]
    return json.dumps(payload, indent=2) + "\n"


@dataclass
class RunSummary:
    n_images: int
    n_failed: int
    totals: dict[str, int]
    mean_latency_ms: dict[str, float]
    failures: list[dict] = field(default_factory=list)
    telemetry: dict | None = None
    eval_report: dict | None = None
    warnings: list[str] = field(default_factory=list)
    frames: list[FrameResult] = field(default_factory=list, repr=False)

    @property
    def mean_inference_current(self) -> float | None:
        return None if self.telemetry is None else self.telemetry["mean_inference_mA"]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "frames"}


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def run_batch(cfg: PipelineConfig, backend: DetectorBackend | None = None, current_source=None) -> RunSummary:
    """Process every PNG in ``cfg.input_dir`` and write results under ``cfg.output_dir``.

    Writes ``detections.json``, ``annotated/*.png``, ``summary.json`` and,
    when configured, ``report.json`` and ``telemetry.csv``. Only config
    errors raise; per-frame failures are recorded in the summary.
    """
    if cfg.input_dir is None or not cfg.input_dir.is_dir():
        raise ConfigError(f"input directory {cfg.input_dir} does not exist")
    if cfg.gt_dir is not None and not cfg.gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory {cfg.gt_dir} does not exist")
    backend = backend if backend is not None else make_backend(cfg)
    class_map = cfg.class_map
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = list_images(cfg.input_dir)
    warnings = []
    if not paths:
        warnings.append(f"no PNG images in {cfg.input_dir}")
        log.warning(warnings[-1])

    if current_source is None and cfg.telemetry_source is not None:
        current_source = FileCurrentSource(cfg.telemetry_source)
    phase = PhaseMarker("idle")
    recorder = TelemetryRecorder(current_source, cfg.period_ms, phase).start() if current_source else None
    runner = PhasedBackend(backend, phase)

    results: list[FrameResult] = []
    try:
        for path in paths:
            phase.set("load")
            try:
                img = load_png(path)
            except OSError as exc:
                phase.set("idle")
                results.append(FrameResult(path.stem, [], count_by_class([], class_map), [], {}, True, str(exc)))
                continue
            phase.set("idle")
            res = process_frame(img, cfg, runner)
            results.append(res)
            if cfg.annotate:
                (out / "annotated").mkdir(exist_ok=True)
                annotate(img, res.detections, class_map).save(out / "annotated" / f"{path.stem}.png")
    finally:
        samples = recorder.stop() if recorder else None

    (out / "detections.json").write_text(detections_json(results), encoding="utf-8")

    totals = {name: sum(r.counts[name] for r in results) for name in class_map.names}
    stages = sorted({s for r in results for s in r.latency_ms})
    mean_latency = {s: float(np.mean([r.latency_ms[s] for r in results if s in r.latency_ms])) for s in stages}
    failures = [{"image": r.image_id, "error": r.error} for r in results if r.failed]

    telemetry = None
    if samples is not None:
        write_telemetry_csv(samples, out / "telemetry.csv")
        telemetry = {
            "n_samples": len(samples),
            "period_ms": cfg.period_ms,
            "mean_inference_mA": mean_phase_current(samples, "inference"),
            "mean_idle_mA": mean_phase_current(samples, "idle"),
            "mean_load_mA": mean_phase_current(samples, "load"),
        }
        if telemetry["mean_inference_mA"] is None:
            warnings.append("no telemetry samples fell inside inference; lower period_ms")

    report = None
    if cfg.gt_dir is not None:
        pairs = {}
        missing = 0
        for r, path in zip(results, paths):
            label = label_path_for(cfg.gt_dir / path.name)
            if not label.exists():
                missing += 1
                continue
            pairs[r.image_id] = (r.detections, read_label_file(label, class_map))
        ev = evaluate(pairs, class_map, cfg.eval_iou, cfg.conf_thr)
        if missing:
            ev.notes.append(f"{missing} image(s) without ground-truth labels were not evaluated")
        report = ev.to_dict()
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")

    summary = RunSummary(len(results), len(failures), totals, mean_latency, failures, telemetry, report, warnings, results)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    return summary
