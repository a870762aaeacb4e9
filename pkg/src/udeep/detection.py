"""Detector backends, class-wise NMS and mapping of region detections back to the frame."""

from __future__ import annotations

import fnmatch
import json
import logging
import queue
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from udeep.dataset import NormalizedBox, check_box_coords
from udeep.imaging import ImageBuffer, PixelRect, crop_px, resize_stretch, save_png
from udeep.segmentation import RegionProposal

log = logging.getLogger(__name__)

DEFAULT_CONF = 0.25
DEFAULT_NMS_IOU = 0.45
DEFAULT_INPUT_SIZE = 416
DEFAULT_TIMEOUT_S = 30.0


class DetectorError(RuntimeError):
    pass


class FixtureParseError(DetectorError):
    pass


class SpawnError(DetectorError):
    pass


class ProtocolError(DetectorError):
    pass


class DetectorTimeout(DetectorError):
    pass


class RegionDetectionError(DetectorError):
    def __init__(self, region_index: int, cause: Exception):
        super().__init__(f"region {region_index}: {cause}")
        self.region_index = region_index
        self.cause = cause


@dataclass(frozen=True)
class Detection:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float
    clipped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        check_box_coords(self.cx, self.cy, self.w, self.h)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def box(self) -> NormalizedBox:
        return NormalizedBox(self.class_id, self.cx, self.cy, self.w, self.h)

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h,
                "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict) -> Detection:
        return cls(int(d["class_id"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]),
                   float(d["confidence"]))


class DetectorBackend(Protocol):
    input_size: int | None

    def detect(self, image: ImageBuffer, conf_threshold: float) -> list[Detection]: ...


class MockBackend:
    """Replays scripted detections keyed by ``ImageBuffer.source``.

    Keys are matched exactly first, then as glob patterns in file order, so
    ``"frame01#*"`` scripts every crop of ``frame01``.
    """

    def __init__(self, script: dict[str, list[Detection]], input_size: int | None = None, delay_s: float = 0.0):
        self.script = script
        self.input_size = input_size
        self.delay_s = delay_s

    def lookup(self, image_id: str) -> list[Detection]:
        if image_id in self.script:
            return self.script[image_id]
        for pattern, dets in self.script.items():
            if fnmatch.fnmatchcase(image_id, pattern):
                return dets
        return []

    def detect(self, image: ImageBuffer, conf_threshold: float = DEFAULT_CONF) -> list[Detection]:
        if self.delay_s:
            time.sleep(self.delay_s)
        return [d for d in self.lookup(image.source) if d.confidence >= conf_threshold]


def mock_detect(fixture: str | Path | dict, **kwargs) -> MockBackend:
    """Build a mock backend from a JSON file or mapping ``{image_id: [detection, ...]}``."""
    if isinstance(fixture, dict):
        raw = fixture
    else:
        try:
            raw = json.loads(Path(fixture).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FixtureParseError(f"cannot read mock fixture {fixture}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FixtureParseError("mock fixture must map image ids to detection lists")
    script = {}
    for key, dets in raw.items():
        try:
            script[str(key)] = [Detection.from_dict(d) for d in dets]
        except (KeyError, TypeError, ValueError) as exc:
            raise FixtureParseError(f"bad detection for {key!r}: {exc}") from exc
    return MockBackend(script, **kwargs)


class ExternalBackend:
    """Runs a detector child process speaking one JSON object per line.

    Request: ``{"id", "image", "conf"}``; response: ``{"id", "detections": [...]}``.
    One request is in flight at a time.
    """

    def __init__(self, command: Sequence[str] | str, input_size: int | None = DEFAULT_INPUT_SIZE,
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        self.command = command
        self.input_size = input_size
        self.timeout_s = timeout_s
        self._next_id = 0
        self._lock = threading.Lock()
        self._tmpdir = tempfile.TemporaryDirectory(prefix="udeep-det-")
        try:
            self._proc = subprocess.Popen(
                command, shell=isinstance(command, str), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as exc:
            self._tmpdir.cleanup()
            raise SpawnError(f"cannot start detector {command!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def detect(self, image: ImageBuffer, conf_threshold: float = DEFAULT_CONF) -> list[Detection]:
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError(f"detector exited with code {self._proc.returncode}")
            req_id = self._next_id
            self._next_id += 1
            path = Path(self._tmpdir.name) / f"req{req_id}.png"
            save_png(image, path)
            request = {"id": req_id, "image": str(path), "conf": conf_threshold}
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError(f"detector closed its input: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout_s)
            except queue.Empty:
                self.close()
                raise DetectorTimeout(f"no response to request {req_id} within {self.timeout_s}s") from None
            finally:
                path.unlink(missing_ok=True)
            if line is None:
                raise ProtocolError("detector closed its output")
            return parse_response(line, req_id, conf_threshold)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._tmpdir.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_response(line: str, expected_id: int, conf_threshold: float = 0.0) -> list[Detection]:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON from detector: {line.strip()[:200]!r}") from exc
    if not isinstance(msg, dict) or set(msg) != {"id", "detections"}:
        raise ProtocolError(f"response must have exactly 'id' and 'detections': {line.strip()[:200]!r}")
    if msg["id"] != expected_id or isinstance(msg["id"], bool):
        raise ProtocolError(f"response id {msg['id']!r} does not match request {expected_id}")
    if not isinstance(msg["detections"], list):
        raise ProtocolError("'detections' must be a list")
    keys = {"class_id", "cx", "cy", "w", "h", "confidence"}
    out = []
    for d in msg["detections"]:
        if not isinstance(d, dict) or set(d) != keys:
            raise ProtocolError(f"detection must have keys {sorted(keys)}: {d!r}")
        if not isinstance(d["class_id"], int) or isinstance(d["class_id"], bool):
            raise ProtocolError(f"class_id must be an integer: {d!r}")
        try:
            det = Detection.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"invalid detection {d!r}: {exc}") from exc
        if det.confidence >= conf_threshold:
            out.append(det)
    return out


def external_detect(command: Sequence[str] | str, **kwargs) -> ExternalBackend:
    return ExternalBackend(command, **kwargs)


def corner_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x1, y1, x2, y2)`` boxes; 0 when the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Iterable[Detection], iou_thr: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy class-wise suppression, highest confidence first (ties: lower class, input order)."""
    ranked = sorted(enumerate(dets), key=lambda t: (-t[1].confidence, t[1].class_id, t[0]))
    kept: list[Detection] = []
    for _, d in ranked:
        if all(k.class_id != d.class_id or corner_iou(k.corners, d.corners) < iou_thr for k in kept):
            kept.append(d)
    return kept


def map_to_frame(det: Detection, region: PixelRect, frame_w: int, frame_h: int) -> Detection:
    """Region-relative detection -> frame-relative, clipping to the frame."""
    if (region.x, region.y, region.w, region.h) == (0, 0, frame_w, frame_h):
        return det
    cx = (region.x + det.cx * region.w) / frame_w
    cy = (region.y + det.cy * region.h) / frame_h
    w = det.w * region.w / frame_w
    h = det.h * region.h / frame_h
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if x1 >= 0.0 and y1 >= 0.0 and x2 <= 1.0 and y2 <= 1.0:
        return Detection(det.class_id, cx, cy, w, h, det.confidence)
    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    return Detection(det.class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, det.confidence, clipped=True)


def detect_on_regions(img: ImageBuffer, regions: Sequence[RegionProposal | PixelRect], backend: DetectorBackend,
                      conf_thr: float = DEFAULT_CONF, iou_thr: float = DEFAULT_NMS_IOU) -> list[Detection]:
    merged = []
    for i, region in enumerate(regions):
        rect = region.bbox if isinstance(region, RegionProposal) else region
        crop = crop_px(img, rect)
        size = getattr(backend, "input_size", None)
        if size:
            crop = resize_stretch(crop, size, size)
        try:
            found = backend.detect(crop, conf_thr)
        except Exception as exc:
            raise RegionDetectionError(i, exc) from exc
        merged.extend(map_to_frame(d, rect, img.width, img.height) for d in found)
    return nms(merged, iou_thr)


def full_frame(img: ImageBuffer) -> PixelRect:
    return PixelRect(0, 0, img.width, img.height)
