"""YOLO-format labels, class maps, split manifests and split bookkeeping."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from udeep.imaging import ImageBuffer, load_png

COORD_TOL = 1e-6
# box coordinates live on a 1e-9 grid so mirror maps (1 - x) are exact involutions
_GRID_DIGITS = 9
_EPS = 1e-9

SPLITS = ("train", "test", "valid")
IMAGE_SUFFIXES = (".png",)


class LabelError(ValueError):
    pass


class MalformedLine(LabelError):
    pass


class UnknownClass(LabelError):
    pass


class OutOfRange(LabelError):
    pass


class MissingLabelFile(FileNotFoundError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...] = ("crayfish", "plastic")

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("class map needs at least one class")
        if any(not n or n != n.strip() for n in names):
            raise ValueError(f"class names must be non-empty and unpadded: {names}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names: {names}")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, class_id) -> bool:
        return isinstance(class_id, int) and 0 <= class_id < len(self.names)

    def name(self, class_id: int) -> str:
        return self.names[class_id]

    def id_of(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_CLASSES = ClassMap()


def _snap(v: float) -> float:
    return round(float(v), _GRID_DIGITS) + 0.0


def check_box_coords(cx: float, cy: float, w: float, h: float, eps: float = _EPS) -> None:
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not (-eps <= v <= 1 + eps):
            raise OutOfRange(f"{name}={v} outside [0, 1]")
    if w <= 0 or h <= 0:
        raise OutOfRange(f"box must have positive size, got w={w} h={h}")
    if cx - w / 2 < -eps or cx + w / 2 > 1 + eps or cy - h / 2 < -eps or cy + h / 2 > 1 + eps:
        raise OutOfRange(f"box ({cx}, {cy}, {w}, {h}) extends outside the image")


@dataclass(frozen=True)
class NormalizedBox:
    """Center-format box in fractions of the image size."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, _snap(getattr(self, name)))
        object.__setattr__(self, "class_id", int(self.class_id))
        check_box_coords(self.cx, self.cy, self.w, self.h)

    @classmethod
    def from_corners(cls, class_id: int, x1: float, y1: float, x2: float, y2: float) -> NormalizedBox:
        """Build from corners, clipping to the unit square."""
        x1, x2 = max(0.0, x1), min(1.0, x2)
        y1, y2 = max(0.0, y1), min(1.0, y2)
        return cls(class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


def parse_label_line(text: str, class_map: ClassMap = DEFAULT_CLASSES) -> NormalizedBox:
    fields = text.split()
    if len(fields) != 5:
        raise MalformedLine(f"expected 5 fields 'class cx cy w h', got {len(fields)}: {text!r}")
    try:
        class_id = int(fields[0])
        values = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise MalformedLine(f"non-numeric field in {text!r}") from exc
    if any(v != v for v in values):
        raise MalformedLine(f"NaN in {text!r}")
    if class_id not in class_map:
        raise UnknownClass(f"class id {class_id} not in {list(class_map.names)}")
    clamped = []
    for v in values:
        if v < -COORD_TOL or v > 1 + COORD_TOL:
            raise OutOfRange(f"coordinate {v} outside [0, 1] in {text!r}")
        clamped.append(min(1.0, max(0.0, v)))
    cx, cy, w, h = clamped
    if w <= 0 or h <= 0:
        raise OutOfRange(f"zero-size box in {text!r}")
    # overhang within the grid tolerance is a valid box already; clipping it would break roundtrips
    if cx - w / 2 < -_EPS or cx + w / 2 > 1 + _EPS or cy - h / 2 < -_EPS or cy + h / 2 > 1 + _EPS:
        try:
            return NormalizedBox.from_corners(class_id, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        except OutOfRange as exc:
            raise OutOfRange(f"{exc} (from {text!r})") from None
    return NormalizedBox(class_id, cx, cy, w, h)


def _fmt(v: float) -> str:
    s = f"{v:.{_GRID_DIGITS}f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def format_label_line(box: NormalizedBox) -> str:
    return " ".join([str(box.class_id), _fmt(box.cx), _fmt(box.cy), _fmt(box.w), _fmt(box.h)])


def read_label_file(path: str | Path, class_map: ClassMap = DEFAULT_CLASSES) -> tuple[NormalizedBox, ...]:
    path = Path(path)
    if not path.exists():
        raise MissingLabelFile(f"missing label file {path}")
    boxes = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            boxes.append(parse_label_line(line, class_map))
        except LabelError as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return tuple(boxes)


def write_label_file(path: str | Path, boxes: Iterable[NormalizedBox]) -> None:
    lines = [format_label_line(b) for b in boxes]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def label_path_for(image_path: str | Path) -> Path:
    return Path(image_path).with_suffix(".txt")


@dataclass(frozen=True)
class LabeledImage:
    path: Path | None
    boxes: tuple[NormalizedBox, ...] = ()
    image: ImageBuffer | None = field(default=None, compare=False, repr=False)

    def materialize(self) -> LabeledImage:
        if self.image is not None:
            return self
        if self.path is None:
            raise ValueError("labeled image has neither pixels nor a path")
        return LabeledImage(self.path, self.boxes, load_png(self.path))

    def with_(self, image: ImageBuffer, boxes: Iterable[NormalizedBox]) -> LabeledImage:
        return LabeledImage(self.path, tuple(boxes), image)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    class_map: ClassMap
    splits: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        splits = {name: tuple(self.splits.get(name, ())) for name in SPLITS}
        extra = set(self.splits) - set(SPLITS)
        if extra:
            raise ManifestError(f"unknown split sections: {sorted(extra)}")
        seen = Counter(p for paths in splits.values() for p in paths)
        dupes = sorted(p for p, n in seen.items() if n > 1)
        if dupes:
            raise ManifestError(f"images listed more than once across splits: {dupes[:5]}")
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "splits", splits)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def image_path(self, rel: str) -> Path:
        return self.root / rel


def read_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest of ``[classes]``, ``[train]``, ``[test]``, ``[valid]`` sections.

    Image paths are relative to the manifest's directory.
    """
    path = Path(path)
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current != "classes" and current not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown section [{current}]")
            if current in sections:
                raise ManifestError(f"{path}:{lineno}: section [{current}] repeated")
            sections[current] = []
            continue
        if current is None:
            raise ManifestError(f"{path}:{lineno}: entry outside any section")
        sections[current].append(line)
    classes = sections.pop("classes", None)
    class_map = ClassMap(tuple(classes)) if classes else DEFAULT_CLASSES
    return DatasetManifest(path.parent, class_map, {k: tuple(v) for k, v in sections.items()})


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = ["[classes]", *manifest.class_map.names]
    for name in SPLITS:
        lines.append(f"[{name}]")
        lines.extend(manifest.splits[name])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Dataset:
    manifest: DatasetManifest
    splits: Mapping[str, tuple[LabeledImage, ...]]

    @property
    def class_map(self) -> ClassMap:
        return self.manifest.class_map

    @property
    def counts(self) -> dict[str, int]:
        return {name: len(items) for name, items in self.splits.items()}

    @property
    def box_count(self) -> int:
        return sum(len(li.boxes) for items in self.splits.values() for li in items)

    def images(self) -> list[LabeledImage]:
        return [li for name in SPLITS for li in self.splits[name]]


def load_dataset(manifest: DatasetManifest) -> Dataset:
    splits = {}
    for name in SPLITS:
        items = []
        for rel in manifest.splits[name]:
            image_path = manifest.image_path(rel)
            boxes = read_label_file(label_path_for(image_path), manifest.class_map)
            items.append(LabeledImage(image_path, boxes))
        splits[name] = tuple(items)
    return Dataset(manifest, splits)


def load_labeled_dir(directory: str | Path, class_map: ClassMap = DEFAULT_CLASSES) -> list[LabeledImage]:
    """Every image in ``directory`` paired with its co-named label file, sorted by name."""
    directory = Path(directory)
    images = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [LabeledImage(p, read_label_file(label_path_for(p), class_map)) for p in images]


@dataclass
class SplitReport:
    entries: list[dict]

    @property
    def passed(self) -> bool:
        return all(e["pass"] for e in self.entries)

    def failures(self) -> list[dict]:
        return [e for e in self.entries if not e["pass"]]

    def to_json(self) -> str:
        return json.dumps(self.entries, indent=2)


def validate_split(manifest: DatasetManifest, expected: Mapping[str, int]) -> SplitReport:
    """Compare per-split image counts on disk against ``expected``.

    A listed image counts only if its file exists. ``expected`` may carry a
    ``"total"`` key checked against the sum over splits.
    """
    actual = {
        name: sum(1 for rel in manifest.splits[name] if manifest.image_path(rel).is_file())
        for name in SPLITS
    }
    actual["total"] = sum(actual.values())
    entries = []
    for name, want in expected.items():
        if name not in actual:
            raise ManifestError(f"unknown split {name!r} in expected counts")
        got = actual[name]
        entries.append({"split": name, "expected": int(want), "actual": got, "pass": got == want, "delta": got - want})
    return SplitReport(entries)


def parse_expected_counts(text: str) -> dict[str, int]:
    """``"train=1740,test=249,valid=497"`` -> mapping."""
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        if not value:
            raise ValueError(f"expected 'split=count', got {part!r}")
        out[key.strip()] = int(value)
    return out


PUBLISHED_SPLITS = {
    "crayfish": {"train": 1740, "test": 249, "valid": 497, "total": 2486},
    "plastic": {"train": 854, "test": 122, "valid": 244, "total": 1220},
}


def boxes_per_class(items: Sequence[LabeledImage]) -> Counter:
    return Counter(b.class_id for li in items for b in li.boxes)
