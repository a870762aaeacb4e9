"""Current sampling alongside inference, phase tagging, CSV logging and mean-current summaries."""

from __future__ import annotations

import csv
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

log = logging.getLogger(__name__)

PHASES = ("idle", "load", "inference")
DEFAULT_PERIOD_MS = 100
CSV_HEADER = ("timestamp_ms", "phase", "current_mA")


class SourceReadError(RuntimeError):
    pass


class NoInferenceSamples(ValueError):
    pass


@dataclass(frozen=True)
class TelemetrySample:
    timestamp_ms: int
    phase: str
    current_mA: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.current_mA < 0:
            raise ValueError(f"current must be non-negative, got {self.current_mA}")


class CurrentSource(Protocol):
    def read(self) -> float: ...


class ConstantSource:
    def __init__(self, current_mA: float):
        self.current_mA = current_mA

    def read(self) -> float:
        return self.current_mA


class FileCurrentSource:
    """Reads an integer milliamp value from a text file on every sample (sysfs style)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def read(self) -> float:
        try:
            text = self.path.read_text(encoding="utf-8").strip()
            return float(int(text))
        except (OSError, ValueError) as exc:
            raise SourceReadError(f"cannot read current from {self.path}: {exc}") from exc


class PhaseMarker:
    """Current run phase; written by the pipeline, read by the sampler."""

    def __init__(self, phase: str = "idle"):
        self._lock = threading.Lock()
        self.set(phase)

    def set(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        with self._lock:
            self._phase = phase

    def get(self) -> str:
        with self._lock:
            return self._phase


def sample_run(source: CurrentSource, period_ms: float = DEFAULT_PERIOD_MS, phase: PhaseMarker | None = None,
               stop: threading.Event | None = None, max_ticks: int | None = None,
               clock: Callable[[], float] = time.monotonic) -> list[TelemetrySample]:
    """Sample ``source`` once per period until ``stop`` is set or ``max_ticks`` periods pass.

    Each sample is tagged with the phase read right after the current. A
    failing read is logged and that period yields no sample.
    """
    if period_ms < 1:
        raise ValueError(f"period_ms must be >= 1, got {period_ms}")
    if stop is None and max_ticks is None:
        raise ValueError("need a stop event or max_ticks")
    phase = phase or PhaseMarker()
    stop = stop or threading.Event()
    period = period_ms / 1000.0
    start = clock()
    samples: list[TelemetrySample] = []
    last_ts = 0
    tick = 0
    while not stop.is_set() and (max_ticks is None or tick < max_ticks):
        try:
            current = source.read()
        except Exception as exc:  # noqa: BLE001 - any source failure skips one sample
            log.warning("current read failed at tick %d: %s", tick, exc)
        else:
            ts = max(last_ts, int(round((clock() - start) * 1000)))
            samples.append(TelemetrySample(ts, phase.get(), current))
            last_ts = ts
        tick += 1
        if max_ticks is not None and tick >= max_ticks:
            break
        delay = start + tick * period - clock()
        if delay > 0:
            stop.wait(delay)
    return samples


class TelemetryRecorder:
    """Runs :func:`sample_run` on a background thread between ``start()`` and ``stop()``."""

    def __init__(self, source: CurrentSource, period_ms: float = DEFAULT_PERIOD_MS, phase: PhaseMarker | None = None):
        self.source = source
        self.period_ms = period_ms
        self.phase = phase or PhaseMarker()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.samples: list[TelemetrySample] = []

    def start(self) -> TelemetryRecorder:
        if self._thread is not None:
            raise RuntimeError("recorder already started")

        def run():
            self.samples = sample_run(self.source, self.period_ms, self.phase, self._stop)

        self._thread = threading.Thread(target=run, name="telemetry", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[TelemetrySample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.samples

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def mean_phase_current(samples: Iterable[TelemetrySample], phase: str) -> float | None:
    values = [s.current_mA for s in samples if s.phase == phase]
    return sum(values) / len(values) if values else None


def mean_inference_current(samples: Iterable[TelemetrySample]) -> float:
    mean = mean_phase_current(samples, "inference")
    if mean is None:
        raise NoInferenceSamples("no samples were taken during inference")
    return mean


def _fmt_current(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_telemetry_csv(samples: Sequence[TelemetrySample], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow([s.timestamp_ms, s.phase, _fmt_current(s.current_mA)])


def read_telemetry_csv(path: str | Path) -> list[TelemetrySample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"unexpected telemetry header {header!r}")
        return [TelemetrySample(int(ts), phase, float(cur)) for ts, phase, cur in reader]
