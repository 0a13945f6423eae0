"""FOA audio and DCASE-style metadata ingestion, plus fixed-length segmentation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 24000
LABEL_HOP_S = 0.1
MAX_POLYPHONY = 3
SOURCE_TAGS = ("real", "synthetic")


class FormatError(ValueError):
    """Audio file does not match the expected FOA layout."""


class MetadataError(ValueError):
    """Malformed or inconsistent metadata."""


@dataclass
class FoaClip:
    """Four-channel ACN/SN3D Ambisonics audio (W, Y, Z, X)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_tag: str = "synthetic"

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != 4:
            raise FormatError(f"expected 4 x n_samples, got {self.samples.shape}")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source_tag {self.source_tag!r}")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True, order=True)
class Event:
    frame: int
    class_idx: int
    source_idx: int
    azimuth_deg: float
    elevation_deg: float
    distance_m: float

    def __post_init__(self):
        if not -180.0 <= self.azimuth_deg < 180.0:
            raise MetadataError(f"azimuth {self.azimuth_deg} outside [-180, 180)")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise MetadataError(f"elevation {self.elevation_deg} outside [-90, 90]")
        if not self.distance_m > 0:
            raise MetadataError(f"distance must be positive, got {self.distance_m}")


@dataclass
class EventList:
    events: list[Event] = field(default_factory=list)
    num_label_frames: int = 0

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.frame, e.class_idx, e.source_idx))
        if self.events:
            self.num_label_frames = max(self.num_label_frames, self.events[-1].frame + 1)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def grouped(self) -> dict[tuple[int, int], list[Event]]:
        """Events keyed by (frame, class_idx), each list in source_idx order."""
        out: dict[tuple[int, int], list[Event]] = {}
        for ev in self.events:
            out.setdefault((ev.frame, ev.class_idx), []).append(ev)
        return out

    def check_polyphony(self, cap: int = MAX_POLYPHONY) -> None:
        for (frame, cls), evs in self.grouped().items():
            if len(evs) > cap:
                raise MetadataError(
                    f"polyphony {len(evs)} > {cap} at frame {frame}, class {cls}")

    def distances(self) -> np.ndarray:
        return np.array([e.distance_m for e in self.events], dtype=np.float64)


def wrap_azimuth(az: float) -> float:
    """Wrap degrees into [-180, 180)."""
    out = (az + 180.0) % 360.0 - 180.0
    # float modulo can land on exactly 180 for inputs just below -180
    return -180.0 if out >= 180.0 else out


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def resample(samples: np.ndarray, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    if rate_in == rate_out:
        return samples
    ratio = Fraction(rate_out, rate_in)
    return signal.resample_poly(samples, ratio.numerator, ratio.denominator, axis=-1)


def load_foa_wav(path: str | Path, source_tag: str = "synthetic") -> FoaClip:
    """Read a 4-channel WAV and resample it to 24 kHz.

    Raises:
        FormatError: the file is not 4-channel.
        OSError: the file cannot be read.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise OSError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 4:
        n_ch = 1 if data.ndim == 1 else data.shape[1]
        raise FormatError(f"{path}: expected 4 channels, found {n_ch}")
    samples = resample(_to_float(data).T, rate)
    return FoaClip(np.ascontiguousarray(samples), SAMPLE_RATE, source_tag)


def write_foa_wav(path: str | Path, clip: FoaClip) -> None:
    """Write a clip as float32 WAV at its own sample rate."""
    wavfile.write(str(path), clip.sample_rate, clip.samples.T.astype(np.float32))


def parse_metadata_csv(text: str | io.TextIOBase, distance_unit: str = "m") -> EventList:
    """Parse header-less ``frame,class,source,azimuth,elevation,distance`` lines.

    Exact duplicate rows are dropped. A ``distance_unit`` of ``"cm"`` converts
    the last column to meters.
    """
    if distance_unit not in ("m", "cm"):
        raise ValueError(f"distance_unit must be 'm' or 'cm', got {distance_unit!r}")
    factor = 0.01 if distance_unit == "cm" else 1.0
    lines = text.splitlines() if isinstance(text, str) else text.read().splitlines()
    seen: set[tuple] = set()
    events = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise MetadataError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            frame, cls, src = (int(p) for p in parts[:3])
            az, el, dist = (float(p) for p in parts[3:])
        except ValueError as exc:
            raise MetadataError(f"line {lineno}: {exc}") from None
        key = (frame, cls, src, az, el, dist)
        if key in seen:
            continue
        seen.add(key)
        try:
            events.append(Event(frame, cls, src, wrap_azimuth(az), el, dist * factor))
        except MetadataError as exc:
            raise MetadataError(f"line {lineno}: {exc}") from None
    out = EventList(events)
    out.check_polyphony()
    return out


def format_metadata_csv(events: Iterable[Event]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for e in events:
        writer.writerow([e.frame, e.class_idx, e.source_idx,
                         # shortest repr round-trips exactly, so clamped values stay in range
                         repr(float(e.azimuth_deg)), repr(float(e.elevation_deg)),
                         repr(float(e.distance_m))])
    return buf.getvalue()


def frames_per_segment(seg_seconds: float) -> int:
    return int(round(seg_seconds / LABEL_HOP_S))


def segment_clip(clip: FoaClip, events: EventList,
                 seg_seconds: float = 5.0) -> list[tuple[FoaClip, EventList]]:
    """Cut a clip into consecutive non-overlapping segments.

    The final partial segment is zero-padded. Event frames are re-indexed
    relative to their segment.
    """
    if seg_seconds <= 0:
        raise ValueError("seg_seconds must be positive")
    seg_len = int(round(seg_seconds * clip.sample_rate))
    seg_frames = frames_per_segment(seg_seconds)
    n_seg = max(1, math.ceil(clip.num_samples / seg_len))
    # events beyond the audio still belong to the last segment they index into
    if events.events:
        n_seg = max(n_seg, events.events[-1].frame // seg_frames + 1)

    buckets: list[list[Event]] = [[] for _ in range(n_seg)]
    for ev in events:
        buckets[ev.frame // seg_frames].append(replace(ev, frame=ev.frame % seg_frames))

    out = []
    for i in range(n_seg):
        chunk = clip.samples[:, i * seg_len:(i + 1) * seg_len]
        if chunk.shape[1] < seg_len:
            chunk = np.pad(chunk, ((0, 0), (0, seg_len - chunk.shape[1])))
        seg = FoaClip(chunk, clip.sample_rate, clip.source_tag)
        out.append((seg, EventList(buckets[i], seg_frames)))
    return out


def merge_segments(segment_events: Sequence[EventList], seg_frames: int) -> EventList:
    """Inverse of the event half of `segment_clip`: local frames back to clip frames."""
    merged = []
    for i, evs in enumerate(segment_events):
        merged.extend(replace(e, frame=e.frame + i * seg_frames) for e in evs)
    return EventList(merged, seg_frames * len(segment_events))
