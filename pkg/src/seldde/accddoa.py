"""Multi-ACCDDOA targets and the distance scaler.

Distances are standardized with the training-set mean and population
standard deviation, then divided by the largest absolute standardized value
so the fitting set lands in [-1, 1]. Decoding inverts both steps and clamps
to the range observed during fitting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .io_dataset import Event, EventList, MAX_POLYPHONY, wrap_azimuth

NUM_TRACKS = 3


class ScalerError(ValueError):
    pass


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceScaler:
    mean_m: float
    std_m: float
    max_stand: float
    d_min_m: float
    d_max_m: float

    def __post_init__(self):
        if not (self.std_m > 0 and self.max_stand > 0):
            raise ScalerError("std_m and max_stand must be positive")

    def scale(self, d):
        return scale_distance(d, self)

    def unscale(self, v):
        return unscale_distance(v, self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceScaler":
        return cls(**{k: float(d[k]) for k in ("mean_m", "std_m", "max_stand", "d_min_m", "d_max_m")})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DistanceScaler":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_distance_scaler(distances: Sequence[float]) -> DistanceScaler:
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size < 2 or np.unique(d).size < 2:
        raise ScalerError("need at least two distinct distances")
    if np.any(d <= 0):
        raise ScalerError("distances must be positive")
    mean = float(d.mean())
    std = float(d.std())  # population
    max_stand = float(np.max(np.abs((d - mean) / std)))
    return DistanceScaler(mean, std, max_stand, float(d.min()), float(d.max()))


def scale_distance(d, s: DistanceScaler):
    out = np.clip((np.asarray(d, dtype=np.float64) - s.mean_m) / s.std_m / s.max_stand, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def unscale_distance(v, s: DistanceScaler):
    out = np.asarray(v, dtype=np.float64) * s.max_stand * s.std_m + s.mean_m
    out = np.clip(out, s.d_min_m, s.d_max_m)
    return float(out) if out.ndim == 0 else out


def doa_to_unit(azimuth_deg, elevation_deg) -> np.ndarray:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.stack([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)], axis=-1)


def unit_to_doa(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    norm = np.sqrt(x * x + y * y + z * z)
    az = np.degrees(np.arctan2(y, x))
    el = np.degrees(np.arcsin(np.clip(z / np.where(norm > 0, norm, 1.0), -1.0, 1.0)))
    return az, el


def encode_labels(events: EventList, scaler: DistanceScaler, num_classes: int,
                  num_frames: int | None = None) -> np.ndarray:
    """Target tensor (frames, 3, classes, 4) with components (x, y, z, scaled distance).

    Active events of one (frame, class) fill tracks 0..A-1 in source order.
    """
    n_frames = events.num_label_frames if num_frames is None else num_frames
    target = np.zeros((n_frames, NUM_TRACKS, num_classes, 4))
    for (frame, cls), evs in events.grouped().items():
        if len(evs) > MAX_POLYPHONY:
            raise EncodeError(f"polyphony {len(evs)} at frame {frame}, class {cls}")
        if not 0 <= cls < num_classes:
            raise EncodeError(f"class {cls} outside [0, {num_classes})")
        if frame >= n_frames:
            raise EncodeError(f"frame {frame} outside {n_frames} frames")
        for track, ev in enumerate(evs):
            target[frame, track, cls, :3] = doa_to_unit(ev.azimuth_deg, ev.elevation_deg)
            target[frame, track, cls, 3] = scale_distance(ev.distance_m, scaler)
    return target


def decode_output(t: np.ndarray, scaler: DistanceScaler, act_threshold: float = 0.5,
                  frame_offset: int = 0, unify_deg: float | None = None) -> EventList:
    """Events wherever a track's DOA-vector norm exceeds ``act_threshold``.

    The track index becomes the event's source index. With ``unify_deg``
    set, active tracks of one (frame, class) closer than that angle are
    merged by averaging their vectors, since ADPIT training duplicates a
    lone event across tracks.
    """
    if not 0 < act_threshold < 1:
        raise ValueError("act_threshold must be in (0, 1)")
    t = np.asarray(t, dtype=np.float64)
    norms = np.linalg.norm(t[..., :3], axis=-1)
    active = norms > act_threshold
    events = []
    for frame, cls in zip(*np.nonzero(active.any(axis=1))):
        tracks = np.flatnonzero(active[frame, :, cls])
        groups = _unify(t[frame, tracks, cls, :3], unify_deg) if unify_deg else \
            [[i] for i in range(len(tracks))]
        for group in groups:
            vec = t[frame, tracks[group], cls].mean(axis=0)
            az, el = unit_to_doa(vec[:3])
            events.append(Event(int(frame) + frame_offset, int(cls), int(tracks[group[0]]),
                                wrap_azimuth(float(az)), float(el),
                                unscale_distance(float(vec[3]), scaler)))
    return EventList(events, t.shape[0] + frame_offset)


def _unify(vectors: np.ndarray, max_deg: float) -> list[list[int]]:
    """Connected groups of vectors pairwise closer than ``max_deg``."""
    unit = vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)
    close = np.degrees(np.arccos(np.clip(unit @ unit.T, -1.0, 1.0))) < max_deg
    label = list(range(len(vectors)))
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            if close[i, j]:
                old, new = max(label[i], label[j]), min(label[i], label[j])
                label = [new if x == old else x for x in label]
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(label):
        groups.setdefault(lab, []).append(i)
    return list(groups.values())
