"""Direct-path first-order Ambisonics scene synthesis.

Scenes are built from per-class deterministic signal families (band noise,
harmonic tone complexes, chirps), each panned with SN3D first-order gains and
attenuated by 1/max(d, 0.2 m). A spatially diffuse noise bed sets the SNR.
There is no reverberation, so DOA and distance ground truth are exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .io_dataset import LABEL_HOP_S, SAMPLE_RATE, Event, EventList, FoaClip, wrap_azimuth

NUM_CLASSES = 13
MIN_GAIN_DISTANCE_M = 0.2
FADE_S = 0.005
SOURCE_RMS = 0.1  # W-channel RMS of every source at 1 m


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    duration_s: float = 5.0
    num_events: int = 3
    class_weights: Sequence[float] | None = None
    distance_range_m: tuple[float, float] = (0.5, 4.0)
    max_polyphony: int = 3
    snr_db: float = 30.0
    seed: int = 0
    num_classes: int = NUM_CLASSES
    event_duration_s: tuple[float, float] = (1.0, 3.0)
    elevation_range_deg: tuple[float, float] = (-60.0, 60.0)
    max_retries: int = 200

    def __post_init__(self):
        if self.class_weights is None:
            self.class_weights = [1.0 / self.num_classes] * self.num_classes
        w = np.asarray(self.class_weights, dtype=np.float64)
        if len(w) != self.num_classes:
            raise ValueError("class_weights length must equal num_classes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("class_weights must be a probability vector")
        if not 1 <= self.max_polyphony <= 3:
            raise ValueError("max_polyphony must be in [1, 3]")
        lo, hi = self.distance_range_m
        if not 0 < lo <= hi:
            raise ValueError("distance_range_m must satisfy 0 < min <= max")
        if self.num_events < 0 or self.duration_s <= 0:
            raise ValueError("num_events must be >= 0 and duration_s > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(map(float, self.class_weights))
        return d


@dataclass
class EventSpec:
    """One static source occupying label frames [onset_frame, offset_frame)."""

    class_idx: int
    onset_frame: int
    offset_frame: int
    azimuth_deg: float
    elevation_deg: float
    distance_m: float
    source_idx: int = 0
    signal_seed: int = 0


def encode_foa_gains(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """SN3D first-order gains in ACN order [W, Y, Z, X]."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([1.0, math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])


def distance_gain(distance_m: float) -> float:
    return 1.0 / max(distance_m, MIN_GAIN_DISTANCE_M)


def _normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2))
    return x * (SOURCE_RMS / rms) if rms > 0 else x


def class_signal(class_idx: int, n_samples: int, rng: np.random.Generator,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mono source signal whose family and band are fixed by the class index."""
    t = np.arange(n_samples) / sample_rate
    family = class_idx % 3
    slot = class_idx // 3
    if family == 0:
        # band-limited noise, band centre climbs with class
        lo = 300.0 + 900.0 * slot
        hi = lo + 600.0
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        x = np.fft.irfft(spec, n_samples)
    elif family == 1:
        f0 = 180.0 + 110.0 * slot
        phases = rng.uniform(0, 2 * np.pi, size=6)
        x = sum(np.sin(2 * np.pi * f0 * (h + 1) * t + phases[h]) / (h + 1) for h in range(6))
    else:
        f_start = 600.0 + 700.0 * slot
        f_end = f_start * 3.0
        period = 0.25
        tau = np.mod(t, period)
        # repeating linear sweep
        inst = 2 * np.pi * (f_start * tau + 0.5 * (f_end - f_start) / period * tau ** 2)
        x = np.sin(inst + rng.uniform(0, 2 * np.pi))
    return _normalize(np.asarray(x, dtype=np.float64))


def _fade(n: int, sample_rate: int) -> np.ndarray:
    ramp = min(int(FADE_S * sample_rate), n // 2)
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def diffuse_noise(n_samples: int, rng: np.random.Generator, rms: float) -> np.ndarray:
    """Isotropic FOA noise: independent channels, first-order ones at 1/3 the W power."""
    noise = rng.standard_normal((4, n_samples)) * rms
    noise[1:] /= math.sqrt(3.0)
    return noise


def render_scene(specs: Sequence[EventSpec], duration_s: float, snr_db: float | None,
                 seed: int, source_tag: str = "synthetic",
                 sample_rate: int = SAMPLE_RATE) -> tuple[FoaClip, EventList]:
    """Render explicit event specs. ``snr_db=None`` disables the noise bed."""
    n = int(round(duration_s * sample_rate))
    hop = int(round(LABEL_HOP_S * sample_rate))
    out = np.zeros((4, n))
    labels = []
    for spec in specs:
        start = spec.onset_frame * hop
        stop = min(spec.offset_frame * hop, n)
        if stop <= start:
            continue
        rng = np.random.default_rng([seed, spec.signal_seed])
        mono = class_signal(spec.class_idx, stop - start, rng, sample_rate)
        mono *= _fade(stop - start, sample_rate) * distance_gain(spec.distance_m)
        out[:, start:stop] += encode_foa_gains(spec.azimuth_deg, spec.elevation_deg)[:, None] * mono
        last = min(spec.offset_frame, -(-n // hop))
        for frame in range(spec.onset_frame, last):
            labels.append(Event(frame, spec.class_idx, spec.source_idx,
                                wrap_azimuth(spec.azimuth_deg), spec.elevation_deg,
                                spec.distance_m))
    if snr_db is not None and math.isfinite(snr_db):
        noise_rng = np.random.default_rng([seed, 0xD1FF])
        out += diffuse_noise(n, noise_rng, SOURCE_RMS / 10 ** (snr_db / 20.0))
    n_frames = -(-n // hop)
    return FoaClip(out, sample_rate, source_tag), EventList(labels, n_frames)


def sample_event_specs(config: SceneConfig) -> list[EventSpec]:
    """Draw event placements obeying the polyphony cap.

    The cap bounds the number of simultaneously active events in any label
    frame, which also bounds per-class polyphony.
    """
    rng = np.random.default_rng(config.seed)
    n_frames = int(round(config.duration_s / LABEL_HOP_S))
    activity = np.zeros(n_frames, dtype=int)
    specs: list[EventSpec] = []
    next_source: dict[int, int] = {}
    lo_len = max(1, int(round(config.event_duration_s[0] / LABEL_HOP_S)))
    hi_len = max(lo_len, int(round(config.event_duration_s[1] / LABEL_HOP_S)))
    for i in range(config.num_events):
        for _ in range(config.max_retries):
            length = min(int(rng.integers(lo_len, hi_len + 1)), n_frames)
            onset = int(rng.integers(0, n_frames - length + 1))
            if np.all(activity[onset:onset + length] < config.max_polyphony):
                break
        else:
            raise GenerationError(
                f"could not place event {i} under polyphony cap {config.max_polyphony}")
        activity[onset:onset + length] += 1
        cls = int(rng.choice(config.num_classes, p=np.asarray(config.class_weights)))
        az = float(rng.uniform(-180.0, 180.0))
        el = float(rng.uniform(*config.elevation_range_deg))
        dist = float(rng.uniform(*config.distance_range_m))
        src = next_source.get(cls, 0)
        next_source[cls] = src + 1
        specs.append(EventSpec(cls, onset, onset + length, wrap_azimuth(az), el, dist,
                               source_idx=src, signal_seed=i + 1))
    return specs


def synth_scene(config: SceneConfig, source_tag: str = "synthetic") -> tuple[FoaClip, EventList]:
    specs = sample_event_specs(config)
    return render_scene(specs, config.duration_s, config.snr_db, config.seed, source_tag)


def distance_histogram(events: EventList | Sequence[Event], bin_edges: Sequence[float]) -> np.ndarray:
    """Counts of event distances in half-open bins [e_i, e_{i+1})."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing with at least 2 entries")
    d = np.array([e.distance_m for e in events], dtype=np.float64)
    idx = np.searchsorted(edges, d, side="right") - 1
    valid = (idx >= 0) & (idx < len(edges) - 1)
    return np.bincount(idx[valid], minlength=len(edges) - 1)


def estimate_doa_broadband(samples: np.ndarray) -> tuple[float, float]:
    """Least-squares direction from W-referenced channel ratios of a single plane wave."""
    w = samples[0]
    energy = np.dot(w, w)
    if energy <= 0:
        raise ValueError("W channel is silent")
    y, z, x = (np.dot(samples[c], w) / energy for c in (1, 2, 3))
    return math.degrees(math.atan2(y, x)), math.degrees(math.atan2(z, math.hypot(x, y)))
