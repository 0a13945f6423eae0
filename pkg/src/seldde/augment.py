"""Augmentation policy: FOA channel swapping plus annealed spectrogram augmentations.

Channel swapping (ACS) acts on waveforms and labels and is applied at a
constant probability. SpecAugment, mixup and frequency shifting act on
feature tensors; their strength follows ``aug_magnitude``, which tracks the
learning rate relative to its peak.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .io_dataset import EventList, FoaClip, wrap_azimuth

# exact cos/sin of k * 90 degrees
_COS = (1, 0, -1, 0)
_SIN = (0, 1, 0, -1)


@dataclass(frozen=True)
class AcsTransform:
    """Azimuth rotation by k * 90 degrees applied after optional reflections."""

    k: int = 0
    reflect_az: bool = False
    reflect_el: bool = False

    def __post_init__(self):
        if self.k not in (0, 1, 2, 3):
            raise ValueError("k must be in {0, 1, 2, 3}")

    @property
    def is_identity(self) -> bool:
        return self.k == 0 and not self.reflect_az and not self.reflect_el

    def channel_matrix(self) -> np.ndarray:
        """4x4 matrix acting on [W, Y, Z, X]."""
        c, s = _COS[self.k], _SIN[self.k]
        sa = -1 if self.reflect_az else 1
        se = -1 if self.reflect_el else 1
        m = np.zeros((4, 4))
        m[0, 0] = 1
        m[2, 2] = se
        # X' = c X - s (sa Y);  Y' = s X + c (sa Y)
        m[3, 3], m[3, 1] = c, -s * sa
        m[1, 3], m[1, 1] = s, c * sa
        return m

    def map_doa(self, azimuth_deg: float, elevation_deg: float) -> tuple[float, float]:
        sa = -1 if self.reflect_az else 1
        se = -1 if self.reflect_el else 1
        return wrap_azimuth(sa * azimuth_deg + 90.0 * self.k), se * elevation_deg


ALL_ACS_TRANSFORMS = tuple(AcsTransform(k, ra, re) for k, ra, re in
                           itertools.product(range(4), (False, True), (False, True)))


def acs_apply(clip: FoaClip, events: EventList, t: AcsTransform) -> tuple[FoaClip, EventList]:
    if t.is_identity:
        return clip, events
    x = clip.samples
    c, s = _COS[t.k], _SIN[t.k]
    y = -x[1] if t.reflect_az else x[1]
    z = -x[2] if t.reflect_el else x[2]
    # integer coefficients keep the mapping exact (pure sign flips and swaps)
    out = np.stack([x[0], s * x[3] + c * y, z, c * x[3] - s * y])
    new_events = []
    for ev in events:
        az, el = t.map_doa(ev.azimuth_deg, ev.elevation_deg)
        new_events.append(replace(ev, azimuth_deg=az, elevation_deg=el))
    return (FoaClip(out, clip.sample_rate, clip.source_tag),
            EventList(new_events, events.num_label_frames))


def acs_apply_features(feature: np.ndarray, t: AcsTransform) -> np.ndarray:
    """Same transform expressed on a SALSA tensor.

    Log-power channels of Y and X swap for odd k; the (y, z, x) direction
    channels rotate exactly as the waveform channels do. Standardization
    must not have been applied with channel-specific statistics for the Y/X
    swap to be exact.
    """
    if t.is_identity:
        return feature
    m = t.channel_matrix()
    out = np.array(feature, copy=True)
    if t.k % 2:
        out[[1, 3]] = feature[[3, 1]]
    spatial = np.einsum("ij,jtf->itf", m[1:, 1:], feature[4:7])
    out[4:7] = spatial
    return out


@dataclass
class AugPolicy:
    num_time_masks: int = 2
    time_mask_width: int = 40
    num_freq_masks: int = 2
    freq_mask_width: int = 16
    mixup_alpha: float = 0.4
    mixup_prob: float = 0.5
    freq_shift_max: int = 10
    acs_probability: float = 0.5
    magnitude_floor: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        for name in ("num_time_masks", "time_mask_width", "num_freq_masks", "freq_mask_width",
                     "freq_shift_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("mixup_prob", "acs_probability", "magnitude_floor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def aug_magnitude(current_lr: float, peak_lr: float, floor: float = 0.1) -> float:
    if peak_lr <= 0:
        raise ValueError("peak_lr must be positive")
    return float(min(max(current_lr / peak_lr, floor), 1.0))


def spec_augment(f: np.ndarray, policy: AugPolicy, magnitude: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero time and frequency stripes across all channels."""
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError("magnitude must be in [0, 1]")
    out = np.array(f, copy=True)
    n_t, n_f = f.shape[-2:]
    n_time = math.ceil(magnitude * policy.num_time_masks)
    n_freq = math.ceil(magnitude * policy.num_freq_masks)
    t_width = int(round(magnitude * policy.time_mask_width))
    f_width = int(round(magnitude * policy.freq_mask_width))
    for _ in range(n_time):
        w = int(rng.integers(0, t_width + 1))
        start = int(rng.integers(0, max(n_t - w, 0) + 1))
        out[..., start:start + w, :] = 0
    for _ in range(n_freq):
        w = int(rng.integers(0, f_width + 1))
        start = int(rng.integers(0, max(n_f - w, 0) + 1))
        out[..., start:start + w] = 0
    return out


def mask_frequency(f: np.ndarray, start: int, stop: int) -> np.ndarray:
    out = np.array(f, copy=True)
    out[..., start:stop] = 0
    return out


def mixup(a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray], alpha: float,
          rng: np.random.Generator | None = None, lam: float | None = None):
    """Blend two (feature, target) pairs with lambda ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if lam == 1.0:
        return a
    fa, ta = a
    fb, tb = b
    return lam * fa + (1 - lam) * fb, lam * ta + (1 - lam) * tb


def freq_shift(f: np.ndarray, shift: int, max_shift: int = 10) -> np.ndarray:
    """Shift every channel along frequency, zero-filling vacated bins."""
    if abs(shift) > max_shift:
        raise ValueError(f"|shift| {abs(shift)} exceeds {max_shift}")
    if shift == 0:
        return f
    out = np.zeros_like(f)
    if shift > 0:
        out[..., shift:] = f[..., :-shift]
    else:
        out[..., :shift] = f[..., -shift:]
    return out


def random_acs(rng: np.random.Generator) -> AcsTransform:
    return ALL_ACS_TRANSFORMS[int(rng.integers(len(ALL_ACS_TRANSFORMS)))]


def acs_apply_target(target: np.ndarray, t: AcsTransform) -> np.ndarray:
    """Rotate/reflect the (x, y, z) part of a multi-ACCDDOA tensor."""
    if t.is_identity:
        return target
    m = t.channel_matrix()
    # rows/cols of m in [W, Y, Z, X]; re-index to (x, y, z)
    order = [3, 1, 2]
    rot = m[np.ix_(order, order)]
    out = np.array(target, copy=True)
    out[..., :3] = target[..., :3] @ rot.T
    return out
