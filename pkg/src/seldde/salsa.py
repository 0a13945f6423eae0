"""SALSA features: log-power spectrograms plus eigenvector-based spatial cues.

Layout of the returned tensor is (channel, time, frequency) with channels
0-3 the log-power of W, Y, Z, X and channels 4-6 the (y, z, x) components of
the principal eigenvector of the local spatial covariance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .io_dataset import FoaClip

LOG_EPS = 1e-10
N_RAW_BINS = 257
N_KEEP_BINS = 192
N_GROUPS = 8
GROUP_WIDTH = 8
N_OUT_BINS = N_KEEP_BINS + N_GROUPS


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 24000
    win_length: int = 512
    hop: int = 300
    n_fft: int = 512
    window: str = "hann"
    cutoff_hz: float = 9000.0
    segment_s: float = 5.0
    gate_db: float = 5.0
    neighborhood: tuple[int, int] = (3, 3)
    power_iters: int = 50
    power_tol: float = 1e-12

    @property
    def n_frames(self) -> int:
        return int(round(self.segment_s * self.sample_rate)) // self.hop

    @property
    def n_samples(self) -> int:
        return int(round(self.segment_s * self.sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureStats:
    """Per-channel mean/std of the log-power channels over a training set."""

    mean: list[float]
    std: list[float]
    version: str = "salsa-logpower-v1"

    @classmethod
    def fit(cls, features: list[np.ndarray]) -> "FeatureStats":
        stacked = np.stack([f[:4] for f in features]).astype(np.float64)
        mean = stacked.mean(axis=(0, 2, 3))
        std = stacked.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        return cls(mean.tolist(), std.tolist())

    def apply(self, feature: np.ndarray) -> np.ndarray:
        out = np.array(feature, dtype=np.float32, copy=True)
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        out[:4] = (out[:4] - mean) / std
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(list(d["mean"]), list(d["std"]), d.get("version", "salsa-logpower-v1"))


def stft(clip: FoaClip | np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Hann-windowed STFT, shape (4, n_frames, n_fft // 2 + 1).

    The signal is padded by (n_fft - hop) / 2 on each side so frame t is
    centred on the middle of hop t and a 5 s clip yields exactly 400 frames.
    """
    x = clip.samples if isinstance(clip, FoaClip) else np.asarray(clip)
    if x.shape[-1] != cfg.n_samples:
        raise FeatureError(f"expected {cfg.n_samples} samples, got {x.shape[-1]}")
    pad_total = cfg.n_fft - cfg.hop
    left = pad_total // 2
    padded = np.pad(x, ((0, 0), (left, pad_total - left)))
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft, axis=-1)[:, ::cfg.hop]
    frames = frames[:, :cfg.n_frames]
    win = get_window(cfg.window, cfg.win_length, fftbins=True)
    if cfg.win_length < cfg.n_fft:
        off = (cfg.n_fft - cfg.win_length) // 2
        win = np.pad(win, (off, cfg.n_fft - cfg.win_length - off))
    return np.fft.rfft(frames * win, n=cfg.n_fft, axis=-1)


def _local_covariance(spec: np.ndarray, neighborhood: tuple[int, int],
                      t_idx: np.ndarray, f_idx: np.ndarray) -> np.ndarray:
    """Spatial covariance at the listed TF bins, averaged over a time x frequency box.

    Returns (n_bins, 4, 4). Neighbours outside the spectrogram count as zero.
    """
    nt, nf = neighborhood
    pt, pf = nt // 2, nf // 2
    padded = np.pad(spec, ((0, 0), (pt, nt - 1 - pt), (pf, nf - 1 - pf)))
    dt, df = np.meshgrid(np.arange(nt), np.arange(nf), indexing="ij")
    # (4, n_bins, nt * nf) neighbourhood snapshots
    snaps = padded[:, t_idx[:, None] + dt.ravel(), f_idx[:, None] + df.ravel()]
    return np.einsum("ink,jnk->nij", snaps, snaps.conj()) / (nt * nf)


def principal_eigenvector(cov: np.ndarray, iters: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Principal eigenvector of a stack of Hermitian PSD matrices (..., n, n).

    Power iteration accelerated by repeated squaring: after k squarings the
    matrix is R^(2^k), i.e. 2^k plain iterations, so ceil(log2(iters))
    squarings cover the iteration budget. The iterate is the largest-norm
    column of the powered matrix; squaring stops early once every bin's
    residual ||R v - (v^H R v) v|| / ||R|| is below ``tol``.
    """
    scale = np.linalg.norm(cov, axis=(-2, -1))
    live = scale > 0
    r = cov / np.where(live, scale, 1.0)[..., None, None]
    m = r
    for _ in range(max(1, int(np.ceil(np.log2(max(iters, 2)))))):
        m = m @ m
        m = m / np.maximum(np.linalg.norm(m, axis=(-2, -1)), 1e-300)[..., None, None]
        v = _top_column(m)
        rv = np.einsum("...ij,...j->...i", r, v)
        lam = np.einsum("...i,...i->...", v.conj(), rv)
        if not np.any(np.linalg.norm(rv - lam[..., None] * v, axis=-1)[live] > tol):
            break
    return np.where(live[..., None], v, 0)


def _top_column(m: np.ndarray) -> np.ndarray:
    start = np.argmax(np.linalg.norm(m, axis=-2), axis=-1)
    v = np.take_along_axis(m, start[..., None, None], axis=-1)[..., 0]
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def spatial_eigenvector(spec: np.ndarray, gate_db: float = 5.0,
                        neighborhood: tuple[int, int] = (3, 3),
                        iters: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Direction channels (y, z, x) in [-1, 1], shape (3, T, F).

    Bins whose W power does not exceed the per-frequency median by
    ``gate_db`` are zeroed, as are bins with a degenerate covariance. Only
    gated-in bins are decomposed.
    """
    power = np.abs(spec[0]) ** 2
    median = np.median(power, axis=0, keepdims=True)
    gate = (power > median * 10 ** (gate_db / 10.0)) & (power > 0)
    out = np.zeros((3,) + power.shape)
    t_idx, f_idx = np.nonzero(gate)
    if t_idx.size == 0:
        return out
    v = principal_eigenvector(_local_covariance(spec, neighborhood, t_idx, f_idx), iters, tol)
    # rotate each eigenvector so the W component is real and non-negative
    w = v[:, 0]
    mag = np.abs(w)
    v = v * np.where(mag > 0, w.conj() / np.where(mag > 0, mag, 1.0), 1.0)[:, None]
    out[:, t_idx, f_idx] = np.clip(v[:, 1:].real.T, -1.0, 1.0)
    return out


def compress_high_freq(x: np.ndarray) -> np.ndarray:
    """Keep bins below 9 kHz; average the next 64 bins in 8 groups; drop Nyquist."""
    x = np.asarray(x)
    if x.shape[-1] != N_RAW_BINS:
        raise FeatureError(f"expected {N_RAW_BINS} frequency bins, got {x.shape[-1]}")
    low = x[..., :N_KEEP_BINS]
    high = x[..., N_KEEP_BINS:N_KEEP_BINS + N_GROUPS * GROUP_WIDTH]
    high = high.reshape(*x.shape[:-1], N_GROUPS, GROUP_WIDTH).mean(axis=-1)
    return np.concatenate([low, high], axis=-1)


def extract_salsa(clip: FoaClip | np.ndarray, cfg: StftConfig = StftConfig(),
                  stats: FeatureStats | None = None) -> np.ndarray:
    """Seven-channel SALSA tensor (7, 400, 200) as float32."""
    spec = stft(clip, cfg)
    logpow = np.log(np.abs(spec) ** 2 + LOG_EPS)
    spatial = spatial_eigenvector(spec, cfg.gate_db, cfg.neighborhood, cfg.power_iters, cfg.power_tol)
    feat = compress_high_freq(np.concatenate([logpow, spatial], axis=0)).astype(np.float32)
    if stats is not None:
        feat = stats.apply(feat)
    return feat


def doa_from_features(feature: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, float]:
    """Power-weighted mean direction over gated-in bins, as (azimuth, elevation) degrees."""
    y, z, x = feature[4], feature[5], feature[6]
    active = (y != 0) | (z != 0) | (x != 0)
    if not np.any(active):
        raise FeatureError("no gated-in bins")
    wts = np.ones_like(y) if weights is None else weights
    wts = np.where(active, wts, 0.0)
    vy, vz, vx = (float(np.sum(c * wts)) for c in (y, z, x))
    return float(np.degrees(np.arctan2(vy, vx))), float(np.degrees(np.arctan2(vz, np.hypot(vx, vy))))


def save_feature(path: str | Path, feature: np.ndarray, cfg: StftConfig,
                 stats_version: str = "raw", extra: dict | None = None) -> None:
    """Write raw little-endian float32 (C, T, F) plus a ``.json`` sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(feature, dtype="<f4").tobytes())
    sidecar = {"shape": list(feature.shape), "stft": cfg.to_dict(), "stats_version": stats_version}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_feature(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(meta["shape"]).astype(np.float32)
