import json
import math

import numpy as np
import pytest
from scipy.signal import get_window

from seldde.io_dataset import FoaClip
from seldde.metrics import angular_error
from seldde.salsa import (FeatureError, FeatureStats, LOG_EPS, StftConfig, compress_high_freq,
                          doa_from_features, extract_salsa, load_feature, save_feature,
                          spatial_eigenvector, stft)
from seldde.scene_synth import EventSpec, encode_foa_gains, render_scene

CFG = StftConfig()
N = CFG.n_samples


def _plane_wave(az, el, cls=0, span=(10, 30), snr_db=None, seed=0):
    clip, _ = render_scene([EventSpec(cls, span[0], span[1], az, el, 1.0)], 5.0, snr_db, seed)
    return clip


def test_config_frame_arithmetic():
    assert CFG.n_frames == 400
    assert CFG.n_fft // 2 + 1 == 257


def test_stft_zero():
    spec = stft(FoaClip(np.zeros((4, N))))
    assert spec.shape == (4, 400, 257)
    assert not spec.any()


def test_stft_sine_peak_bin():
    x = np.zeros((4, N))
    x[0] = np.sin(2 * np.pi * 1000 * np.arange(N) / 24000)
    mag = np.abs(stft(FoaClip(x)))
    assert round(1000 / 46.875) == 21
    assert np.argmax(mag[0].mean(axis=0)) == 21
    assert mag[1:].max() == 0


def test_stft_parseval():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, N))
    spec = stft(FoaClip(x))
    # time-domain side, framed independently of the implementation
    pad = CFG.n_fft - CFG.hop
    padded = np.pad(x, ((0, 0), (pad // 2, pad - pad // 2)))
    win = get_window("hann", 512, fftbins=True)
    frame_energy = np.array([[np.sum((padded[c, t * 300:t * 300 + 512] * win) ** 2)
                              for t in range(400)] for c in range(4)])
    weights = np.full(257, 2.0)
    weights[[0, -1]] = 1.0
    spec_energy = (np.abs(spec) ** 2 * weights).sum(axis=-1) / CFG.n_fft
    np.testing.assert_allclose(spec_energy.sum(), frame_energy.sum(), rtol=1e-3)
    np.testing.assert_allclose(spec_energy, frame_energy, rtol=1e-9)


def test_stft_wrong_length():
    with pytest.raises(FeatureError):
        stft(FoaClip(np.zeros((4, N - 1))))


def test_spatial_silence():
    assert not spatial_eigenvector(np.zeros((4, 400, 257), dtype=complex)).any()


def test_spatial_plane_wave_values():
    az, el = 30.0, 10.0
    spatial = spatial_eigenvector(stft(_plane_wave(az, el)))
    gated = spatial[0] != 0
    assert gated.sum() > 100
    expected = encode_foa_gains(az, el)[1:] / math.sqrt(2)
    for c in range(3):
        np.testing.assert_allclose(spatial[c][gated], expected[c], atol=1e-6)
    est = doa_from_features(np.concatenate([np.zeros((4, 400, 257)), spatial]))
    assert angular_error(est, (az, el)) < 2.0


def test_spatial_two_sources_band_split():
    # class 0 occupies 300-900 Hz, class 3 occupies 1200-1800 Hz
    clip, _ = render_scene([EventSpec(0, 10, 30, -60.0, 20.0, 1.0),
                            EventSpec(3, 10, 30, 100.0, -15.0, 1.0, signal_seed=2)],
                           5.0, None, 0)
    spatial = spatial_eigenvector(stft(clip))
    full = np.concatenate([np.zeros((4, 400, 257)), spatial])
    band1 = np.zeros_like(full)
    band1[:, :, 8:18] = full[:, :, 8:18]
    band2 = np.zeros_like(full)
    band2[:, :, 28:37] = full[:, :, 28:37]
    assert angular_error(doa_from_features(band1), (-60.0, 20.0)) < 2.0
    assert angular_error(doa_from_features(band2), (100.0, -15.0)) < 2.0


def test_compress_constant():
    out = compress_high_freq(np.ones((3, 5, 257)))
    assert out.shape == (3, 5, 200)
    assert np.all(out == 1)


def test_compress_group_mean_and_passthrough():
    x = np.zeros(257)
    x[192:200] = np.arange(8)
    x[100] = 42
    out = compress_high_freq(x)
    assert out[192] == 3.5
    assert out[100] == 42


def test_compress_drops_nyquist():
    x = np.zeros(257)
    x[256] = 1e6
    assert not compress_high_freq(x).any()


def test_compress_wrong_bins():
    with pytest.raises(FeatureError):
        compress_high_freq(np.zeros((2, 256)))


def test_extract_shape_and_range():
    clip = _plane_wave(-140.0, 35.0, cls=2, snr_db=10.0, seed=4)
    f = extract_salsa(clip)
    assert f.shape == (7, 400, 200)
    assert f.dtype == np.float32
    assert np.abs(f[4:]).max() <= 1.0


def test_extract_silence():
    f = extract_salsa(FoaClip(np.zeros((4, N))))
    np.testing.assert_allclose(f[:4], np.log(LOG_EPS), rtol=1e-6)
    assert not f[4:].any()


@pytest.mark.parametrize("az,el,cls", [(30.0, 10.0, 0), (-150.0, -40.0, 1), (95.0, 60.0, 2)])
def test_extract_direction(az, el, cls):
    f = extract_salsa(_plane_wave(az, el, cls))
    assert angular_error(doa_from_features(f, np.exp(f[0])), (az, el)) < 2.0


def test_extract_deterministic():
    clip = _plane_wave(12.0, -5.0, snr_db=15.0)
    np.testing.assert_array_equal(extract_salsa(clip), extract_salsa(clip))


def test_feature_stats_standardize_logpower_only():
    rng = np.random.default_rng(0)
    feats = [rng.normal(3.0, 2.0, (7, 8, 200)).astype(np.float32) for _ in range(4)]
    stats = FeatureStats.fit(feats)
    out = np.stack([stats.apply(f) for f in feats])
    np.testing.assert_allclose(out[:, :4].mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out[:, :4].std(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_array_equal(out[:, 4:], np.stack(feats)[:, 4:])


def test_feature_cache_round_trip(tmp_path):
    f = np.random.default_rng(0).standard_normal((7, 400, 200)).astype(np.float32)
    save_feature(tmp_path / "a.f32", f, CFG)
    assert (tmp_path / "a.f32").stat().st_size == 7 * 400 * 200 * 4
    meta = json.loads((tmp_path / "a.f32.json").read_text())
    assert meta["shape"] == [7, 400, 200]
    assert meta["stft"]["hop"] == 300
    np.testing.assert_array_equal(load_feature(tmp_path / "a.f32"), f)
