import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seldde.accddoa import encode_labels, fit_distance_scaler
from seldde.augment import (ALL_ACS_TRANSFORMS, AcsTransform, AugPolicy, acs_apply,
                            acs_apply_features, acs_apply_target, aug_magnitude, freq_shift,
                            mask_frequency, mixup, spec_augment)
from seldde.io_dataset import Event, EventList
from seldde.metrics import angular_error
from seldde.salsa import extract_salsa
from seldde.scene_synth import EventSpec, estimate_doa_broadband, render_scene


def _scene(az, el, d=2.0, snr_db=None):
    return render_scene([EventSpec(0, 10, 30, az, el, d)], 5.0, snr_db, 0)


def test_sixteen_distinct_transforms():
    assert len(set(ALL_ACS_TRANSFORMS)) == 16
    mats = {tuple(t.channel_matrix().ravel()) for t in ALL_ACS_TRANSFORMS}
    assert len(mats) == 16
    assert AcsTransform() in ALL_ACS_TRANSFORMS
    with pytest.raises(ValueError):
        AcsTransform(k=4)


def test_identity_bit_identical():
    clip, events = _scene(30.0, 10.0)
    out, ev = acs_apply(clip, events, AcsTransform())
    np.testing.assert_array_equal(out.samples, clip.samples)
    assert ev.events == events.events


def test_rotate_90_doa():
    clip, events = _scene(30.0, 10.0)
    out, ev = acs_apply(clip, events, AcsTransform(k=1))
    assert (ev.events[0].azimuth_deg, ev.events[0].elevation_deg) == (120.0, 10.0)
    assert angular_error(estimate_doa_broadband(out.samples), (120.0, 10.0)) < 0.1


def test_reflect_el_negates_z():
    clip, events = _scene(30.0, 10.0)
    out, ev = acs_apply(clip, events, AcsTransform(reflect_el=True))
    np.testing.assert_array_equal(out.samples[2], -clip.samples[2])
    e = ev.events[0]
    assert (e.azimuth_deg, e.elevation_deg, e.distance_m) == (30.0, -10.0, 2.0)


@pytest.mark.parametrize("t", ALL_ACS_TRANSFORMS, ids=str)
def test_acs_doa_and_energy(t):
    rng = np.random.default_rng(hash((t.k, t.reflect_az, t.reflect_el)) % 2**32)
    for _ in range(3):
        az, el = float(rng.uniform(-180, 180)), float(rng.uniform(-70, 70))
        clip, events = _scene(az, el, snr_db=None)
        out, ev = acs_apply(clip, events, t)
        e = ev.events[0]
        assert angular_error(estimate_doa_broadband(out.samples),
                             (e.azimuth_deg, e.elevation_deg)) < 0.1
        before = sorted((clip.samples ** 2).sum(axis=1))
        after = sorted((out.samples ** 2).sum(axis=1))
        assert before == after
        assert math.fsum(before) == math.fsum(after)


def test_composition_k1_twice_is_k2():
    clip, events = _scene(-70.0, 25.0, snr_db=20.0)
    once = acs_apply(*acs_apply(clip, events, AcsTransform(k=1)), AcsTransform(k=1))
    direct = acs_apply(clip, events, AcsTransform(k=2))
    np.testing.assert_array_equal(once[0].samples, direct[0].samples)
    assert once[1].events == direct[1].events


@pytest.mark.parametrize("t", ALL_ACS_TRANSFORMS[1:6], ids=str)
def test_feature_domain_matches_waveform(t):
    clip, events = _scene(50.0, -20.0, snr_db=20.0)
    from_wave = extract_salsa(acs_apply(clip, events, t)[0])
    from_feat = acs_apply_features(extract_salsa(clip), t)
    np.testing.assert_allclose(from_feat, from_wave, atol=1e-5)


@pytest.mark.parametrize("t", ALL_ACS_TRANSFORMS, ids=str)
def test_target_domain_matches_label_transform(t):
    scaler = fit_distance_scaler([1.0, 3.0])
    events = EventList([Event(2, 1, 0, 40.0, 30.0, 2.0), Event(2, 1, 1, -100.0, -5.0, 1.5)], 5)
    target = encode_labels(events, scaler, 2)
    expected = encode_labels(acs_apply(_scene(0.0, 0.0)[0], events, t)[1], scaler, 2)
    np.testing.assert_allclose(acs_apply_target(target, t), expected, atol=1e-12)


def test_spec_augment_zero_magnitude_identity():
    f = np.random.default_rng(0).standard_normal((7, 40, 20))
    out = spec_augment(f, AugPolicy(), 0.0, np.random.default_rng(1))
    np.testing.assert_array_equal(out, f)


def test_spec_augment_deterministic_and_shape():
    f = np.random.default_rng(0).standard_normal((7, 400, 200))
    a = spec_augment(f, AugPolicy(), 1.0, np.random.default_rng(5))
    b = spec_augment(f, AugPolicy(), 1.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.shape == f.shape
    # masked entries are zero, the rest untouched
    changed = a != f
    assert np.all(a[changed] == 0)


def test_mask_frequency_columns():
    f = np.ones((7, 10, 200))
    out = mask_frequency(f, 40, 48)
    assert not out[..., 40:48].any()
    np.testing.assert_array_equal(np.delete(out, range(40, 48), axis=-1), 1)


def test_mixup_examples():
    a = (np.ones((2, 3)), np.full(4, 0.5))
    b = (np.full((2, 3), 3.0), np.full(4, -1.0))
    assert mixup(a, b, 0.4, lam=1.0) is a
    f, t = mixup(a, b, 0.4, lam=0.5)
    np.testing.assert_array_equal(f, 2.0)
    np.testing.assert_array_equal(t, -0.25)


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_mixup_targets_stay_bounded(lam, seed):
    rng = np.random.default_rng(seed)
    ta, tb = rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 12)
    _, t = mixup((np.zeros(1), ta), (np.zeros(1), tb), 0.4, lam=lam)
    assert np.all(np.abs(t) <= 1.0)


def test_freq_shift_examples():
    f = np.random.default_rng(0).standard_normal((7, 5, 200))
    np.testing.assert_array_equal(freq_shift(f, 0), f)
    up = freq_shift(f, 2)
    np.testing.assert_array_equal(up[..., 2:], f[..., :-2])
    assert not up[..., :2].any()
    # shifting up then down loses the top bins; the reverse order loses the bottom ones
    back = freq_shift(freq_shift(f, 2), -2)
    np.testing.assert_array_equal(back[..., :-2], f[..., :-2])
    assert not back[..., -2:].any()
    fwd = freq_shift(freq_shift(f, -2), 2)
    np.testing.assert_array_equal(fwd[..., 2:], f[..., 2:])
    assert not fwd[..., :2].any()
    with pytest.raises(ValueError):
        freq_shift(f, 11)


@pytest.mark.parametrize("lr,expected", [(5e-4, 1.0), (0.0, 0.1), (2.5e-4, 0.5), (1.0, 1.0)])
def test_aug_magnitude(lr, expected):
    assert aug_magnitude(lr, 5e-4) == pytest.approx(expected)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugPolicy(acs_probability=1.5)
    with pytest.raises(ValueError):
        AugPolicy(time_mask_width=-1)
