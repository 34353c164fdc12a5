import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatarousal.data import Record
from scatarousal.errors import FitError, InputError, ShapeError, StateError, TruncatedDataError
from scatarousal.filterbank import FilterBankConfig, build_filterbank
from scatarousal.scattering import (
    NormalizerParams,
    ScatteringFeatures,
    ScatteringPath,
    apply_normalizer,
    fit_normalizer,
    frame_labels,
    generate_paths,
    load_features,
    path_count,
    save_features,
    scatter_channel,
    scatter_record,
)


# --- oracle: direct time-domain cascade with np.convolve -------------------

def _centered_taps(spec):
    n = spec.shape[0]
    return np.roll(np.fft.ifft(spec), n // 2)


def _conv_same(x, taps):
    n = taps.shape[0]
    return np.convolve(x, taps, mode="full")[n // 2: n // 2 + x.size]


def direct_order1(x, fb):
    T = fb.config.T
    Lp = math.ceil(x.size / T) * T
    xp = np.zeros(Lp)
    xp[: x.size] = x
    phi = _centered_taps(fb.phi_hat).real
    centers = np.arange(Lp // T) * T + T // 2
    out = []
    for j in range(fb.n_filters):
        u = np.abs(_conv_same(xp, _centered_taps(fb.psi_hat[j])))
        out.append(_conv_same(u, phi)[centers])
    return np.array(out).T


# --- path bookkeeping ------------------------------------------------------

@pytest.mark.parametrize("J,m,p,expected", [(1, 1, 1, 2), (8, 2, 1, 37), (3, 2, 2, 19)])
def test_path_count_examples(J, m, p, expected):
    assert path_count(J, m, p) == expected


def test_path_count_formula_terms():
    # 1 + 8 + 28 evaluated independently
    assert path_count(8, 2, 1) == 1 + 8 + (8 * 7) // 2


@pytest.mark.parametrize("J", range(1, 13))
@pytest.mark.parametrize("m", [1, 2])
def test_path_count_matches_enumeration(J, m):
    generated = generate_paths(J, m, include_order0=False)
    assert len(generated) + 1 == path_count(J, m)
    assert len(generate_paths(J, m, include_order0=True)) == path_count(J, m)


def test_path_order_is_sorted_and_strict():
    paths = generate_paths(8, 2)
    assert paths == sorted(paths)
    assert len(set(paths)) == len(paths) == 36
    assert all(p.j2 > p.j1 for p in paths if p.order == 2)
    assert paths[0] == ScatteringPath(1, 0) and paths[-1] == ScatteringPath(2, 6, 7)


def test_invalid_path():
    with pytest.raises(ValueError):
        ScatteringPath(2, 3, 3)


# --- cascade ---------------------------------------------------------------

def test_constant_signal(fb0):
    c = -2.5
    S = scatter_channel(np.full(512 * 40, c), fb0)
    margin = fb0.config.n_fft // fb0.config.T + 1
    inner = S[margin:-margin]
    np.testing.assert_allclose(inner[:, 0], c, rtol=1e-3)
    assert np.abs(inner[:, 1:]).max() < 1e-6 * abs(c)
    # order 0 only needs the low-pass support to clear the edges
    np.testing.assert_allclose(S[2:-2, 0], c, rtol=1e-3)


def test_zero_signal(fb):
    assert not scatter_channel(np.zeros(3000), fb).any()


def test_output_shape(fb):
    assert scatter_channel(np.ones(1024), fb).shape == (2, 36)
    assert scatter_channel(np.ones(1), fb).shape == (1, 36)
    assert scatter_channel(np.ones(1025), fb).shape == (3, 36)


def test_non_finite_reports_index(fb):
    x = np.zeros(100)
    x[37] = np.nan
    with pytest.raises(InputError, match="index 37"):
        scatter_channel(x, fb)


def test_order1_matches_direct_oracle(fb, rng):
    x = rng.standard_normal(512 * 6 + 100)
    S = scatter_channel(x, fb)
    np.testing.assert_allclose(S[:, :8], direct_order1(x, fb), rtol=1e-9, atol=1e-12)


def test_order2_matches_direct_oracle(rng):
    fb = build_filterbank(FilterBankConfig(J=3, T=64, n_fft=256))
    x = rng.standard_normal(64 * 5)
    S = scatter_channel(x, fb)
    phi = _centered_taps(fb.phi_hat).real
    centers = np.arange(5) * 64 + 32
    psi = [_centered_taps(fb.psi_hat[j]) for j in range(3)]
    expected = []
    for j1, j2 in [(0, 1), (0, 2), (1, 2)]:
        u1 = np.abs(_conv_same(x, psi[j1]))
        u2 = np.abs(_conv_same(u1, psi[j2]))
        expected.append(_conv_same(u2, phi)[centers])
    np.testing.assert_allclose(S[:, 3:], np.array(expected).T, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("j", range(8))
def test_sinusoid_energy_concentrates_on_its_scale(fb, j):
    fs = fb.config.fs
    t = np.arange(512 * 32) / fs
    x = np.sin(2 * np.pi * fb.xi[j] * t)
    oracle = direct_order1(x, fb)[4:-4]
    energy = (oracle ** 2).sum(axis=0)
    assert energy[j] / energy.sum() >= 0.70
    S1 = scatter_channel(x, fb)[4:-4, :8]
    np.testing.assert_allclose(S1, oracle, rtol=1e-8, atol=1e-12)


def test_raw_coefficients_non_negative(fb, rng):
    x = rng.standard_normal(5000) * 10
    assert (scatter_channel(x, fb) >= 0).all()


def test_non_expansive_small(fb, rng):
    for _ in range(5):
        x, y = rng.standard_normal((2, 4096))
        Sx, Sy = scatter_channel(x, fb), scatter_channel(y, fb)
        assert np.linalg.norm(Sx - Sy) <= np.linalg.norm(x - y) * (1 + 1e-6)
        assert (Sx ** 2).sum() <= (x ** 2).sum() * (1 + 1e-6)


# --- record level ----------------------------------------------------------

def test_scatter_record_dims(fb, small_records):
    rec = small_records[0]
    feat = scatter_record(rec, fb)
    assert feat.n_channels == 13
    assert feat.n_paths == 36
    assert feat.frame_rate == 0.390625
    assert feat.n_frames == math.ceil(rec.n_samples / 512)
    assert feat.frame_targets.shape == (feat.n_frames,)
    assert feat.data.dtype == np.float32


def test_scatter_record_jobs_identical(fb, small_records):
    a = scatter_record(small_records[1], fb)
    b = scatter_record(small_records[1], fb, jobs=3)
    assert a.data.tobytes() == b.data.tobytes()


def test_scatter_record_lengths(fb):
    r = Record("r", 200.0, ["A"], np.ones((1024, 1)), np.ones(1024))
    assert scatter_record(r, fb).n_frames == 2
    r = Record("r", 200.0, ["A"], np.ones((1, 1)), np.ones(1))
    assert scatter_record(r, fb).n_frames == 1


def test_scatter_record_error_names_channel(fb):
    s = np.zeros((600, 2))
    s[5, 1] = np.inf
    r = Record("r", 200.0, ["A", "B"], s, np.ones(600))
    with pytest.raises(InputError, match="channel B"):
        scatter_record(r, fb)


# --- frame labels ----------------------------------------------------------

@pytest.mark.parametrize("window,expected", [
    ([2] * 512, 2),
    ([0] * 512, 0),
    ([1] * 256 + [2] * 256, 2),
    ([1] * 257 + [2] * 255, 1),
    ([0] * 500 + [2] * 6 + [1] * 6, 2),
    ([0] * 511 + [1], 1),
])
def test_frame_label_rule(window, expected):
    assert frame_labels(np.array(window), 512).tolist() == [expected]


def test_frame_label_unknown():
    with pytest.raises(InputError, match="unknown label"):
        frame_labels(np.array([1, 1, 3]), 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2]), min_size=1, max_size=60), st.sampled_from([1, 2, 4, 8]))
def test_frame_labels_brute_force(labels, T):
    got = frame_labels(np.array(labels), T)
    padded = labels + [0] * (-len(labels) % T)
    expected = []
    for i in range(0, len(padded), T):
        w = [v for v in padded[i:i + T] if v != 0]
        if not w:
            expected.append(0)
        elif sum(v == 2 for v in w) * 2 >= len(w):
            expected.append(2)
        else:
            expected.append(1)
    assert got.tolist() == expected


# --- normalization ---------------------------------------------------------

def _feat(data, rid="r", normalized=False):
    data = np.asarray(data, dtype=np.float32)
    return ScatteringFeatures(rid, [f"c{i}" for i in range(data.shape[1])],
                              generate_paths(data.shape[2], 1), 0.390625, data,
                              np.ones(data.shape[0], np.uint8), normalized)


def test_fit_constant_values():
    vals = np.array([0.5, 2.0, 3.0])
    f = _feat(np.broadcast_to(vals, (7, 2, 3)))
    norm = fit_normalizer([f])
    np.testing.assert_array_equal(norm.medians, np.broadcast_to(vals.astype(np.float32), (2, 3)))


def test_fit_zero_floors_to_eps():
    norm = fit_normalizer([_feat(np.zeros((5, 1, 2)))], eps=1e-12)
    assert np.all(norm.medians == 1e-12)


def test_fit_pooled_median_oracle(rng):
    a = _feat(rng.exponential(size=(9, 2, 3)), "a")
    b = _feat(rng.exponential(size=(4, 2, 3)), "b")
    norm = fit_normalizer([a, b])
    for c in range(2):
        for p in range(3):
            pooled = sorted(float(v) for v in np.r_[a.data[:, c, p], b.data[:, c, p]])
            mid = len(pooled) // 2
            expected = pooled[mid] if len(pooled) % 2 else 0.5 * (pooled[mid - 1] + pooled[mid])
            assert norm.medians[c, p] == pytest.approx(expected, rel=1e-12)


def test_fit_empty():
    with pytest.raises(FitError):
        fit_normalizer([])


def test_apply_examples():
    med = np.array([[2.0, 4.0, 8.0]])
    norm = NormalizerParams(med, mu=np.array([1.0, 1.0, 2.0]))
    f = _feat(np.array([[[2.0, 0.0, 24.0]]]))
    out = apply_normalizer(f, norm)
    assert out.normalized
    assert out.data[0, 0, 0] == pytest.approx(0.6931471805599453, rel=1e-6)
    assert out.data[0, 0, 1] == 0.0
    assert out.data[0, 0, 2] == pytest.approx(1.9459101490553132, rel=1e-6)


def test_apply_twice_is_state_error():
    f = _feat(np.ones((3, 1, 2)))
    norm = fit_normalizer([f])
    with pytest.raises(StateError):
        apply_normalizer(apply_normalizer(f, norm), norm)


def test_apply_layout_mismatch():
    norm = fit_normalizer([_feat(np.ones((3, 2, 2)))])
    with pytest.raises(ShapeError):
        apply_normalizer(_feat(np.ones((3, 1, 2))), norm)


# --- containers ------------------------------------------------------------

def test_feature_roundtrip(tmp_path, fb, small_records):
    feat = scatter_record(small_records[2], fb)
    save_features(feat, tmp_path / "f")
    back = load_features(tmp_path / "f")
    assert back.data.tobytes() == feat.data.tobytes()
    assert back.frame_targets.tobytes() == feat.frame_targets.tobytes()
    assert back.paths == feat.paths
    assert back.channel_names == feat.channel_names
    assert back.frame_rate == feat.frame_rate


def test_feature_path_triples_use_minus_one(tmp_path):
    import json
    save_features(_feat(np.ones((2, 1, 2))), tmp_path)
    paths = json.loads((tmp_path / "features.json").read_text())["paths"]
    assert paths == [[1, 0, -1], [1, 1, -1]]


def test_feature_truncated(tmp_path):
    save_features(_feat(np.ones((4, 1, 2))), tmp_path)
    p = tmp_path / "features.dat"
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(TruncatedDataError):
        load_features(tmp_path)
