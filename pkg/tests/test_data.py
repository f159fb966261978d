import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmu_purify.data import (CLASSES, Dataset, GenConfig, compute_stats, denormalize,
                             generate_dataset, load_dataset, normalize, one_hot, save_dataset, split)
from pmu_purify.exceptions import ConfigurationError, LoadError


def small(**kw):
    return GenConfig(**{"W": 30, "K": 4, "samples_per_class": 10, **kw})


def test_shapes_labels_and_balance():
    ds = generate_dataset(small())
    assert ds.windows.shape == (40, 30, 4, 4)
    assert ds.windows.dtype == np.float32
    assert np.bincount(ds.labels).tolist() == [10, 10, 10, 10]
    assert CLASSES == ("Normal", "Voltage", "Frequency", "Oscillation")
    assert np.all(np.isfinite(ds.windows))


def test_one_hot_has_single_one():
    oh = one_hot([0, 3, 2])
    assert np.all(oh.sum(axis=1) == 1) and oh[1, 3] == 1


def test_seed_determinism():
    a = generate_dataset(small(seed=7))
    b = generate_dataset(small(seed=7))
    assert a.windows.tobytes() == b.windows.tobytes()
    c = generate_dataset(small(seed=8))
    assert a.windows.tobytes() != c.windows.tobytes()


def test_subset_regeneration_matches():
    # per-sample streams: generating fewer samples reproduces the prefix
    a = generate_dataset(small(samples_per_class=10))
    b = generate_dataset(small(samples_per_class=5))
    np.testing.assert_array_equal(a.windows[:20], b.windows)


def test_noise_free_normal_windows_are_constant():
    cfg = small(noise_std=0.0, voltage_amplitude=(0, 0), frequency_amplitude=(0, 0),
                oscillation_amplitude=(0, 0))
    ds = generate_dataset(cfg)
    normal = ds.windows[ds.labels == 0]
    assert np.all(normal.max(axis=1) == normal.min(axis=1))


def test_oscillation_peak_in_band():
    cfg = small(W=120, samples_per_class=15)
    ds = generate_dataset(cfg)
    fs = cfg.sample_rate_hz
    freqs = np.fft.rfftfreq(cfg.W, 1 / fs)
    for w in ds.windows[ds.labels == 3].astype(np.float64):
        p = w[:, :, 0] - w[:, :, 0].mean(axis=0)
        peaks = freqs[np.abs(np.fft.rfft(p, axis=0))[1:].argmax(axis=0) + 1]
        # resolution of a W-sample DFT is fs / W
        lo, hi = cfg.oscillation_hz
        res = fs / cfg.W
        assert np.any((peaks >= lo - res) & (peaks <= hi + res))


def test_voltage_departure_at_onset():
    cfg = small(noise_std=0.0, baseline_jitter=0.0, W=60)
    ds = generate_dataset(cfg)
    lo = cfg.voltage_amplitude[0]
    for w in ds.windows[ds.labels == 1].astype(np.float64):
        v = w[:, :, 2]
        pre = v[0]
        dev = np.abs(v - pre).max(axis=0)
        # the PMU with the largest participation weight (1.0) departs by the full amplitude
        assert dev.max() >= lo * (1 - 1e-5)


@pytest.mark.parametrize("bad", [dict(samples_per_class=0), dict(W=4), dict(K=0),
                                 dict(noise_std=-1.0), dict(oscillation_hz=(2.0, 1.0)),
                                 dict(oscillation_hz=(0.2, 20.0))])
def test_invalid_config(bad):
    with pytest.raises(ConfigurationError):
        small(**bad)


def test_full_scale_preset():
    cfg = GenConfig.full_scale()
    assert (cfg.W, cfg.K) == (360, 41)


def test_split_sizes_and_stratification():
    ds = generate_dataset(small(samples_per_class=25))
    s = split(ds, (0.6, 0.2, 0.2), seed=0)
    sizes = {k: len(v) for k, v in s.splits.items()}
    assert sizes == {"train": 60, "val": 20, "test": 20}
    allidx = np.concatenate(list(s.splits.values()))
    assert sorted(allidx.tolist()) == list(range(100))
    for name, idx in s.splits.items():
        counts = np.bincount(ds.labels[idx], minlength=4)
        expected = len(idx) / 4
        assert np.all(np.abs(counts - expected) <= 1)
    again = split(ds, (0.6, 0.2, 0.2), seed=0)
    assert all(np.array_equal(again.splits[k], s.splits[k]) for k in s.splits)


def test_split_rejects_empty_and_bad_fractions():
    ds = generate_dataset(small())
    with pytest.raises(ConfigurationError):
        split(ds, (1.0, 0.0, 0.0))
    with pytest.raises(ConfigurationError):
        split(ds, (0.5, 0.2, 0.2))


def test_normalize_train_stats_and_round_trip():
    ds = normalize(split(generate_dataset(small(samples_per_class=20)), seed=1))
    Xtr = ds.X("train")
    np.testing.assert_allclose(Xtr.mean(axis=(0, 1, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(Xtr.std(axis=(0, 1, 2)), 1, atol=1e-6)
    raw = ds.windows[ds.indices("test")].astype(np.float64)
    np.testing.assert_allclose(denormalize(ds.X("test"), ds.stats), raw, atol=1e-6)
    test_stats = compute_stats(ds.windows[ds.indices("test")])
    assert not np.allclose(test_stats.mean, ds.stats.mean, rtol=0, atol=1e-9)


def test_constant_channel_rejected():
    w = np.ones((8, 10, 2, 4), dtype=np.float32)
    w[..., :3] += np.random.default_rng(0).standard_normal((8, 10, 2, 3)).astype(np.float32)
    with pytest.raises(ConfigurationError):
        compute_stats(w)


def test_normalize_requires_split():
    with pytest.raises(ConfigurationError):
        normalize(generate_dataset(small()))


def test_save_load_round_trip(tmp_path):
    ds = normalize(split(generate_dataset(small()), seed=0))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.windows.tobytes() == ds.windows.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert all(np.array_equal(back.splits[k], ds.splits[k]) for k in ds.splits)
    np.testing.assert_array_equal(back.stats.mean, ds.stats.mean)
    np.testing.assert_array_equal(back.stats.std, ds.stats.std)
    np.testing.assert_array_equal(back.X("test"), ds.X("test"))


def test_truncated_blob_reports_offset(tmp_path):
    ds = generate_dataset(small())
    save_dataset(ds, tmp_path / "d")
    blob = tmp_path / "d" / "windows.f32"
    data = blob.read_bytes()
    blob.write_bytes(data[:-1])
    with pytest.raises(LoadError, match=str(len(data) - 1)):
        load_dataset(tmp_path / "d")


def test_manifest_dimension_mismatch(tmp_path):
    import json

    ds = generate_dataset(small())
    save_dataset(ds, tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    m["window_shape"] = [31, 4, 4]
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "d")
    (tmp_path / "d" / "manifest.json").write_text("[")
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "d")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_generation_is_finite_and_balanced(seed, k):
    ds = generate_dataset(GenConfig(W=12, K=k, samples_per_class=2, seed=seed))
    assert np.all(np.isfinite(ds.windows))
    assert np.bincount(ds.labels, minlength=4).tolist() == [2, 2, 2, 2]
