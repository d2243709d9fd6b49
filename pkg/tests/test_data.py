import numpy as np
import pytest

from attnhar.data import (ClassSignature, CsvSchema, SynthSpec, TimeSeriesDataset, benchmark_spec,
                          extract_frames, interpolate_nans, load_csv, load_manifest_splits,
                          majority_label, read_csv, read_manifest, signal_power, synth_generate,
                          synth_labels, write_csv, write_manifest)
from attnhar.errors import ConfigError, DataError, ParseError, SchemaError, WindowTooShortError
from attnhar.ndcore import Rng

SCHEMA = CsvSchema(channels=["a", "b"], label="label", timestamp="t")


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def series(n, labels=None, d=2):
    x = np.arange(n * d, dtype=np.float64).reshape(n, d)
    return TimeSeriesDataset(x, np.zeros(n, dtype=int) if labels is None else labels, ["a", "b"][:d])


class TestCsv:
    def test_identity_ingestion(self, tmp_path):
        path = write(tmp_path, "t,a,b,label\n0,1.0,10,0\n1,2.0,20,1\n2,3.0,30,2\n")
        ds = load_csv(path, SCHEMA)
        raw = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
        expected = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        assert np.allclose(ds.samples, expected, atol=1e-15)
        assert ds.labels.tolist() == [0, 1, 2]

    def test_nan_interpolation(self, tmp_path):
        path = write(tmp_path, "t,a,b,label\n0,1,5,0\n1,,5,0\n2,3,nan,0\n3,nan,7,0\n")
        raw, _ = read_csv(path, SCHEMA)
        filled = interpolate_nans(raw)
        assert filled[:, 0].tolist() == [1.0, 2.0, 3.0, 3.0]
        assert filled[:, 1].tolist() == [5.0, 5.0, 6.0, 7.0]

    def test_leading_nan_held(self):
        out = interpolate_nans(np.array([[np.nan], [np.nan], [4.0], [6.0]]))
        assert out.ravel().tolist() == [4.0, 4.0, 4.0, 6.0]

    def test_standardized_moments(self, tmp_path):
        rng = Rng(0)
        raw = 3.0 + 2.5 * rng.normal((500, 2))
        path = write_csv(tmp_path / "x.csv", raw, np.zeros(500, dtype=int), ["a", "b"])
        ds = load_csv(path, SCHEMA)
        assert np.all(np.abs(ds.samples.mean(axis=0)) <= 1e-9)
        assert np.all(np.abs(ds.samples.std(axis=0) - 1.0) <= 1e-9)

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "t,a,label\n0,1,0\n")
        with pytest.raises(SchemaError, match="b"):
            load_csv(path, SCHEMA)

    def test_non_numeric_cell_names_row(self, tmp_path):
        path = write(tmp_path, "t,a,b,label\n0,1,2,0\n1,x,2,0\n")
        with pytest.raises(ParseError, match="row 3"):
            load_csv(path, SCHEMA)

    def test_other_split_needs_train_stats(self, tmp_path):
        path = write(tmp_path, "t,a,b,label\n0,1,2,0\n1,2,3,0\n")
        with pytest.raises(DataError):
            load_csv(path, SCHEMA, split="test")
        ds = load_csv(path, SCHEMA, split="test", mean=np.zeros(2), std=np.ones(2))
        assert ds.samples.tolist() == [[1.0, 2.0], [2.0, 3.0]]

    def test_round_trip_exact(self, tmp_path):
        raw = Rng(1).normal((50, 2))
        path = write_csv(tmp_path / "r.csv", raw, np.arange(50) % 3, ["a", "b"])
        back, labels = read_csv(path, SCHEMA)
        assert np.array_equal(back, raw)
        assert labels.tolist() == (np.arange(50) % 3).tolist()

    def test_delimiter(self, tmp_path):
        path = write(tmp_path, "a;b;label\n1;2;0\n3;4;1\n")
        ds = load_csv(path, CsvSchema(["a", "b"], delimiter=";"))
        assert ds.labels.tolist() == [0, 1]


class TestFrames:
    def test_count_formula(self):
        fb = extract_frames(series(100), 24, 0.5)
        assert len(fb) == 7
        assert fb.ranges[:, 0].tolist() == [0, 12, 24, 36, 48, 60, 72]

    def test_single_frame(self):
        fb = extract_frames(series(24), 24)
        assert len(fb) == 1 and fb.ranges.tolist() == [[0, 24]]

    def test_too_short(self):
        with pytest.raises(WindowTooShortError):
            extract_frames(series(23), 24)

    def test_constant_labels(self):
        fb = extract_frames(series(100, np.full(100, 3)), 24)
        assert set(fb.labels.tolist()) == {3}

    def test_frames_hold_their_samples(self):
        ds = series(100)
        fb = extract_frames(ds, 24)
        for f, (s, e) in zip(fb.frames, fb.ranges):
            assert np.array_equal(f, ds.samples[s:e])

    def test_bookkeeping(self):
        fb = extract_frames(series(203), 24)
        assert np.all(fb.ranges[:, 1] - fb.ranges[:, 0] == 24)
        assert np.all(np.diff(fb.ranges[:, 0]) == 12)
        covered = np.zeros(203, dtype=bool)
        for s, e in fb.ranges:
            covered[s:e] = True
        assert covered[:fb.ranges[-1, 1]].all()

    @pytest.mark.parametrize("labels,expected", [
        ([1, 1, 2], 1), ([0, 0, 2, 2], 2), ([3, 3, 1, 1], 3), ([0, 0, 0], 0), ([2, 0, 1, 0, 1], 1),
    ])
    def test_majority_tie_rule(self, labels, expected):
        assert majority_label(np.array(labels)) == expected

    def test_shuffle_keeps_contents(self):
        fb = extract_frames(series(300, np.arange(300) // 50), 24)
        sh = fb.shuffled(Rng(3))
        key = lambda b: sorted((int(r[0]), int(l), f.tobytes()) for r, l, f in zip(b.ranges, b.labels, b.frames))
        assert key(sh) == key(fb)
        assert not np.array_equal(sh.ranges, fb.ranges)


def two_class_spec(noise=0.0, duration=(48, 48), props=(0.5, 0.5)):
    classes = [
        ClassSignature("still", props[0], 0.0, [1.0, -1.0], [0.0, 0.0], [0.0, 0.0], duration),
        ClassSignature("walk", props[1], 2.0, [0.0, 0.5], [1.0, 0.3], [0.0, 1.0], duration),
    ]
    return SynthSpec(classes, 2, noise, 30.0)


class TestSynth:
    def test_noiseless_single_class_matches_signature(self):
        spec = two_class_spec(props=(0.0, 1.0))
        raw, labels = synth_generate(Rng(0), spec, 300)
        assert set(labels.tolist()) == {1}
        t = np.arange(300.0)
        expected = np.array([0.0, 0.5]) + np.array([1.0, 0.3]) * np.sin(
            2 * np.pi * 2.0 * t[:, None] / 30.0 + np.array([0.0, 1.0]))
        assert np.array_equal(raw, expected)

    def test_fixed_duration_boundaries(self):
        labels = synth_labels(Rng(1), two_class_spec(), 48 * 40)
        segs = labels.reshape(40, 48)
        assert np.all(segs == segs[:, :1])

    def test_proportions_monte_carlo(self):
        spec = two_class_spec(duration=(10, 90), props=(0.7, 0.3))
        spec.classes[1].duration = (24, 48)
        labels = synth_labels(Rng(2), spec, 100_000)
        share = np.bincount(labels, minlength=2) / labels.size
        assert np.all(np.abs(share - [0.7, 0.3]) <= 0.02)

    def test_durations_within_range(self):
        spec = two_class_spec(duration=(24, 96))
        labels = synth_labels(Rng(3), spec, 20_000)
        change = np.flatnonzero(np.diff(labels)) + 1
        bounds = np.concatenate([[0], change, [labels.size]])
        lengths = np.diff(bounds)[:-1]  # last segment is truncated
        # equal-label neighbours merge, so only the lower bound holds per run
        assert lengths.min() >= 24

    def test_determinism(self):
        spec = two_class_spec(noise=0.3)
        a = synth_generate(Rng(7), spec, 2000)
        b = synth_generate(Rng(7), spec, 2000)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(classes=d["classes"][:1]),
        lambda d: d["classes"][0].update(duration=[0, 4]),
        lambda d: d["classes"][0].update(bias=[1.0]),
        lambda d: d.update(noise_std=-1.0),
    ])
    def test_degenerate_spec(self, mutate):
        d = {"n_channels": 2, "noise_std": 0.0, "classes": [
            {"name": "a", "proportion": 1, "frequency": 1, "bias": [0, 0], "amplitude": [1, 1],
             "phase": [0, 0], "duration": [10, 20]},
            {"name": "b", "proportion": 1, "frequency": 2, "bias": [0, 0], "amplitude": [1, 1],
             "phase": [0, 0], "duration": [10, 20]}]}
        SynthSpec.from_dict(d)
        mutate(d)
        with pytest.raises(ConfigError):
            SynthSpec.from_dict(d)

    def test_benchmark_snr(self):
        spec = benchmark_spec(6.0)
        assert len(spec.classes) == 4 and spec.n_channels == 6
        for c in spec.classes:
            assert 24 <= c.duration[0] <= c.duration[1] <= 96
        snr = 10 * np.log10(signal_power(spec) / spec.noise_std ** 2)
        assert snr == pytest.approx(6.0, abs=1e-9)


def test_manifest_round_trip(tmp_path):
    raw = Rng(0).normal((60, 2))
    write_csv(tmp_path / "train.csv", raw, np.arange(60) % 2, ["a", "b"])
    write_csv(tmp_path / "test.csv", raw[:30] + 1, np.arange(30) % 2, ["a", "b"])
    write_manifest(tmp_path / "dataset.manifest", {
        "format": "attnhar.dataset", "version": "1", "channels": "a,b", "timestamp_column": "t",
        "n_classes": "2", "split.train": "train.csv", "split.test": "test.csv"})
    splits, meta = load_manifest_splits(tmp_path)
    assert set(splits) == {"train", "test"}
    assert np.allclose(splits["train"].samples.mean(axis=0), 0.0, atol=1e-12)
    assert np.array_equal(splits["test"].mean, splits["train"].mean)
    assert read_manifest(tmp_path)["n_classes"] == "2"


def test_manifest_wrong_format(tmp_path):
    write_manifest(tmp_path / "dataset.manifest", {"format": "other"})
    with pytest.raises(SchemaError):
        read_manifest(tmp_path)
