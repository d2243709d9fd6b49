"""Dataset ingestion, sliding-window framing and the synthetic activity generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError, WindowTooShortError
from .ndcore import Rng, shuffle_indices

NULL_CLASS = 0


@dataclass
class TimeSeriesDataset:
    samples: np.ndarray            # (N, d), standardized
    labels: np.ndarray             # (N,) int64
    channel_names: list[str]
    sampling_rate: float = 30.0
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise DataError(f"samples {self.samples.shape} and labels {self.labels.shape} disagree")
        if np.isnan(self.samples).any():
            raise DataError("dataset contains NaN after ingestion")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class FrameBatch:
    frames: np.ndarray             # (B, window, d)
    labels: np.ndarray             # (B,)
    ranges: np.ndarray             # (B, 2) [start, end) sample indices

    def __len__(self):
        return self.frames.shape[0]

    def take(self, idx) -> "FrameBatch":
        return FrameBatch(self.frames[idx], self.labels[idx], self.ranges[idx])

    def shuffled(self, rng: Rng) -> "FrameBatch":
        return self.take(shuffle_indices(rng, len(self)))


@dataclass
class CsvSchema:
    channels: list[str]
    label: str = "label"
    timestamp: str | None = None
    delimiter: str = ","


def interpolate_nans(x: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaN runs per column; edges hold the nearest value."""
    out = np.array(x, dtype=np.float64)
    idx = np.arange(out.shape[0])
    for k in range(out.shape[1]):
        col = out[:, k]
        ok = ~np.isnan(col)
        if not ok.any():
            raise DataError(f"channel {k} has no valid values")
        if not ok.all():
            col[~ok] = np.interp(idx[~ok], idx[ok], col[ok])
    return out


def standardize(samples: np.ndarray, mean=None, std=None):
    """Per-channel z-scores. Without ``mean``/``std`` they are computed from ``samples``."""
    if mean is None:
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (samples - mean) / std, np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)


def read_csv(path, schema: CsvSchema) -> tuple[np.ndarray, np.ndarray]:
    """Parse raw channel values (NaN kept) and integer labels."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = list(schema.channels) + [schema.label]
        if schema.timestamp is not None:
            wanted.append(schema.timestamp)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        cols = [header.index(c) for c in schema.channels]
        lcol = header.index(schema.label)
        values, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values.append([_cell(row[c]) for c in cols])
                labels.append(int(row[lcol]))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: row {row_no}: {exc}") from None
    if not values:
        raise DataError(f"{path}: no data rows")
    return np.array(values, dtype=np.float64), np.array(labels, dtype=np.int64)


def _cell(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na"):
        return math.nan
    return float(text)


def load_csv(path, schema: CsvSchema, split: str = "train", mean=None, std=None,
             sampling_rate: float = 30.0, n_classes: int | None = None) -> TimeSeriesDataset:
    """Load a CSV export, impute NaNs, and standardize.

    A train split computes its own channel statistics; other splits must be
    given the train ``mean``/``std`` so every split shares one scaling.
    """
    raw, labels = read_csv(path, schema)
    if n_classes is not None and labels.size and labels.max() >= n_classes:
        raise DataError(f"{path}: label {labels.max()} outside [0, {n_classes})")
    filled = interpolate_nans(raw)
    if mean is None and split != "train":
        raise DataError(f"{split} split needs train-split normalization constants")
    samples, mean, std = standardize(filled, mean, std)
    return TimeSeriesDataset(samples, labels, list(schema.channels), sampling_rate, split, mean, std)


def write_csv(path, raw: np.ndarray, labels: np.ndarray, channel_names: list[str],
              delimiter: str = ",") -> Path:
    """Write ``t, channels..., label``; floats use ``repr`` so they round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["t", *channel_names, "label"])
        for t, (row, lab) in enumerate(zip(raw, labels)):
            w.writerow([t, *(repr(float(v)) for v in row), int(lab)])
    return path


def frame_starts(n: int, window: int, overlap: float = 0.5) -> np.ndarray:
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {overlap}")
    if n < window:
        raise WindowTooShortError(f"series of {n} samples is shorter than window {window}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    count = (n - window) // stride + 1
    return np.arange(count) * stride


def majority_label(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the largest class id (so non-null wins)."""
    counts = np.bincount(labels)
    return int(np.flatnonzero(counts == counts.max())[-1])


def extract_frames(ds: TimeSeriesDataset, window: int = 24, overlap: float = 0.5) -> FrameBatch:
    starts = frame_starts(len(ds), window, overlap)
    idx = starts[:, None] + np.arange(window)
    frames = ds.samples[idx]
    labels = np.array([majority_label(ds.labels[s:s + window]) for s in starts], dtype=np.int64)
    ranges = np.stack([starts, starts + window], axis=1)
    return FrameBatch(frames, labels, ranges)


@dataclass
class ClassSignature:
    """One activity: sinusoid frequency, per-channel offsets/amplitudes/phases, durations."""

    name: str
    proportion: float
    frequency: float
    bias: list[float]
    amplitude: list[float]
    phase: list[float]
    duration: tuple[int, int]

    @property
    def mean_duration(self) -> float:
        return 0.5 * (self.duration[0] + self.duration[1])


@dataclass
class SynthSpec:
    classes: list[ClassSignature]
    n_channels: int
    noise_std: float = 0.0
    sampling_rate: float = 30.0
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError("synthetic spec needs at least two classes")
        for c in self.classes:
            lo, hi = c.duration
            if lo < 1 or hi < lo:
                raise ConfigError(f"class {c.name}: bad duration range {c.duration}")
            if c.proportion < 0:
                raise ConfigError(f"class {c.name}: negative proportion")
            if not (len(c.bias) == len(c.amplitude) == len(c.phase) == self.n_channels):
                raise ConfigError(f"class {c.name}: signature does not have {self.n_channels} channels")
        if sum(c.proportion for c in self.classes) <= 0:
            raise ConfigError("class proportions sum to zero")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not self.channel_names:
            self.channel_names = [f"ch{k}" for k in range(self.n_channels)]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            classes = [ClassSignature(**{**c, "duration": tuple(c["duration"])}) for c in d["classes"]]
            rest = {k: v for k, v in d.items() if k != "classes"}
            return cls(classes=classes, **rest)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed synthetic spec: {exc}") from None

    def signature(self, label: int, t: np.ndarray) -> np.ndarray:
        """Noise-free signal of class ``label`` at global sample indices ``t``, shape (len(t), d)."""
        c = self.classes[label]
        arg = 2.0 * np.pi * c.frequency * t[:, None] / self.sampling_rate + np.asarray(c.phase)
        return np.asarray(c.bias) + np.asarray(c.amplitude) * np.sin(arg)


def synth_labels(rng: Rng, spec: SynthSpec, n_samples: int) -> np.ndarray:
    """Concatenated activity segments covering ``n_samples``.

    Segment classes are drawn with probability proportional to
    ``proportion / mean_duration`` so that each class's share of *samples*
    matches its proportion; durations are uniform integers in the class range.
    """
    props = np.array([c.proportion for c in spec.classes], dtype=np.float64)
    rate = props / np.array([c.mean_duration for c in spec.classes])
    cdf = np.cumsum(rate / rate.sum())
    labels = np.empty(n_samples, dtype=np.int64)
    pos = 0
    while pos < n_samples:
        u_class, u_dur = rng.uniform(2)
        k = min(int(np.searchsorted(cdf, u_class, side="right")), len(cdf) - 1)
        lo, hi = spec.classes[k].duration
        dur = lo + int(u_dur * (hi - lo + 1))
        labels[pos:pos + dur] = k
        pos += dur
    return labels


def synth_generate(rng: Rng, spec: SynthSpec, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unstandardized) samples ``(N, d)`` and per-sample labels."""
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    labels = synth_labels(rng, spec, n_samples)
    t = np.arange(n_samples, dtype=np.float64)
    raw = np.empty((n_samples, spec.n_channels))
    for k in range(len(spec.classes)):
        sel = labels == k
        if sel.any():
            raw[sel] = spec.signature(k, t[sel])
    if spec.noise_std > 0:
        raw += spec.noise_std * rng.normal((n_samples, spec.n_channels))
    return raw, labels


def synth_dataset(rng: Rng, spec: SynthSpec, n_samples: int, split: str = "train",
                  mean=None, std=None) -> TimeSeriesDataset:
    raw, labels = synth_generate(rng, spec, n_samples)
    samples, mean, std = standardize(raw, mean, std)
    return TimeSeriesDataset(samples, labels, list(spec.channel_names), spec.sampling_rate,
                             split, mean, std)


def signal_power(spec: SynthSpec) -> float:
    """Mean power of the class-dependent signal around its global channel means.

    Estimated over one long noiseless draw; used to convert an SNR target
    into a noise level.
    """
    raw, _ = synth_generate(Rng(0), _noiseless(spec), 50_000)
    return float(np.mean((raw - raw.mean(axis=0)) ** 2))


def _noiseless(spec: SynthSpec) -> SynthSpec:
    return SynthSpec(spec.classes, spec.n_channels, 0.0, spec.sampling_rate, list(spec.channel_names))


def benchmark_spec(snr_db: float = 6.0, n_channels: int = 6) -> SynthSpec:
    """The four-class desk-scale benchmark: overlapping class signatures, durations in 24..96.

    Classes share offsets on most channels and differ in frequency and in
    which channels carry the oscillation, so one or two samples do not
    identify the activity but a frame does.  ``noise_std`` is set so the
    class signal sits ``snr_db`` above the noise.
    """
    d = n_channels
    classes = []
    for k, (freq, dur) in enumerate([(1.0, (24, 72)), (2.0, (48, 96)),
                                     (3.5, (24, 48)), (5.0, (36, 96))]):
        amp = [1.0 if (ch + k) % 2 == 0 else 0.4 for ch in range(d)]
        bias = [0.3 * ((ch * (k + 1)) % 3 - 1) for ch in range(d)]
        phase = [0.7 * ch * (k + 1) for ch in range(d)]
        classes.append(ClassSignature(f"activity{k}", 0.25, freq, bias, amp, phase, dur))
    spec = SynthSpec(classes, d, 0.0, 30.0)
    spec.noise_std = math.sqrt(signal_power(spec) / 10 ** (snr_db / 10.0))
    return spec


# Dataset manifest: UTF-8 text, one ``key=value`` per line, ``#`` comments.
# Keys: format, version, channels (comma list), label_column, timestamp_column,
# delimiter, sampling_rate, n_classes, split.<name> (CSV path relative to the
# manifest), split.<name>.sha256, norm.mean / norm.std (comma lists of floats,
# optional; computed from the train split when absent).
MANIFEST_NAME = "dataset.manifest"
MANIFEST_FORMAT = "attnhar.dataset"


def write_manifest(path, entries: dict[str, str]) -> Path:
    path = Path(path)
    lines = [f"{k}={v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = {}
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}: line {no}: expected key=value")
        k, v = line.split("=", 1)
        entries[k.strip()] = v.strip()
    if entries.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{path}: not a dataset manifest (format={entries.get('format')!r})")
    return entries


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def load_manifest_splits(path, splits=None) -> tuple[dict[str, TimeSeriesDataset], dict[str, str]]:
    """Load the CSV splits named in a manifest, all scaled with train statistics."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    m = read_manifest(path)
    schema = CsvSchema(channels=m["channels"].split(","), label=m.get("label_column", "label"),
                       timestamp=m.get("timestamp_column") or None,
                       delimiter=m.get("delimiter", ","))
    rate = float(m.get("sampling_rate", 30.0))
    n_classes = int(m["n_classes"]) if "n_classes" in m else None
    available = [k[len("split."):] for k in m if k.startswith("split.") and k.count(".") == 1]
    wanted = list(splits) if splits is not None else available
    if "norm.mean" in m:
        mean, std = _floats(m["norm.mean"]), _floats(m["norm.std"])
    else:
        if "train" not in available:
            raise SchemaError(f"{path}: no train split and no normalization constants")
        raw, _ = read_csv(root / m["split.train"], schema)
        _, mean, std = standardize(interpolate_nans(raw))
    out = {}
    for name in wanted:
        if name not in available:
            raise SchemaError(f"{path}: no split named {name!r}")
        out[name] = load_csv(root / m[f"split.{name}"], schema, name, mean, std, rate, n_classes)
    return out, m
