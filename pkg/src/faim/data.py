"""Dataset ingestion, normalization, synthetic corpora, and the
Gaussian-noise robustness harness.

Two on-disk formats:

* univariate: delimited text, one sample per line, label first, then the
  series values; tab or comma, auto-detected from the first line.
* multivariate: one JSON object per line with fields "label" and "series"
  (a list of equal-length per-channel value lists).

Short rows and short records are padded by replicating their last value, the
same rule patchify uses, so padding never injects step discontinuities.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .rng import CounterRng, derive_seed


@dataclass
class SeriesDataset:
    """Fixed-shape labeled series: every sample is [channels, T]."""

    samples: list[tuple[np.ndarray, int]]
    n_classes: int
    n_channels: int
    series_len: int
    label_map: dict[str, int] = field(default_factory=dict)
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([s for s, _ in self.samples])
        y = np.array([label for _, label in self.samples], dtype=np.int64)
        return x, y

    def take(self, indices) -> "SeriesDataset":
        return SeriesDataset(
            samples=[(self.samples[i][0].copy(), self.samples[i][1]) for i in indices],
            n_classes=self.n_classes,
            n_channels=self.n_channels,
            series_len=self.series_len,
            label_map=dict(self.label_map),
            norm_mean=None if self.norm_mean is None else self.norm_mean.copy(),
            norm_std=None if self.norm_std is None else self.norm_std.copy(),
        )


def _pad_tail(values: np.ndarray, target: int) -> np.ndarray:
    if values.shape[-1] == target:
        return values
    fill = np.repeat(values[..., -1:], target - values.shape[-1], axis=-1)
    return np.concatenate([values, fill], axis=-1)


def _remap_labels(raw_labels: list[str]) -> tuple[list[int], dict[str, int]]:
    mapping: dict[str, int] = {}
    out = []
    for raw in raw_labels:
        if raw not in mapping:
            mapping[raw] = len(mapping)
        out.append(mapping[raw])
    return out, mapping


# ---------------------------------------------------------------------------
# loading and saving
# ---------------------------------------------------------------------------


def load_univariate(path: str) -> SeriesDataset:
    """Delimited text, one line per sample: label, then T values."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise InputError(f"{path} contains no samples")
    delimiter = "\t" if "\t" in lines[0] else ","
    raw_labels: list[str] = []
    rows: list[np.ndarray] = []
    for line_no, line in enumerate(lines, start=1):
        tokens = [tok.strip() for tok in line.split(delimiter)]
        if len(tokens) < 2:
            raise InputError(f"{path} line {line_no}: need a label and at least one value")
        raw_labels.append(tokens[0])
        values = np.empty(len(tokens) - 1)
        for col, tok in enumerate(tokens[1:], start=2):
            try:
                values[col - 2] = float(tok)
            except ValueError:
                raise InputError(
                    f"{path} line {line_no}, column {col}: {tok!r} is not numeric"
                ) from None
        rows.append(values)
    t_max = max(row.shape[0] for row in rows)
    if any(row.shape[0] != t_max for row in rows):
        warnings.warn(f"{path}: ragged rows padded to length {t_max} by last-value replication")
        rows = [_pad_tail(row, t_max) for row in rows]
    labels, mapping = _remap_labels(raw_labels)
    samples = [(row[None, :], label) for row, label in zip(rows, labels)]
    return SeriesDataset(samples, len(mapping), 1, t_max, mapping)


def save_univariate(dataset: SeriesDataset, path: str, delimiter: str = "\t") -> None:
    inverse = {v: k for k, v in dataset.label_map.items()}
    with open(path, "w") as fh:
        for series, label in dataset.samples:
            values = delimiter.join(repr(float(v)) for v in series[0])
            fh.write(f"{inverse.get(label, label)}{delimiter}{values}\n")


def load_multivariate(path: str) -> SeriesDataset:
    """JSON lines with fields "label" and "series" (per-channel lists)."""
    raw_labels: list[str] = []
    series_list: list[np.ndarray] = []
    with open(path) as fh:
        for rec_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path} record {rec_no}: invalid JSON ({exc})") from None
            if "label" not in record or "series" not in record:
                raise InputError(f"{path} record {rec_no}: needs 'label' and 'series' fields")
            channels = record["series"]
            lengths = {len(ch) for ch in channels}
            if len(lengths) > 1:
                raise InputError(
                    f"{path} record {rec_no}: channels have unequal lengths {sorted(lengths)}"
                )
            raw_labels.append(str(record["label"]))
            series_list.append(np.asarray(channels, dtype=np.float64))
    if not series_list:
        raise InputError(f"{path} contains no samples")
    n_channels = series_list[0].shape[0]
    for rec_no, series in enumerate(series_list, start=1):
        if series.shape[0] != n_channels:
            raise InputError(
                f"{path} record {rec_no}: has {series.shape[0]} channels, expected {n_channels}"
            )
    t_max = max(series.shape[1] for series in series_list)
    series_list = [_pad_tail(series, t_max) for series in series_list]
    labels, mapping = _remap_labels(raw_labels)
    samples = list(zip(series_list, labels))
    return SeriesDataset(samples, len(mapping), n_channels, t_max, mapping)


def save_multivariate(dataset: SeriesDataset, path: str) -> None:
    inverse = {v: k for k, v in dataset.label_map.items()}
    with open(path, "w") as fh:
        for series, label in dataset.samples:
            record = {
                "label": inverse.get(label, str(label)),
                "series": [[float(v) for v in channel] for channel in series],
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# normalization and noise
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-8


def channel_stats(dataset: SeriesDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and floored std pooled over samples and time."""
    x, _ = dataset.arrays()
    mean = x.mean(axis=(0, 2))
    std = np.maximum(x.std(axis=(0, 2)), STD_FLOOR)
    return mean, std


def znormalize(
    dataset: SeriesDataset, stats: tuple[np.ndarray, np.ndarray] | None = None
) -> SeriesDataset:
    """Per-channel (x - mean) / std; pass training stats for a test split."""
    mean, std = channel_stats(dataset) if stats is None else stats
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    samples = [
        (((series - mean[:, None]) / std[:, None]), label) for series, label in dataset.samples
    ]
    return SeriesDataset(
        samples=samples,
        n_classes=dataset.n_classes,
        n_channels=dataset.n_channels,
        series_len=dataset.series_len,
        label_map=dict(dataset.label_map),
        norm_mean=mean.copy(),
        norm_std=std.copy(),
    )


def add_gaussian_noise(dataset: SeriesDataset, sigma: float, seed: int) -> SeriesDataset:
    """Additive seeded Gaussian noise; the source dataset is never mutated."""
    if sigma < 0:
        raise InputError(f"noise sigma must be >= 0, got {sigma}")
    samples = []
    for i, (series, label) in enumerate(dataset.samples):
        noisy = series.copy()
        if sigma > 0:
            for c in range(series.shape[0]):
                rng = CounterRng(derive_seed(seed, "noise", i, c))
                noisy[c] = noisy[c] + sigma * rng.normal((series.shape[1],))
        samples.append((noisy, label))
    return SeriesDataset(
        samples=samples,
        n_classes=dataset.n_classes,
        n_channels=dataset.n_channels,
        series_len=dataset.series_len,
        label_map=dict(dataset.label_map),
        norm_mean=None if dataset.norm_mean is None else dataset.norm_mean.copy(),
        norm_std=None if dataset.norm_std is None else dataset.norm_std.copy(),
    )


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


def make_synthetic_freq_dataset(
    n_per_class: int, t: int, freqs: list[float], snr_sigma: float, seed: int
) -> SeriesDataset:
    """Univariate corpus: class c is a random-phase sinusoid at freqs[c]
    cycles per window, plus Gaussian noise of std snr_sigma."""
    if len(set(freqs)) != len(freqs):
        raise InputError(f"class frequencies must be distinct, got {freqs}")
    for f in freqs:
        if not 0 < f < t / 2:
            raise InputError(f"frequency {f} is outside (0, {t / 2})")
    rng = CounterRng(derive_seed(seed, "synth-freq"))
    grid = np.arange(t) / t
    samples = []
    for c, f in enumerate(freqs):
        for _ in range(n_per_class):
            phase = rng.uniform((), 0.0, 2.0 * np.pi)
            series = np.sin(2.0 * np.pi * f * grid + phase)
            if snr_sigma > 0:
                series = series + snr_sigma * rng.normal((t,))
            samples.append((series[None, :], c))
    mapping = {str(c): c for c in range(len(freqs))}
    return SeriesDataset(samples, len(freqs), 1, t, mapping)


def make_synthetic_motion_dataset(
    n_per_class: int,
    n_channels: int,
    t: int,
    n_classes: int,
    snr_sigma: float,
    seed: int,
) -> SeriesDataset:
    """Multichannel corpus shaped like a small motion-capture benchmark.

    Each class is a fixed per-channel mixture of two sinusoids (frequencies
    and amplitude pattern depend only on class and channel, never on the
    dataset seed, so train and test splits drawn with different seeds share
    class structure); samples vary by phase and additive noise.
    """
    if n_classes < 2:
        raise InputError(f"need at least 2 classes, got {n_classes}")
    grid = np.arange(t) / t
    base_freqs = 2.0 + 3.0 * np.arange(n_classes)
    structure = CounterRng(derive_seed("motion-structure"))
    amp = structure.uniform((n_classes, n_channels), 0.5, 1.5)
    detail_freq = structure.uniform((n_classes, n_channels), 8.0, 16.0)
    detail_amp = structure.uniform((n_classes, n_channels), 0.1, 0.5)
    rng = CounterRng(derive_seed(seed, "synth-motion"))
    samples = []
    for c in range(n_classes):
        for _ in range(n_per_class):
            phase = rng.uniform((n_channels,), 0.0, 2.0 * np.pi)
            phase2 = rng.uniform((n_channels,), 0.0, 2.0 * np.pi)
            series = amp[c][:, None] * np.sin(
                2.0 * np.pi * base_freqs[c] * grid[None, :] + phase[:, None]
            )
            series = series + detail_amp[c][:, None] * np.sin(
                2.0 * np.pi * detail_freq[c][:, None] * grid[None, :] + phase2[:, None]
            )
            if snr_sigma > 0:
                series = series + snr_sigma * rng.normal((n_channels, t))
            samples.append((series, c))
    mapping = {str(c): c for c in range(n_classes)}
    return SeriesDataset(samples, n_classes, n_channels, t, mapping)


def align_labels(dataset: SeriesDataset, reference_map: dict[str, int]) -> SeriesDataset:
    """Re-index labels to match a reference mapping (e.g. the training split's).

    Raises if the dataset contains a raw label the reference never saw.
    """
    inverse = {v: k for k, v in dataset.label_map.items()}
    samples = []
    for series, label in dataset.samples:
        raw = inverse[label]
        if raw not in reference_map:
            raise InputError(f"label {raw!r} does not appear in the reference label map")
        samples.append((series.copy(), reference_map[raw]))
    return SeriesDataset(
        samples=samples,
        n_classes=max(len(reference_map), dataset.n_classes),
        n_channels=dataset.n_channels,
        series_len=dataset.series_len,
        label_map=dict(reference_map),
        norm_mean=None if dataset.norm_mean is None else dataset.norm_mean.copy(),
        norm_std=None if dataset.norm_std is None else dataset.norm_std.copy(),
    )


def split_dataset(
    dataset: SeriesDataset, holdout_fraction: float, seed: int
) -> tuple[SeriesDataset, SeriesDataset]:
    """Seeded shuffle split into (kept, holdout)."""
    n = len(dataset)
    if not 0 < holdout_fraction < 1:
        raise InputError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    n_holdout = max(1, int(round(holdout_fraction * n)))
    if n_holdout >= n:
        raise InputError(f"holdout of {n_holdout} leaves no training samples from {n}")
    perm = CounterRng(derive_seed(seed, "split")).permutation(n)
    return dataset.take(perm[n_holdout:]), dataset.take(perm[:n_holdout])
