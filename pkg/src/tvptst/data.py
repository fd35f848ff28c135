"""Dataset types, parcel preprocessing, synthetic generation, and label masking.

A record is one agricultural parcel summarized as a [T, F] series of per-band
statistics (F = 2*B: band means followed by band standard deviations). Labels
are optional; `label_present` marks whether the label is visible to training.
Masked records keep their hidden label so evaluation stays possible, but the
training path must never read it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

NO_LABEL = -1


@dataclass(frozen=True)
class PixelParcel:
    """Raw parcel: every pixel's reflectance over time, [N_px, T_raw, B]."""

    parcel_id: int
    pixels: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"pixels must be [N_px, T, B] with all dims >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel reflectances must be finite")
        object.__setattr__(self, "pixels", px)


@dataclass
class StatSeries:
    """One parcel's per-timestep band statistics (means then stds), [T, F]."""

    parcel_id: int
    features: np.ndarray
    label: Optional[int] = None
    label_present: bool = False

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError(f"features must be [T, F], got shape {feats.shape}")
        if feats.shape[1] % 2 != 0:
            raise ValueError("feature dim must be 2*B (means then stds)")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        self.features = feats
        if self.label_present and self.label is None:
            raise ValueError("label_present requires a label")


@dataclass
class Dataset:
    """A collection of StatSeries sharing (T, F), with K classes."""

    records: list[StatSeries]
    T: int
    F: int
    K: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class_{k}" for k in range(self.K)]
        if len(self.class_names) != self.K:
            raise ValueError("class_names length must equal K")
        for i, rec in enumerate(self.records):
            if rec.features.shape != (self.T, self.F):
                raise ValueError(
                    f"record {i} has shape {rec.features.shape}, expected {(self.T, self.F)}"
                )
            if rec.label is not None and not 0 <= rec.label < self.K:
                raise ValueError(f"record {i} label {rec.label} out of range [0, {self.K})")

    def __len__(self) -> int:
        return len(self.records)

    def features_array(self) -> np.ndarray:
        """All features stacked, [N, T, F] float32."""
        if not self.records:
            return np.zeros((0, self.T, self.F), dtype=np.float32)
        return np.stack([r.features for r in self.records]).astype(np.float32)

    def visible_labels(self) -> np.ndarray:
        """Labels as seen by training: NO_LABEL where label_present is false."""
        return np.array(
            [r.label if r.label_present else NO_LABEL for r in self.records], dtype=np.int64
        )

    def hidden_labels(self) -> np.ndarray:
        """True labels for evaluation, NO_LABEL only where no label exists at all."""
        return np.array(
            [r.label if r.label is not None else NO_LABEL for r in self.records], dtype=np.int64
        )

    @classmethod
    def from_arrays(
        cls,
        features: np.ndarray,
        labels: Optional[np.ndarray] = None,
        num_classes: Optional[int] = None,
        class_names: Optional[Sequence[str]] = None,
    ) -> "Dataset":
        """Build a Dataset from [N, T, F] features and int labels (NO_LABEL = unlabelled)."""
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 3:
            raise ValueError(f"features must be [N, T, F], got shape {feats.shape}")
        n, t, f = feats.shape
        if labels is None:
            labels = np.full(n, NO_LABEL, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError("labels must be a vector of length N")
        if num_classes is None:
            present = labels[labels != NO_LABEL]
            num_classes = int(present.max()) + 1 if present.size else 0
        records = [
            StatSeries(
                parcel_id=i,
                features=feats[i],
                label=None if labels[i] == NO_LABEL else int(labels[i]),
                label_present=labels[i] != NO_LABEL,
            )
            for i in range(n)
        ]
        return cls(records, T=t, F=f, K=num_classes,
                   class_names=list(class_names) if class_names else [])


def temporal_median_downsample(pixels: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Median-filter pixel series along time with the given window and stride.

    Input is [N_px, T_raw, B]; output [N_px, T_out, B] with
    T_out = floor((T_raw - window) / stride) + 1.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ValueError(f"pixels must be [N_px, T, B], got shape {pixels.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    t_raw = pixels.shape[1]
    if window > t_raw:
        raise ValueError(f"window {window} exceeds series length {t_raw}")
    windows = np.lib.stride_tricks.sliding_window_view(pixels, window, axis=1)
    return np.median(windows[:, ::stride, :, :], axis=-1)


def parcel_statistics(parcel: PixelParcel) -> StatSeries:
    """Summarize parcel pixels into per-timestep band means and population stds."""
    mean = parcel.pixels.mean(axis=0)
    std = parcel.pixels.std(axis=0)  # population std: defined for single-pixel parcels
    features = np.concatenate([mean, std], axis=1).astype(np.float32)
    return StatSeries(
        parcel_id=parcel.parcel_id,
        features=features,
        label=parcel.label,
        label_present=parcel.label is not None,
    )


@dataclass(frozen=True)
class PhenologyParams:
    """Double-logistic curve parameters for one class.

    The trajectory rises around `onset`, declines around `peak`, spans
    `amplitude` above the band base level, and `width` sets both slopes.
    """

    onset: float
    peak: float
    amplitude: float
    width: float


@dataclass
class SyntheticConfig:
    """Configuration for the synthetic parcel generator."""

    K: int
    T: int
    B: int = 4
    n_parcels: int = 1000
    pixels_per_parcel: tuple[int, int] = (4, 16)
    phenology_params: Optional[list[PhenologyParams]] = None
    noise_sigma: float = 0.05
    seed: int = 0
    class_proportions: Optional[list[float]] = None

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least 2 classes")
        if self.T < 1 or self.B < 1 or self.n_parcels < 1:
            raise ValueError("T, B, n_parcels must be positive")
        lo, hi = self.pixels_per_parcel
        if lo < 1 or hi < lo:
            raise ValueError("pixels_per_parcel must be a nonempty positive range")
        if self.phenology_params is None:
            self.phenology_params = default_phenology(self.K, self.T)
        if len(self.phenology_params) != self.K:
            raise ValueError("need one phenology parameter set per class")
        if len(set(self.phenology_params)) != self.K:
            raise ValueError("class phenology parameter sets must be pairwise distinct")
        if self.class_proportions is not None:
            props = self.class_proportions
            if len(props) != self.K or min(props) <= 0:
                raise ValueError("class_proportions must be K positive weights")


def default_phenology(num_classes: int, timesteps: int) -> list[PhenologyParams]:
    """Deterministic, pairwise-distinct growth curves spread over the season."""
    params = []
    for c in range(num_classes):
        frac = c / max(num_classes - 1, 1)
        onset = timesteps * (0.12 + 0.40 * frac)
        peak = onset + timesteps * (0.20 + 0.05 * ((c * 3) % num_classes))
        amplitude = 0.35 + 0.30 * ((c * 5) % num_classes) / num_classes
        width = timesteps * (0.025 + 0.012 * ((c * 2) % num_classes))
        params.append(PhenologyParams(onset, peak, amplitude, width))
    return params


def _class_curve(p: PhenologyParams, timesteps: int, bands: int) -> np.ndarray:
    """Noise-free [T, B] reflectance trajectory for one class."""
    t = np.arange(timesteps, dtype=np.float64)[:, None]
    rise = 1.0 / (1.0 + np.exp(-(t - p.onset) / p.width))
    fall = 1.0 / (1.0 + np.exp(-(t - p.peak) / p.width))
    shape = rise - fall  # in (0, 1), peaks between onset and peak
    base = 0.08 + 0.04 * np.arange(bands, dtype=np.float64)[None, :]
    gain = 1.0 - 0.5 * np.arange(bands, dtype=np.float64)[None, :] / bands
    return base + p.amplitude * gain * shape


def _class_counts(total: int, proportions: Optional[list[float]], k: int) -> np.ndarray:
    if proportions is None:
        weights = np.full(k, 1.0 / k)
    else:
        weights = np.asarray(proportions, dtype=np.float64)
        weights = weights / weights.sum()
    counts = np.floor(weights * total).astype(int)
    # distribute the remainder by largest fractional part
    remainder = total - counts.sum()
    frac = weights * total - counts
    for idx in np.argsort(-frac)[:remainder]:
        counts[idx] += 1
    return counts


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Generate a labelled synthetic parcel dataset.

    Each class follows its double-logistic band trajectory; pixels add i.i.d.
    Gaussian noise with sigma `noise_sigma`. Deterministic under `cfg.seed`.
    """
    rng = np.random.default_rng(cfg.seed)
    curves = [_class_curve(p, cfg.T, cfg.B) for p in cfg.phenology_params]
    counts = _class_counts(cfg.n_parcels, cfg.class_proportions, cfg.K)
    lo, hi = cfg.pixels_per_parcel

    records = []
    parcel_id = 0
    for label, count in enumerate(counts):
        for _ in range(count):
            n_px = int(rng.integers(lo, hi + 1))
            pixels = curves[label][None, :, :] + rng.normal(
                0.0, cfg.noise_sigma, size=(n_px, cfg.T, cfg.B)
            )
            records.append(
                parcel_statistics(PixelParcel(parcel_id=parcel_id, pixels=pixels, label=label))
            )
            parcel_id += 1
    return Dataset(records, T=cfg.T, F=2 * cfg.B, K=cfg.K)


def mask_labels(ds: Dataset, labelled_fraction: float, seed: int) -> Dataset:
    """Hide labels on all but ~labelled_fraction of each class (stratified).

    Per class, round-half-up of fraction * count records keep label_present.
    Masked records retain the hidden label for evaluation-only use.
    """
    if not 0.0 < labelled_fraction <= 1.0:
        raise ValueError(f"labelled_fraction must be in (0, 1], got {labelled_fraction}")
    rng = np.random.default_rng(seed)
    masked: dict[int, set[int]] = {}
    for cls in range(ds.K):
        idx = [i for i, r in enumerate(ds.records) if r.label_present and r.label == cls]
        n_keep = int(math.floor(labelled_fraction * len(idx) + 0.5))
        order = rng.permutation(len(idx))
        masked[cls] = {idx[j] for j in order[n_keep:]}
    to_mask = set().union(*masked.values()) if masked else set()
    records = [
        replace(rec, label_present=False) if i in to_mask else replace(rec)
        for i, rec in enumerate(ds.records)
    ]
    return Dataset(records, T=ds.T, F=ds.F, K=ds.K, class_names=list(ds.class_names))


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over records and timesteps, for z-scoring."""
    feats = np.asarray(features, dtype=np.float64)
    mean = feats.mean(axis=(0, 1))
    std = feats.std(axis=(0, 1))
    std = np.where(std < 1e-8, 1.0, std)
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(features: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Apply stored z-score statistics to [N, T, F] (or [T, F]) features."""
    return ((features - mean) / std).astype(np.float32)
