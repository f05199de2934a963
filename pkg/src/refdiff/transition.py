"""Pitch-transition detection, region blurring and loss-weight maps.

The detector works on a linear-domain mel spectrogram: sum the lower and
upper halves of the frequency axis per frame, form the guarded
high/low energy ratio, smooth it with a uniform kernel, and mark every
frame where the smoothed ratio crosses its own mean.  A window of
``w`` frames around each crossing becomes a transition region; regions
drive both the reference blur and the training loss weights.

Summations and the uniform smoother accumulate in plain index order so
their outputs are bit-reproducible against naive loop implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import GaussianKernel, MelSpectrogram, gaussian_blur_2d, gaussian_kernel, reflect_indices


@dataclass(frozen=True)
class EnergyRatioSeries:
    """Raw and smoothed high/low band energy ratio for one spectrogram."""

    raw: np.ndarray
    smoothed: np.ndarray
    mean: float
    kernel_size: int

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        smoothed = np.asarray(self.smoothed, dtype=np.float64)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "smoothed", smoothed)
        if raw.ndim != 1 or smoothed.shape != raw.shape:
            raise ValueError("raw and smoothed must be 1-D and equal length")
        if not (np.all(np.isfinite(raw)) and np.all(np.isfinite(smoothed))):
            raise ValueError("ratio series must be finite")
        if raw.size and raw.min() < 0.0:
            raise ValueError("raw ratios must be >= 0")
        if abs(self.mean - float(smoothed.mean())) > 1e-9:
            raise ValueError("mean must equal the arithmetic mean of smoothed")


@dataclass(frozen=True)
class TransitionRegionSet:
    """Sorted, merged frame intervals [start, end) marking transitions."""

    regions: tuple[tuple[int, int], ...]
    window: int
    total_frames: int

    def __post_init__(self):
        regions = tuple((int(s), int(e)) for s, e in self.regions)
        object.__setattr__(self, "regions", regions)
        prev_end = -1
        for start, end in regions:
            if not (0 <= start < end <= self.total_frames):
                raise ValueError(f"region [{start}, {end}) out of bounds")
            if start <= prev_end:
                raise ValueError("regions must be sorted and non-overlapping")
            prev_end = end

    def covers(self) -> np.ndarray:
        """Boolean mask of frames inside any region."""
        mask = np.zeros(self.total_frames, dtype=bool)
        for start, end in self.regions:
            mask[start:end] = True
        return mask

    @property
    def n_region_frames(self) -> int:
        return sum(end - start for start, end in self.regions)


@dataclass(frozen=True)
class WeightMap:
    """Per-entry loss weights: lambda_in inside regions, 1 outside."""

    data: np.ndarray
    lambda_in: float
    base: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError("weight map must be 2-D")
        if self.lambda_in < 1.0:
            raise ValueError("lambda_in must be >= 1")
        values = np.unique(data)
        allowed = {self.base, self.lambda_in}
        if not set(values.tolist()) <= allowed:
            raise ValueError("weight map entries must be base or lambda_in")


@dataclass(frozen=True)
class TransitionConfig:
    """Detector parameters; defaults give ~23 ms windows at hop 128 / 44.1 kHz."""

    smooth_k: int = 9
    window_w: int = 8
    eps: float = 1e-6
    blur_size: int = 5
    blur_sigma: float = 1.0


def band_energies(mel: MelSpectrogram) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame energy of the lower and upper halves of the mel axis.

    Low band covers bins 0..F//2-1, high band the rest.  Requires a
    linear-domain spectrogram; log values would corrupt the ratio.
    """
    if mel.is_log:
        raise ValueError("band energies require a linear-domain spectrogram")
    F = mel.data.shape[0]
    T = mel.data.shape[1]
    if F < 2:
        raise ValueError("need at least two frequency bins")
    split = F // 2
    low = np.zeros(T)
    high = np.zeros(T)
    for f in range(split):
        low += mel.data[f]
    for f in range(split, F):
        high += mel.data[f]
    return low, high


def energy_ratio(low: np.ndarray, high: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """R(t) = high(t) / (low(t) + eps)."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if low.shape != high.shape:
        raise ValueError("band energy sequences must have equal length")
    if low.size and (low.min() < 0.0 or high.min() < 0.0):
        raise ValueError("band energies must be >= 0")
    return high / (low + eps)


def smooth_ratio(ratio: np.ndarray, k: int) -> np.ndarray:
    """Uniform moving average of width k with reflect padding."""
    ratio = np.asarray(ratio, dtype=np.float64)
    T = ratio.size
    if k % 2 == 0 or k < 1:
        raise ValueError("k must be a positive odd integer")
    if k > 2 * T - 1:
        raise ValueError("k must be <= 2T - 1")
    radius = (k - 1) // 2
    padded = ratio[reflect_indices(T, radius)]
    out = np.zeros(T)
    for i in range(k):
        out += padded[i : i + T]
    out /= k
    return out


def make_ratio_series(mel: MelSpectrogram, k: int = 9, eps: float = 1e-6) -> EnergyRatioSeries:
    low, high = band_energies(mel)
    raw = energy_ratio(low, high, eps)
    smoothed = smooth_ratio(raw, k)
    return EnergyRatioSeries(raw=raw, smoothed=smoothed, mean=float(smoothed.mean()), kernel_size=k)


def detect_transition_points(series: EnergyRatioSeries) -> list[int]:
    """Frames where the smoothed ratio crosses its mean.

    The deviation sign uses sign(0) := +1, and every index t >= 1 whose
    sign differs from t-1 is reported.
    """
    smoothed = series.smoothed
    if smoothed.size < 2:
        raise ValueError("need at least two frames to detect transitions")
    signs = np.where(smoothed - series.mean >= 0.0, 1, -1)
    return [t for t in range(1, signs.size) if signs[t] != signs[t - 1]]


def build_regions(points, w: int, total_frames: int) -> TransitionRegionSet:
    """Merge w-frame windows centered on each transition point.

    Each point t contributes [t - w//2, t + ceil(w/2)) clamped to
    [0, total_frames); overlapping or adjacent windows are merged.
    """
    if w < 1:
        raise ValueError("w must be >= 1")
    points = list(points)
    if any(points[i] > points[i + 1] for i in range(len(points) - 1)):
        raise ValueError("points must be sorted")
    if any(not (0 <= p < total_frames) for p in points):
        raise ValueError("points must lie in [0, total_frames)")
    half_left = w // 2
    half_right = w - half_left
    merged: list[list[int]] = []
    for p in points:
        start = max(0, p - half_left)
        end = min(total_frames, p + half_right)
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return TransitionRegionSet(
        regions=tuple((s, e) for s, e in merged), window=w, total_frames=total_frames
    )


def blur_regions(
    mel: MelSpectrogram, regions: TransitionRegionSet, kernel: GaussianKernel
) -> MelSpectrogram:
    """Gaussian-blur each transition region; other frames pass through bit-identically."""
    if regions.total_frames != mel.n_frames:
        raise ValueError("region set frame count does not match spectrogram")
    out = mel
    for start, end in regions.regions:
        out = gaussian_blur_2d(out, kernel, (start, end))
    return out


def weight_map(regions: TransitionRegionSet, n_mels: int, lambda_in: float) -> WeightMap:
    """F x T loss weights: lambda_in on region columns, 1 elsewhere."""
    if lambda_in < 1.0:
        raise ValueError("lambda_in must be >= 1")
    data = np.ones((n_mels, regions.total_frames))
    for start, end in regions.regions:
        data[:, start:end] = lambda_in
    return WeightMap(data=data, lambda_in=lambda_in)


def analyze(
    mel: MelSpectrogram, cfg: TransitionConfig = TransitionConfig()
) -> tuple[EnergyRatioSeries, TransitionRegionSet]:
    """Full detector: band energies -> ratio -> smoothing -> crossings -> regions."""
    series = make_ratio_series(mel, k=cfg.smooth_k, eps=cfg.eps)
    points = detect_transition_points(series)
    regions = build_regions(points, cfg.window_w, mel.n_frames)
    return series, regions


def blur_kernel(cfg: TransitionConfig = TransitionConfig()) -> GaussianKernel:
    return gaussian_kernel(size=cfg.blur_size, sigma=cfg.blur_sigma)


def region_report(
    series: EnergyRatioSeries,
    regions: TransitionRegionSet,
    hop: int,
    cfg: TransitionConfig,
    lambda_in: float,
) -> dict:
    """JSON-ready transition report matching the CLI schema."""
    points = detect_transition_points(series)
    return {
        "total_frames": regions.total_frames,
        "hop": hop,
        "points": [int(p) for p in points],
        "regions": [[int(s), int(e)] for s, e in regions.regions],
        "params": {
            "k": cfg.smooth_k,
            "w": cfg.window_w,
            "eps": cfg.eps,
            "lambda": lambda_in,
        },
    }
