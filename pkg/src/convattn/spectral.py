"""Fourier analysis of feature maps.

Each h x w map goes through an unnormalized 2-D DFT (so Parseval reads
sum |F|^2 = h*w * sum x^2), amplitudes are floored and logged, and log
amplitudes are averaged into radial bins by the Euclidean magnitude of the
normalized frequency (Nyquist at pi, clipped to pi). The headline statistic
is the difference in log amplitude between a high-frequency bin and the
zero-frequency bin: positive means the maps carry relatively more
high-frequency energy (high-pass character), strongly negative means
low-pass.

Analysis runs in float64 regardless of the model's storage dtype; log
amplitude is averaged log-then-mean by default with a mean-then-log option.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import Model, TokenGrid, model_forward_features
from .tensor import Tensor

__all__ = [
    "SpectrumProfile",
    "DepthProfile",
    "TARGET_FREQS",
    "DEFAULT_BIN_WIDTH",
    "AMPLITUDE_FLOOR",
    "feature_spectrum",
    "spectrum_of_maps",
    "delta_log_amplitude",
    "depth_profile",
    "depth_profile_rows",
    "depth_slope",
    "auto_bin_width",
]

TARGET_FREQS = (math.pi / 3, 2 * math.pi / 3, math.pi)
DEFAULT_BIN_WIDTH = math.pi / 16
AMPLITUDE_FLOOR = 1e-12


@dataclass
class SpectrumProfile:
    """Radially binned log-amplitude profile averaged over a set of maps.

    ``bins`` holds bin centers; empty bins (possible on coarse lattices)
    carry count 0 and NaN log amplitude and cannot serve as delta targets.
    """

    bins: list[float]
    log_amp: list[float]
    counts: list[int]
    n_maps: int
    bin_width: float

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "log_amp": self.log_amp,
            "counts": self.counts,
            "n_maps": self.n_maps,
            "bin_width": self.bin_width,
        }


@dataclass
class DepthProfile:
    """Delta log amplitude per block output, ordered by normalized depth."""

    depths: list[float]
    targets: list[float]
    deltas: list[list[float]]  # [layer][target]
    modes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"depths": self.depths, "targets": self.targets, "deltas": self.deltas, "modes": self.modes}


def _radial_bins(h: int, w: int, bin_width: float) -> tuple[np.ndarray, int]:
    wu = 2 * math.pi * np.abs(np.fft.fftfreq(h))
    wv = 2 * math.pi * np.abs(np.fft.fftfreq(w))
    r = np.hypot(wu[:, None], wv[None, :])
    r = np.minimum(r, math.pi)
    n_bins = int(math.ceil(math.pi / bin_width))
    idx = np.minimum((r / bin_width).astype(int), n_bins - 1)
    return idx, n_bins


def spectrum_of_maps(maps: np.ndarray, bin_width: float = DEFAULT_BIN_WIDTH,
                     floor: float = AMPLITUDE_FLOOR, average_before_log: bool = False) -> SpectrumProfile:
    """Profile a stack of spatial maps [n, h, w] (or one [h, w] map)."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ValueError(f"expected [n, h, w] maps, got shape {maps.shape}")
    n, h, w = maps.shape
    if h < 2 or w < 2:
        raise ValueError(f"grid {h}x{w} too small for spectral analysis; need at least 2x2")

    amp = np.abs(np.fft.fft2(maps))  # unnormalized forward transform
    idx, n_bins = _radial_bins(h, w, bin_width)
    flat_idx = idx.reshape(-1)
    counts = np.bincount(flat_idx, minlength=n_bins)

    if average_before_log:
        per_freq = np.log(amp.mean(axis=0) + floor)
        sums = np.bincount(flat_idx, weights=per_freq.reshape(-1), minlength=n_bins)
        denom = counts
    else:
        la = np.log(amp + floor)
        sums = np.bincount(flat_idx, weights=la.sum(axis=0).reshape(-1), minlength=n_bins)
        denom = counts * n

    log_amp = np.full(n_bins, np.nan)
    nonzero = counts > 0
    log_amp[nonzero] = sums[nonzero] / denom[nonzero]
    centers = (np.arange(n_bins) + 0.5) * bin_width
    return SpectrumProfile(
        bins=[float(c) for c in centers],
        log_amp=[float(v) for v in log_amp],
        counts=[int(c) for c in counts],
        n_maps=int(n),
        bin_width=bin_width,
    )


def feature_spectrum(x: TokenGrid, bin_width: float = DEFAULT_BIN_WIDTH,
                     floor: float = AMPLITUDE_FLOOR, average_before_log: bool = False) -> SpectrumProfile:
    """Profile every channel of every sample in a token-grid batch."""
    data = x.data.data  # [B, h, w, d]
    maps = np.moveaxis(data, -1, 1).reshape(-1, x.h_t, x.w_t)
    return spectrum_of_maps(maps, bin_width=bin_width, floor=floor, average_before_log=average_before_log)


def delta_log_amplitude(profile: SpectrumProfile, f_target: float) -> float:
    """Log amplitude at the bin containing ``f_target`` minus at bin 0."""
    if not 0.0 < f_target <= math.pi + 1e-12:
        raise ValueError(f"target frequency must lie in (0, pi], got {f_target}")
    n_bins = len(profile.bins)
    idx = min(int(f_target / profile.bin_width), n_bins - 1)
    if profile.counts[idx] == 0:
        min_side = int(math.ceil(2 * math.pi / profile.bin_width))
        raise ValueError(
            f"bin at frequency {f_target:.4f} is empty for this geometry; "
            f"grids of at least {min_side}x{min_side} tokens (or a wider bin) are needed"
        )
    if profile.counts[0] == 0:
        raise ValueError("zero-frequency bin is empty")
    return float(profile.log_amp[idx] - profile.log_amp[0])


def depth_profile(model, images, epoch: int | None = None, sched=None,
                  targets=TARGET_FREQS, tap: str = "post-residual",
                  bin_width: float = DEFAULT_BIN_WIDTH, floor: float = AMPLITUDE_FLOOR,
                  average_before_log: bool = False) -> DepthProfile:
    """Delta log amplitude of every block's output at the target frequencies.

    ``model`` is either a Model (blocks captured post-residual by default,
    pre-residual branch with tap="pre-residual") or any object exposing
    ``feature_grids(images) -> list[TokenGrid]``.
    """
    if isinstance(model, Model):
        if not isinstance(images, Tensor):
            images = Tensor(images)
        _, grids = model_forward_features(images, model, epoch, sched, tap=tap)
        modes = model.modes()
    elif hasattr(model, "feature_grids"):
        grids = model.feature_grids(images)
        modes = getattr(model, "modes", lambda: [])()
    else:
        raise TypeError("model must be a Model or expose feature_grids(images)")
    n_layers = len(grids)
    depths, deltas = [], []
    for i, grid in enumerate(grids):
        profile = feature_spectrum(grid, bin_width=bin_width, floor=floor,
                                   average_before_log=average_before_log)
        depths.append((i + 1) / n_layers)
        deltas.append([delta_log_amplitude(profile, f) for f in targets])
    return DepthProfile(depths=depths, targets=list(targets), deltas=deltas, modes=list(modes))


def depth_profile_rows(profile: DepthProfile) -> list[tuple[float, float, float]]:
    """Flatten to (depth, f, delta_log_amp) rows, the CSV layout."""
    rows = []
    for depth, values in zip(profile.depths, profile.deltas):
        for f, v in zip(profile.targets, values):
            rows.append((depth, f, v))
    return rows


def depth_slope(profile: DepthProfile, target: float = math.pi) -> float:
    """Least-squares slope of delta log amplitude vs normalized depth."""
    try:
        col = profile.targets.index(target)
    except ValueError:
        raise ValueError(f"profile has no target frequency {target}") from None
    y = np.array([row[col] for row in profile.deltas])
    x = np.array(profile.depths)
    if len(x) < 2:
        return 0.0
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def auto_bin_width(h_t: int, w_t: int) -> float:
    """Default bin width for a lattice: pi/16, widened on coarse grids so the
    standard target frequencies land in populated bins."""
    side = min(h_t, w_t)
    if side >= 16:
        return math.pi / 16
    if side >= 8:
        return math.pi / 8
    return math.pi / 4
