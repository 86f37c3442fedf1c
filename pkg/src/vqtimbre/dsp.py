"""Fourier filterbank, spectral losses/metrics, descriptors and DTW."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STFT_LOSS_WINDOWS = (128, 256, 512, 1024, 2048)
STFT_LOSS_HOP_RATIO = 0.25
LSD_FRAME, LSD_HOP, LSD_FLOOR = 2048, 512, 1e-7
LOUDNESS_FLOOR_DB = -90.0


class SignalTooShort(ValueError):
    """The waveform does not hold a single analysis window."""


class LengthMismatch(ValueError):
    pass


def periodic_hann(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def cola_constant(window: np.ndarray, hop: int) -> float:
    """Overlap-added window sum, measured at steady state.

    Raises if the sum is not constant (window/hop pair is not COLA).
    """
    length = window.shape[0]
    reps = 2 * int(math.ceil(length / hop)) + 1
    total = T.overlap_add_array(np.tile(window, (reps, 1)), hop)
    steady = total[length:-length] if total.shape[0] > 2 * length else total
    value = float(steady.mean())
    if np.max(np.abs(steady - value)) > 1e-9 * max(value, 1.0):
        raise ValueError(f"window of length {length} is not COLA at hop {hop}")
    return value


def num_frames(n_samples: int, length: int, stride: int) -> int:
    if n_samples < length:
        raise SignalTooShort(f"signal of {n_samples} samples is shorter than one window of {length}")
    return (n_samples - length) // stride + 1


def hann_slice(w, length: int, stride: int):
    """Hann-windowed frames [..., T, length] of ``w`` (array or Tensor)."""
    num_frames(np.shape(w.data if isinstance(w, Tensor) else w)[-1], length, stride)
    win = periodic_hann(length)
    if isinstance(w, Tensor):
        return T.frame_signal(w, length, stride) * win
    frames = np.lib.stride_tricks.sliding_window_view(np.asarray(w), length, axis=-1)[..., ::stride, :]
    return frames * win


@dataclass(frozen=True)
class FilterbankBasis:
    """Windowed Fourier analysis kernels and their inverse for N = L + 2 bins.

    Rows [0, N/2) hold cosine (real) kernels, rows [N/2, N) sine (imaginary).
    """
    length: int
    stride: int
    analysis: np.ndarray = field(repr=False)
    synthesis: np.ndarray = field(repr=False)
    cola: float

    @property
    def bins(self) -> int:
        return self.length + 2

    @property
    def half(self) -> int:
        return self.length // 2 + 1

    def analysis_kernels(self) -> np.ndarray:
        return self.analysis[:, None, :]

    def synthesis_kernels(self) -> np.ndarray:
        return self.synthesis[:, None, :]


@lru_cache(maxsize=16)
def make_basis(length: int, stride: int) -> FilterbankBasis:
    if length % 2 or length % stride:
        raise ValueError(f"window {length} must be even and divisible by stride {stride}")
    n = np.arange(length)
    k = np.arange(length // 2 + 1)[:, None]
    phase = 2.0 * np.pi * k * n / length
    win = periodic_hann(length)
    analysis = np.concatenate([np.cos(phase) * win, -np.sin(phase) * win])
    scale = np.full((length // 2 + 1, 1), 2.0 / length)
    scale[0] = scale[-1] = 1.0 / length
    synthesis = np.concatenate([np.cos(phase) * scale, -np.sin(phase) * scale])
    for arr in (analysis, synthesis):
        arr.setflags(write=False)
    return FilterbankBasis(length, stride, analysis, synthesis, cola_constant(win, stride))


def fourier_frames(signal, basis: FilterbankBasis) -> Tensor:
    """Complex frames [T, N] (or [B, T, N]) laid out as [real | imag]."""
    x = T.as_tensor(signal)
    num_frames(x.shape[-1], basis.length, basis.stride)
    kern = Tensor(basis.analysis_kernels())
    if x.ndim == 1:
        return T.conv1d(x.reshape(1, -1), kern, basis.stride).transpose()
    out = T.conv1d(x.reshape(x.shape[0], 1, x.shape[1]), kern, basis.stride)
    return T.transpose(out, (0, 2, 1))


def overlap_add(frames, basis: FilterbankBasis) -> Tensor:
    """Inverse-basis each frame, overlap-add with the stride, divide by the COLA sum."""
    x = T.as_tensor(frames)
    kern = Tensor(basis.synthesis_kernels())
    if x.ndim == 2:
        out = T.transposed_conv1d(x.transpose(), kern, basis.stride).reshape(-1)
    else:
        out = T.transposed_conv1d(T.transpose(x, (0, 2, 1)), kern, basis.stride)
        out = out.reshape(out.shape[0], out.shape[2])
    return out * (1.0 / basis.cola)


def output_length(n_frames: int, length: int, stride: int) -> int:
    return (n_frames - 1) * stride + length


# -- losses --------------------------------------------------------------------------

def multiscale_stft_loss(w, w_hat, windows: Sequence[int] = STFT_LOSS_WINDOWS,
                         hop_ratio: float = STFT_LOSS_HOP_RATIO) -> Tensor:
    """Sum over resolutions of the mean absolute magnitude-spectrogram difference.

    Resolutions whose window exceeds the signal length are skipped.
    """
    w, w_hat = T.as_tensor(w), T.as_tensor(w_hat)
    if w.shape != w_hat.shape:
        raise LengthMismatch(f"multiscale_stft_loss: shapes {w.shape} and {w_hat.shape} differ")
    total = None
    for n in windows:
        if n > w.shape[-1]:
            continue
        win = periodic_hann(n)
        hop = max(1, int(n * hop_ratio))
        ref = T.stft_magnitude(w, win, hop)
        term = T.mean(T.tabs(T.stft_magnitude(w_hat, win, hop) - ref))
        total = term if total is None else total + term
    if total is None:
        raise SignalTooShort(f"signal of {w.shape[-1]} samples shorter than every loss window")
    return total


def _magnitudes(w: np.ndarray, frame: int, hop: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] < frame:
        w = np.pad(w, (0, frame - w.shape[-1]))
    frames = np.lib.stride_tricks.sliding_window_view(w, frame)[::hop]
    return np.abs(np.fft.rfft(frames * periodic_hann(frame), axis=-1))


def lsd(w, w_hat, frame: int = LSD_FRAME, hop: int = LSD_HOP, floor: float = LSD_FLOOR) -> float:
    """Mean over frames of the L2 norm of log10-magnitude differences."""
    w, w_hat = np.asarray(w), np.asarray(w_hat)
    if w.shape != w_hat.shape:
        raise LengthMismatch(f"lsd: lengths {w.shape} and {w_hat.shape} differ")
    a = np.log10(np.maximum(_magnitudes(w, frame, hop), floor))
    b = np.log10(np.maximum(_magnitudes(w_hat, frame, hop), floor))
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=-1))))


# -- dynamic time warping -------------------------------------------------------------

@dataclass
class DtwResult:
    distance: float
    cost: float
    path: list[tuple[int, int]]


def unit_scale(x: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]; a constant series maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.min(x), np.max(x)
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def dtw(a, b, scale: bool = True) -> DtwResult:
    """Absolute-difference DTW with steps (1,0), (0,1), (1,1).

    ``distance`` is the accumulated cost divided by the optimal path length.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw needs two non-empty series")
    if scale:
        a, b = unit_scale(a), unit_scale(b)
    cost = np.abs(a[:, None] - b[None, :])
    m, n = cost.shape
    acc = np.full((m + 1, n + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, m + 1):
        row_prev = acc[i - 1]
        row = acc[i]
        diag_up = np.minimum(row_prev[:-1], row_prev[1:]) + cost[i - 1]
        left = np.inf
        for j in range(n):
            v = diag_up[j]
            lj = left + cost[i - 1, j]
            if lj < v:
                v = lj
            row[j + 1] = v
            left = v
    path = [(m - 1, n - 1)]
    i, j = m, n
    while (i, j) != (1, 1):
        # prefer the diagonal on ties
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    path.reverse()
    total = float(acc[m, n])
    return DtwResult(total / len(path), total, path)


# -- descriptors ----------------------------------------------------------------------

def _frames(w, frame: int, hop: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] < frame:
        w = np.pad(w, (0, frame - w.shape[-1]))
    return np.lib.stride_tricks.sliding_window_view(w, frame)[::hop]


def loudness_curve(w, frame: int = 2048, hop: int = 512, floor_db: float = LOUDNESS_FLOOR_DB) -> np.ndarray:
    """Per-frame RMS in dB, floored."""
    rms = np.sqrt(np.mean(_frames(w, frame, hop) ** 2, axis=-1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return np.maximum(db, floor_db)


def f0_track(w, sample_rate: int = 22050, frame: int = 2048, hop: int = 512, threshold: float = 0.1,
             fmin: float = 40.0, fmax: float = 2000.0, silence_db: float = -60.0) -> np.ndarray:
    """YIN fundamental estimate per frame in Hz; unvoiced frames are NaN."""
    frames = _frames(w, frame, hop)
    width = frame // 2
    tau_min = max(2, int(sample_rate / fmax))
    tau_max = min(width - 1, int(math.ceil(sample_rate / fmin)))
    out = np.full(frames.shape[0], np.nan)
    for idx, x in enumerate(frames):
        if 20 * np.log10(np.sqrt(np.mean(x ** 2)) + 1e-20) < silence_db:
            continue
        d = _yin_difference(x, width)
        cum = np.cumsum(d[1:])
        cmnd = np.ones_like(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            cmnd[1:] = d[1:] * np.arange(1, width + 1) / cum
        cmnd = np.nan_to_num(cmnd, nan=1.0)
        below = np.nonzero(cmnd[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and cmnd[tau + 1] < cmnd[tau]:
            tau += 1
        out[idx] = sample_rate / _parabolic_peak(d, tau)
    return out


def _yin_difference(x: np.ndarray, width: int) -> np.ndarray:
    """d(tau) = sum_{j<width} (x_j - x_{j+tau})^2 for tau in [0, width]."""
    n = x.shape[0]
    size = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(x, size)
    head = np.fft.rfft(x[:width], size)
    # cross term sum_j x_j x_{j+tau} over j < width
    cross = np.fft.irfft(np.conj(head) * spec, size)[:width + 1]
    sq = np.concatenate([[0.0], np.cumsum(x ** 2)])
    energy_head = sq[width]
    energy_shift = sq[np.arange(width + 1) + width] - sq[np.arange(width + 1)]
    return np.maximum(energy_head + energy_shift - 2.0 * cross, 0.0)


def _parabolic_peak(d: np.ndarray, tau: int) -> float:
    if tau <= 0 or tau >= d.shape[0] - 1:
        return float(tau)
    a, b, c = d[tau - 1], d[tau], d[tau + 1]
    denom = a - 2 * b + c
    if denom <= 0:
        return float(tau)
    return tau + 0.5 * (a - c) / denom


def _spectral_frames(w, sample_rate: int, frame: int, hop: int):
    mags = np.abs(np.fft.rfft(_frames(w, frame, hop) * periodic_hann(frame), axis=-1))
    freqs = np.fft.rfftfreq(frame, 1.0 / sample_rate)
    return mags, freqs


def spectral_centroid(w, sample_rate: int = 22050, frame: int = 2048, hop: int = 512) -> np.ndarray:
    """Magnitude-weighted mean frequency per frame (Hz); 0 for silent frames."""
    mags, freqs = _spectral_frames(w, sample_rate, frame, hop)
    total = mags.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, (mags * freqs).sum(axis=-1) / safe, 0.0)


def spectral_bandwidth(w, sample_rate: int = 22050, frame: int = 2048, hop: int = 512) -> np.ndarray:
    """Magnitude-weighted standard deviation around the centroid (Hz); 0 when silent."""
    mags, freqs = _spectral_frames(w, sample_rate, frame, hop)
    total = mags.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    centroid = (mags * freqs).sum(axis=-1) / safe
    var = (mags * (freqs[None, :] - centroid[:, None]) ** 2).sum(axis=-1) / safe
    return np.where(total > 0, np.sqrt(var), 0.0)


DESCRIPTORS = {
    "centroid": spectral_centroid,
    "bandwidth": spectral_bandwidth,
    "f0": f0_track,
    "loudness": None,
}


def descriptor_curve(name: str, w, sample_rate: int, frame: int, hop: int) -> np.ndarray:
    """Evaluate a named descriptor; unvoiced/undefined frames come back NaN."""
    if name == "loudness":
        return loudness_curve(w, frame, hop)
    if name not in DESCRIPTORS:
        raise ValueError(f"unknown descriptor {name!r}; expected one of {sorted(DESCRIPTORS)}")
    return DESCRIPTORS[name](w, sample_rate, frame, hop)


def write_curve_csv(path: str | Path, values: np.ndarray, hop: int, sample_rate: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "time_s", "value"])
        for i, v in enumerate(np.asarray(values, dtype=np.float64)):
            writer.writerow([i, repr(i * hop / sample_rate), repr(float(v))])
