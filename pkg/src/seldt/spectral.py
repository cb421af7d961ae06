"""Multichannel STFT and broadband spatial covariance."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.signal import get_window

from .scene import AmbisonicClip

ANALYSIS_BAND_HZ = (50.0, 8000.0)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (T, F, 4) complex
    sample_rate_hz: int
    window_len: int
    hop: int
    n_fft: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop

    @property
    def bin_width_hz(self) -> float:
        return self.sample_rate_hz / self.n_fft

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.bins) * self.bin_width_hz


@dataclass(frozen=True)
class SpatialCovariance:
    matrix: np.ndarray  # (4, 4) complex Hermitian
    snapshot_count: int

    def is_hermitian(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        return bool(np.allclose(m, m.conj().T, atol=tol * max(1.0, np.abs(m).max())))

    def is_psd(self, rel_tol: float = 1e-9) -> bool:
        m = self.matrix
        tr = float(np.real(np.trace(m)))
        w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
        return bool(w.min() >= -rel_tol * max(tr, 0.0) - 1e-300)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def stft(clip: AmbisonicClip, window_len: int, hop: int,
         n_fft: Optional[int] = None) -> Spectrogram:
    """Periodic-Hann STFT of every channel, frames without padding.

    ``n_fft`` defaults to the smallest power of two >= ``window_len``; the
    windowed frame is zero-padded to that length.
    """
    window_len = int(window_len)
    hop = int(hop)
    if n_fft is None:
        n_fft = 1 << (window_len - 1).bit_length()
    if not _is_pow2(n_fft) or n_fft < window_len:
        raise ValueError(f"n_fft={n_fft} must be a power of two >= window_len")
    if not 0 < hop <= window_len:
        raise ValueError("hop must be in (0, window_len]")
    x = clip.channels
    n = x.shape[1]
    if n < window_len:
        raise ValueError(f"clip of {n} samples is shorter than one window ({window_len})")
    n_frames = (n - window_len) // hop + 1
    win = get_window("hann", window_len)  # periodic
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[:, idx] * win  # (4, T, win)
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)  # (4, T, F)
    return Spectrogram(np.ascontiguousarray(spec.transpose(1, 2, 0)),
                       clip.sample_rate_hz, window_len, hop, n_fft)


def band_bins(spec: Spectrogram, band: Optional[Tuple[float, float]] = ANALYSIS_BAND_HZ) -> np.ndarray:
    if band is None:
        return np.arange(spec.bins)
    f = spec.bin_frequencies()
    sel = np.nonzero((f >= band[0]) & (f <= band[1]))[0]
    if len(sel) == 0:
        raise ValueError(f"no STFT bins in {band} Hz at fs={spec.sample_rate_hz}, "
                         f"n_fft={spec.n_fft}")
    return sel


def frame_covariance_sums(spec: Spectrogram, band=ANALYSIS_BAND_HZ) -> np.ndarray:
    """Per-frame sum over band bins of x x^H, shape (T, 4, 4)."""
    x = spec.values[:, band_bins(spec, band), :]
    return np.einsum("tfi,tfj->tij", x, x.conj())


def broadband_covariances(spec: Spectrogram, band=ANALYSIS_BAND_HZ, context: int = 1):
    """Covariance for every frame: mean over frames f-context..f+context
    (truncated at the edges) and all band bins.

    Returns (matrices (T, 4, 4), snapshot counts (T,)).
    """
    n_bins = len(band_bins(spec, band))
    sums = frame_covariance_sums(spec, band)
    T = sums.shape[0]
    # shifted sums rather than a cumulative sum: silent frames stay exactly zero
    padded = np.concatenate([np.zeros((context, 4, 4), complex), sums,
                             np.zeros((context, 4, 4), complex)])
    total = sum(padded[d:d + T] for d in range(2 * context + 1))
    f = np.arange(T)
    counts = (np.minimum(f + context + 1, T) - np.maximum(f - context, 0)) * n_bins
    mats = total / counts[:, None, None]
    mats = 0.5 * (mats + mats.conj().transpose(0, 2, 1))
    return mats, counts


def broadband_covariance(spec: Spectrogram, frame: int, band=ANALYSIS_BAND_HZ,
                         context: int = 1) -> SpatialCovariance:
    if not 0 <= frame < spec.frames:
        raise IndexError(f"frame {frame} outside [0, {spec.frames})")
    sel = band_bins(spec, band)
    lo, hi = max(0, frame - context), min(spec.frames, frame + context + 1)
    x = spec.values[lo:hi, sel, :].reshape(-1, 4)
    m = x.T @ x.conj() / len(x)
    m = 0.5 * (m + m.conj().T)
    return SpatialCovariance(m, len(x))


def dump_covariances(mats: np.ndarray, counts: np.ndarray, path) -> None:
    """Debug dump: one JSON object per frame with real/imag parts."""
    rows = [{"frame": int(i), "snapshot_count": int(c),
             "real": np.real(m).tolist(), "imag": np.imag(m).tolist()}
            for i, (m, c) in enumerate(zip(mats, counts))]
    with open(path, "w") as fh:
        json.dump(rows, fh)
