"""Frame-wise multi-source DOA estimation with MUSIC.

The number of sources per frame is either given (oracle counts from the
reference) or estimated with the Wax-Kailath MDL criterion on the same
broadband covariance that feeds MUSIC.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .geometry import AngularGrid, Doa, angular_grid
from .scene import AmbisonicClip
from .spectral import ANALYSIS_BAND_HZ, SpatialCovariance, broadband_covariances, stft

N_CHANNELS = 4
MAX_SOURCES = N_CHANNELS - 1


@dataclass(frozen=True)
class Pseudospectrum:
    grid: AngularGrid
    values: np.ndarray  # one strictly positive value per grid point

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass
class FramewiseDoas:
    frames: List[List[Doa]]
    frame_rate_hz: float

    def __len__(self) -> int:
        return len(self.frames)

    def counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.frames], dtype=int)


@dataclass(frozen=True)
class Oracle:
    """Per-frame source counts taken from reference metadata."""

    counts: Sequence[int]


@dataclass(frozen=True)
class Mdl:
    pass


CountingMode = Union[Oracle, Mdl]


def _check_covariance(m: np.ndarray) -> None:
    if m.shape != (N_CHANNELS, N_CHANNELS):
        raise ValueError(f"expected a 4x4 covariance, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if not np.allclose(m, m.conj().T, atol=1e-9 * scale):
        raise ValueError("covariance is not Hermitian")


def noise_subspace(m: np.ndarray, k: int) -> np.ndarray:
    """Eigenvectors of the 4-k smallest eigenvalues (descending order, stable ties)."""
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    tr = float(np.real(np.trace(m)))
    if w.min() < -1e-9 * max(tr, 0.0) - 1e-300:
        raise ValueError("covariance is not positive semidefinite")
    order = np.argsort(-w, kind="stable")
    return v[:, order[k:]]


def _music_values(steering: np.ndarray, en: np.ndarray) -> np.ndarray:
    proj = steering @ en.conj()
    den = np.einsum("gi,gi->g", proj.real, proj.real) + np.einsum("gi,gi->g", proj.imag, proj.imag)
    # |a|^2 = 2 for every SN3D FOA steering vector
    return 1.0 / np.maximum(den, 2e-12)


def music_pseudospectrum(cov: Union[SpatialCovariance, np.ndarray], k: int,
                         grid: AngularGrid) -> Pseudospectrum:
    m = cov.matrix if isinstance(cov, SpatialCovariance) else np.asarray(cov)
    if not 0 < k < N_CHANNELS:
        raise ValueError(f"source count k={k} must satisfy 0 < k < {N_CHANNELS}")
    _check_covariance(m)
    return Pseudospectrum(grid, _music_values(grid.steering, noise_subspace(m, k)))


def local_maxima(image: np.ndarray) -> np.ndarray:
    """Boolean mask of points >= all 8 neighbours; azimuth (axis 1) wraps."""
    padded = np.pad(image, ((1, 1), (0, 0)), constant_values=-np.inf)
    mask = np.ones(image.shape, dtype=bool)
    for d_el in (-1, 0, 1):
        rows = padded[1 + d_el:1 + d_el + image.shape[0]]
        for d_az in (-1, 0, 1):
            if d_el == 0 and d_az == 0:
                continue
            mask &= image >= np.roll(rows, -d_az, axis=1)
    return mask


def peak_indices(values: np.ndarray, shape, k: int) -> np.ndarray:
    """Flat grid indices of the k highest local maxima, grid order on ties."""
    if k <= 0:
        return np.zeros(0, dtype=int)
    cand = np.flatnonzero(local_maxima(values.reshape(shape)))
    order = np.argsort(-values[cand], kind="stable")
    return cand[order[:k]]


def spherical_peak_finding(p: Pseudospectrum, k: int) -> List[Doa]:
    if k < 0:
        raise ValueError("k must be non-negative")
    return [p.grid[int(i)] for i in peak_indices(p.values, p.grid.shape, k)]


def mdl_scores(eigenvalues: Sequence[float], n_snapshots: int) -> np.ndarray:
    """Wax-Kailath MDL for k = 0..M-1 from eigenvalues (any order)."""
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    M = len(lam)
    tr = lam.sum()
    lam = np.maximum(lam, 1e-12 * tr)
    N = float(n_snapshots)
    scores = np.empty(M)
    for k in range(M):
        tail = lam[k:]
        gm = np.exp(np.mean(np.log(tail)))
        am = np.mean(tail)
        scores[k] = -N * (M - k) * np.log(gm / am) + 0.5 * k * (2 * M - k) * np.log(N)
    return scores


def estimate_source_count_mdl(cov: Union[SpatialCovariance, np.ndarray],
                              n_snapshots: Optional[int] = None) -> int:
    if isinstance(cov, SpatialCovariance):
        m, n = cov.matrix, cov.snapshot_count
    else:
        m, n = np.asarray(cov), n_snapshots
    if n is None or n < N_CHANNELS:
        raise ValueError("MDL needs at least 4 snapshots")
    tr = float(np.real(np.trace(m)))
    if not tr > 0:
        return 0
    w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    # argmin returns the first minimum: ties go to the smaller k
    return int(np.argmin(mdl_scores(w, n)))


def estimate_frame_doas(clip: AmbisonicClip, mode: CountingMode, grid_resolution: float = 10.0,
                        elevation_range=(-60.0, 60.0), window_len: Optional[int] = None,
                        hop: Optional[int] = None, band=ANALYSIS_BAND_HZ) -> FramewiseDoas:
    """MUSIC DOAs for every STFT frame (40 ms Hann, 50 % hop by default)."""
    fs = clip.sample_rate_hz
    if window_len is None:
        window_len = int(round(0.04 * fs))
    if hop is None:
        hop = window_len // 2
    grid = angular_grid(grid_resolution, elevation_range)
    spec = stft(clip, window_len, hop)
    mats, counts = broadband_covariances(spec, band)
    T = len(mats)

    if isinstance(mode, Oracle):
        ks = np.asarray(mode.counts, dtype=int)
        if len(ks) != T:
            raise ValueError(f"oracle has {len(ks)} frame counts, recording has {T} frames")
    elif isinstance(mode, Mdl):
        ks = np.array([estimate_source_count_mdl(m, int(c)) for m, c in zip(mats, counts)])
    else:
        raise TypeError(f"unknown counting mode {mode!r}")
    ks = np.minimum(ks, MAX_SOURCES)

    frames: List[List[Doa]] = []
    for m, k in zip(mats, ks):
        if k <= 0 or np.real(np.trace(m)) <= 0:
            frames.append([])
            continue
        vals = _music_values(grid.steering, noise_subspace(m, int(k)))
        frames.append([grid[int(i)] for i in peak_indices(vals, grid.shape, int(k))])
    return FramewiseDoas(frames, spec.frame_rate_hz)
