"""Synthetic anechoic FOA scenes with stationary and moving sound events.

A scene is first sampled as metadata (:class:`SceneSpec`), then rendered
sample-by-sample: every event's mono signal is scaled by ``1/distance`` and
multiplied by the FOA steering vector of its instantaneous direction.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    Doa,
    UnitVector,
    directions_from_vectors,
    foa_steering_matrix,
    unit_vectors,
    wrap_azimuth,
)

MOTION_MODES = ("stationary", "azimuth_only", "great_circle")
VELOCITIES_DEG_S = tuple(v for v in range(-90, 100, 10) if v != 0)
DEFAULT_SAMPLE_RATE = 24000
STATIONARY_GRID_DEG = 10.0


@dataclass(frozen=True)
class EventSpec:
    class_id: int
    onset_s: float
    offset_s: float
    start_doa: Doa
    angular_velocity_deg_s: float = 0.0
    motion_mode: str = "stationary"
    axis: Optional[UnitVector] = None
    distance_m: float = 1.0

    def __post_init__(self):
        if self.motion_mode not in MOTION_MODES:
            raise ValueError(f"unknown motion mode {self.motion_mode!r}")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not 0.0 <= self.onset_s < self.offset_s:
            raise ValueError(f"bad activity interval [{self.onset_s}, {self.offset_s})")
        if not 1.0 <= self.distance_m <= 10.0:
            raise ValueError(f"distance {self.distance_m} m outside [1, 10]")
        if self.motion_mode == "stationary":
            if self.angular_velocity_deg_s != 0:
                raise ValueError("stationary events have zero angular velocity")
        elif abs(self.angular_velocity_deg_s) > 90.0:
            raise ValueError("angular velocity exceeds 90 deg/s")
        if self.motion_mode == "great_circle":
            if self.axis is None:
                raise ValueError("great_circle motion needs a rotation axis")
            u0 = unit_vectors(self.start_doa.azimuth_deg, self.start_doa.elevation_deg)
            if abs(float(np.dot(u0, self.axis.as_array()))) > 1e-6:
                raise ValueError("rotation axis must be orthogonal to the start direction")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s

    @property
    def is_moving(self) -> bool:
        return self.motion_mode != "stationary" and self.angular_velocity_deg_s != 0


@dataclass(frozen=True)
class SceneSpec:
    duration_s: float
    max_overlap: int
    n_classes: int
    elevation_range: Tuple[float, float]
    events: Tuple[EventSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        for e in self.events:
            if e.offset_s > self.duration_s + 1e-9:
                raise ValueError("event extends past the end of the recording")
            if e.class_id >= self.n_classes:
                raise ValueError(f"class {e.class_id} >= n_classes {self.n_classes}")
        if max_concurrency([(e.onset_s, e.offset_s) for e in self.events]) > self.max_overlap:
            raise ValueError("events exceed max_overlap")


@dataclass(frozen=True)
class AmbisonicClip:
    sample_rate_hz: int
    channels: np.ndarray  # (4, N), ACN order W, Y, Z, X

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=float)
        if ch.ndim != 2 or ch.shape[0] != 4:
            raise ValueError(f"expected 4 x N channels, got shape {ch.shape}")
        object.__setattr__(self, "channels", ch)

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def scaled(self, c: float) -> "AmbisonicClip":
        return AmbisonicClip(self.sample_rate_hz, self.channels * c)


@dataclass(frozen=True)
class SceneConfig:
    """Sampling parameters for one recording."""

    max_overlap: int = 1
    n_classes: int = 11
    elevation_range: Tuple[float, float] = (-60.0, 60.0)
    moving: bool = False
    motion_mode: str = "great_circle"
    event_count_range: Optional[Tuple[int, int]] = None
    duration_range_s: Tuple[float, float] = (1.0, 5.0)
    distance_range_m: Tuple[float, float] = (1.0, 10.0)
    duration_s: float = 30.0
    rng_seed: int = 0

    def resolved_event_count_range(self) -> Tuple[int, int]:
        if self.event_count_range is not None:
            return tuple(self.event_count_range)
        return (3, 3 * self.max_overlap)


PRESETS = {
    "ansyn_like": dict(n_classes=11, elevation_range=(-60.0, 60.0), moving=False),
    "mansyn_like": dict(n_classes=11, elevation_range=(-60.0, 60.0), moving=True,
                        motion_mode="great_circle"),
    "mreal_like_motion": dict(n_classes=8, elevation_range=(-40.0, 40.0), moving=True,
                              motion_mode="azimuth_only"),
}


def preset_config(preset: str, max_overlap: int, seed: int, **overrides) -> SceneConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[preset], max_overlap=max_overlap, rng_seed=seed)
    kw.update(overrides)
    return SceneConfig(**kw)


# ---------------------------------------------------------------- activity

def max_concurrency(intervals: Sequence[Tuple[float, float]]) -> int:
    """Largest number of simultaneously active half-open intervals."""
    edges = []
    for on, off in intervals:
        edges.append((on, 1))
        edges.append((off, -1))
    # ends sort before starts at the same instant: [a, b) and [b, c) do not overlap
    edges.sort(key=lambda e: (e[0], e[1]))
    best = cur = 0
    for _, step in edges:
        cur += step
        best = max(best, cur)
    return best


def active_events(scene: SceneSpec, t: float) -> List[int]:
    return [i for i, e in enumerate(scene.events) if e.onset_s <= t < e.offset_s]


# -------------------------------------------------------------- trajectory

def trajectory_directions(e: EventSpec, times) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised trajectory (azimuth, elevation) in degrees; no range checks."""
    t = np.asarray(times, dtype=float)
    elapsed = t - e.onset_s
    az0, el0 = e.start_doa.azimuth_deg, e.start_doa.elevation_deg
    if not e.is_moving:
        return np.full(t.shape, az0), np.full(t.shape, el0)
    if e.motion_mode == "azimuth_only":
        return wrap_azimuth(az0 + e.angular_velocity_deg_s * elapsed), np.full(t.shape, el0)
    theta = np.deg2rad(e.angular_velocity_deg_s * elapsed)[..., None]
    u0 = unit_vectors(az0, el0)
    k = e.axis.as_array()
    # Rodrigues rotation; the k (k . u0) term vanishes for an orthogonal axis
    u = u0 * np.cos(theta) + np.cross(k, u0) * np.sin(theta)
    return directions_from_vectors(u)


def trajectory_doa(e: EventSpec, t: float) -> Doa:
    if not e.onset_s <= t <= e.offset_s:
        raise ValueError(f"t={t} outside activity [{e.onset_s}, {e.offset_s}]")
    az, el = trajectory_directions(e, t)
    return Doa(float(az), float(np.clip(el, -90.0, 90.0)))


def _trajectory_in_range(e: EventSpec, el_range: Tuple[float, float]) -> bool:
    lo, hi = el_range
    # 0.1 deg spacing along the arc
    n = max(2, int(np.ceil(abs(e.angular_velocity_deg_s) * e.duration_s / 0.1)) + 1)
    _, el = trajectory_directions(e, np.linspace(e.onset_s, e.offset_s, n))
    return bool(np.all(el >= lo) and np.all(el < hi))


# ---------------------------------------------------------------- sampling

def _sample_direction(rng, el_range, on_grid: bool) -> Doa:
    lo, hi = el_range
    if on_grid:
        g = STATIONARY_GRID_DEG
        az = -180.0 + g * rng.integers(0, int(360 / g))
        n_el = int(np.ceil((hi - lo) / g - 1e-9))
        el = lo + g * rng.integers(0, n_el)
        return Doa(float(az), float(el))
    # area-uniform over the elevation band
    s = rng.uniform(np.sin(np.deg2rad(lo)), np.sin(np.deg2rad(hi)))
    el = float(np.rad2deg(np.arcsin(s)))
    return Doa(float(rng.uniform(-180.0, 180.0)), min(el, np.nextafter(hi, lo)))


def _orthogonal_axis(rng, start: Doa) -> UnitVector:
    u0 = unit_vectors(start.azimuth_deg, start.elevation_deg)
    while True:
        k = np.cross(u0, rng.normal(size=3))
        n = np.linalg.norm(k)
        if n > 1e-3:
            k /= n
            # remove residual parallel component from rounding
            k -= np.dot(k, u0) * u0
            k /= np.linalg.norm(k)
            return UnitVector(float(k[0]), float(k[1]), float(k[2]))


def _fits(intervals, on, off, max_overlap) -> bool:
    return max_concurrency(list(intervals) + [(on, off)]) <= max_overlap


def sample_scene(config: SceneConfig, max_attempts: int = 2000) -> SceneSpec:
    """Draw a random scene; deterministic for a fixed ``config.rng_seed``."""
    if config.max_overlap not in (1, 2, 3):
        raise ValueError("max_overlap must be 1, 2 or 3")
    n_lo, n_hi = config.resolved_event_count_range()
    d_lo, d_hi = config.duration_range_s
    if not (0 <= n_lo <= n_hi and 0 < d_lo <= d_hi <= config.duration_s):
        raise ValueError("invalid event count or duration range")
    if n_lo * d_lo > config.duration_s * config.max_overlap:
        raise ValueError(
            f"{n_lo} events of >= {d_lo} s cannot fit in {config.duration_s} s "
            f"with max_overlap={config.max_overlap}")

    rng = np.random.default_rng(config.rng_seed)
    n_events = int(rng.integers(n_lo, n_hi + 1))
    intervals: List[Tuple[float, float]] = []
    events: List[EventSpec] = []
    for _ in range(n_events):
        for _ in range(max_attempts):
            dur = round(float(rng.uniform(d_lo, d_hi)), 3)
            onset = round(float(rng.uniform(0.0, config.duration_s - dur)), 3)
            offset = round(onset + dur, 3)
            if _fits(intervals, onset, offset, config.max_overlap):
                break
        else:
            raise ValueError("could not place events under the overlap constraint; "
                             "config is unsatisfiable")
        intervals.append((onset, offset))
        events.append(_sample_event(rng, config, onset, offset, max_attempts))

    events.sort(key=lambda e: (e.onset_s, e.offset_s, e.class_id))
    return SceneSpec(config.duration_s, config.max_overlap, config.n_classes,
                     tuple(config.elevation_range), tuple(events), config.rng_seed)


def _sample_event(rng, config: SceneConfig, onset, offset, max_attempts) -> EventSpec:
    class_id = int(rng.integers(0, config.n_classes))
    distance = round(float(rng.uniform(*config.distance_range_m)), 3)
    if not config.moving:
        return EventSpec(class_id, onset, offset,
                         _sample_direction(rng, config.elevation_range, on_grid=True),
                         distance_m=distance)
    for _ in range(max_attempts):
        start = _sample_direction(rng, config.elevation_range, on_grid=False)
        velocity = float(VELOCITIES_DEG_S[rng.integers(0, len(VELOCITIES_DEG_S))])
        axis = _orthogonal_axis(rng, start) if config.motion_mode == "great_circle" else None
        e = EventSpec(class_id, onset, offset, start, velocity, config.motion_mode,
                      axis, distance)
        if _trajectory_in_range(e, config.elevation_range):
            return e
    raise ValueError("no trajectory stays inside the elevation range")


# ----------------------------------------------------------------- signals

def generate_source_signal(class_id: int, duration_s: float, rng,
                           sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Synthetic event: harmonic stack plus band-limited noise, unit RMS.

    The fundamental and noise band depend on the class; the fundamental is
    detuned by up to 3 % per instance so same-class overlaps stay incoherent.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    return _synth_signal(class_id, n, rng, sample_rate)


def _synth_signal(class_id: int, n: int, rng, fs: int) -> np.ndarray:
    t = np.arange(n) / fs
    nyq_limit = min(7500.0, 0.45 * fs)
    f0 = 110.0 * 2.0 ** (class_id * 5.0 / 12.0) * (1.0 + rng.uniform(-0.03, 0.03))
    tilt = 1.0 + 0.25 * (class_id % 4)
    tone = np.zeros(n)
    h = 1
    while h * f0 < nyq_limit:
        tone += h ** (-tilt) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        h += 1
    # noise band: class-dependent lower edge, upper edge below 8 kHz
    lo = 100.0 + 150.0 * (class_id % 6)
    hi = min(nyq_limit, lo + 2000.0 + 400.0 * (class_id % 5))
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n)
    sig = tone / (np.std(tone) + 1e-12) + 0.5 * noise / (np.std(noise) + 1e-12)

    ramp = min(int(round(0.01 * fs)), n // 2)
    if ramp > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        sig[:ramp] *= w
        sig[n - ramp:] *= w[::-1]
    rms = np.sqrt(np.mean(sig**2))
    return sig / rms if rms > 0 else sig


class SourceBank:
    """Mono event signals keyed by class.

    Classes without WAV files fall back to the parametric generator when
    ``n_classes`` covers them. WAV-backed classes pick a random file and loop
    or crop it to the requested length.
    """

    def __init__(self, sample_rate: int = DEFAULT_SAMPLE_RATE, n_classes: Optional[int] = None,
                 wav_files: Optional[Dict[int, Sequence[Path]]] = None):
        self.sample_rate = int(sample_rate)
        self.n_classes = n_classes
        self._wavs: Dict[int, List[np.ndarray]] = {}
        for cls, paths in (wav_files or {}).items():
            self._wavs[int(cls)] = [self._load(p) for p in paths]

    def _load(self, path) -> np.ndarray:
        from .io import read_wav

        fs, data = read_wav(path)
        if fs != self.sample_rate:
            raise ValueError(f"{path}: sample rate {fs} != bank rate {self.sample_rate}")
        mono = data if data.ndim == 1 else data[0]
        rms = np.sqrt(np.mean(mono**2))
        return mono / rms if rms > 0 else mono

    def has_class(self, class_id: int) -> bool:
        return class_id in self._wavs or (self.n_classes is None or class_id < self.n_classes)

    def signal(self, class_id: int, n_samples: int, rng) -> np.ndarray:
        if class_id in self._wavs:
            clips = self._wavs[class_id]
            src = clips[int(rng.integers(0, len(clips)))]
            reps = int(np.ceil(n_samples / len(src)))
            return np.tile(src, reps)[:n_samples].copy()
        if not self.has_class(class_id):
            raise KeyError(f"source bank has no class {class_id}")
        return _synth_signal(class_id, n_samples, rng, self.sample_rate)


def event_rng(scene_seed: int, e: EventSpec) -> np.random.Generator:
    """Generator keyed on the event itself, independent of its list position."""
    key = f"{e.class_id}:{e.onset_s!r}:{e.offset_s!r}".encode()
    return np.random.default_rng([int(scene_seed) & 0xFFFFFFFF, zlib.crc32(key)])


# --------------------------------------------------------------- rendering

def render_scene(scene: SceneSpec, bank: SourceBank,
                 sample_rate: Optional[int] = None) -> AmbisonicClip:
    fs = bank.sample_rate if sample_rate is None else int(sample_rate)
    if fs != bank.sample_rate:
        raise ValueError(f"sample rate {fs} != source bank rate {bank.sample_rate}")
    n_total = int(round(scene.duration_s * fs))
    out = np.zeros((4, n_total))
    for e in scene.events:
        if not bank.has_class(e.class_id):
            raise KeyError(f"source bank has no class {e.class_id}")
        start = int(round(e.onset_s * fs))
        stop = min(int(round(e.offset_s * fs)), n_total)
        if stop <= start:
            continue
        s = bank.signal(e.class_id, stop - start, event_rng(scene.seed, e))
        t = np.arange(start, stop) / fs
        az, el = trajectory_directions(e, t)
        gains = foa_steering_matrix(az, el).T  # (4, n)
        out[:, start:stop] += gains * (s / e.distance_m)
    return AmbisonicClip(fs, out)


def add_sensor_noise(clip: AmbisonicClip, snr_db: Optional[float], rng) -> AmbisonicClip:
    """Spatially white Gaussian noise; ``snr_db`` is relative to a unit-RMS source at 1 m."""
    if snr_db is None:
        return clip
    sigma = 10.0 ** (-snr_db / 20.0)
    return AmbisonicClip(clip.sample_rate_hz,
                         clip.channels + sigma * rng.normal(size=clip.channels.shape))


def intensity_directions(clip: AmbisonicClip, window_s: float = 0.01):
    """Acoustic-intensity DOA per non-overlapping window.

    Returns (window centre times, azimuth, elevation, W energy) arrays. The
    intensity vector is the windowed mean of W times (X, Y, Z).
    """
    n = max(1, int(round(window_s * clip.sample_rate_hz)))
    n_win = clip.n_samples // n
    ch = clip.channels[:, :n_win * n].reshape(4, n_win, n)
    w, y, z, x = ch
    vec = np.stack([(w * x).mean(-1), (w * y).mean(-1), (w * z).mean(-1)], axis=-1)
    az, el = directions_from_vectors(vec)
    centres = (np.arange(n_win) * n + n / 2.0) / clip.sample_rate_hz
    return centres, az, el, (w**2).mean(-1)


# --------------------------------------------------------- frame reference

@dataclass(frozen=True)
class FrameClock:
    """Analysis frame timing: frame ``f`` is centred at ``(f*hop + win/2)/fs``."""

    sample_rate_hz: int
    window_len: int
    hop: int

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop + 1

    def times(self, n_frames: int) -> np.ndarray:
        return (np.arange(n_frames) * self.hop + self.window_len / 2.0) / self.sample_rate_hz


def default_clock(sample_rate: int = DEFAULT_SAMPLE_RATE) -> FrameClock:
    """40 ms Hann window with 50 % hop."""
    win = int(round(0.04 * sample_rate))
    return FrameClock(sample_rate, win, win // 2)


def reference_frames(scene: SceneSpec, frame_times) -> List[List[Tuple[int, Doa]]]:
    """Per frame, the (class_id, direction) of every active event in scene order."""
    frame_times = np.asarray(frame_times, dtype=float)
    out: List[List[Tuple[int, Doa]]] = [[] for _ in range(len(frame_times))]
    for e in scene.events:
        idx = np.nonzero((frame_times >= e.onset_s) & (frame_times < e.offset_s))[0]
        if len(idx) == 0:
            continue
        az, el = trajectory_directions(e, frame_times[idx])
        for f, a, b in zip(idx, az, el):
            out[f].append((e.class_id, Doa(float(a), float(np.clip(b, -90, 90)))))
    return out
