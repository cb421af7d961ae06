"""Rao-Blackwellized Monte Carlo data association (RBMCDA) tracker.

Particles sample measurement-to-target associations; each target's state is
a constant-velocity Kalman filter in (azimuth, elevation) degrees with
wrapped azimuth residuals. The particle population is stored as arrays of
shape ``(n_particles, max_targets, ...)`` so one frame costs a handful of
vectorised operations regardless of the particle count.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import Doa, wrap_azimuth
from .music import FramewiseDoas

DEG2_PER_SR = (180.0 / np.pi) ** 2
SPHERE_SR = 4.0 * np.pi


@dataclass
class TrackerConfig:
    n_particles: int = 100
    birth_prior: float = 0.02
    clutter_density: float = 0.01
    death_after_frames: int = 25
    survival_decay: float = 0.02
    process_noise_q: float = 100.0
    measurement_noise_deg: float = 1.0
    ess_threshold_fraction: float = 0.5
    confirm_after: int = 10
    rng_seed: int = 0
    max_targets: int = 5
    birth_velocity_std_deg_s: float = 50.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "rng_seed":
                if v < 0:
                    raise ValueError("rng_seed must be non-negative")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0 < self.ess_threshold_fraction <= 1:
            raise ValueError("ess_threshold_fraction must be in (0, 1]")
        if not self.birth_prior < 1:
            raise ValueError("birth_prior must be < 1")

    @classmethod
    def from_file(cls, path) -> "TrackerConfig":
        return cls(**cls.parse_file(path))

    @classmethod
    def parse_file(cls, path) -> dict:
        """Options set in a flat ``key=value`` file; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown tracker option {key!r}")
            kw[key] = int(value) if types[key] == "int" else float(value)
        return kw

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())


@dataclass
class TargetState:
    mean: np.ndarray  # [az, el, v_az, v_el]
    covariance: np.ndarray  # 4x4
    frames_since_update: int = 0
    age_frames: int = 0


@dataclass
class Particle:
    weight: float
    targets: Dict[int, TargetState]
    next_track_id: int = 0


@dataclass
class Track:
    track_id: int
    birth_frame: int
    death_frame: int
    doas: List[Doa]

    def doa_at(self, frame: int) -> Doa:
        return self.doas[frame - self.birth_frame]


@dataclass
class TrackSet:
    tracks: List[Track] = field(default_factory=list)

    def to_framewise(self, n_frames: int, frame_rate_hz: float) -> FramewiseDoas:
        frames: List[List[Doa]] = [[] for _ in range(n_frames)]
        for tr in self.tracks:
            for f in range(tr.birth_frame, min(tr.death_frame, n_frames - 1) + 1):
                frames[f].append(tr.doa_at(f))
        return FramewiseDoas(frames, frame_rate_hz)


# ------------------------------------------------------------------ Kalman

def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(q: float, dt: float) -> np.ndarray:
    """Continuous white-acceleration noise integrated over ``dt``."""
    Q = np.zeros((4, 4))
    for p, v in ((0, 2), (1, 3)):
        Q[p, p] = dt**3 / 3.0
        Q[p, v] = Q[v, p] = dt**2 / 2.0
        Q[v, v] = dt
    return q * Q


def predict_arrays(means: np.ndarray, covs: np.ndarray, dt: float, q: float):
    F = transition(dt)
    means = means @ F.T
    means[..., 0] = wrap_azimuth(means[..., 0])
    covs = F @ covs @ F.T + process_noise(q, dt)
    return means, covs


def kf_predict(s: TargetState, dt: float, q: float) -> TargetState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    m, P = predict_arrays(s.mean[None].astype(float), s.covariance[None].astype(float), dt, q)
    return TargetState(m[0], P[0], s.frames_since_update, s.age_frames)


def innovation(means: np.ndarray, z) -> np.ndarray:
    nu = np.empty(means.shape[:-1] + (2,))
    nu[..., 0] = wrap_azimuth(z[0] - means[..., 0])
    nu[..., 1] = z[1] - means[..., 1]
    return nu


def kf_update_arrays(means, covs, z, r: float):
    """Kalman update of a batch of targets with one (az, el) measurement."""
    nu = innovation(means, z)
    S = covs[..., :2, :2] + r * np.eye(2)
    K = covs[..., :, :2] @ np.linalg.inv(S)
    means = means + np.einsum("...ij,...j->...i", K, nu)
    means[..., 0] = wrap_azimuth(means[..., 0])
    covs = covs - K @ S @ np.swapaxes(K, -1, -2)
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return means, covs


def kf_update(s: TargetState, z: Doa, measurement_noise_deg: float) -> TargetState:
    m, P = kf_update_arrays(s.mean[None].astype(float), s.covariance[None].astype(float),
                            z.as_tuple(), measurement_noise_deg**2)
    return TargetState(m[0], P[0], 0, s.age_frames)


def _likelihood_per_sr(means, covs, z, r):
    """Gaussian innovation density of z, converted from deg^-2 to sr^-1."""
    nu = innovation(means, z)
    s00 = covs[..., 0, 0] + r
    s11 = covs[..., 1, 1] + r
    s01 = covs[..., 0, 1]
    det = s00 * s11 - s01 * s01
    d2 = (s11 * nu[..., 0] ** 2 - 2 * s01 * nu[..., 0] * nu[..., 1] + s00 * nu[..., 1] ** 2) / det
    pdf = np.exp(-0.5 * d2) / (2 * np.pi * np.sqrt(det))
    cos_el = max(np.cos(np.deg2rad(z[1])), 1e-6)
    return pdf * DEG2_PER_SR / cos_el


# --------------------------------------------------------------- particles

class ParticleSet:
    """All particles of the filter as parallel arrays."""

    def __init__(self, n_particles: int, max_targets: int):
        P, T = n_particles, max_targets
        self.means = np.zeros((P, T, 4))
        self.covs = np.tile(np.eye(4), (P, T, 1, 1))
        self.alive = np.zeros((P, T), dtype=bool)
        self.ids = np.full((P, T), -1, dtype=np.int64)
        self.fsu = np.zeros((P, T), dtype=np.int64)
        self.age = np.zeros((P, T), dtype=np.int64)
        self.associated = np.zeros((P, T), dtype=bool)
        self.next_id = np.zeros(P, dtype=np.int64)
        self.weights = np.full(P, 1.0 / P)
        self.ancestors = np.arange(P)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def max_targets(self) -> int:
        return self.alive.shape[1]

    def take(self, idx) -> "ParticleSet":
        out = ParticleSet.__new__(ParticleSet)
        for name in ("means", "covs", "alive", "ids", "fsu", "age", "associated", "next_id"):
            setattr(out, name, getattr(self, name)[idx].copy())
        out.weights = self.weights[idx].copy()
        out.ancestors = np.asarray(idx).copy()
        return out

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def particle(self, i: int) -> Particle:
        targets = {
            int(self.ids[i, s]): TargetState(self.means[i, s].copy(), self.covs[i, s].copy(),
                                             int(self.fsu[i, s]), int(self.age[i, s]))
            for s in np.flatnonzero(self.alive[i])
        }
        return Particle(float(self.weights[i]), targets, int(self.next_id[i]))

    @classmethod
    def from_particles(cls, particles: Sequence[Particle], max_targets: int = 5) -> "ParticleSet":
        ps = cls(len(particles), max_targets)
        for i, p in enumerate(particles):
            if len(p.targets) > max_targets:
                raise ValueError("particle exceeds max_targets")
            ps.weights[i] = p.weight
            ps.next_id[i] = p.next_track_id
            for s, (tid, t) in enumerate(sorted(p.targets.items())):
                ps.alive[i, s] = True
                ps.ids[i, s] = tid
                ps.means[i, s] = t.mean
                ps.covs[i, s] = t.covariance
                ps.fsu[i, s] = t.frames_since_update
                ps.age[i, s] = t.age_frames
        return ps


def association_masses(ps: ParticleSet, z, config: TrackerConfig,
                       used: Optional[np.ndarray] = None) -> np.ndarray:
    """Unnormalised association masses, columns [clutter, birth, slot 0..T-1].

    Targets share the non-birth prior equally; a target already associated in
    the current frame (``used``) cannot take another measurement.
    """
    P, T = ps.alive.shape
    avail = ps.alive if used is None else ps.alive & ~used
    n_alive = ps.alive.sum(axis=1)
    prior = (1.0 - config.birth_prior) / np.maximum(n_alive, 1)
    lik = _likelihood_per_sr(ps.means, ps.covs, z, config.measurement_noise_deg**2)
    masses = np.empty((P, T + 2))
    masses[:, 0] = config.clutter_density
    masses[:, 1] = np.where(n_alive < T, config.birth_prior / SPHERE_SR, 0.0)
    masses[:, 2:] = np.where(avail, prior[:, None] * lik, 0.0)
    return masses


def association_posterior(p: Particle, z: Doa, config: TrackerConfig) -> Dict:
    """Posterior over {'clutter', 'birth', track_id...} for one predicted particle."""
    ps = ParticleSet.from_particles([p], config.max_targets)
    m = association_masses(ps, z.as_tuple(), config)[0]
    m = m / m.sum()
    post = {"clutter": float(m[0])}
    if ps.alive[0].sum() < ps.max_targets:
        post["birth"] = float(m[1])
    for s in np.flatnonzero(ps.alive[0]):
        post[int(ps.ids[0, s])] = float(m[2 + s])
    return post


def death_step(ps: ParticleSet, config: TrackerConfig, rng) -> ParticleSet:
    """Age unassociated targets and remove the dead ones, in place."""
    upd = ps.associated & ps.alive
    ps.fsu = np.where(upd, 0, np.where(ps.alive, ps.fsu + 1, 0))
    ps.age = np.where(ps.alive, ps.age + 1, 0)
    survive_p = np.clip(1.0 - config.survival_decay * ps.fsu, 0.0, 1.0)
    u = rng.random(ps.alive.shape)
    dies = ps.alive & ((ps.fsu > config.death_after_frames) | (u >= survive_p))
    ps.alive &= ~dies
    return ps


def systematic_indices(weights: np.ndarray, rng, n: Optional[int] = None) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise ValueError("cannot resample: all particle weights are zero")
    n = len(w) if n is None else n
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(w / total)
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(w) - 1)


def resample(ps: ParticleSet, rng, n: Optional[int] = None) -> ParticleSet:
    """Systematic resampling to equal weights."""
    idx = systematic_indices(ps.weights, rng, n)
    out = ps.take(idx)
    out.weights[:] = 1.0 / len(idx)
    return out


def update_frame(ps: ParticleSet, measurements: Sequence[Doa], dt: float, rng,
                 config: TrackerConfig) -> ParticleSet:
    """Predict, associate every measurement, apply deaths and renormalise, in place."""
    if len(ps) == 0:
        raise ValueError("empty particle set")
    P, T = ps.alive.shape
    ps.ancestors = np.arange(P)
    ps.means, ps.covs = predict_arrays(ps.means, ps.covs, dt, config.process_noise_q)
    ps.associated = np.zeros((P, T), dtype=bool)
    logw = np.log(np.maximum(ps.weights, 1e-300))
    r = config.measurement_noise_deg**2
    birth_cov = np.diag([r, r, config.birth_velocity_std_deg_s**2,
                         config.birth_velocity_std_deg_s**2])

    # measurements are taken in the order given (peak value, descending)
    for d in measurements:
        z = d.as_tuple()
        masses = association_masses(ps, z, config, ps.associated)
        total = masses.sum(axis=1)
        logw += np.log(total)
        u = rng.random(P) * total
        choice = np.minimum((np.cumsum(masses, axis=1) <= u[:, None]).sum(axis=1), T + 1)

        tgt = np.flatnonzero(choice >= 2)
        if len(tgt):
            slot = choice[tgt] - 2
            m, c = kf_update_arrays(ps.means[tgt, slot], ps.covs[tgt, slot], z, r)
            ps.means[tgt, slot] = m
            ps.covs[tgt, slot] = c
            ps.associated[tgt, slot] = True

        born = np.flatnonzero(choice == 1)
        if len(born):
            slot = np.argmin(ps.alive[born], axis=1)
            ps.means[born, slot] = [z[0], z[1], 0.0, 0.0]
            ps.covs[born, slot] = birth_cov
            ps.alive[born, slot] = True
            ps.ids[born, slot] = ps.next_id[born]
            ps.next_id[born] += 1
            ps.fsu[born, slot] = 0
            ps.age[born, slot] = 0
            ps.associated[born, slot] = True

    death_step(ps, config, rng)
    w = np.exp(logw - logw.max())
    ps.weights = w / w.sum()
    return ps


def needs_resampling(ps: ParticleSet, config: TrackerConfig) -> bool:
    return ps.ess() < config.ess_threshold_fraction * config.n_particles


def process_frame(ps: ParticleSet, measurements: Sequence[Doa], dt: float, rng,
                  config: TrackerConfig) -> ParticleSet:
    """One filtering step; returns the (possibly resampled) particle set."""
    ps = update_frame(ps, measurements, dt, rng, config)
    if needs_resampling(ps, config):
        return resample(ps, rng, config.n_particles)
    return ps


# ------------------------------------------------------------------ driver

@dataclass
class _FrameRecord:
    positions: np.ndarray  # (P, T, 2)
    alive: np.ndarray
    ids: np.ndarray
    associated: np.ndarray
    weights: np.ndarray  # before resampling
    ancestors: np.ndarray  # post-resample index -> index in this record


class RBMCDATracker:
    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.rng = np.random.default_rng(self.config.rng_seed)
        self.particles = ParticleSet(self.config.n_particles, self.config.max_targets)
        self.history: List[_FrameRecord] = []

    def step(self, measurements: Sequence[Doa], dt: float) -> ParticleSet:
        ps = update_frame(self.particles, measurements, dt, self.rng, self.config)
        record = _FrameRecord(ps.means[:, :, :2].copy(), ps.alive.copy(), ps.ids.copy(),
                              ps.associated.copy(), ps.weights.copy(), np.arange(len(ps)))
        if needs_resampling(ps, self.config):
            ps = resample(ps, self.rng, self.config.n_particles)
            record.ancestors = ps.ancestors.copy()
        self.history.append(record)
        self.particles = ps
        return ps

    def run(self, doas: FramewiseDoas) -> TrackSet:
        dt = 1.0 / doas.frame_rate_hz
        for frame in doas.frames:
            self.step(frame, dt)
        return extract_tracks(self.history, self.config.confirm_after)


def extract_tracks(history: Sequence[_FrameRecord], confirm_after: int) -> TrackSet:
    """Tracks along the ancestry of the final maximum-weight particle."""
    if not history:
        return TrackSet([])
    n = len(history)
    j = int(np.argmax(history[-1].weights))
    lineage = [0] * n
    lineage[-1] = j
    for f in range(n - 2, -1, -1):
        # particle j at frame f+1 descends from post-resample particle j at f
        j = int(history[f].ancestors[j])
        lineage[f] = j

    per_track: Dict[int, list] = {}
    for f, (rec, j) in enumerate(zip(history, lineage)):
        for s in np.flatnonzero(rec.alive[j]):
            tid = int(rec.ids[j, s])
            per_track.setdefault(tid, []).append(
                (f, float(rec.positions[j, s, 0]), float(rec.positions[j, s, 1]),
                 bool(rec.associated[j, s])))

    tracks = []
    for tid, rows in per_track.items():
        best = run = 0
        last_assoc = None
        for f, _, _, assoc in rows:
            run = run + 1 if assoc else 0
            best = max(best, run)
            if assoc:
                last_assoc = f
        if best < confirm_after or last_assoc is None:
            continue
        birth = rows[0][0]
        doas = [Doa(az, float(np.clip(el, -90.0, 90.0)))
                for f, az, el, _ in rows if f <= last_assoc]
        tracks.append(Track(tid, birth, last_assoc, doas))
    tracks.sort(key=lambda t: (t.birth_frame, t.track_id))
    for i, t in enumerate(tracks):
        t.track_id = i
    return TrackSet(tracks)


def track_doas(doas: FramewiseDoas, config: Optional[TrackerConfig] = None) -> TrackSet:
    return RBMCDATracker(config).run(doas)
