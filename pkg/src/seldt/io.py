"""File formats: 4-channel WAV, metadata / reference / DOA / track / plot CSVs.

Floats are written with ``repr`` so every CSV round-trips exactly.
"""
from __future__ import annotations

import csv
import wave
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

from .geometry import Doa, UnitVector
from .music import FramewiseDoas
from .scene import AmbisonicClip, EventSpec
from .tracker import Track, TrackSet

METADATA_HEADER = ["class_id", "onset_s", "offset_s", "start_azimuth_deg", "start_elevation_deg",
                   "angular_velocity_deg_s", "motion_mode", "axis_x", "axis_y", "axis_z",
                   "distance_m"]
REFERENCE_HEADER = ["frame_index", "class_id", "azimuth_deg", "elevation_deg"]
DOA_HEADER = ["frame_index", "azimuth_deg", "elevation_deg"]
TRACK_HEADER = ["track_id", "frame_index", "azimuth_deg", "elevation_deg"]
PLOT_HEADER = ["series", "frame_index", "azimuth_deg", "elevation_deg"]


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _f(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------- WAV

def write_wav(path, clip: AmbisonicClip, fmt: str = "float32") -> None:
    """Write ACN-ordered channels as float32 or 24-bit PCM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = clip.channels.T
    if fmt == "float32":
        wavfile.write(path, clip.sample_rate_hz, data.astype(np.float32))
    elif fmt == "pcm24":
        peak = np.abs(data).max() if data.size else 0.0
        if peak > 1.0:
            raise ValueError(f"peak amplitude {peak:.3f} would clip in 24-bit PCM")
        ints = np.ascontiguousarray(np.round(data * (2**23 - 1)).astype("<i4"))
        raw = ints.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        with wave.open(str(path), "wb") as w:
            w.setnchannels(data.shape[1])
            w.setsampwidth(3)
            w.setframerate(clip.sample_rate_hz)
            w.writeframes(raw)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")


def read_wav(path) -> Tuple[int, np.ndarray]:
    """Returns (sample rate, float array shaped (channels, N) or (N,) for mono)."""
    fs, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        # scipy returns 24-bit PCM left-aligned in int32
        data = data / 2.0**31
    elif data.dtype == np.uint8:
        data = (data.astype(float) - 128.0) / 128.0
    data = np.asarray(data, dtype=float)
    return int(fs), data.T if data.ndim == 2 else data


def read_clip(path) -> AmbisonicClip:
    fs, data = read_wav(path)
    if data.ndim != 2 or data.shape[0] != 4:
        raise ValueError(f"{path}: expected a 4-channel recording")
    return AmbisonicClip(fs, data)


# --------------------------------------------------------------------- CSV

def _write_rows(path, header, rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file, header missing") from None
        if first != header:
            raise CsvFormatError(path, 1, f"expected header {','.join(header)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, reader.line_num,
                                     f"expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, row


def _parse(path, lineno, fn, value, what):
    try:
        return fn(value)
    except ValueError as exc:
        raise CsvFormatError(path, lineno, f"bad {what} {value!r}: {exc}") from None


def write_metadata_csv(path, events: Sequence[EventSpec]) -> None:
    rows = []
    for e in events:
        ax = e.axis.as_array() if e.axis is not None else (0.0, 0.0, 0.0)
        rows.append([e.class_id, _f(e.onset_s), _f(e.offset_s), _f(e.start_doa.azimuth_deg),
                     _f(e.start_doa.elevation_deg), _f(e.angular_velocity_deg_s), e.motion_mode,
                     _f(ax[0]), _f(ax[1]), _f(ax[2]), _f(e.distance_m)])
    _write_rows(path, METADATA_HEADER, rows)


def read_metadata_csv(path) -> List[EventSpec]:
    events = []
    for lineno, row in _read_rows(path, METADATA_HEADER):
        try:
            ax = [float(v) for v in row[7:10]]
            axis = UnitVector(*ax) if row[6] == "great_circle" else None
            events.append(EventSpec(int(row[0]), float(row[1]), float(row[2]),
                                    Doa(float(row[3]), float(row[4])), float(row[5]), row[6],
                                    axis, float(row[10])))
        except ValueError as exc:
            raise CsvFormatError(path, lineno, str(exc)) from None
    return events


def write_reference_csv(path, frames: Sequence[Sequence[Tuple[int, Doa]]]) -> None:
    rows = [[f, cls, _f(d.azimuth_deg), _f(d.elevation_deg)]
            for f, items in enumerate(frames) for cls, d in items]
    _write_rows(path, REFERENCE_HEADER, rows)


def read_reference_csv(path, n_frames: int) -> List[List[Tuple[int, Doa]]]:
    frames: List[List[Tuple[int, Doa]]] = [[] for _ in range(n_frames)]
    for lineno, row in _read_rows(path, REFERENCE_HEADER):
        f = _parse(path, lineno, int, row[0], "frame_index")
        if not 0 <= f < n_frames:
            raise CsvFormatError(path, lineno, f"frame_index {f} outside [0, {n_frames})")
        cls = _parse(path, lineno, int, row[1], "class_id")
        d = _parse(path, lineno, lambda v: Doa(float(v[0]), float(v[1])), row[2:4], "direction")
        frames[f].append((cls, d))
    return frames


def write_doa_csv(path, doas: FramewiseDoas) -> None:
    rows = [[f, _f(d.azimuth_deg), _f(d.elevation_deg)]
            for f, items in enumerate(doas.frames) for d in items]
    _write_rows(path, DOA_HEADER, rows)


def read_doa_csv(path, n_frames: int, frame_rate_hz: float) -> FramewiseDoas:
    frames: List[List[Doa]] = [[] for _ in range(n_frames)]
    for lineno, row in _read_rows(path, DOA_HEADER):
        f = _parse(path, lineno, int, row[0], "frame_index")
        if not 0 <= f < n_frames:
            raise CsvFormatError(path, lineno, f"frame_index {f} outside [0, {n_frames})")
        frames[f].append(_parse(path, lineno, lambda v: Doa(float(v[0]), float(v[1])),
                                row[1:3], "direction"))
    return FramewiseDoas(frames, frame_rate_hz)


def write_track_csv(path, tracks: TrackSet) -> None:
    rows = [[t.track_id, t.birth_frame + i, _f(d.azimuth_deg), _f(d.elevation_deg)]
            for t in tracks.tracks for i, d in enumerate(t.doas)]
    _write_rows(path, TRACK_HEADER, rows)


def read_track_csv(path) -> TrackSet:
    per: dict = {}
    for lineno, row in _read_rows(path, TRACK_HEADER):
        tid = _parse(path, lineno, int, row[0], "track_id")
        f = _parse(path, lineno, int, row[1], "frame_index")
        d = _parse(path, lineno, lambda v: Doa(float(v[0]), float(v[1])), row[2:4], "direction")
        per.setdefault(tid, []).append((f, d, lineno))
    tracks = []
    for tid, rows in per.items():
        rows.sort(key=lambda r: r[0])
        frames = [r[0] for r in rows]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise CsvFormatError(path, rows[0][2], f"track {tid} has non-contiguous frames")
        tracks.append(Track(tid, frames[0], frames[-1], [r[1] for r in rows]))
    tracks.sort(key=lambda t: t.track_id)
    return TrackSet(tracks)


def sniff_prediction_kind(path) -> Optional[str]:
    """'doa', 'track' or 'reference' from a prediction CSV header."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    return {tuple(DOA_HEADER): "doa", tuple(TRACK_HEADER): "track",
            tuple(REFERENCE_HEADER): "reference"}.get(tuple(header or ()))


def write_plot_csv(path, series: Iterable[Tuple[str, int, Doa]]) -> None:
    rows = [[name, f, _f(d.azimuth_deg), _f(d.elevation_deg)] for name, f, d in series]
    _write_rows(path, PLOT_HEADER, rows)


def read_plot_csv(path) -> List[Tuple[str, int, Doa]]:
    return [(row[0], int(row[1]), Doa(float(row[2]), float(row[3])))
            for _, row in _read_rows(path, PLOT_HEADER)]
