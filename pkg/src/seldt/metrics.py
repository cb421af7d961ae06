"""Tracking and detection metrics.

Tracking: DOA error (mean angular distance over Hungarian-matched pairs,
pair-weighted across frames) and frame recall (fraction of frames whose
predicted DOA count equals the reference count). Detection: F-score and
error rate over non-overlapping one-second segments. SCOF: percentage of
frames in which an event class overlaps with itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import angular_distances
from .music import FramewiseDoas


class NoMatchError(ValueError):
    """Raised when a DOA error is requested but no pairs were matched."""


# --------------------------------------------------------------- Hungarian

@dataclass(frozen=True)
class Assignment:
    pairs: List[Tuple[int, int]]
    total_cost: float


def hungarian(cost, lexicographic: bool = True) -> Assignment:
    """Minimum-cost matching of size min(R, C) (shortest augmenting paths).

    O(n^2 m) with row/column potentials. With ``lexicographic`` the returned
    matching is the lexicographically smallest sorted pair list among all
    optimal ones, at the price of up to R*C extra solves; without it the
    result is still deterministic and optimal.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size == 0:
        return Assignment([], 0.0)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    pairs = _solve(c)
    if lexicographic:
        pairs = _lexicographic_optimum(c, pairs)
    return Assignment(pairs, float(sum(c[r, k] for r, k in pairs)))


def _lexicographic_optimum(c: np.ndarray, pairs) -> List[Tuple[int, int]]:
    best = sum(c[r, k] for r, k in pairs)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    rows, cols = list(range(c.shape[0])), list(range(c.shape[1]))
    chosen: List[Tuple[int, int]] = []
    fixed = 0.0
    need = len(pairs)
    for r in range(c.shape[0]):
        for k in range(c.shape[1]):
            if len(chosen) == need:
                return chosen
            if r not in rows or k not in cols:
                continue
            rr = [x for x in rows if x != r]
            cc = [x for x in cols if x != k]
            sub = c[np.ix_(rr, cc)]
            rest = sum(sub[i, j] for i, j in _solve(sub)) if sub.size else 0.0
            if fixed + c[r, k] + rest <= best + tol:
                chosen.append((r, k))
                fixed += c[r, k]
                rows, cols = rr, cc
    return chosen


def _solve(c: np.ndarray) -> List[Tuple[int, int]]:
    transposed = c.shape[0] > c.shape[1]
    a = c.T if transposed else c
    n, m = a.shape

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=int)  # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pairs = [(int(match[j]) - 1, j - 1) for j in range(1, m + 1) if match[j]]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    pairs.sort()
    return pairs


# ---------------------------------------------------------------- tracking

def _as_array(doas) -> np.ndarray:
    return np.array([d.as_tuple() for d in doas], dtype=float).reshape(-1, 2)


def frame_distance_matrix(pred, ref) -> np.ndarray:
    p, r = _as_array(pred), _as_array(ref)
    return angular_distances(p[:, None, 0], p[:, None, 1], r[None, :, 0], r[None, :, 1])


def doa_error_stats(pred: FramewiseDoas, ref: FramewiseDoas) -> Tuple[float, int]:
    """(sum of matched angular distances, number of matched pairs)."""
    if len(pred) != len(ref):
        raise ValueError(f"frame count mismatch: {len(pred)} predicted, {len(ref)} reference")
    total, n_pairs = 0.0, 0
    for p, r in zip(pred.frames, ref.frames):
        if not p or not r:
            continue
        d = frame_distance_matrix(p, r)
        if d.shape == (1, 1):
            total += float(d[0, 0])
            n_pairs += 1
            continue
        # the optimal cost is unique, so skip the tie-break refinement
        a = hungarian(d, lexicographic=False)
        total += a.total_cost
        n_pairs += len(a.pairs)
    return total, n_pairs


def doa_error(pred: FramewiseDoas, ref: FramewiseDoas) -> float:
    total, n = doa_error_stats(pred, ref)
    if n == 0:
        raise NoMatchError("no frame has both predicted and reference DOAs")
    return total / n


def frame_recall(pred: FramewiseDoas, ref: FramewiseDoas) -> float:
    if len(pred) != len(ref):
        raise ValueError(f"frame count mismatch: {len(pred)} predicted, {len(ref)} reference")
    if len(ref) == 0:
        return 1.0
    return float(np.mean(pred.counts() == ref.counts()))


# --------------------------------------------------------------- detection

Event = Tuple[int, float, float]  # (class_id, onset_s, offset_s)


def _event_tuple(e) -> Event:
    if isinstance(e, tuple):
        return (int(e[0]), float(e[1]), float(e[2]))
    return (int(e.class_id), float(e.onset_s), float(e.offset_s))


@dataclass(frozen=True)
class SegmentScores:
    tp: int
    fp: int
    fn: int
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    @property
    def f_score(self) -> Optional[float]:
        den = 2 * self.tp + self.fp + self.fn
        return None if den == 0 else 2 * self.tp / den

    @property
    def error_rate(self) -> Optional[float]:
        if self.n_ref == 0:
            return None
        return (self.substitutions + self.deletions + self.insertions) / self.n_ref


def segment_activity(events: Iterable, n_segments: int, segment_s: float = 1.0) -> List[set]:
    active: List[set] = [set() for _ in range(n_segments)]
    for e in events:
        cls, on, off = _event_tuple(e)
        first = max(0, int(math.floor(on / segment_s)))
        last = min(n_segments - 1, int(math.ceil(off / segment_s)) - 1)
        for s in range(first, last + 1):
            if on < (s + 1) * segment_s and off > s * segment_s:
                active[s].add(cls)
    return active


def segment_detection_metrics(pred_events: Sequence, ref_events: Sequence,
                              duration_s: Optional[float] = None,
                              segment_s: float = 1.0) -> SegmentScores:
    pred = [_event_tuple(e) for e in pred_events]
    ref = [_event_tuple(e) for e in ref_events]
    if duration_s is None:
        duration_s = max([e[2] for e in pred + ref], default=0.0)
    n_seg = int(math.ceil(duration_s / segment_s - 1e-9))
    P = segment_activity(pred, n_seg, segment_s)
    R = segment_activity(ref, n_seg, segment_s)
    tp = fp = fn = S = D = I = n_ref = 0
    for p, r in zip(P, R):
        seg_tp, seg_fp, seg_fn = len(p & r), len(p - r), len(r - p)
        tp += seg_tp
        fp += seg_fp
        fn += seg_fn
        S += min(seg_fp, seg_fn)
        D += max(0, seg_fn - seg_fp)
        I += max(0, seg_fp - seg_fn)
        n_ref += len(r)
    return SegmentScores(tp, fp, fn, S, D, I, n_ref)


def events_from_frame_labels(frames: Sequence[Sequence[int]], frame_times: Sequence[float],
                             frame_rate_hz: float) -> List[Event]:
    """Runs of consecutive frames carrying a class become events.

    Frame ``f`` covers ``frame_times[f] -/+ half a hop``.
    """
    half = 0.5 / frame_rate_hz
    events: List[Event] = []
    open_runs: dict = {}
    for f, labels in enumerate(list(frames) + [[]]):
        labels = set(labels)
        for cls in list(open_runs):
            if cls not in labels:
                start = open_runs.pop(cls)
                events.append((cls, max(0.0, frame_times[start] - half), frame_times[f - 1] + half))
        for cls in labels:
            open_runs.setdefault(cls, f)
    events.sort(key=lambda e: (e[1], e[0]))
    return events


# -------------------------------------------------------------------- SCOF

def scof(scene, frame_rate_hz: float, frame_times: Optional[Sequence[float]] = None) -> float:
    """Percent of frames where >= 2 active events share a class.

    Frames default to ``f / frame_rate`` for ``f < duration * frame_rate``.
    """
    frames, total = scof_counts(scene, frame_rate_hz, frame_times)
    return 100.0 * frames / total if total else 0.0


def scof_counts(scene, frame_rate_hz: float, frame_times=None) -> Tuple[int, int]:
    if frame_times is None:
        frame_times = np.arange(int(round(scene.duration_s * frame_rate_hz))) / frame_rate_hz
    t = np.asarray(frame_times, dtype=float)
    n_classes = max([e.class_id for e in scene.events], default=-1) + 1
    counts = np.zeros((len(t), max(n_classes, 1)), dtype=int)
    for e in scene.events:
        counts[:, e.class_id] += (t >= e.onset_s) & (t < e.offset_s)
    return int(np.sum(np.any(counts >= 2, axis=1))), len(t)


# ------------------------------------------------------------------ report

@dataclass
class MetricsReport:
    """Sufficient statistics for every metric; sums across recordings."""

    de_sum: float = 0.0
    n_pairs: int = 0
    n_frames: int = 0
    n_frames_equal: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref_active: int = 0
    scof_frames: int = 0
    scof_total_frames: int = 0
    detection_mode: str = "class_agnostic"

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        if self.detection_mode != other.detection_mode:
            raise ValueError("cannot combine class-aware and class-agnostic reports")
        kw = {f.name: getattr(self, f.name) + getattr(other, f.name)
              for f in fields(self) if f.name != "detection_mode"}
        return MetricsReport(detection_mode=self.detection_mode, **kw)

    @property
    def doa_error_deg(self) -> Optional[float]:
        return self.de_sum / self.n_pairs if self.n_pairs else None

    @property
    def frame_recall(self) -> Optional[float]:
        return self.n_frames_equal / self.n_frames if self.n_frames else None

    @property
    def segment_scores(self) -> SegmentScores:
        return SegmentScores(self.tp, self.fp, self.fn, self.substitutions,
                             self.deletions, self.insertions, self.n_ref_active)

    @property
    def f_score(self) -> Optional[float]:
        return self.segment_scores.f_score

    @property
    def error_rate(self) -> Optional[float]:
        return self.segment_scores.error_rate

    @property
    def scof_percent(self) -> float:
        if not self.scof_total_frames:
            return 0.0
        return 100.0 * self.scof_frames / self.scof_total_frames

    def to_dict(self) -> dict:
        reasons = {}
        if self.doa_error_deg is None:
            reasons["doa_error_deg"] = "no frame has both predicted and reference DOAs"
        if self.frame_recall is None:
            reasons["frame_recall"] = "recording has no frames"
        if self.f_score is None:
            reasons["f_score"] = "no active segments in prediction or reference"
        if self.error_rate is None:
            reasons["error_rate"] = "reference has no active segments"
        return {
            "doa_error_deg": self.doa_error_deg,
            "frame_recall": self.frame_recall,
            "f_score": self.f_score,
            "error_rate": self.error_rate,
            "scof_percent": self.scof_percent,
            "n_frames": self.n_frames,
            "n_matched_pairs": self.n_pairs,
            "detection_mode": self.detection_mode,
            "reasons": reasons,
        }


def evaluate(pred: FramewiseDoas, ref: FramewiseDoas, pred_events: Sequence = (),
             ref_events: Sequence = (), duration_s: Optional[float] = None, scene=None,
             frame_times: Optional[Sequence[float]] = None,
             detection_mode: str = "class_agnostic") -> MetricsReport:
    """Score one recording. For class-agnostic mode all classes collapse to 0."""
    de_sum, n_pairs = doa_error_stats(pred, ref)
    pe = [_event_tuple(e) for e in pred_events]
    re_ = [_event_tuple(e) for e in ref_events]
    if detection_mode == "class_agnostic":
        pe = [(0, on, off) for _, on, off in pe]
        re_ = [(0, on, off) for _, on, off in re_]
    elif detection_mode != "class_aware":
        raise ValueError(f"unknown detection mode {detection_mode!r}")
    seg = segment_detection_metrics(pe, re_, duration_s)
    scof_frames = scof_total = 0
    if scene is not None:
        scof_frames, scof_total = scof_counts(scene, ref.frame_rate_hz, frame_times)
    return MetricsReport(
        de_sum=de_sum, n_pairs=n_pairs, n_frames=len(ref),
        n_frames_equal=int(np.sum(pred.counts() == ref.counts())),
        tp=seg.tp, fp=seg.fp, fn=seg.fn, substitutions=seg.substitutions,
        deletions=seg.deletions, insertions=seg.insertions, n_ref_active=seg.n_ref,
        scof_frames=scof_frames, scof_total_frames=scof_total, detection_mode=detection_mode)
