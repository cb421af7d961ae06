"""Dataset-level stages: synth -> estimate -> track -> eval -> plot-data.

Every stage reads and writes plain files so stages can be run separately
from the command line. Per-recording work runs in a bounded process pool;
each recording's seed is derived from (master seed, recording index), so
results do not depend on the pool width.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .io import (
    read_clip,
    read_doa_csv,
    read_metadata_csv,
    read_reference_csv,
    read_track_csv,
    sniff_prediction_kind,
    write_doa_csv,
    write_metadata_csv,
    write_plot_csv,
    write_reference_csv,
    write_track_csv,
    write_wav,
)
from .metrics import MetricsReport, evaluate, events_from_frame_labels
from .music import FramewiseDoas, Mdl, Oracle, estimate_frame_doas
from .scene import (
    PRESETS,
    SceneSpec,
    SourceBank,
    add_sensor_noise,
    default_clock,
    preset_config,
    reference_frames,
    render_scene,
    sample_scene,
)
from .tracker import RBMCDATracker, TrackerConfig

log = logging.getLogger(__name__)

DEFAULT_SNR_DB = 20.0
JOBS_ENV = "SELDT_BENCH_JOBS"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class PipelineConfig:
    preset: str = "ansyn_like"
    overlap: int = 1
    counting: str = "oracle"
    grid_resolution_deg: Optional[float] = None
    recordings: int = 10
    seed: int = 0
    tracker_config: Optional[str] = None
    out: str = "out"
    jobs: Optional[int] = None
    snr_db: Optional[float] = DEFAULT_SNR_DB
    sample_rate: int = 24000
    wav_format: str = "float32"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.overlap not in (1, 2, 3):
            raise ValueError("overlap must be 1, 2 or 3")
        if self.counting not in ("oracle", "mdl"):
            raise ValueError("counting must be 'oracle' or 'mdl'")
        if self.recordings < 1:
            raise ValueError("recordings must be >= 1")
        if self.grid_resolution_deg is None:
            self.grid_resolution_deg = default_grid(self.preset)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_grid(preset: str) -> float:
    """10 deg for stationary scenes, 1 deg when sources move."""
    return 1.0 if PRESETS[preset]["moving"] else 10.0


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs is None:
        env = os.environ.get(JOBS_ENV)
        jobs = int(env) if env else 1
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    return jobs


def recording_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path, stage: str) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise StageError(stage, f"{path} not found")
    return json.loads(path.read_text())


def default_tracker_config(grid_resolution_deg: float, seed: int = 0) -> TrackerConfig:
    """Defaults with measurement noise scaled to the DOA grid.

    MUSIC on a grid that contains the true direction is usually exact, so a
    fraction of the grid step keeps one-cell outliers out of the track.
    """
    return TrackerConfig(measurement_noise_deg=max(0.2 * grid_resolution_deg, 1.0),
                         process_noise_q=100.0, rng_seed=seed)


# ------------------------------------------------------------------- synth

def _synth_one(job: dict) -> dict:
    t0 = time.perf_counter()
    cfg = preset_config(job["preset"], job["overlap"], job["seed"])
    scene = sample_scene(cfg)
    clip = render_scene(scene, SourceBank(job["sample_rate"], cfg.n_classes))
    clip = add_sensor_noise(clip, job["snr_db"], np.random.default_rng([job["seed"], 1]))
    clock = default_clock(job["sample_rate"])
    n_frames = clock.n_frames(clip.n_samples)
    root = Path(job["root"])
    name = job["name"]
    write_wav(root / "recordings" / f"{name}.wav", clip, job["wav_format"])
    write_metadata_csv(root / "metadata" / f"{name}.csv", scene.events)
    write_reference_csv(root / "reference" / f"{name}_frames.csv",
                        reference_frames(scene, clock.times(n_frames)))
    return {
        "name": name,
        "seed": job["seed"],
        "wav": f"recordings/{name}.wav",
        "metadata": f"metadata/{name}.csv",
        "reference": f"reference/{name}_frames.csv",
        "n_samples": clip.n_samples,
        "n_frames": n_frames,
        "n_events": len(scene.events),
        "duration_s": scene.duration_s,
        "max_overlap": scene.max_overlap,
        "n_classes": scene.n_classes,
        "elevation_range": list(scene.elevation_range),
        "_seconds": time.perf_counter() - t0,
    }


def cmd_synth(preset: str, overlap: int, recordings: int, seed: int, out, jobs=None,
              snr_db: Optional[float] = DEFAULT_SNR_DB, sample_rate: int = 24000,
              wav_format: str = "float32") -> Path:
    if preset not in PRESETS:
        raise StageError("synth", f"unknown preset {preset!r}")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    jobs_n = resolve_jobs(jobs)
    work = [dict(preset=preset, overlap=overlap, seed=recording_seed(seed, i),
                 name=f"rec_{i:03d}", root=str(root), sample_rate=sample_rate,
                 snr_db=snr_db, wav_format=wav_format) for i in range(recordings)]
    t0 = time.perf_counter()
    try:
        recs = _map(_synth_one, work, jobs_n)
    except ValueError as exc:
        raise StageError("synth", str(exc)) from exc
    clock = default_clock(sample_rate)
    _write_json(root / "manifest.json", {
        "tool": "seldt",
        "version": __version__,
        "stage": "synth",
        "config": dict(preset=preset, overlap=overlap, recordings=recordings, seed=seed,
                       snr_db=snr_db, sample_rate=sample_rate, wav_format=wav_format),
        "analysis": dict(sample_rate=sample_rate, window_len=clock.window_len, hop=clock.hop,
                         frame_rate_hz=clock.frame_rate_hz),
        "recordings": [{k: v for k, v in r.items() if not k.startswith("_")} for r in recs],
        "timings_s": {"total": time.perf_counter() - t0,
                      **{r["name"]: r["_seconds"] for r in recs}},
    })
    return root


# ---------------------------------------------------------------- estimate

def _load_reference(root: Path, rec: dict) -> List[list]:
    return read_reference_csv(root / rec["reference"], rec["n_frames"])


def _estimate_one(job: dict) -> dict:
    t0 = time.perf_counter()
    root, rec = Path(job["root"]), job["rec"]
    clip = read_clip(root / rec["wav"])
    if job["counting"] == "oracle":
        ref_path = root / rec["reference"]
        if not ref_path.exists():
            raise StageError("estimate", f"oracle counting needs {ref_path}")
        mode = Oracle([len(f) for f in _load_reference(root, rec)])
    else:
        mode = Mdl()
    doas = estimate_frame_doas(clip, mode, job["grid"], tuple(rec["elevation_range"]))
    write_doa_csv(Path(job["out"]) / f"{rec['name']}.csv", doas)
    return {"name": rec["name"], "doas": f"{rec['name']}.csv",
            "_seconds": time.perf_counter() - t0}


def cmd_estimate(dataset, counting: str, grid: Optional[float], out=None, jobs=None) -> Path:
    root = Path(dataset)
    manifest = _read_manifest(root, "estimate")
    if counting not in ("oracle", "mdl"):
        raise StageError("estimate", f"unknown counting mode {counting!r}")
    if grid is None:
        grid = default_grid(manifest["config"]["preset"])
    out_dir = Path(out) if out is not None else root.parent / f"doas_{counting}"
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [dict(root=str(root), rec=r, counting=counting, grid=grid, out=str(out_dir))
            for r in manifest["recordings"]]
    t0 = time.perf_counter()
    recs = _map(_estimate_one, work, resolve_jobs(jobs))
    _write_json(out_dir / "manifest.json", {
        "tool": "seldt",
        "version": __version__,
        "stage": "estimate",
        "method": "MUS_GT" if counting == "oracle" else "MUS_MDL",
        "config": dict(dataset=str(root), counting=counting, grid_resolution_deg=grid),
        "analysis": manifest["analysis"],
        "recordings": [{**r0, "doas": r["doas"]} for r0, r in zip(manifest["recordings"], recs)],
        "timings_s": {"total": time.perf_counter() - t0,
                      **{r["name"]: r["_seconds"] for r in recs}},
    })
    return out_dir


# ------------------------------------------------------------------- track

def _track_one(job: dict) -> dict:
    t0 = time.perf_counter()
    rec = job["rec"]
    doas = read_doa_csv(Path(job["doas_dir"]) / rec["doas"], rec["n_frames"],
                        job["frame_rate_hz"])
    cfg = TrackerConfig(**job["tracker"])
    tracks = RBMCDATracker(cfg).run(doas)
    write_track_csv(Path(job["out"]) / f"{rec['name']}.csv", tracks)
    return {"name": rec["name"], "tracks": f"{rec['name']}.csv", "n_tracks": len(tracks.tracks),
            "_seconds": time.perf_counter() - t0}


def resolve_tracker_config(path: Optional[str], grid: float) -> TrackerConfig:
    """Grid-scaled defaults, overridden by whatever the file sets."""
    base = default_tracker_config(grid)
    if path is None:
        return base
    return dataclasses.replace(base, **TrackerConfig.parse_file(path))


def cmd_track(doas_dir, tracker_config: Optional[str] = None, out=None, jobs=None) -> Path:
    src = Path(doas_dir)
    manifest = _read_manifest(src, "track")
    grid = manifest["config"]["grid_resolution_deg"]
    try:
        cfg = resolve_tracker_config(tracker_config, grid)
    except (OSError, ValueError) as exc:
        raise StageError("track", str(exc)) from exc
    out_dir = Path(out) if out is not None else src.parent / f"tracks_{src.name}"
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_rate = manifest["analysis"]["frame_rate_hz"]
    work = []
    for i, rec in enumerate(manifest["recordings"]):
        kw = dataclasses.asdict(cfg)
        kw["rng_seed"] = recording_seed(cfg.rng_seed, i)
        work.append(dict(rec=rec, doas_dir=str(src), frame_rate_hz=frame_rate,
                         tracker=kw, out=str(out_dir)))
    t0 = time.perf_counter()
    recs = _map(_track_one, work, resolve_jobs(jobs))
    (out_dir / "tracker.cfg").write_text(cfg.to_text())
    _write_json(out_dir / "manifest.json", {
        "tool": "seldt",
        "version": __version__,
        "stage": "track",
        "method": manifest.get("method", "MUS") + "^PF",
        "config": {**manifest["config"], "doas": str(src), "tracker": dataclasses.asdict(cfg)},
        "analysis": manifest["analysis"],
        "recordings": [{**r0, "tracks": r["tracks"], "n_tracks": r["n_tracks"]}
                       for r0, r in zip(manifest["recordings"], recs)],
        "timings_s": {"total": time.perf_counter() - t0,
                      **{r["name"]: r["_seconds"] for r in recs}},
    })
    return out_dir


# -------------------------------------------------------------------- eval

def _scene_from(root: Path, rec: dict) -> SceneSpec:
    events = read_metadata_csv(root / rec["metadata"])
    return SceneSpec(rec["duration_s"], rec["max_overlap"], rec["n_classes"],
                     tuple(rec["elevation_range"]), tuple(events), rec["seed"])


def evaluate_recording(pred_path: Path, root: Path, rec: dict, analysis: dict) -> MetricsReport:
    n_frames = rec["n_frames"]
    rate = analysis["frame_rate_hz"]
    clock = default_clock(analysis["sample_rate"])
    times = clock.times(n_frames)
    scene = _scene_from(root, rec)
    ref_items = _load_reference(root, rec)
    ref = FramewiseDoas([[d for _, d in f] for f in ref_items], rate)
    kind = sniff_prediction_kind(pred_path)
    mode = "class_agnostic"
    if kind == "doa":
        pred = read_doa_csv(pred_path, n_frames, rate)
        pred_events = events_from_frame_labels([[0] if f else [] for f in pred.frames], times, rate)
    elif kind == "track":
        tracks = read_track_csv(pred_path)
        pred = tracks.to_framewise(n_frames, rate)
        half = 0.5 / rate
        pred_events = [(0, max(0.0, times[t.birth_frame] - half),
                        times[min(t.death_frame, n_frames - 1)] + half) for t in tracks.tracks]
    elif kind == "reference":
        # externally produced class-labelled frame-wise predictions
        items = read_reference_csv(pred_path, n_frames)
        pred = FramewiseDoas([[d for _, d in f] for f in items], rate)
        pred_events = events_from_frame_labels([[c for c, _ in f] for f in items], times, rate)
        mode = "class_aware"
    else:
        raise StageError("eval", f"{pred_path}: unrecognised prediction CSV header")
    return evaluate(pred, ref, pred_events, scene.events, scene.duration_s, scene, times, mode)


def cmd_eval(pred_dir, dataset, out=None) -> Path:
    pred_dir, root = Path(pred_dir), Path(dataset)
    manifest = _read_manifest(root, "eval")
    names = [r["name"] for r in manifest["recordings"]]
    found = sorted(p.stem for p in pred_dir.glob("*.csv"))
    if sorted(names) != found:
        missing = sorted(set(names) - set(found))
        extra = sorted(set(found) - set(names))
        raise StageError("eval", f"recording set mismatch: missing={missing} extra={extra}")
    per: Dict[str, MetricsReport] = {}
    for rec in manifest["recordings"]:
        per[rec["name"]] = evaluate_recording(pred_dir / f"{rec['name']}.csv", root, rec,
                                              manifest["analysis"])
    total = sum(per.values(), MetricsReport(detection_mode=next(iter(per.values())).detection_mode))
    report = {"aggregate": total.to_dict(),
              "recordings": {k: v.to_dict() for k, v in per.items()}}
    out_path = Path(out) if out is not None else pred_dir / "report.json"
    _write_json(out_path, report)
    return out_path


# --------------------------------------------------------------- plot data

def cmd_plot_data(dataset, recording: str, tracks_dir=None, doas_dir=None, out=None) -> Path:
    root = Path(dataset)
    manifest = _read_manifest(root, "plot-data")
    recs = {r["name"]: r for r in manifest["recordings"]}
    if recording not in recs:
        raise StageError("plot-data", f"unknown recording {recording!r}")
    rec = recs[recording]
    rate = manifest["analysis"]["frame_rate_hz"]
    rows = [("reference", f, d) for f, items in enumerate(_load_reference(root, rec))
            for _, d in items]
    if doas_dir is not None:
        doas = read_doa_csv(Path(doas_dir) / f"{recording}.csv", rec["n_frames"], rate)
        rows += [("music_raw", f, d) for f, items in enumerate(doas.frames) for d in items]
    if tracks_dir is not None:
        tracks = read_track_csv(Path(tracks_dir) / f"{recording}.csv")
        rows += [(f"track_{t.track_id}", t.birth_frame + i, d)
                 for t in tracks.tracks for i, d in enumerate(t.doas)]
    out_path = Path(out) if out is not None else root.parent / "plots" / f"{recording}.csv"
    write_plot_csv(out_path, rows)
    return out_path


# ---------------------------------------------------------------- pipeline

def cmd_pipeline(config: PipelineConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def stage(name, fn, *args, **kw):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            result = fn(*args, **kw)
        except StageError:
            raise
        except (OSError, ValueError, KeyError) as exc:
            raise StageError(name, str(exc)) from exc
        timings[name] = time.perf_counter() - t0
        return result

    dataset = stage("synth", cmd_synth, config.preset, config.overlap, config.recordings,
                    config.seed, out / "dataset", config.jobs, config.snr_db,
                    config.sample_rate, config.wav_format)
    doas = stage("estimate", cmd_estimate, dataset, config.counting, config.grid_resolution_deg,
                 out / "doas", config.jobs)
    tracks = stage("track", cmd_track, doas, config.tracker_config, out / "tracks", config.jobs)
    music_report = stage("eval", cmd_eval, doas, dataset, out / "report_music.json")
    track_report = stage("eval", cmd_eval, tracks, dataset, out / "report_tracks.json")
    combined = {"music": json.loads(music_report.read_text()),
                "tracked": json.loads(track_report.read_text())}
    _write_json(out / "report.json", combined)
    plots = []
    for rec in json.loads((dataset / "manifest.json").read_text())["recordings"]:
        plots.append(str(stage("plot-data", cmd_plot_data, dataset, rec["name"], tracks, doas,
                               out / "plots" / f"{rec['name']}.csv").relative_to(out)))
    _write_json(out / "manifest.json", {
        "tool": "seldt",
        "version": __version__,
        "stage": "pipeline",
        "config": config.to_dict(),
        "files": {"dataset": "dataset/manifest.json", "doas": "doas/manifest.json",
                  "tracks": "tracks/manifest.json", "report": "report.json",
                  "report_music": "report_music.json", "report_tracks": "report_tracks.json",
                  "plots": plots},
        "timings_s": timings,
    })
    return out
