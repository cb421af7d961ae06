"""Command line entry point: ``seldt <command> [flags]``.

Human-readable results go to stdout. Failures print a single line to
stderr of the form ``seldt: error stage=<stage> type=<exc> msg="..."``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .pipeline import (
    DEFAULT_SNR_DB,
    PipelineConfig,
    StageError,
    cmd_estimate,
    cmd_eval,
    cmd_pipeline,
    cmd_plot_data,
    cmd_synth,
    cmd_track,
)
from .scene import PRESETS


def _common_synth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="ansyn_like")
    p.add_argument("--overlap", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--recordings", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-db", type=float, default=DEFAULT_SNR_DB,
                   help="sensor noise SNR; use 'inf' for a noiseless render")
    p.add_argument("--wav-format", choices=("float32", "pcm24"), default="float32")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seldt", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"seldt {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesise a FOA dataset")
    _common_synth(p)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("estimate", help="frame-wise MUSIC DOAs")
    p.add_argument("dataset")
    p.add_argument("--counting", choices=("oracle", "mdl"), default="oracle")
    p.add_argument("--grid", type=float, help="grid resolution in degrees")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("track", help="particle-filter tracking of DOA CSVs")
    p.add_argument("doas")
    p.add_argument("--tracker-config")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("predictions")
    p.add_argument("dataset")
    p.add_argument("--out", help="report path (default <predictions>/report.json)")

    p = sub.add_parser("plot-data", help="long-format CSV for trajectory plots")
    p.add_argument("dataset")
    p.add_argument("recording")
    p.add_argument("--tracks")
    p.add_argument("--doas")
    p.add_argument("--out")

    p = sub.add_parser("pipeline", help="synth, estimate, track, eval and plot-data")
    _common_synth(p)
    p.add_argument("--counting", choices=("oracle", "mdl"), default="oracle")
    p.add_argument("--grid", type=float)
    p.add_argument("--tracker-config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)
    return ap


def _summary(report_path: Path) -> str:
    rep = json.loads(report_path.read_text())
    agg = rep["aggregate"]
    fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
    return (f"DE={fmt(agg['doa_error_deg'])} FR={fmt(agg['frame_recall'])} "
            f"F={fmt(agg['f_score'])} ER={fmt(agg['error_rate'])} SCOF={fmt(agg['scof_percent'])}")


def _run(args) -> None:
    snr = getattr(args, "snr_db", None)
    if snr is not None and snr == float("inf"):
        snr = None
    if args.command == "synth":
        out = cmd_synth(args.preset, args.overlap, args.recordings, args.seed, args.out,
                        args.jobs, snr, wav_format=args.wav_format)
        print(f"dataset written to {out}")
    elif args.command == "estimate":
        print(f"DOAs written to {cmd_estimate(args.dataset, args.counting, args.grid, args.out, args.jobs)}")
    elif args.command == "track":
        print(f"tracks written to {cmd_track(args.doas, args.tracker_config, args.out, args.jobs)}")
    elif args.command == "eval":
        path = cmd_eval(args.predictions, args.dataset, args.out)
        print(f"{path}: {_summary(path)}")
    elif args.command == "plot-data":
        print(f"plot data written to {cmd_plot_data(args.dataset, args.recording, args.tracks, args.doas, args.out)}")
    elif args.command == "pipeline":
        cfg = PipelineConfig(preset=args.preset, overlap=args.overlap, counting=args.counting,
                             grid_resolution_deg=args.grid, recordings=args.recordings,
                             seed=args.seed, tracker_config=args.tracker_config, out=args.out,
                             jobs=args.jobs, snr_db=snr, wav_format=args.wav_format)
        out = cmd_pipeline(cfg)
        print(f"music:   {_summary(out / 'report_music.json')}")
        print(f"tracked: {_summary(out / 'report_tracks.json')}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except StageError as exc:
        _report(exc.stage, exc.__cause__ or exc)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        _report(args.command, exc)
        return 1
    return 0


def _report(stage: str, exc: BaseException) -> None:
    msg = str(exc).replace('"', "'").replace("\n", " ")
    print(f'seldt: error stage={stage} type={type(exc).__name__} msg="{msg}"', file=sys.stderr)
