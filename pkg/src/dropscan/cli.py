"""Command-line interface: simulation, drop injection, alignment, training,
detection, evaluation, gradient checking, and the four-row experiment grid.

Every subcommand takes --seed and writes a manifest.json into its output
directory; re-running with the same manifest reproduces the outputs.
Exit codes: 0 success, 1 usage/config error, 2 runtime/data error.

Heavy imports happen inside the command functions so that --threads can pin
the BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(out_dir, subcommand, config, inputs=(), outputs=()):
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def _require(condition, field, message):
    if not condition:
        raise UsageError(f"config field '{field}': {message}")


# ------------------------------------------------------------------
# simulate
# ------------------------------------------------------------------

SCENE_CONFIG_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "n_scenes": 1,
    "n_devices": 6,
    "duration_range_s": [5.0, 15.0],
    "snr_range_db": [5.0, 25.0],
    "t60_range_s": [0.4, 0.8],
    "max_reflection_order": 6,
    "sample_rate_hz": 16000,
}


def _load_scene_config(path):
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {path}: {e}")
    unknown = set(user) - set(SCENE_CONFIG_DEFAULTS)
    if unknown:
        raise UsageError(f"config field '{sorted(unknown)[0]}': unknown field")
    cfg = {**SCENE_CONFIG_DEFAULTS, **user}
    _require(cfg["n_devices"] >= 1, "n_devices", "must be >= 1")
    _require(cfg["n_scenes"] >= 1, "n_scenes", "must be >= 1")
    dur = cfg["duration_range_s"]
    _require(isinstance(dur, list) and len(dur) == 2 and 0 < dur[0] <= dur[1],
             "duration_range_s", "must be [lo, hi] with 0 < lo <= hi")
    t60 = cfg["t60_range_s"]
    _require(t60[0] > 0 and t60[0] <= t60[1], "t60_range_s", "must be positive [lo, hi]")
    _require(cfg["sample_rate_hz"] > 0, "sample_rate_hz", "must be positive")
    _require(cfg["max_reflection_order"] >= 0, "max_reflection_order", "must be >= 0")
    return cfg


def cmd_simulate(args) -> int:
    from .scene_sim import random_scene_config, render_scene, save_scene

    cfg = _load_scene_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    outputs = []
    for i in range(cfg["n_scenes"]):
        scene_cfg = random_scene_config(
            seed=[cfg["seed"], i],
            n_devices=cfg["n_devices"],
            duration_range=tuple(cfg["duration_range_s"]),
            snr_range=tuple(cfg["snr_range_db"]),
            t60_range=tuple(cfg["t60_range_s"]),
            max_reflection_order=cfg["max_reflection_order"],
            sample_rate_hz=cfg["sample_rate_hz"],
        )
        scene = render_scene(scene_cfg)
        scene_dir = out / f"scene_{i:03d}" if cfg["n_scenes"] > 1 else out
        save_scene(scene, scene_dir)
        outputs.append(scene_dir)
        print(f"wrote {scene_dir} ({cfg['n_devices']} devices)")
    _write_manifest(out, "simulate", cfg, inputs=[args.config], outputs=outputs)
    return 0


# ------------------------------------------------------------------
# inject
# ------------------------------------------------------------------


def cmd_inject(args) -> int:
    import numpy as np

    from .drop_injector import DropDistribution, inject_drops_into_channels
    from .scene_sim import load_scene_audio
    from .signal_core import write_wav

    channels, sidecar = load_scene_audio(args.scene_dir)
    dist = DropDistribution(mean=args.mean_ms, std=args.std_ms, left_cut=args.cut_ms)
    rng = np.random.default_rng(args.seed)
    onset_range = None
    if args.onset_margin_s > 0:
        duration = sidecar["duration_s"]
        onset_range = (args.onset_margin_s, duration - args.onset_margin_s)
    channels, events = inject_drops_into_channels(
        channels, args.n_drops, dist, rng, onset_range=onset_range
    )

    out = Path(args.out or args.scene_dir)
    out.mkdir(parents=True, exist_ok=True)
    fs = sidecar["sample_rate_hz"]
    for di, device_channels in enumerate(channels):
        n = min(len(ch) for ch in device_channels)
        stacked = np.stack([ch.samples[:n] for ch in device_channels], axis=1)
        write_wav(out / f"device_{di + 1}.wav", stacked, fs)
    sidecar["drop_events"] = sidecar.get("drop_events", []) + [
        {
            "device_id": e.device_id,
            "onset_sample": e.onset_sample,
            "duration_samples": e.duration_samples,
        }
        for e in events
    ]
    with open(out / "ground_truth.json", "w") as f:
        json.dump(sidecar, f, indent=2)
    config = {
        "n_drops": args.n_drops, "seed": args.seed, "mean_ms": args.mean_ms,
        "std_ms": args.std_ms, "cut_ms": args.cut_ms,
        "onset_margin_s": args.onset_margin_s,
    }
    _write_manifest(out, "inject", config, inputs=[args.scene_dir], outputs=[out])
    print(f"injected {len(events)} drops -> {out}")
    return 0


# ------------------------------------------------------------------
# xcorr
# ------------------------------------------------------------------


def cmd_xcorr(args) -> int:
    import csv

    from .scene_sim import load_scene_audio
    from .signal_core import StftConfig, spectrogram
    from .xcorr_align import XcorrConfig, scan_device

    channels, sidecar = load_scene_audio(args.scene_dir)
    if len(channels) < 2:
        raise UsageError("xcorr needs a scene with at least 2 devices")
    stft_cfg = StftConfig(args.frame_ms)
    xcfg = XcorrConfig(
        pattern_s=args.pattern_s, step_s=args.step_s, radius_s=args.radius_s,
        min_jump_frames=args.min_jump,
    )
    specs = [spectrogram(dev[0], stft_cfg) for dev in channels]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    candidates = {}
    n_rows = 0
    with open(out / "shifts.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "device_id", "reference_id", "anchor_sample",
            "best_shift_frames", "peak_ncc",
        ])
        for j in range(len(channels)):
            scan = scan_device(specs, j, xcfg)
            for k, track in zip(scan.reference_devices, scan.per_reference):
                for a, s, p in zip(track.anchor_samples(), track.shifts, track.peaks):
                    writer.writerow([j + 1, k + 1, int(a), s, f"{p:.6f}"])
                    n_rows += 1
            candidates[str(j + 1)] = [
                {
                    "start_sample": c.start_sample,
                    "end_sample": c.end_sample,
                    "estimated_drop_samples": c.estimated_drop_samples,
                    "confidence": c.confidence,
                }
                for c in scan.candidates
            ]
    with open(out / "candidates.json", "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "devices": candidates}, f, indent=2)
    config = {
        "frame_ms": args.frame_ms, "pattern_s": args.pattern_s,
        "step_s": args.step_s, "radius_s": args.radius_s, "min_jump": args.min_jump,
    }
    _write_manifest(out, "xcorr", config, inputs=[args.scene_dir], outputs=[out])
    n_cands = sum(len(v) for v in candidates.values())
    print(f"wrote {n_rows} shift rows, {n_cands} candidate intervals -> {out}")
    return 0


# ------------------------------------------------------------------
# train / evaluate / detect / gradcheck / table1
# ------------------------------------------------------------------


def _experiment_config(args):
    from .eval_harness import ExperimentConfig

    kwargs = dict(
        preset=args.preset, frame_ms=args.frame_ms, combiner=args.combiner,
        seed=args.seed, lr=args.lr, epochs=args.epochs,
    )
    for name in ("train_scenes", "dev_scenes", "eval_scenes", "stage1_pairs",
                 "eval_min_positives"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


def cmd_train(args) -> int:
    from .eval_harness import build_stage1_dataset, build_stage2_dataset
    from .neural.model import load_checkpoint, save_checkpoint
    from .neural.training import TrainConfig, train

    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    stage1 = build_stage1_dataset(cfg) if args.stages in ("1", "both") else None
    corpus = build_stage2_dataset(cfg) if args.stages in ("2", "both") else None
    tc = TrainConfig(
        epochs=cfg.epochs, stage1_batch=cfg.stage1_batch,
        stage2_batch=cfg.stage2_batch, lr=cfg.lr, preset=cfg.preset,
        n_bins=cfg.n_bins(), use_attention=not args.no_attention, seed=cfg.seed,
    )
    params = load_checkpoint(args.init) if args.init else None
    params, metrics = train(
        tc, stage1, corpus.train_pairs if corpus else None,
        params=params,
        dev_pairs=corpus.dev_pairs if corpus else None,
        stft_cfg=cfg.stft(), log=print,
    )
    ckpt = out / "model.npz"
    save_checkpoint(params, ckpt)
    with open(out / "metrics.json", "w") as f:
        json.dump([asdict(m) for m in metrics], f, indent=2)
    _write_manifest(out, "train", {**asdict(cfg), "stages": args.stages,
                                   "no_attention": args.no_attention},
                    outputs=[ckpt])
    print(f"saved checkpoint -> {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    import csv

    from .detector import Combiner
    from .eval_harness import build_stage2_dataset, evaluate_windows
    from .neural.model import load_checkpoint

    cfg = _experiment_config(args)
    params = load_checkpoint(args.checkpoint)
    corpus = build_stage2_dataset(cfg)
    report, decisions = evaluate_windows(
        params, corpus.eval_windows, Combiner(cfg.combiner)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["precision", "recall", "f1", "tp", "fp", "fn", "tn"])
        writer.writerow([
            f"{report.precision:.4f}", f"{report.recall:.4f}", f"{report.f1:.4f}",
            report.tp, report.fp, report.fn, report.tn,
        ])
    from .detector import write_report_json
    write_report_json(out / "decisions.json", decisions)
    _write_manifest(out, "evaluate", asdict(cfg),
                    inputs=[args.checkpoint], outputs=[out])
    print(f"P {report.precision:.3f} R {report.recall:.3f} F1 {report.f1:.3f}")
    return 0


def cmd_detect(args) -> int:
    from .detector import Combiner, detect, write_report_json, write_summary_csv
    from .neural.model import load_checkpoint
    from .scene_sim import load_scene_audio
    from .signal_core import StftConfig
    from .xcorr_align import XcorrConfig

    channels, sidecar = load_scene_audio(args.scene_dir)
    params = load_checkpoint(args.checkpoint)
    decisions = detect(
        channels, params,
        combiner=Combiner(args.combiner),
        stft_cfg=StftConfig(args.frame_ms),
        xcorr_cfg=XcorrConfig(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "report.json", decisions)
    write_summary_csv(out / "summary.csv", decisions)
    _write_manifest(out, "detect",
                    {"combiner": args.combiner, "frame_ms": args.frame_ms},
                    inputs=[args.scene_dir, args.checkpoint], outputs=[out])
    positives = sum(d.label for d in decisions)
    print(f"{len(decisions)} window decisions, {positives} positive -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .neural.model import ModelConfig, init_params
    from .neural.training import gradient_check_model

    config = ModelConfig.preset(args.preset)
    params = init_params(config, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    x_hyp = rng.standard_normal((2, 13, config.n_bins))
    x_ref = rng.standard_normal((2, 13, config.n_bins))
    labels = np.array([1.0, 0.0])
    err = gradient_check_model(
        params, x_hyp, x_ref, labels, max_coords=args.coords_per_array,
        seed=args.seed,
    )
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < 1e-4 else 2


def cmd_table1(args) -> int:
    from .eval_harness import format_table1_markdown, run_table1, write_table1_csv

    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_table1(cfg, log=print)
    write_table1_csv(out / "table1.csv", results)
    table = format_table1_markdown(results)
    (out / "table1.md").write_text(table + "\n")
    _write_manifest(out, "table1", asdict(cfg), outputs=[out])
    print(table)
    return 0


# ------------------------------------------------------------------
# parser
# ------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--frame-ms", type=int, choices=[32, 64], default=32)
    p.add_argument("--combiner", choices=["mean", "median", "majority"],
                   default="mean")
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dropscan",
                     description="Sample-drop detection for multi-device recordings")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render synthetic scenes from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inject", help="inject sample drops into a saved scene")
    p.add_argument("scene_dir")
    p.add_argument("--out", default=None)
    p.add_argument("--n-drops", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean-ms", type=float, default=600.0)
    p.add_argument("--std-ms", type=float, default=150.0)
    p.add_argument("--cut-ms", type=float, default=50.0)
    p.add_argument("--onset-margin-s", type=float, default=0.0)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("xcorr", help="shift tracks and candidate intervals")
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--frame-ms", type=int, choices=[32, 64], default=32)
    p.add_argument("--pattern-s", type=float, default=1.0)
    p.add_argument("--step-s", type=float, default=0.5)
    p.add_argument("--radius-s", type=float, default=1.25)
    p.add_argument("--min-jump", type=int, default=2)
    p.set_defaults(func=cmd_xcorr)

    p = sub.add_parser("train", help="train the drop classifier")
    p.add_argument("--out", required=True)
    p.add_argument("--stages", choices=["1", "2", "both"], default="both")
    p.add_argument("--init", default=None, help="warm-start checkpoint")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--train-scenes", type=int, default=None)
    p.add_argument("--dev-scenes", type=int, default=None)
    p.add_argument("--eval-scenes", type=int, default=None)
    p.add_argument("--stage1-pairs", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="P/R/F1 of a checkpoint on eval scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-scenes", type=int, default=None)
    p.add_argument("--dev-scenes", type=int, default=None)
    p.add_argument("--eval-scenes", type=int, default=None)
    p.add_argument("--eval-min-positives", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="find drops in a saved scene")
    p.add_argument("scene_dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--combiner", choices=["mean", "median", "majority"],
                   default="mean")
    p.add_argument("--frame-ms", type=int, choices=[32, 64], default=32)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords-per-array", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("table1", help="run the four-configuration experiment grid")
    p.add_argument("--out", required=True)
    p.add_argument("--train-scenes", type=int, default=None)
    p.add_argument("--dev-scenes", type=int, default=None)
    p.add_argument("--eval-scenes", type=int, default=None)
    p.add_argument("--stage1-pairs", type=int, default=None)
    p.add_argument("--eval-min-positives", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_table1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
