"""End-to-end decision pipeline: coarse candidate intervals from the
cross-correlation stage, 1-second window pairs against every other device,
per-pair drop probabilities from the classifier, and a combined per-device
verdict."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .neural.model import ModelParams, forward_pair
from .signal_core import StftConfig, Waveform, spectrogram
from .xcorr_align import XcorrConfig, scan_device

COMBINER_KINDS = ("mean", "median", "majority")


@dataclass(frozen=True)
class Combiner:
    """How per-reference probabilities become one score.

    mean/median act on raw probabilities; majority on per-pair thresholded
    decisions (the score is then the positive fraction).
    """

    kind: str = "mean"
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in COMBINER_KINDS:
            raise ValueError(f"combiner kind must be one of {COMBINER_KINDS}")

    def combine(self, probs) -> float:
        probs = np.asarray(probs, dtype=float)
        if probs.size == 0:
            raise ValueError("no per-reference probabilities to combine")
        if self.kind == "mean":
            return float(np.mean(probs))
        if self.kind == "median":
            return float(np.median(probs))
        return float(np.mean(probs >= self.threshold))


@dataclass
class DeviceDecision:
    device_id: int
    window_start: int
    window_end: int
    per_reference_probs: list[float]
    combined_score: float
    label: int


def decide(probs, combiner: Combiner, device_id: int, start: int, end: int) -> DeviceDecision:
    score = combiner.combine(probs)
    return DeviceDecision(
        device_id=device_id,
        window_start=start,
        window_end=end,
        per_reference_probs=[float(p) for p in probs],
        combined_score=score,
        label=int(score >= 0.5),
    )


def classify_device(
    params_or_fn,
    windows: dict[int, Waveform],
    device: int,
    combiner: Combiner,
    stft_cfg: StftConfig | None = None,
    window_start: int = 0,
) -> DeviceDecision:
    """Combined decision for one device given synchronized 1-s windows.

    ``windows`` maps device index -> window covering the same absolute time
    range; every device other than ``device`` serves as a reference.
    """
    refs = [k for k in windows if k != device]
    if not refs:
        raise ValueError("need at least one reference device")
    stft_cfg = stft_cfg or StftConfig(32)
    classify = _as_classifier(params_or_fn)
    hyp_feats = spectrogram(windows[device], stft_cfg).values
    ref_feats = np.stack([spectrogram(windows[k], stft_cfg).values for k in refs])
    hyp_batch = np.broadcast_to(hyp_feats, ref_feats.shape).copy()
    probs = classify(hyp_batch, ref_feats)
    n = len(windows[device])
    return decide(probs, combiner, device + 1, window_start, window_start + n)


def _as_classifier(params_or_fn):
    if isinstance(params_or_fn, ModelParams):
        params = params_or_fn

        def classify(hyp_feats, ref_feats):
            p, _ = forward_pair(hyp_feats, ref_feats, params)
            return p

        return classify
    return params_or_fn


def tile_windows(start: int, end: int, window: int, limit: int):
    """1-s windows at 50% overlap covering [start, end), within [0, limit)."""
    hop = window // 2
    s = max(0, start)
    starts = []
    while s + window <= min(end + hop, limit):
        starts.append(s)
        if s + window >= end:
            break
        s += hop
    return starts


def detect(
    channels: list[list[Waveform]],
    params_or_fn,
    combiner: Combiner | None = None,
    stft_cfg: StftConfig | None = None,
    xcorr_cfg: XcorrConfig | None = None,
    window_s: float = 1.0,
) -> list[DeviceDecision]:
    """Scan every device for drops.

    The coarse stage nominates candidate intervals per device; each interval
    is tiled with 1-s windows at 50% overlap and every window is classified
    against all other devices at the identical absolute sample range. Devices
    without candidates contribute no decisions.
    """
    if len(channels) < 2:
        raise ValueError("need at least two devices")
    combiner = combiner or Combiner("mean")
    stft_cfg = stft_cfg or StftConfig(32)
    xcorr_cfg = xcorr_cfg or XcorrConfig()
    classify = _as_classifier(params_or_fn)

    fs = channels[0][0].sample_rate_hz
    window = int(round(window_s * fs))
    mics = [dev[0] for dev in channels]
    specs = [spectrogram(ch, stft_cfg) for ch in mics]
    limit = min(len(ch) for ch in mics)

    decisions = []
    for j in range(len(channels)):
        scan = scan_device(specs, j, xcorr_cfg)
        for cand in scan.candidates:
            # a drop in device j steps its own track by a positive amount;
            # negative estimates mean some reference dropped instead
            if cand.estimated_drop_samples <= 0:
                continue
            for s in tile_windows(cand.start_sample, cand.end_sample, window, limit):
                windows = {k: Waveform(mics[k].samples[s:s + window], fs)
                           for k in range(len(channels))}
                decisions.append(classify_device(
                    classify, windows, j, combiner, stft_cfg, window_start=s,
                ))
    return decisions


@dataclass
class MergedEvent:
    """Greedy union of overlapping or adjacent positive windows."""

    device_id: int
    start_sample: int
    end_sample: int
    peak_score: float
    n_windows: int


def merge_positive_windows(decisions: list[DeviceDecision]) -> list[MergedEvent]:
    events: list[MergedEvent] = []
    by_device: dict[int, list[DeviceDecision]] = {}
    for d in decisions:
        if d.label == 1:
            by_device.setdefault(d.device_id, []).append(d)
    for device_id in sorted(by_device):
        current = None
        for d in sorted(by_device[device_id], key=lambda x: x.window_start):
            if current is not None and d.window_start <= current.end_sample:
                current.end_sample = max(current.end_sample, d.window_end)
                current.peak_score = max(current.peak_score, d.combined_score)
                current.n_windows += 1
            else:
                current = MergedEvent(device_id, d.window_start, d.window_end,
                                      d.combined_score, 1)
                events.append(current)
    return events


# ------------------------------------------------------------------
# Report writers
# ------------------------------------------------------------------


def write_report_json(path, decisions: list[DeviceDecision]) -> None:
    per_device: dict[str, list] = {}
    for d in decisions:
        per_device.setdefault(str(d.device_id), []).append({
            "window_start_sample": d.window_start,
            "window_end_sample": d.window_end,
            "per_reference_probs": d.per_reference_probs,
            "combined_score": d.combined_score,
            "label": d.label,
        })
    merged = [asdict(e) for e in merge_positive_windows(decisions)]
    with open(path, "w") as f:
        json.dump({"devices": per_device, "merged_events": merged}, f, indent=2)


def write_summary_csv(path, decisions: list[DeviceDecision]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "device_id", "window_start", "window_end", "combined_score", "label",
        ])
        for d in decisions:
            writer.writerow([
                d.device_id, d.window_start, d.window_end,
                f"{d.combined_score:.6f}", d.label,
            ])
