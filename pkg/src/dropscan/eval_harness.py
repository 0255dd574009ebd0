"""Desk-scale dataset construction, precision/recall/F1 computation, and the
four-row experiment grid (stage-1-only model, no-pretrain, no-attention,
full two-stage model) over a synthetic multi-device corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .detector import Combiner, DeviceDecision
from .drop_injector import (
    DropDistribution,
    DropEvent,
    WindowPair,
    inject_scene_drops,
    make_pair_dataset,
    observed_onset,
)
from .neural.model import ModelParams, forward_pair
from .neural.training import TrainConfig, train
from .scene_sim import (
    RoomSpec,
    image_method_rir,
    mix_at_snr,
    pink_noise,
    random_scene_config,
    render_scene,
    synth_speech_surrogate,
    t60_to_reflection,
)
from .signal_core import StftConfig, Waveform, spectrogram


@dataclass
class ExperimentConfig:
    """Corpus sizes and training knobs; defaults are the desk scale."""

    train_scenes: int = 120
    dev_scenes: int = 10
    eval_scenes: int = 30
    n_devices: int = 6
    scene_duration: tuple = (5.0, 15.0)
    drops_probs: tuple = (0.15, 0.30, 0.30, 0.25)   # P(0..3 drops per scene)
    stage1_pairs: int = 2000
    pairs_per_source: int = 26
    train_windows_per_drop: int = 1
    train_refs_per_window: int = 3
    eval_min_positives: int = 160
    window_s: float = 1.0
    guard_s: float = 0.05
    frame_ms: int = 32
    preset: str = "desk"
    combiner: str = "mean"
    epochs: int = 20
    stage1_batch: int = 50
    stage2_batch: int = 30
    lr: float = 5e-4
    stage2_lr: float = 1e-4
    dtype: str = "float64"
    seed: int = 0

    def stft(self) -> StftConfig:
        return StftConfig(self.frame_ms)

    def n_bins(self) -> int:
        return self.stft().fft_size(16000) // 2 + 1


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


def metrics_from_labels(y_true, y_pred) -> MetricsReport:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    return MetricsReport(
        tp=int(np.sum((y_pred == 1) & (y_true == 1))),
        fp=int(np.sum((y_pred == 1) & (y_true == 0))),
        fn=int(np.sum((y_pred == 0) & (y_true == 1))),
        tn=int(np.sum((y_pred == 0) & (y_true == 0))),
    )


def compute_metrics(decisions: list[DeviceDecision],
                    events: list[DropEvent]) -> MetricsReport:
    """Window-level scoring against ground truth drop events.

    A positive decision is a TP iff its window contains an observed-timeline
    drop onset of its device; each onset is matched greedily at most once.
    Unmatched onsets count as FN; negative decisions with no onset are TN.
    """
    onsets: dict[int, list[int]] = {}
    for e in events:
        onsets.setdefault(e.device_id, []).append(observed_onset(events, e))
    matched: dict[int, set] = {d: set() for d in onsets}

    tp = fp = tn = 0
    for d in sorted(decisions, key=lambda x: (x.device_id, x.window_start)):
        inside = [
            i for i, o in enumerate(onsets.get(d.device_id, []))
            if d.window_start <= o < d.window_end
        ]
        if d.label == 1:
            free = [i for i in inside if i not in matched.get(d.device_id, set())]
            if free:
                matched[d.device_id].add(free[0])
                tp += 1
            else:
                fp += 1
        elif not inside:
            tn += 1
    fn = sum(len(v) for v in onsets.values()) - sum(len(v) for v in matched.values())
    return MetricsReport(tp=tp, fp=fp, fn=fn, tn=tn)


# ------------------------------------------------------------------
# Stage-1 data: contaminated surrogate-speech pairs
# ------------------------------------------------------------------


def _contaminate_pair(src: Waveform, rng) -> tuple[Waveform, Waveform]:
    """Two noisy reverberated renderings of one source.

    The pair shares the room (random size, T60 in [0.4, 0.8] s) but differs
    in microphone position (hence impulse response and propagation shift)
    and in the noise realization, each mixed at an SNR in [5, 25] dB.
    """
    dims = (rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0), rng.uniform(2.5, 4.0))
    t60 = float(rng.uniform(0.4, 0.8))
    room = RoomSpec(dims, t60_to_reflection(RoomSpec(dims), t60))
    pos = tuple(rng.uniform(0.7, d - 0.7) for d in dims)
    fs = src.sample_rate_hz
    out = []
    for _ in range(2):
        mic = tuple(rng.uniform(0.7, d - 0.7) for d in dims)
        rir = image_method_rir(room, pos, mic, max_order=6,
                               rir_len=int(t60 * fs), sample_rate_hz=fs)
        wet = fftconvolve(src.samples, rir.samples)[:len(src)]
        noise = pink_noise(len(src), rng)
        out.append(mix_at_snr(Waveform(wet, fs), Waveform(noise, fs),
                              float(rng.uniform(5.0, 25.0))))
    return out[0], out[1]


def build_stage1_dataset(cfg: ExperimentConfig,
                         dist: DropDistribution | None = None) -> list[WindowPair]:
    """Surrogate speech rendered twice (different microphone, different
    noise), with drops injected into the hypothesis copies; balanced pairs."""
    dist = dist or DropDistribution()
    rng = np.random.default_rng([cfg.seed, 1])
    per_source = cfg.pairs_per_source - cfg.pairs_per_source % 2
    pairs: list[WindowPair] = []
    source_idx = 0
    while len(pairs) < cfg.stage1_pairs:
        src = synth_speech_surrogate(
            float(rng.uniform(6.0, 10.0)), seed=rng.integers(2 ** 63)
        )
        hyp, ref = _contaminate_pair(src, rng)
        pairs += make_pair_dataset(
            hyp, ref, dist, per_source, rng,
            window_s=cfg.window_s, guard_s=cfg.guard_s,
        )
        source_idx += 1
    return pairs[:cfg.stage1_pairs - cfg.stage1_pairs % 2]


# ------------------------------------------------------------------
# Stage-2 data: multi-device mini-scenes
# ------------------------------------------------------------------


@dataclass
class EvalWindow:
    """One device decision unit: a hypothesis window plus every reference."""

    scene_id: int
    device_id: int           # 1-based
    start_sample: int
    label: int
    hyp_feats: np.ndarray                 # (T, bins) float32
    ref_feats: np.ndarray                 # (K-1, T, bins) float32


@dataclass
class MiniSceneCorpus:
    train_pairs: list[WindowPair]
    dev_pairs: list[WindowPair]
    eval_windows: list[EvalWindow]
    scene_drops: dict[str, list]          # split -> [per-scene drop counts]


def _scene_mics(scene):
    return [dev[0] for dev in scene.channels]


def _window_bounds(mics, window):
    return min(len(ch) for ch in mics) - window


def _positive_starts(obs_onset, window, guard, limit, rng, count):
    lo = max(0, obs_onset - window + guard)
    hi = min(obs_onset - guard, limit)
    if hi <= lo:
        return []
    return [int(rng.integers(lo, hi)) for _ in range(count)]


def _negative_start(mics, events, device, window, rng, limit, max_tries=50):
    dev_onsets = [
        observed_onset(events, e) for e in events if e.device_id == device + 1
    ]
    for _ in range(max_tries):
        s = int(rng.integers(0, limit))
        if not any(s <= o < s + window for o in dev_onsets):
            return s
    return None


def build_stage2_dataset(cfg: ExperimentConfig,
                         dist: DropDistribution | None = None) -> MiniSceneCorpus:
    """Render K-device mini-scenes, inject none/one/more drops, and extract
    training pairs plus per-device evaluation windows, split by scene."""
    dist = dist or DropDistribution()
    stft_cfg = cfg.stft()
    window = int(round(cfg.window_s * 16000))
    guard = int(round(cfg.guard_s * 16000))

    splits = (
        ("train", cfg.train_scenes),
        ("dev", cfg.dev_scenes),
        ("eval", cfg.eval_scenes),
    )
    train_pairs: list[WindowPair] = []
    dev_pairs: list[WindowPair] = []
    eval_raw = []       # (scene_id, device, start, label, mics)
    scene_drops: dict[str, list] = {}

    split_ids = {"train": 0, "dev": 1, "eval": 2}

    # counts drawn up front so the eval split can size windows_per_drop
    eval_total_drops = 0
    for split, n_scenes in splits:
        rng = np.random.default_rng([cfg.seed, 2, split_ids[split]])
        counts = [
            int(rng.choice(len(cfg.drops_probs), p=cfg.drops_probs))
            for _ in range(n_scenes)
        ]
        scene_drops[split] = counts
        if split == "eval":
            eval_total_drops = sum(counts)
    eval_windows_per_drop = max(
        1, -(-cfg.eval_min_positives // max(1, eval_total_drops))
    )

    for split, n_scenes in splits:
        for i in range(n_scenes):
            scene_seed = [cfg.seed, 3, split_ids[split], i]
            scene_cfg = random_scene_config(
                seed=scene_seed, n_devices=cfg.n_devices,
                duration_range=cfg.scene_duration,
            )
            scene = render_scene(scene_cfg)
            rng = np.random.default_rng(scene_seed + [7])
            n_drops = scene_drops[split][i]
            dropped, events = inject_scene_drops(
                scene, n_drops, dist, rng,
                onset_range=(1.2, scene_cfg.duration_s - 1.2),
            )
            mics = _scene_mics(dropped)
            limit = _window_bounds(mics, window)
            if limit <= 0:
                continue

            wpd = eval_windows_per_drop if split == "eval" else cfg.train_windows_per_drop
            positives = []
            for e in events:
                obs = observed_onset(events, e)
                for s in _positive_starts(obs, window, guard, limit, rng, wpd):
                    positives.append((e.device_id - 1, s))

            negatives = []
            for _ in positives:
                d = int(rng.integers(0, cfg.n_devices))
                s = _negative_start(mics, events, d, window, rng, limit)
                if s is not None:
                    negatives.append((d, s))

            if split == "eval":
                for label, items in ((1, positives), (0, negatives)):
                    for d, s in items:
                        eval_raw.append((i, d, s, label, mics))
            else:
                sink = train_pairs if split == "train" else dev_pairs
                fs = mics[0].sample_rate_hz
                for label, items in ((1, positives), (0, negatives)):
                    for d, s in items:
                        refs = [k for k in range(cfg.n_devices) if k != d]
                        rng.shuffle(refs)
                        for k in refs[:cfg.train_refs_per_window]:
                            sink.append(WindowPair(
                                hypothesis=Waveform(mics[d].samples[s:s + window], fs),
                                reference=Waveform(mics[k].samples[s:s + window], fs),
                                label=label,
                                start_sample=s,
                            ))

    eval_windows = []
    for scene_id, d, s, label, mics in eval_raw:
        fs = mics[0].sample_rate_hz
        hyp = spectrogram(Waveform(mics[d].samples[s:s + window], fs), stft_cfg)
        refs = [
            spectrogram(Waveform(mics[k].samples[s:s + window], fs), stft_cfg).values
            .astype(np.float32)
            for k in range(cfg.n_devices) if k != d
        ]
        eval_windows.append(EvalWindow(
            scene_id=scene_id, device_id=d + 1, start_sample=s, label=label,
            hyp_feats=hyp.values.astype(np.float32),
            ref_feats=np.stack(refs),
        ))
    return MiniSceneCorpus(
        train_pairs=train_pairs,
        dev_pairs=dev_pairs,
        eval_windows=eval_windows,
        scene_drops=scene_drops,
    )


# ------------------------------------------------------------------
# Evaluation
# ------------------------------------------------------------------


def evaluate_windows(
    params: ModelParams,
    windows: list[EvalWindow],
    combiner: Combiner,
    batch_size: int = 64,
):
    """Per-device combined decisions over evaluation windows."""
    if not windows:
        raise ValueError("no evaluation windows")
    flat_h, flat_r, owners = [], [], []
    for wi, w in enumerate(windows):
        for r in w.ref_feats:
            flat_h.append(w.hyp_feats)
            flat_r.append(r)
            owners.append(wi)
    probs = np.empty(len(flat_h))
    for start in range(0, len(flat_h), batch_size):
        bh = np.stack(flat_h[start:start + batch_size]).astype(params.dtype)
        br = np.stack(flat_r[start:start + batch_size]).astype(params.dtype)
        p, _ = forward_pair(bh, br, params)
        probs[start:start + len(bh)] = p
    owners = np.asarray(owners)

    decisions, y_true, y_pred = [], [], []
    for wi, w in enumerate(windows):
        per_ref = probs[owners == wi]
        score = combiner.combine(per_ref)
        label = int(score >= 0.5)
        decisions.append(DeviceDecision(
            device_id=w.device_id,
            window_start=w.start_sample,
            window_end=w.start_sample + 16000,
            per_reference_probs=[float(x) for x in per_ref],
            combined_score=score,
            label=label,
        ))
        y_true.append(w.label)
        y_pred.append(label)
    return metrics_from_labels(y_true, y_pred), decisions


# ------------------------------------------------------------------
# Table-1-shaped experiment grid
# ------------------------------------------------------------------

ROW_ORDER = ["pre_nn", "nn_no_pretrain", "nn_no_attention", "nn_full"]

ROW_LABELS = {
    "pre_nn": "Pre-NN (stage 1 only, attention)",
    "nn_no_pretrain": "NN (no pre-training, attention)",
    "nn_no_attention": "NN (pre-trained, concat)",
    "nn_full": "NN (pre-trained, attention)",
}


def run_table1(
    cfg: ExperimentConfig,
    dist: DropDistribution | None = None,
    log=None,
) -> dict[str, MetricsReport]:
    """Train and evaluate the four model configurations on one corpus."""
    def say(msg):
        if log:
            log(msg)

    say("building stage-1 pair dataset")
    stage1 = build_stage1_dataset(cfg, dist)
    say(f"stage-1 pairs: {len(stage1)}")
    say("building mini-scene corpus")
    corpus = build_stage2_dataset(cfg, dist)
    say(f"stage-2 train pairs: {len(corpus.train_pairs)}, "
        f"dev pairs: {len(corpus.dev_pairs)}, eval windows: {len(corpus.eval_windows)}")
    combiner = Combiner(cfg.combiner)
    stft_cfg = cfg.stft()

    def tconf(use_attention):
        return TrainConfig(
            epochs=cfg.epochs, stage1_batch=cfg.stage1_batch,
            stage2_batch=cfg.stage2_batch, lr=cfg.lr, stage2_lr=cfg.stage2_lr,
            preset=cfg.preset, n_bins=cfg.n_bins(), use_attention=use_attention,
            seed=cfg.seed, dtype=cfg.dtype,
        )

    results: dict[str, MetricsReport] = {}
    models: dict[str, ModelParams] = {}

    say("row pre_nn: stage-1 training (attention)")
    pre_nn, _ = train(tconf(True), stage1, None, dev_pairs=corpus.dev_pairs,
                      stft_cfg=stft_cfg, log=say)
    models["pre_nn"] = pre_nn

    say("row nn_full: stage-2 warm start from pre_nn")
    full, _ = train(tconf(True), None, corpus.train_pairs,
                    params=pre_nn.copy(), dev_pairs=corpus.dev_pairs,
                    stft_cfg=stft_cfg, log=say)
    models["nn_full"] = full

    say("row nn_no_pretrain: stage-2 only, random init")
    no_pre, _ = train(tconf(True), None, corpus.train_pairs,
                      dev_pairs=corpus.dev_pairs, stft_cfg=stft_cfg, log=say)
    models["nn_no_pretrain"] = no_pre

    say("row nn_no_attention: two-stage concat ablation")
    concat1, _ = train(tconf(False), stage1, None, dev_pairs=corpus.dev_pairs,
                       stft_cfg=stft_cfg, log=say)
    concat, _ = train(tconf(False), None, corpus.train_pairs,
                      params=concat1, dev_pairs=corpus.dev_pairs,
                      stft_cfg=stft_cfg, log=say)
    models["nn_no_attention"] = concat

    for row in ROW_ORDER:
        report, _ = evaluate_windows(models[row], corpus.eval_windows, combiner)
        results[row] = report
        say(f"{row}: P {report.precision:.3f} R {report.recall:.3f} F1 {report.f1:.3f}")
    return results


def write_table1_csv(path, results: dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "precision", "recall", "f1", "tp", "fp", "fn", "tn"])
        for row in ROW_ORDER:
            r = results[row]
            writer.writerow([
                row, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
                r.tp, r.fp, r.fn, r.tn,
            ])


def format_table1_markdown(results: dict[str, MetricsReport]) -> str:
    lines = [
        "| Model | P [%] | R [%] | F1 [%] |",
        "|---|---|---|---|",
    ]
    for row in ROW_ORDER:
        r = results[row]
        lines.append(
            f"| {ROW_LABELS[row]} | {100 * r.precision:.1f} "
            f"| {100 * r.recall:.1f} | {100 * r.f1:.1f} |"
        )
    return "\n".join(lines)
