"""Sample-drop simulation: excise intervals from device streams and build
labeled hypothesis/reference window pairs for training and evaluation.

A drop removes a contiguous run of samples from every channel of one device,
shifting all later content earlier. Durations follow a left-truncated normal
law; the unit defaults to milliseconds (see ``DropDistribution``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene_sim import RenderedScene
from .signal_core import Waveform


@dataclass(frozen=True)
class DropEvent:
    """Ground-truth loss annotation; onset is in the pre-drop timeline."""

    device_id: int
    onset_sample: int
    duration_samples: int

    def __post_init__(self):
        if self.onset_sample < 0 or self.duration_samples <= 0:
            raise ValueError("invalid drop interval")


@dataclass(frozen=True)
class DropDistribution:
    """Left-truncated normal N(mean, std) rejected below ``left_cut``."""

    mean: float = 600.0
    std: float = 150.0
    left_cut: float = 50.0
    unit: str = "ms"            # "ms" or "samples"

    def __post_init__(self):
        if self.unit not in ("ms", "samples"):
            raise ValueError("unit must be 'ms' or 'samples'")
        if self.std <= 0:
            raise ValueError("std must be positive")


@dataclass
class WindowPair:
    """Two windows covering the same absolute time range of a scene.

    label is 1 iff the hypothesis window contains a drop onset; in that case
    ``drop_offset_in_window`` gives the onset position within the window.
    """

    hypothesis: Waveform
    reference: Waveform
    label: int
    start_sample: int
    drop_offset_in_window: int | None = None
    drop_duration_samples: int | None = None


def sample_duration(dist: DropDistribution, sample_rate_hz: int, rng) -> int:
    """Draw one drop duration, in samples at ``sample_rate_hz``."""
    value = sample_durations(dist, sample_rate_hz, rng, 1)[0]
    return int(value)


def sample_durations(dist: DropDistribution, sample_rate_hz: int, rng, n: int):
    """Vectorized truncated-normal draws, converted to sample counts."""
    if dist.left_cut > dist.mean + 6.0 * dist.std:
        raise ValueError("degenerate truncation: cut more than 6 sigma above mean")
    out = np.empty(n)
    filled = 0
    while filled < n:
        draws = rng.normal(dist.mean, dist.std, size=max(n - filled, 16))
        draws = draws[draws >= dist.left_cut]
        take = min(len(draws), n - filled)
        out[filled:filled + take] = draws[:take]
        filled += take
    if dist.unit == "ms":
        out = out * sample_rate_hz / 1000.0
    return np.maximum(np.round(out).astype(int), 1)


def truncated_normal_mean(dist: DropDistribution) -> float:
    """Closed-form mean of the left-truncated normal, in the native unit."""
    from scipy.stats import norm

    alpha = (dist.left_cut - dist.mean) / dist.std
    return dist.mean + dist.std * norm.pdf(alpha) / (1.0 - norm.cdf(alpha))


def inject_drop(w: Waveform, onset: int, duration: int) -> Waveform:
    """Remove samples [onset, onset+duration); later content shifts earlier."""
    if onset < 0 or duration <= 0 or onset + duration > len(w):
        raise ValueError(
            f"drop [{onset}, {onset + duration}) out of range for length {len(w)}"
        )
    samples = np.concatenate([w.samples[:onset], w.samples[onset + duration:]])
    return Waveform(samples, w.sample_rate_hz)


def observed_onset(events, event: DropEvent) -> int:
    """Onset of ``event`` in the post-drop timeline of its device."""
    shift = sum(
        e.duration_samples
        for e in events
        if e.device_id == event.device_id and e.onset_sample < event.onset_sample
    )
    return event.onset_sample - shift


def make_pair_dataset(
    hyp_signal: Waveform,
    ref_signal: Waveform,
    dist: DropDistribution,
    n_pairs: int,
    rng,
    window_s: float = 1.0,
    guard_s: float = 0.05,
) -> list[WindowPair]:
    """Balanced labeled window pairs from two contaminated renderings.

    ``hyp_signal`` and ``ref_signal`` must be two differently contaminated
    versions of the same source. Positive pairs get a drop injected into the
    hypothesis with the onset uniform inside the window, keeping a guard of
    ``guard_s`` from either edge.
    """
    fs = hyp_signal.sample_rate_hz
    window = int(round(window_s * fs))
    guard = int(round(guard_s * fs))
    max_native = dist.mean + 6.0 * dist.std
    max_dur = int(round(max_native * fs / 1000.0 if dist.unit == "ms" else max_native))
    limit = min(len(hyp_signal) - window - max_dur, len(ref_signal) - window)
    if limit <= 0:
        raise ValueError("source material shorter than one context window plus a drop")

    pairs = []
    for i in range(n_pairs):
        label = i % 2
        start = int(rng.integers(0, limit))
        ref_win = Waveform(ref_signal.samples[start:start + window], fs)
        if label == 0:
            hyp_win = Waveform(hyp_signal.samples[start:start + window], fs)
            pairs.append(WindowPair(hyp_win, ref_win, 0, start))
        else:
            duration = min(sample_duration(dist, fs, rng), max_dur)
            offset = int(rng.integers(guard, window - guard))
            onset = start + offset
            kept = np.concatenate([
                hyp_signal.samples[start:onset],
                hyp_signal.samples[onset + duration:onset + duration + window - offset],
            ])
            pairs.append(WindowPair(
                Waveform(kept, fs), ref_win, 1, start,
                drop_offset_in_window=offset,
                drop_duration_samples=duration,
            ))
    return pairs


def inject_drops_into_channels(
    channels: list[list[Waveform]],
    n_drops: int,
    dist: DropDistribution,
    rng,
    max_retries: int = 100,
    onset_range: tuple[float, float] | None = None,
):
    """Apply ``n_drops`` drops to uniformly chosen devices.

    Every drop hits all channels of its device at the same sample index;
    drops on the same device never overlap. ``onset_range`` optionally
    restricts onsets to [lo, hi) seconds. Returns (channels, events).
    """
    if n_drops == 0:
        return channels, []
    fs = channels[0][0].sample_rate_hz
    lengths = [min(len(ch) for ch in device) for device in channels]

    events: list[DropEvent] = []
    for _ in range(n_drops):
        for attempt in range(max_retries):
            device = int(rng.integers(0, len(channels)))
            duration = sample_duration(dist, fs, rng)
            lo = 0 if onset_range is None else int(round(onset_range[0] * fs))
            hi = lengths[device] - duration - 1
            if onset_range is not None:
                hi = min(hi, int(round(onset_range[1] * fs)))
            if hi <= lo:
                continue
            onset = int(rng.integers(lo, hi))
            overlap = any(
                e.device_id == device + 1
                and onset < e.onset_sample + e.duration_samples
                and e.onset_sample < onset + duration
                for e in events
            )
            if not overlap:
                events.append(DropEvent(device + 1, onset, duration))
                break
        else:
            raise ValueError("could not place non-overlapping drops")

    out = [list(device) for device in channels]
    # apply later drops first so earlier onsets keep their indices
    for event in sorted(events, key=lambda e: -e.onset_sample):
        di = event.device_id - 1
        out[di] = [
            inject_drop(ch, event.onset_sample, event.duration_samples)
            for ch in out[di]
        ]
    return out, events


def inject_scene_drops(
    scene: RenderedScene,
    n_drops: int,
    dist: DropDistribution,
    rng,
    onset_range: tuple[float, float] | None = None,
) -> tuple[RenderedScene, list[DropEvent]]:
    """Post-process a rendered scene with none, one, or more drops."""
    channels, events = inject_drops_into_channels(
        scene.channels, n_drops, dist, rng, onset_range=onset_range
    )
    if not events:
        return scene, []
    new_scene = replace(scene, channels=channels, drops=list(scene.drops) + events)
    return new_scene, events
