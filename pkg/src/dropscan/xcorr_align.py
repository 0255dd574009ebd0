"""Coarse drop localization via 2D normalized cross-correlation.

Spectrogram patterns from a hypothesis device are matched against reference
devices over a range of time shifts. The per-anchor best-match shift forms a
track; a sample drop shows up as a step in that track whose height (times the
hop) estimates the lost-sample count. Traces from several references are
summed after re-centering so jumps add coherently.

Sign convention: positive shift means the hypothesis lags the reference; a
drop in the hypothesis advances its later content, producing a negative step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import median_filter

from .signal_core import Spectrogram


@dataclass
class XcorrConfig:
    pattern_s: float = 1.0
    step_s: float = 0.5
    radius_s: float = 1.25     # covers drop shifts up to ~mean + 4 sigma
    min_jump_frames: int = 2
    smoothing: int = 5
    min_peak: float = 0.2      # NCC below this marks an unreliable anchor
    margin_s: float = 2.0      # candidate interval padding around a jump

    def frames(self, spec: Spectrogram):
        per_s = spec.sample_rate_hz / spec.hop_samples
        return (
            max(4, int(round(self.pattern_s * per_s))),
            max(1, int(round(self.step_s * per_s))),
            max(1, int(round(self.radius_s * per_s))),
        )


@dataclass
class Pattern:
    values: np.ndarray           # (pattern_frames, bins)
    start_frame: int = 0

    def __post_init__(self):
        if self.values.shape[0] < 4:
            raise ValueError("pattern needs at least 4 frames")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("pattern values must be finite")


@dataclass
class CorrelationTrace:
    """NCC values per anchor over the shift axis (ascending, in frames)."""

    anchors: np.ndarray          # anchor frame indices in the hypothesis
    shifts: np.ndarray           # shift axis, e.g. -R..R
    values: np.ndarray           # (n_anchors, len(shifts))
    hop_samples: int
    sample_rate_hz: int
    start_sample: int = 0
    pattern_frames: int = 0
    n_references: int = 1


@dataclass
class ShiftTrack:
    """Best shift and peak correlation per anchor."""

    anchors: np.ndarray
    shifts: np.ndarray           # best shift per anchor (frames)
    peaks: np.ndarray
    hop_samples: int
    sample_rate_hz: int
    start_sample: int = 0
    pattern_frames: int = 0
    reliable: np.ndarray | None = None

    def anchor_samples(self) -> np.ndarray:
        return self.start_sample + self.anchors * self.hop_samples


@dataclass
class CandidateInterval:
    """Time range likely containing a drop, plus a lost-sample estimate."""

    start_sample: int
    end_sample: int
    estimated_drop_samples: int
    confidence: float

    def __post_init__(self):
        if self.start_sample >= self.end_sample:
            raise ValueError("empty candidate interval")

    def contains(self, sample: int) -> bool:
        return self.start_sample <= sample < self.end_sample


def ncc2d(pattern: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of a 2D pattern over region time offsets.

    Returns one NCC value in [-1, 1] per offset 0..(region_frames -
    pattern_frames); offsets with zero variance on either side give 0.
    """
    pattern = np.asarray(pattern, dtype=np.float64)
    region = np.asarray(region, dtype=np.float64)
    if pattern.shape[1] != region.shape[1]:
        raise ValueError(
            f"bin-count mismatch: pattern {pattern.shape[1]} vs region {region.shape[1]}"
        )
    pf = pattern.shape[0]
    if region.shape[0] < pf:
        raise ValueError("region must span at least the pattern length")

    a = pattern - pattern.mean()
    ssa = float(np.sum(a * a))
    windows = sliding_window_view(region, (pf, region.shape[1]))[:, 0]  # (S, pf, bins)
    w_mean = windows.mean(axis=(1, 2), keepdims=True)
    centered = windows - w_mean
    ssb = np.einsum("spb,spb->s", centered, centered)
    num = np.einsum("pb,spb->s", a, centered)
    denom = np.sqrt(ssa * ssb)
    out = np.zeros(windows.shape[0])
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def correlation_trace(
    hyp: Spectrogram,
    ref: Spectrogram,
    pattern_frames: int,
    search_radius_frames: int,
    step_frames: int,
    last_anchor: int | None = None,
) -> CorrelationTrace:
    """NCC of hypothesis patterns against reference regions at every anchor.

    Anchor ``a`` correlates hyp frames [a, a+P) against ref frames
    [a-R, a+P+R); trace column ``i`` corresponds to shift ``-R+i`` where
    positive shift means the hypothesis lags the reference. ``last_anchor``
    caps the anchor range (used to align traces across references whose
    spectrograms differ in length).
    """
    if hyp.hop_samples != ref.hop_samples or hyp.n_bins != ref.n_bins:
        raise ValueError("hypothesis and reference spectrograms must share config")
    P, R = pattern_frames, search_radius_frames
    first = R
    last = min(hyp.n_frames - P, ref.n_frames - P - R)
    if last_anchor is not None:
        last = min(last, last_anchor)
    if last < first:
        raise ValueError("spectrogram too short for this pattern/radius")
    anchors = np.arange(first, last + 1, step_frames)
    values = np.empty((len(anchors), 2 * R + 1))
    for i, a in enumerate(anchors):
        pattern = hyp.values[a:a + P]
        region = ref.values[a - R:a + P + R]
        # ncc offset s corresponds to shift R-s; flip to ascending shift axis
        values[i] = ncc2d(pattern, region)[::-1]
    return CorrelationTrace(
        anchors=anchors,
        shifts=np.arange(-R, R + 1),
        values=values,
        hop_samples=hyp.hop_samples,
        sample_rate_hz=hyp.sample_rate_hz,
        start_sample=hyp.start_sample,
        pattern_frames=P,
    )


def track_from_trace(trace: CorrelationTrace, min_peak: float = 0.2) -> ShiftTrack:
    """Best shift per anchor; low-correlation anchors are interpolated over."""
    best = np.argmax(trace.values, axis=1)
    shifts = trace.shifts[best].astype(float)
    peaks = trace.values[np.arange(len(best)), best]
    reliable = peaks >= min_peak * trace.n_references
    if reliable.any() and not reliable.all():
        idx = np.arange(len(shifts))
        shifts[~reliable] = np.interp(idx[~reliable], idx[reliable], shifts[reliable])
    return ShiftTrack(
        anchors=trace.anchors,
        shifts=shifts,
        peaks=peaks,
        hop_samples=trace.hop_samples,
        sample_rate_hz=trace.sample_rate_hz,
        start_sample=trace.start_sample,
        pattern_frames=trace.pattern_frames,
        reliable=reliable,
    )


def track_shift(
    hyp: Spectrogram,
    ref: Spectrogram,
    pattern_frames: int,
    search_radius_frames: int,
    step_frames: int,
    min_peak: float = 0.2,
) -> ShiftTrack:
    trace = correlation_trace(hyp, ref, pattern_frames, search_radius_frames, step_frames)
    return track_from_trace(trace, min_peak=min_peak)


def cumulative_combine(traces: list[CorrelationTrace]) -> CorrelationTrace:
    """Sum per-reference traces after re-centering each on its median shift.

    Re-centering aligns the references' geometry-dependent baseline shifts at
    zero so a drop-induced jump adds coherently across references. Shift bins
    a reference cannot cover after re-centering contribute nothing.
    """
    if not traces:
        raise ValueError("cumulative_combine needs at least one reference trace")
    base = traces[0]
    for t in traces[1:]:
        if not np.array_equal(t.anchors, base.anchors) or not np.array_equal(
            t.shifts, base.shifts
        ):
            raise ValueError("traces must share anchors and shift axis")

    combined = np.zeros_like(base.values)
    n_shifts = len(base.shifts)
    for t in traces:
        best = np.argmax(t.values, axis=1)
        centre = int(np.median(t.shifts[best]))
        # output column for shift s reads the input column for shift s+centre
        src_lo = max(0, centre)
        src_hi = min(n_shifts, n_shifts + centre)
        dst_lo = src_lo - centre
        dst_hi = src_hi - centre
        combined[:, dst_lo:dst_hi] += t.values[:, src_lo:src_hi]
    return CorrelationTrace(
        anchors=base.anchors.copy(),
        shifts=base.shifts.copy(),
        values=combined,
        hop_samples=base.hop_samples,
        sample_rate_hz=base.sample_rate_hz,
        start_sample=base.start_sample,
        pattern_frames=base.pattern_frames,
        n_references=sum(t.n_references for t in traces),
    )


def detect_jump(
    track: ShiftTrack,
    min_jump_frames: int = 2,
    smoothing: int = 5,
    margin_s: float = 2.0,
    min_plateau_anchors: int = 2,
) -> list[CandidateInterval]:
    """Candidate intervals wherever the median-filtered shift track steps.

    The estimated lost-sample count is (plateau_before - plateau_after) * hop,
    positive for a drop in the hypothesis under this sign convention. A jump
    needs ``min_plateau_anchors`` anchors of support on both sides; isolated
    outliers at the track edges are not drops.
    """
    n = len(track.shifts)
    if n < 2 * smoothing:
        raise ValueError(f"need at least {2 * smoothing} anchors, got {n}")
    filtered = median_filter(track.shifts, size=smoothing, mode="nearest")
    steps = np.abs(np.diff(filtered)) >= min_jump_frames
    if not steps.any():
        return []

    # group transition indices closer than the smoothing window
    idx = np.flatnonzero(steps)
    groups = [[idx[0], idx[0]]]
    for i in idx[1:]:
        if i - groups[-1][1] <= smoothing:
            groups[-1][1] = i
        else:
            groups.append([i, i])

    fs = track.sample_rate_hz
    samples = track.anchor_samples()
    margin = int(round(margin_s * fs))
    out = []
    for lo, hi in groups:
        if lo + 1 < min_plateau_anchors or n - 1 - hi < min_plateau_anchors:
            continue
        before = np.median(track.shifts[max(0, lo - smoothing + 1):lo + 1])
        after = np.median(track.shifts[hi + 1:hi + 1 + smoothing])
        jump = before - after
        if abs(jump) < min_jump_frames:
            continue
        start = max(0, int(samples[lo]) - margin)
        end = int(samples[min(hi + 1, n - 1)]) + track.pattern_frames * track.hop_samples + margin
        peak_before = np.median(track.peaks[max(0, lo - smoothing + 1):lo + 1])
        peak_after = np.median(track.peaks[hi + 1:hi + 1 + smoothing])
        out.append(CandidateInterval(
            start_sample=start,
            end_sample=end,
            estimated_drop_samples=int(round(jump * track.hop_samples)),
            confidence=float(min(peak_before, peak_after)),
        ))
    return out


@dataclass
class XcorrScan:
    """Alignment result of one hypothesis device against all references."""

    device: int
    reference_devices: list[int]
    per_reference: list[ShiftTrack]
    combined: ShiftTrack
    candidates: list[CandidateInterval]


def scan_device(
    spectrograms: list[Spectrogram],
    device: int,
    cfg: XcorrConfig | None = None,
) -> XcorrScan:
    """Full coarse scan of one device against every other device."""
    cfg = cfg or XcorrConfig()
    if len(spectrograms) < 2:
        raise ValueError("need at least two devices")
    hyp = spectrograms[device]
    P, step, R = cfg.frames(hyp)
    refs = [k for k in range(len(spectrograms)) if k != device]
    # one anchor range for all references so the traces stay combinable
    last_anchor = min(
        [hyp.n_frames - P] + [spectrograms[k].n_frames - P - R for k in refs]
    )
    traces = [
        correlation_trace(hyp, spectrograms[k], P, R, step, last_anchor=last_anchor)
        for k in refs
    ]
    per_ref = [track_from_trace(t, cfg.min_peak) for t in traces]
    combined_trace = cumulative_combine(traces)
    combined = track_from_trace(combined_trace, cfg.min_peak)
    candidates = detect_jump(
        combined, cfg.min_jump_frames, cfg.smoothing, cfg.margin_s
    )
    return XcorrScan(
        device=device,
        reference_devices=refs,
        per_reference=per_ref,
        combined=combined,
        candidates=candidates,
    )
