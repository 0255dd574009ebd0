"""Multi-device scene rendering: image-method reverberation, SNR-controlled
noise, per-device clock drift, and a synthetic speech surrogate source.

A scene is a shoebox room containing speech and noise point sources plus K
recording devices of M=4 microphones each. Rendering convolves every source
with the per-microphone room impulse response, mixes noise at a target SNR,
and finally resamples each device by its clock-drift factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter, lfilter_zi

from .signal_core import Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0
MICS_PER_DEVICE = 4

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room; one reflection coefficient per wall, ordered
    (x_low, x_high, y_low, y_high, z_low, z_high)."""

    dimensions: tuple[float, float, float]
    wall_reflection: tuple[float, ...] = (0.9,) * 6
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if len(self.dimensions) != 3 or any(d <= 0 for d in self.dimensions):
            raise ValueError("room dimensions must be 3 positive lengths")
        if len(self.wall_reflection) != 6:
            raise ValueError("need 6 wall reflection coefficients")
        if any(not (0.0 <= r < 1.0) for r in self.wall_reflection):
            raise ValueError("wall reflection coefficients must lie in [0, 1)")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface_area(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        dims = np.asarray(self.dimensions)
        return bool(np.all(p > 0) and np.all(p < dims))


@dataclass
class SourceSpec:
    """Point source: a signal at a fixed position, optionally directional
    (cardioid-like gain cos^2(theta/2) towards ``orientation``)."""

    position: tuple[float, float, float]
    signal: Waveform
    gain: float = 1.0
    orientation: tuple[float, float, float] | None = None


@dataclass
class DeviceSpec:
    """A recording device: M=4 sample-synchronous microphones and one clock."""

    device_id: int
    mic_positions: tuple[tuple[float, float, float], ...]
    clock_drift_ppm: float = 0.0

    def __post_init__(self):
        if len(self.mic_positions) != MICS_PER_DEVICE:
            raise ValueError(f"each device carries exactly {MICS_PER_DEVICE} microphones")
        if abs(self.clock_drift_ppm) > 100.0:
            raise ValueError("clock drift limited to +-100 ppm")


@dataclass
class SceneConfig:
    room: RoomSpec
    devices: list[DeviceSpec]
    speech_sources: list[SourceSpec]
    noise_sources: list[SourceSpec]
    duration_s: float
    snr_db: float = 15.0
    target_t60_s: float = 0.5
    max_reflection_order: int = 6
    sample_rate_hz: int = 16000
    diffuse_pink_snr_db: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if not self.devices:
            raise ValueError("scene needs at least one device")
        if not self.speech_sources:
            raise ValueError("scene needs at least one speech source")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        for src in self.speech_sources + self.noise_sources:
            if not self.room.contains(src.position):
                raise ValueError(f"source at {src.position} lies outside the room")
        for dev in self.devices:
            for pos in dev.mic_positions:
                if not self.room.contains(pos):
                    raise ValueError(
                        f"microphone at {pos} of device {dev.device_id} lies outside the room"
                    )


@dataclass
class RenderedScene:
    """Per device x mic waveforms plus the ground truth used by evaluation."""

    config: SceneConfig
    channels: list[list[Waveform]]          # [device][mic]
    direct_delays: np.ndarray               # (n_speech_sources, K, M) samples
    applied_drift_ppm: list[float]
    drops: list = field(default_factory=list)   # DropEvent records, if injected

    @property
    def n_devices(self) -> int:
        return len(self.channels)

    def channel(self, device: int, mic: int = 0) -> Waveform:
        return self.channels[device][mic]


# ------------------------------------------------------------------
# Image method
# ------------------------------------------------------------------


def _image_sources(room: RoomSpec, src, max_order: int):
    """Enumerate image sources up to total reflection order ``max_order``.

    Returns (positions (N,3), gains (N,), mirror (N,3)) where ``gains`` is the
    product of wall reflection coefficients over all hits and ``mirror`` holds
    the per-axis sign flips applied to the source orientation.
    """
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    src = np.asarray(src, dtype=float)
    dims = np.asarray(room.dimensions)
    beta = np.asarray(room.wall_reflection).reshape(3, 2)  # [axis][low, high]

    jmax = (max_order + 1) // 2
    j_range = np.arange(-jmax, jmax + 1)
    q_range = np.array([0, 1])
    # all (q, j) combinations per axis, then the 3-axis cross product
    qx, qy, qz, jx, jy, jz = np.meshgrid(
        q_range, q_range, q_range, j_range, j_range, j_range, indexing="ij"
    )
    q = np.stack([qx, qy, qz], axis=-1).reshape(-1, 3)
    j = np.stack([jx, jy, jz], axis=-1).reshape(-1, 3)

    hits_low = np.abs(j - q)
    hits_high = np.abs(j)
    order = (hits_low + hits_high).sum(axis=1)
    keep = order <= max_order
    q, j = q[keep], j[keep]
    hits_low, hits_high = hits_low[keep], hits_high[keep]

    positions = (1 - 2 * q) * src[None, :] + 2 * j * dims[None, :]
    gains = np.prod(
        beta[:, 0][None, :] ** hits_low * beta[:, 1][None, :] ** hits_high, axis=1
    )
    mirror = (1 - 2 * q).astype(float)
    return positions, gains, mirror


def _tap_gains(positions, gains, mirror, mic, orientation, c, fs, rir_len):
    mic = np.asarray(mic, dtype=float)
    diff = mic[None, :] - positions
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist < 1e-9):
        raise ValueError("coincident source and microphone")
    amp = gains / (4.0 * np.pi * dist)
    if orientation is not None:
        o = mirror * np.asarray(orientation, dtype=float)[None, :]
        o = o / np.linalg.norm(o, axis=1, keepdims=True)
        cos_theta = np.einsum("ij,ij->i", o, diff / dist[:, None])
        amp = amp * 0.5 * (1.0 + cos_theta)      # cos^2(theta/2)
    delays = np.round(dist / c * fs).astype(int)
    valid = delays < rir_len
    return delays[valid], amp[valid]


def image_method_rir(
    room: RoomSpec,
    src,
    mic,
    max_order: int,
    rir_len: int,
    sample_rate_hz: int = 16000,
    orientation=None,
) -> Waveform:
    """Room impulse response via the image method.

    Each image source up to ``max_order`` reflections contributes an amplitude
    ``prod(wall_reflection^hits) / (4*pi*d)`` at delay ``round(d/c*fs)``.
    """
    positions, gains, mirror = _image_sources(room, src, max_order)
    delays, amps = _tap_gains(
        positions, gains, mirror, mic, orientation, room.speed_of_sound,
        sample_rate_hz, rir_len,
    )
    rir = np.zeros(rir_len)
    np.add.at(rir, delays, amps)
    return Waveform(rir, sample_rate_hz)


def t60_to_reflection(room: RoomSpec, target_t60_s: float) -> tuple[float, ...]:
    """Uniform wall reflection from Sabine's formula for a target T60."""
    if target_t60_s <= 0:
        raise ValueError("target_t60_s must be positive")
    alpha = 0.161 * room.volume / (room.surface_area * target_t60_s)
    if alpha >= 1.0:
        raise ValueError(
            f"unreachable T60: Sabine absorption {alpha:.3f} >= 1 for this room"
        )
    reflection = min(float(np.sqrt(max(0.0, 1.0 - alpha))), 0.999)
    return (reflection,) * 6


# ------------------------------------------------------------------
# Mixing, drift
# ------------------------------------------------------------------


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """clean + g*noise with g set so the clean/noise power ratio is snr_db."""
    if len(clean) != len(noise):
        raise ValueError("clean and noise must have equal length")
    p_clean = float(np.mean(clean.samples ** 2))
    p_noise = float(np.mean(noise.samples ** 2))
    if p_clean == 0.0 or p_noise == 0.0:
        raise ValueError("zero-power input to mix_at_snr")
    g = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + g * noise.samples, clean.sample_rate_hz)


def apply_clock_drift(w: Waveform, drift_ppm: float) -> Waveform:
    """Linear-interpolation resampling by factor (1 + drift_ppm*1e-6)."""
    if abs(drift_ppm) > 1000.0:
        raise ValueError("drift_ppm out of range")
    if drift_ppm == 0.0:
        return w
    factor = 1.0 + drift_ppm * 1e-6
    out_len = int(round(len(w) / factor))
    positions = np.arange(out_len) * factor
    out = np.interp(positions, np.arange(len(w)), w.samples)
    return Waveform(out, w.sample_rate_hz)


# ------------------------------------------------------------------
# Synthetic speech surrogate
# ------------------------------------------------------------------


def _resonator_coeffs(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2.0 * np.pi * freq / fs
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    b = np.array([1.0 - r])
    return b, a


def _rms_normalize(x, target):
    rms = np.sqrt(np.mean(x ** 2))
    return x * (target / rms) if rms > 0 else x


def _voiced_segment(n, f0_start, formants, bandwidths, fs, rng):
    # glottal pulse train with slowly wandering pitch
    f0 = f0_start * np.exp(np.cumsum(rng.normal(0, 0.002, n)))
    f0 = np.clip(f0, 80.0, 250.0)
    phase = np.cumsum(f0) / fs
    excitation = np.zeros(n)
    excitation[np.diff(np.floor(phase), prepend=0.0) > 0] = 1.0

    out = np.zeros(n)
    block = int(0.010 * fs)
    for fi, (centre, bw) in enumerate(zip(formants, bandwidths)):
        track = centre * np.exp(np.cumsum(rng.normal(0, 0.006, max(1, n // block + 1))))
        track = np.clip(track, 0.8 * centre, 1.2 * centre)
        filtered = np.empty(n)
        zi = np.zeros(2)
        for bi, start in enumerate(range(0, n, block)):
            stop = min(start + block, n)
            b, a = _resonator_coeffs(track[min(bi, len(track) - 1)], bw, fs)
            filtered[start:stop], zi = lfilter(b, a, excitation[start:stop], zi=zi)
        # parallel formant bank; higher formants contribute less energy
        out += _rms_normalize(filtered, 1.0 / (1.0 + fi))
    return _rms_normalize(out, 1.0)


def _unvoiced_segment(n, fs, rng):
    noise = rng.standard_normal(n)
    b, a = _resonator_coeffs(3400.0, 1200.0, fs)
    return _rms_normalize(lfilter(b, a, noise), 0.25)


def _edge_fade(x, fs, fade_s=0.005):
    n_fade = min(int(fade_s * fs), len(x) // 2)
    if n_fade > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(n_fade) / n_fade))
        x[:n_fade] *= ramp
        x[-n_fade:] *= ramp[::-1]
    return x


def synth_speech_surrogate(
    duration_s: float, seed, sample_rate_hz: int = 16000
) -> Waveform:
    """Speech-like test signal: pitched pulse trains through 2-4 wandering
    resonators, interleaved with noise bursts and silent pauses; peak 0.5."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    fs = sample_rate_hz
    total = int(round(duration_s * fs))

    n_formants = int(rng.integers(2, 5))
    formants = [500.0, 1450.0, 2500.0, 3400.0][:n_formants]
    bandwidths = [45.0, 65.0, 90.0, 120.0][:n_formants]
    pause_target = rng.uniform(0.2, 0.4)

    pieces = []
    n_done = 0
    n_pause = 0
    voiced_emitted = False
    while n_done < total:
        pause_frac = n_pause / max(1, n_done)
        if n_done > 0 and pause_frac < pause_target and rng.uniform() < 0.7:
            n = int(rng.uniform(0.05, 0.25) * fs)
            seg = np.zeros(n)
            n_pause += min(n, total - n_done)
        elif rng.uniform() < 0.8 or not voiced_emitted:
            n = int(rng.uniform(0.15, 0.5) * fs)
            seg = _voiced_segment(n, rng.uniform(80, 250), formants, bandwidths, fs, rng)
            seg = _edge_fade(seg, fs)
            voiced_emitted = True
        else:
            n = int(rng.uniform(0.05, 0.15) * fs)
            seg = 0.3 * _unvoiced_segment(n, fs, rng)
            seg = _edge_fade(seg, fs)
        pieces.append(seg)
        n_done += len(seg)

    out = np.concatenate(pieces)[:total]
    peak = np.max(np.abs(out))
    if peak == 0.0:
        raise RuntimeError("surrogate generated silence only")
    return Waveform(out * (0.5 / peak), fs)


def pink_noise(n: int, rng) -> np.ndarray:
    """Approximate 1/f noise (Paul Kellet's IIR filter over white noise)."""
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    return lfilter(b, a, rng.standard_normal(n))


# ------------------------------------------------------------------
# Scene rendering
# ------------------------------------------------------------------


def render_scene(cfg: SceneConfig) -> RenderedScene:
    """Render every device x mic channel of a configured scene.

    Per channel: sum of speech sources convolved with their image-method RIRs,
    plus noise (point noise rendered the same way, and optionally diffuse pink
    noise) mixed at ``cfg.snr_db``, then per-device clock drift. Deterministic
    given ``cfg.seed``; channels are independent so evaluation order is free.
    """
    cfg.validate()
    fs = cfg.sample_rate_hz
    n_samples = int(round(cfg.duration_s * fs))
    rir_len = max(int(round(cfg.target_t60_s * fs)), 256)
    c = cfg.room.speed_of_sound

    speech_images = [
        _image_sources(cfg.room, s.position, cfg.max_reflection_order)
        for s in cfg.speech_sources
    ]
    noise_images = [
        _image_sources(cfg.room, s.position, cfg.max_reflection_order)
        for s in cfg.noise_sources
    ]

    n_src = len(cfg.speech_sources)
    K = len(cfg.devices)
    direct_delays = np.zeros((n_src, K, MICS_PER_DEVICE), dtype=int)
    channels: list[list[Waveform]] = []
    drifts: list[float] = []

    for di, dev in enumerate(cfg.devices):
        device_channels = []
        for mi, mic in enumerate(dev.mic_positions):
            clean = np.zeros(n_samples)
            for si, (src, images) in enumerate(zip(cfg.speech_sources, speech_images)):
                rir = np.zeros(rir_len)
                delays, amps = _tap_gains(
                    *images, mic, src.orientation, c, fs, rir_len
                )
                np.add.at(rir, delays, amps)
                sig = src.signal.samples[:n_samples] * src.gain
                clean += fftconvolve(sig, rir)[:n_samples]
                d = np.linalg.norm(np.asarray(src.position) - np.asarray(mic))
                direct_delays[si, di, mi] = int(round(d / c * fs))

            noise = np.zeros(n_samples)
            for src, images in zip(cfg.noise_sources, noise_images):
                rir = np.zeros(rir_len)
                delays, amps = _tap_gains(
                    *images, mic, src.orientation, c, fs, rir_len
                )
                np.add.at(rir, delays, amps)
                sig = src.signal.samples[:n_samples] * src.gain
                noise += fftconvolve(sig, rir)[:n_samples]
            if cfg.diffuse_pink_snr_db is not None:
                ch_rng = np.random.default_rng([cfg.seed, di, mi])
                diffuse = pink_noise(n_samples, ch_rng)
                p = float(np.mean(clean ** 2))
                if p > 0:
                    g = np.sqrt(p / (np.mean(diffuse ** 2)
                                     * 10.0 ** (cfg.diffuse_pink_snr_db / 10.0)))
                    noise = noise + g * diffuse

            mixed = Waveform(clean, fs)
            if np.any(noise != 0.0):
                mixed = mix_at_snr(mixed, Waveform(noise, fs), cfg.snr_db)
            mixed = apply_clock_drift(mixed, dev.clock_drift_ppm)
            device_channels.append(mixed)
        channels.append(device_channels)
        drifts.append(dev.clock_drift_ppm)

    return RenderedScene(
        config=cfg,
        channels=channels,
        direct_delays=direct_delays,
        applied_drift_ppm=drifts,
    )


# ------------------------------------------------------------------
# Random scene sampling (desk-scale corpus generation)
# ------------------------------------------------------------------


def _random_point(rng, dims, margin=0.5):
    return tuple(rng.uniform(margin, d - margin) for d in dims)


def _device_array(rng, dims, device_id):
    """Linear 4-mic array (4 cm pitch) at a random position and heading."""
    centre = np.array(_random_point(rng, dims, margin=0.6))
    theta = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(theta), np.sin(theta), 0.0])
    offsets = (np.arange(MICS_PER_DEVICE) - 1.5) * 0.04
    mics = tuple(tuple(centre + o * direction) for o in offsets)
    return DeviceSpec(
        device_id=device_id,
        mic_positions=mics,
        clock_drift_ppm=float(rng.uniform(-100, 100)),
    )


def random_scene_config(
    seed,
    n_devices: int = 6,
    duration_range=(5.0, 30.0),
    snr_range=(5.0, 25.0),
    t60_range=(0.4, 0.8),
    max_reflection_order: int = 6,
    sample_rate_hz: int = 16000,
    speech_seed=None,
) -> SceneConfig:
    """Draw a scene with random room, device layout, T60, SNR and sources."""
    rng = np.random.default_rng(seed)
    dims = (rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0), rng.uniform(2.5, 4.0))
    t60 = float(rng.uniform(*t60_range))
    room = RoomSpec(dimensions=dims)
    room = RoomSpec(dimensions=dims, wall_reflection=t60_to_reflection(room, t60))

    duration = float(rng.uniform(*duration_range))
    fs = sample_rate_hz
    speech = synth_speech_surrogate(
        duration, rng.integers(2 ** 63) if speech_seed is None else speech_seed, fs
    )
    speech_src = SourceSpec(position=_random_point(rng, dims, 0.7), signal=speech)

    noise_sig = Waveform(pink_noise(int(round(duration * fs)), rng), fs)
    noise_src = SourceSpec(position=_random_point(rng, dims, 0.7), signal=noise_sig)

    devices = [_device_array(rng, dims, i + 1) for i in range(n_devices)]
    return SceneConfig(
        room=room,
        devices=devices,
        speech_sources=[speech_src],
        noise_sources=[noise_src],
        duration_s=duration,
        snr_db=float(rng.uniform(*snr_range)),
        target_t60_s=t60,
        max_reflection_order=max_reflection_order,
        sample_rate_hz=fs,
        seed=int(rng.integers(2 ** 63)),
    )


# ------------------------------------------------------------------
# Scene serialization: one multi-channel WAV per device + JSON sidecar
# ------------------------------------------------------------------


def save_scene(scene: RenderedScene, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fs = scene.config.sample_rate_hz
    for di, device_channels in enumerate(scene.channels):
        n = min(len(ch) for ch in device_channels)
        stacked = np.stack([ch.samples[:n] for ch in device_channels], axis=1)
        write_wav(out_dir / f"device_{di + 1}.wav", stacked, fs)

    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "sample_rate_hz": fs,
        "n_devices": scene.n_devices,
        "mics_per_device": MICS_PER_DEVICE,
        "duration_s": scene.config.duration_s,
        "snr_db": scene.config.snr_db,
        "target_t60_s": scene.config.target_t60_s,
        "room_dimensions": list(scene.config.room.dimensions),
        "wall_reflection": list(scene.config.room.wall_reflection),
        "source_positions": [list(s.position) for s in scene.config.speech_sources],
        "noise_positions": [list(s.position) for s in scene.config.noise_sources],
        "direct_path_delays_samples": scene.direct_delays.tolist(),
        "applied_drift_ppm": scene.applied_drift_ppm,
        "drop_events": [
            {
                "device_id": d.device_id,
                "onset_sample": d.onset_sample,
                "duration_samples": d.duration_samples,
            }
            for d in scene.drops
        ],
    }
    with open(out_dir / "ground_truth.json", "w") as f:
        json.dump(sidecar, f, indent=2)
    return out_dir


def load_scene_audio(scene_dir):
    """Load per-device channel waveforms and the sidecar of a saved scene."""
    scene_dir = Path(scene_dir)
    sidecar_path = scene_dir / "ground_truth.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing sidecar: {sidecar_path}")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    channels = []
    for di in range(sidecar["n_devices"]):
        data, rate = read_wav(scene_dir / f"device_{di + 1}.wav")
        channels.append([Waveform(data[:, m], rate) for m in range(data.shape[1])])
    return channels, sidecar
