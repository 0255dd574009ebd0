"""Sample-drop detection toolkit for multi-device microphone recordings.

Pipeline: a normalized cross-correlation stage tracks inter-device time
shifts on log-magnitude spectrograms and nominates candidate intervals; a
siamese CNN-LSTM classifier with multi-head attention then decides, per
1-second window pair, whether the hypothesis device lost samples. A full
synthetic-scene generator (image-method reverberation, clock drift,
SNR-controlled noise) provides training and evaluation material.
"""

__version__ = "0.1.0"

from .signal_core import Spectrogram, StftConfig, Waveform, spectrogram, stft
from .scene_sim import (
    DeviceSpec,
    RoomSpec,
    SceneConfig,
    SourceSpec,
    image_method_rir,
    mix_at_snr,
    apply_clock_drift,
    random_scene_config,
    render_scene,
    synth_speech_surrogate,
    t60_to_reflection,
)
from .drop_injector import (
    DropDistribution,
    DropEvent,
    WindowPair,
    inject_drop,
    inject_scene_drops,
    make_pair_dataset,
    sample_duration,
)
from .xcorr_align import (
    CandidateInterval,
    ShiftTrack,
    XcorrConfig,
    cumulative_combine,
    detect_jump,
    ncc2d,
    scan_device,
    track_shift,
)
from .detector import Combiner, DeviceDecision, classify_device, detect
from .eval_harness import (
    ExperimentConfig,
    MetricsReport,
    build_stage1_dataset,
    build_stage2_dataset,
    compute_metrics,
    evaluate_windows,
    run_table1,
)
