"""Loss, Adam, featurization, the two-stage training loop, and the
finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..drop_injector import WindowPair
from ..signal_core import StftConfig, spectrogram
from .model import ModelConfig, ModelParams, forward_pair, backward_pair, init_params

P_CLAMP = 1e-7


def bce_loss(p, label):
    """Binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -label * np.log(p) - (1.0 - label) * np.log(1.0 - p)


def bce_grad_p(p, label):
    """dL/dp of the clamped BCE."""
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return (p - label) / (p * (1.0 - p))


@dataclass
class AdamState:
    """Adam with bias correction; PyTorch-default hyperparameters."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, state: AdamState) -> None:
    """One in-place Adam update on every parameter array."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        w = params.arrays[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        m = state.m.setdefault(key, np.zeros_like(w))
        v = state.v.setdefault(key, np.zeros_like(w))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ------------------------------------------------------------------
# Featurization
# ------------------------------------------------------------------


def featurize_pairs(pairs: list[WindowPair], stft_cfg: StftConfig | None = None):
    """Window pairs to (X_hyp, X_ref, labels) dB-feature arrays.

    Features stay float32 to bound memory; batches are promoted to float64
    inside the training loop.
    """
    stft_cfg = stft_cfg or StftConfig(32)
    xs_h, xs_r, ys = [], [], []
    for pair in pairs:
        xs_h.append(spectrogram(pair.hypothesis, stft_cfg).values.astype(np.float32))
        xs_r.append(spectrogram(pair.reference, stft_cfg).values.astype(np.float32))
        ys.append(pair.label)
    return np.stack(xs_h), np.stack(xs_r), np.asarray(ys, dtype=np.float64)


def feature_stats(x_hyp, x_ref):
    """Per-bin mean and std over both streams of a training set."""
    both = np.concatenate([x_hyp, x_ref], axis=0).astype(np.float64)
    mean = both.mean(axis=(0, 1))
    std = both.std(axis=(0, 1))
    std[std < 1e-6] = 1.0
    return mean, std


# ------------------------------------------------------------------
# Training
# ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    stage1_batch: int = 50
    stage2_batch: int = 30
    lr: float = 5e-5
    stage2_lr: float | None = None   # fine-tuning rate; defaults to lr
    preset: str = "desk"
    n_bins: int = 257
    use_attention: bool = True
    seed: int = 0
    dtype: str = "float64"
    keep_best_dev: bool = True       # snap back to the best dev-F1 epoch


@dataclass
class EpochMetrics:
    stage: int
    epoch: int
    loss: float
    dev_f1: float | None = None


def _batched_pass(params, x_hyp, x_ref, y, order, batch_size, state=None):
    """One epoch over the data; updates params when ``state`` is given."""
    total_loss = 0.0
    dtype = params.dtype
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        bh = x_hyp[idx].astype(dtype)
        br = x_ref[idx].astype(dtype)
        by = y[idx]
        p, cache = forward_pair(bh, br, params)
        total_loss += float(np.sum(bce_loss(p, by)))
        if state is not None:
            dlogit = (p - by) / len(idx)       # mean-BCE gradient at the logit
            grads = backward_pair(dlogit, cache, params)
            adam_step(params, grads, state)
    return total_loss / len(order)


def predict_probs(params, x_hyp, x_ref, batch_size=64):
    out = np.empty(len(x_hyp))
    for start in range(0, len(x_hyp), batch_size):
        bh = x_hyp[start:start + batch_size].astype(params.dtype)
        br = x_ref[start:start + batch_size].astype(params.dtype)
        p, _ = forward_pair(bh, br, params)
        out[start:start + len(bh)] = p
    return out


def binary_f1(labels, predicted):
    tp = int(np.sum((predicted == 1) & (labels == 1)))
    fp = int(np.sum((predicted == 1) & (labels == 0)))
    fn = int(np.sum((predicted == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def train_stage(
    params: ModelParams,
    dataset,
    batch_size: int,
    epochs: int,
    lr: float,
    seed,
    stage: int,
    dev_set=None,
    log=None,
    keep_best_dev: bool = False,
) -> list[EpochMetrics]:
    """One training stage over a featurized (x_hyp, x_ref, y) dataset.

    With ``keep_best_dev`` the parameters snap back to the epoch with the
    best dev F1 at the end (epochs past the first are always candidates, so
    at least one training epoch sticks).
    """
    x_hyp, x_ref, y = dataset
    if len(y) == 0:
        raise ValueError("empty dataset")
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    metrics = []
    best_f1 = -1.0
    best_arrays = None
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        loss = _batched_pass(params, x_hyp, x_ref, y, order, batch_size, state)
        dev_f1 = None
        if dev_set is not None:
            dh, dr, dy = dev_set
            dev_f1 = binary_f1(dy, (predict_probs(params, dh, dr) >= 0.5).astype(int))
            if keep_best_dev and dev_f1 >= best_f1:
                best_f1 = dev_f1
                best_arrays = {k: v.copy() for k, v in params.arrays.items()}
        metrics.append(EpochMetrics(stage=stage, epoch=epoch, loss=loss, dev_f1=dev_f1))
        if log:
            msg = f"stage {stage} epoch {epoch + 1}/{epochs}: loss {loss:.4f}"
            if dev_f1 is not None:
                msg += f" dev F1 {dev_f1:.3f}"
            log(msg)
    if keep_best_dev and best_arrays is not None:
        params.arrays.update(best_arrays)
    return metrics


def train(
    config: TrainConfig,
    stage1_pairs: list[WindowPair] | None,
    stage2_pairs: list[WindowPair] | None,
    params: ModelParams | None = None,
    dev_pairs: list[WindowPair] | None = None,
    stft_cfg: StftConfig | None = None,
    log=None,
):
    """Two-stage training: contaminated pairs first, then mini-scene pairs
    warm-started from the stage-1 weights. Either stage may be skipped by
    passing None. Returns (params, per-epoch metrics)."""
    stft_cfg = stft_cfg or StftConfig(32)
    metrics: list[EpochMetrics] = []
    dev_set = featurize_pairs(dev_pairs, stft_cfg) if dev_pairs else None

    if params is None:
        model_cfg = ModelConfig.preset(
            config.preset, n_bins=config.n_bins, use_attention=config.use_attention
        )
        params = init_params(model_cfg, seed=config.seed)
    if str(params.dtype) != config.dtype:
        params = params.astype(config.dtype)

    first = stage1_pairs if stage1_pairs is not None else stage2_pairs
    if first is None:
        raise ValueError("no training data given")

    if stage1_pairs is not None:
        data1 = featurize_pairs(stage1_pairs, stft_cfg)
        mean, std = feature_stats(data1[0], data1[1])
        params.feat_mean = mean.astype(params.dtype)
        params.feat_std = std.astype(params.dtype)
        metrics += train_stage(
            params, data1, config.stage1_batch, config.epochs, config.lr,
            seed=config.seed + 1, stage=1, dev_set=dev_set, log=log,
            keep_best_dev=config.keep_best_dev,
        )

    if stage2_pairs is not None:
        data2 = featurize_pairs(stage2_pairs, stft_cfg)
        if stage1_pairs is None:
            mean, std = feature_stats(data2[0], data2[1])
            params.feat_mean = mean.astype(params.dtype)
            params.feat_std = std.astype(params.dtype)
        metrics += train_stage(
            params, data2, config.stage2_batch, config.epochs,
            config.stage2_lr if config.stage2_lr is not None else config.lr,
            seed=config.seed + 2, stage=2, dev_set=dev_set, log=log,
            keep_best_dev=config.keep_best_dev,
        )
    return params, metrics


# ------------------------------------------------------------------
# Gradient verification
# ------------------------------------------------------------------


def gradient_check_arrays(loss_and_grads, arrays: dict, step: float = 1e-3,
                          max_coords: int | None = None, rng=None):
    """Central-difference check of analytic gradients.

    ``loss_and_grads()`` evaluates the current arrays and returns
    (loss, grads-dict) or (loss, grads-dict, activation-pattern). When a
    pattern is returned, coordinates whose perturbation flips a ReLU or
    max-pool decision are skipped: the loss is non-differentiable there, so
    finite differences say nothing about the analytic gradient. Checks every
    coordinate unless ``max_coords`` caps the count per array (coordinates
    then drawn with ``rng``). Returns the max relative error.
    """

    def call():
        out = loss_and_grads()
        return out if len(out) == 3 else (*out, None)

    _, grads, pattern0 = call()
    worst = 0.0
    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            picks = (rng or np.random.default_rng(0)).choice(n, max_coords, replace=False)
        else:
            picks = range(n)
        gflat = grads[key].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            lp, _, pat_p = call()
            flat[i] = orig - step
            lm, _, pat_m = call()
            flat[i] = orig
            if pattern0 is not None and not (pat_p == pattern0 and pat_m == pattern0):
                continue
            numeric = (lp - lm) / (2.0 * step)
            analytic = gflat[i]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def activation_pattern(cache) -> bytes:
    """Fingerprint of every ReLU mask and pool decision in a forward cache.

    Two forward passes with the same fingerprint lie on the same smooth
    piece of the loss, so central differences between them are valid.
    """
    cache_hyp, cache_ref, _, _, _, mlp_mask, _ = cache
    parts = []
    for enc in (cache_hyp, cache_ref):
        _, m1, pc1, _, m2, pc2, _, m3, _ = enc
        parts += [m1.tobytes(), pc1[1].tobytes(), m2.tobytes(),
                  pc2[1].tobytes(), m3.tobytes()]
    parts.append(mlp_mask.tobytes())
    return b"".join(parts)


def gradient_check_model(params: ModelParams, x_hyp, x_ref, labels,
                         step: float = 1e-3, max_coords: int = 8, seed=0):
    """Finite-difference check of the full model on one small batch.

    Coordinates whose perturbation crosses a ReLU or max-pool kink are
    excluded (the loss is not differentiable there).
    """
    rng = np.random.default_rng(seed)

    def loss_and_grads():
        p, cache = forward_pair(x_hyp, x_ref, params)
        loss = float(np.mean(bce_loss(p, labels)))
        dlogit = (p - labels) / len(labels)
        grads = backward_pair(dlogit, cache, params)
        return loss, grads, activation_pattern(cache)

    return gradient_check_arrays(
        loss_and_grads, params.arrays, step=step, max_coords=max_coords, rng=rng
    )
