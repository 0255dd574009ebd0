"""The siamese drop classifier: shared CNN-LSTM encoder for the hypothesis
and reference windows, related by multi-head attention (or plain feature
concatenation in the ablation), then an MLP and a sigmoid.

Both encoder branches read the same parameter arrays, so the siamese weight
sharing holds by construction. The attention wiring takes queries and keys
from the hypothesis embedding and values from the reference; a config flag
switches keys to the reference stream instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from ..signal_core import Spectrogram
from . import ops

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 257
    conv_channels: int = 64
    lstm_cells: int = 128
    mlp_hidden: int = 64
    n_heads: int = 4
    kernel_len: int = 5
    use_attention: bool = True
    keys_from_reference: bool = False
    # standard residual attention block: the query stream bypasses the
    # attention output, so the classifier sees both streams first-order
    attention_residual: bool = True

    @classmethod
    def preset(cls, name: str, n_bins: int = 257, use_attention: bool = True):
        if name == "desk":
            return cls(n_bins=n_bins, conv_channels=64, lstm_cells=128,
                       mlp_hidden=64, n_heads=4, use_attention=use_attention)
        if name == "paper":
            return cls(n_bins=n_bins, conv_channels=512, lstm_cells=1024,
                       mlp_hidden=512, n_heads=8, use_attention=use_attention)
        raise ValueError(f"unknown preset '{name}'")


@dataclass
class ModelParams:
    """All learnable arrays plus the input normalization statistics."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            feat_mean=self.feat_mean.copy(),
            feat_std=self.feat_std.copy(),
        )

    def astype(self, dtype) -> "ModelParams":
        """Same parameters in another float width (float32 for training)."""
        return ModelParams(
            config=self.config,
            arrays={k: v.astype(dtype) for k, v in self.arrays.items()},
            feat_mean=self.feat_mean.astype(dtype),
            feat_std=self.feat_std.astype(dtype),
        )

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def _uniform(rng, fan_in, shape):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; forget-gate bias +1."""
    rng = np.random.default_rng(seed)
    C, H, M, K = (config.conv_channels, config.lstm_cells,
                  config.mlp_hidden, config.kernel_len)
    B = config.n_bins
    a: dict[str, np.ndarray] = {}
    a["conv1.W"] = _uniform(rng, B * K, (C, B, K))
    a["conv1.b"] = np.zeros(C)
    a["conv2.W"] = _uniform(rng, C * K, (C, C, K))
    a["conv2.b"] = np.zeros(C)
    a["conv3.W"] = _uniform(rng, C * K, (C, C, K))
    a["conv3.b"] = np.zeros(C)
    a["lstm.Wx"] = _uniform(rng, C, (C, 4 * H))
    a["lstm.Wh"] = _uniform(rng, H, (H, 4 * H))
    a["lstm.b"] = np.zeros(4 * H)
    a["lstm.b"][H:2 * H] = 1.0
    if config.use_attention:
        a["mha.Wq"] = _uniform(rng, H, (H, H))
        a["mha.Wk"] = _uniform(rng, H, (H, H))
        a["mha.Wv"] = _uniform(rng, H, (H, H))
        a["mha.Wo"] = _uniform(rng, H, (H, H))
        mlp_in = H
    else:
        mlp_in = 2 * H
    a["mlp.W1"] = _uniform(rng, mlp_in, (mlp_in, M))
    a["mlp.b1"] = np.zeros(M)
    a["mlp.W2"] = _uniform(rng, M, (M, 1))
    a["mlp.b2"] = np.zeros(1)
    return ModelParams(
        config=config,
        arrays=a,
        feat_mean=np.zeros(B),
        feat_std=np.ones(B),
    )


# ------------------------------------------------------------------
# Forward / backward
# ------------------------------------------------------------------


def encode(x, params: ModelParams):
    """Shared branch encoder: three conv blocks (pooling after the first
    two, total time decimation 4) followed by the LSTM."""
    a = params.arrays
    c1, cc1 = ops.conv1d_forward(x, a["conv1.W"], a["conv1.b"])
    r1, m1 = ops.relu_forward(c1)
    p1, pc1 = ops.maxpool_time_forward(r1)
    c2, cc2 = ops.conv1d_forward(p1, a["conv2.W"], a["conv2.b"])
    r2, m2 = ops.relu_forward(c2)
    p2, pc2 = ops.maxpool_time_forward(r2)
    c3, cc3 = ops.conv1d_forward(p2, a["conv3.W"], a["conv3.b"])
    r3, m3 = ops.relu_forward(c3)
    h, lc = ops.lstm_forward(r3, a["lstm.Wx"], a["lstm.Wh"], a["lstm.b"])
    return h, (cc1, m1, pc1, cc2, m2, pc2, cc3, m3, lc)


def encode_backward(dh, cache, grads):
    cc1, m1, pc1, cc2, m2, pc2, cc3, m3, lc = cache
    dx, dWx, dWh, db = ops.lstm_backward(dh, lc)
    grads["lstm.Wx"] += dWx
    grads["lstm.Wh"] += dWh
    grads["lstm.b"] += db
    dx = ops.relu_backward(dx, m3)
    dx, dW, dbc = ops.conv1d_backward(dx, cc3)
    grads["conv3.W"] += dW
    grads["conv3.b"] += dbc
    dx = ops.maxpool_time_backward(dx, pc2)
    dx = ops.relu_backward(dx, m2)
    dx, dW, dbc = ops.conv1d_backward(dx, cc2)
    grads["conv2.W"] += dW
    grads["conv2.b"] += dbc
    dx = ops.maxpool_time_backward(dx, pc1)
    dx = ops.relu_backward(dx, m1)
    dx, dW, dbc = ops.conv1d_backward(dx, cc1)
    grads["conv1.W"] += dW
    grads["conv1.b"] += dbc
    return dx


def _standardize(x, params):
    return (x - params.feat_mean) / params.feat_std


def forward_pair(x_hyp, x_ref, params: ModelParams):
    """Probability of a drop in the hypothesis window, batched.

    x_hyp, x_ref: (B, T, n_bins) raw dB features; standardization with the
    stored statistics happens here.
    """
    if x_hyp.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {x_hyp.shape} vs {x_ref.shape}")
    if x_hyp.shape[2] != params.config.n_bins:
        raise ValueError(
            f"expected {params.config.n_bins} bins, got {x_hyp.shape[2]}"
        )
    a = params.arrays
    h_hyp, cache_hyp = encode(_standardize(x_hyp, params), params)
    h_ref, cache_ref = encode(_standardize(x_ref, params), params)

    if params.config.use_attention:
        h_k = h_ref if params.config.keys_from_reference else h_hyp
        y, mha_cache = ops.mha_forward(
            h_hyp, h_k, h_ref,
            a["mha.Wq"], a["mha.Wk"], a["mha.Wv"], a["mha.Wo"],
            params.config.n_heads,
        )
        if params.config.attention_residual:
            y = h_hyp + y
    else:
        y, mha_cache = np.concatenate([h_hyp, h_ref], axis=2), None

    last = y[:, -1]
    z1, lc1 = ops.linear_forward(last, a["mlp.W1"], a["mlp.b1"])
    r1, m1 = ops.relu_forward(z1)
    logit, lc2 = ops.linear_forward(r1, a["mlp.W2"], a["mlp.b2"])
    logit = logit[:, 0]
    p = ops.sigmoid(logit)
    cache = (cache_hyp, cache_ref, mha_cache, y.shape, lc1, m1, lc2)
    return p, cache


def backward_pair(dlogit, cache, params: ModelParams):
    """Gradients of a scalar loss wrt every parameter, given dL/dlogit."""
    cache_hyp, cache_ref, mha_cache, y_shape, lc1, m1, lc2 = cache
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    dr1, dW2, db2 = ops.linear_backward(dlogit[:, None], lc2)
    grads["mlp.W2"] += dW2
    grads["mlp.b2"] += db2
    dz1 = ops.relu_backward(dr1, m1)
    dlast, dW1, db1 = ops.linear_backward(dz1, lc1)
    grads["mlp.W1"] += dW1
    grads["mlp.b1"] += db1

    dy = np.zeros(y_shape, dtype=dlast.dtype)
    dy[:, -1] = dlast

    if params.config.use_attention:
        dh_q, dh_k, dh_v, dWq, dWk, dWv, dWo = ops.mha_backward(dy, mha_cache)
        grads["mha.Wq"] += dWq
        grads["mha.Wk"] += dWk
        grads["mha.Wv"] += dWv
        grads["mha.Wo"] += dWo
        if params.config.keys_from_reference:
            dh_hyp = dh_q
            dh_ref = dh_v + dh_k
        else:
            dh_hyp = dh_q + dh_k
            dh_ref = dh_v
        if params.config.attention_residual:
            dh_hyp = dh_hyp + dy
    else:
        H = params.config.lstm_cells
        dh_hyp = dy[:, :, :H]
        dh_ref = dy[:, :, H:]

    encode_backward(dh_hyp, cache_hyp, grads)
    encode_backward(dh_ref, cache_ref, grads)
    return grads


def _as_batch(x, dtype):
    if isinstance(x, Spectrogram):
        x = x.values
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected 2-D or 3-D features, got shape {x.shape}")


def classify_forward(hyp_spec, ref_spec, params: ModelParams):
    """p(drop in hypothesis | hypothesis, reference) in (0, 1).

    Accepts ``Spectrogram`` objects or raw (T, bins) / (B, T, bins) arrays.
    """
    x_hyp, single = _as_batch(hyp_spec, params.dtype)
    x_ref, _ = _as_batch(ref_spec, params.dtype)
    p, _ = forward_pair(x_hyp, x_ref, params)
    return float(p[0]) if single else p


def classify_forward_concat(hyp_spec, ref_spec, params: ModelParams):
    """The no-attention ablation; requires params built without attention."""
    if params.config.use_attention:
        raise ValueError("params were built with attention enabled")
    return classify_forward(hyp_spec, ref_spec, params)


# ------------------------------------------------------------------
# Checkpointing
# ------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config)}
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        __feat_mean__=params.feat_mean,
        __feat_std__=params.feat_std,
        **params.arrays,
    )


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        config = ModelConfig(**meta["config"])
        arrays = {
            k: data[k] for k in data.files if not k.startswith("__")
        }
        return ModelParams(
            config=config,
            arrays=arrays,
            feat_mean=data["__feat_mean__"],
            feat_std=data["__feat_std__"],
        )
