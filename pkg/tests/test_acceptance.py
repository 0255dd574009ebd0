"""Acceptance gate: one test per criterion, each printing a PASS line.

Criterion 5 (end-to-end two-stage training) dominates the runtime at
roughly 15-20 minutes on two CPU cores; criterion 7 runs the four-row
experiment grid at a reduced but structurally identical scale. Run with
``pytest tests/test_acceptance.py -v -s`` to watch progress.
"""

import itertools
import json
import time

import numpy as np
import pytest
from scipy import stats

from dropscan.detector import Combiner
from dropscan.drop_injector import (
    DropDistribution,
    inject_scene_drops,
    sample_durations,
    truncated_normal_mean,
)
from dropscan.eval_harness import (
    ExperimentConfig,
    build_stage1_dataset,
    build_stage2_dataset,
    evaluate_windows,
)
from dropscan.neural import (
    AdamState,
    ModelConfig,
    adam_step,
    bce_loss,
    forward_pair,
    backward_pair,
    gradient_check_model,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from dropscan.neural import ops
from dropscan.neural.training import (
    TrainConfig,
    featurize_pairs,
    feature_stats,
    gradient_check_arrays,
    train,
)
from dropscan.scene_sim import mix_at_snr, random_scene_config, render_scene
from dropscan.signal_core import StftConfig, Waveform, fft, hann_window, spectrogram, stft
from dropscan.xcorr_align import ncc2d, scan_device

FS = 16000


def report(criterion, detail):
    print(f"\n[ACCEPTANCE] criterion {criterion}: PASS - {detail}")


# ---------------------------------------------------------------------
# Criterion 1: numerical oracles
# ---------------------------------------------------------------------


def test_criterion_1_numerical_oracles():
    rng = np.random.default_rng(101)

    # FFT and STFT against a direct O(N^2) DFT
    def naive_dft(x):
        n = len(x)
        k = np.arange(n)
        return np.exp(-2j * np.pi * np.outer(k, k) / n) @ np.asarray(x, complex)

    x = rng.standard_normal(256)
    fft_err = float(np.max(np.abs(fft(x, 256) - naive_dft(x))))
    assert fft_err < 1e-9

    cfg = StftConfig(32)
    w = Waveform(0.4 * rng.standard_normal(2048), FS)
    frames = stft(w, cfg)
    win = hann_window(512)
    stft_err = 0.0
    for t in range(frames.n_frames):
        seg = np.zeros(512, complex)
        seg[:512] = w.samples[t * 256:t * 256 + 512] * win
        stft_err = max(stft_err, float(np.max(np.abs(frames.values[t] - naive_dft(seg)))))
    assert stft_err < 1e-9

    # NCC against the brute-force double loop
    pattern = rng.standard_normal((16, 8))
    region = rng.standard_normal((40, 8))
    a = pattern - pattern.mean()
    brute = []
    for s in range(region.shape[0] - 16 + 1):
        win2 = region[s:s + 16]
        b = win2 - win2.mean()
        brute.append((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))
    ncc_err = float(np.max(np.abs(ncc2d(pattern, region) - np.array(brute))))
    assert ncc_err < 1e-12

    # conv forward against direct summation
    xc = rng.standard_normal((1, 12, 3))
    Wc = rng.standard_normal((4, 3, 5))
    bc = rng.standard_normal(4)
    y, _ = ops.conv1d_forward(xc, Wc, bc)
    direct = np.zeros((12, 4))
    for t in range(12):
        for o in range(4):
            acc = bc[o]
            for c in range(3):
                for k in range(5):
                    ti = t + k - 2
                    if 0 <= ti < 12:
                        acc += Wc[o, c, k] * xc[0, ti, c]
            direct[t, o] = acc
    conv_err = float(np.max(np.abs(y[0] - direct)))
    assert conv_err < 1e-12

    # attention forward against a per-head loop
    hq = rng.standard_normal((1, 6, 8))
    hk = rng.standard_normal((1, 6, 8))
    hv = rng.standard_normal((1, 6, 8))
    mats = [rng.standard_normal((8, 8)) * 0.5 for _ in range(4)]
    y, _ = ops.mha_forward(hq, hk, hv, *mats, n_heads=2)
    Q, K, V = hq[0] @ mats[0], hk[0] @ mats[1], hv[0] @ mats[2]
    heads = []
    for h in range(2):
        sl = slice(h * 4, (h + 1) * 4)
        S = Q[:, sl] @ K[:, sl].T / 2.0
        e = np.exp(S - S.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ V[:, sl])
    mha_err = float(np.max(np.abs(y[0] - np.concatenate(heads, axis=1) @ mats[3])))
    assert mha_err < 1e-12

    report(1, f"fft/stft {max(fft_err, stft_err):.1e} (<1e-9), "
              f"ncc {ncc_err:.1e}, conv {conv_err:.1e}, mha {mha_err:.1e} (<1e-12)")


# ---------------------------------------------------------------------
# Criterion 2: gradient suite
# ---------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst = {}

    # conv layer
    arrays = {"W": rng.standard_normal((4, 3, 5)) * 0.3,
              "b": rng.standard_normal(4) * 0.3,
              "x": rng.standard_normal((2, 6, 3))}
    proj = rng.standard_normal((2, 6, 4))

    def conv_lg():
        y, cache = ops.conv1d_forward(arrays["x"], arrays["W"], arrays["b"])
        dx, dW, db = ops.conv1d_backward(proj, cache)
        return float(np.sum(y * proj)), {"W": dW, "b": db, "x": dx}

    worst["conv"] = gradient_check_arrays(conv_lg, arrays)

    # max-pool (with its decision pattern so tie crossings are excluded)
    pool_arrays = {"x": rng.standard_normal((2, 9, 3))}
    pool_proj = rng.standard_normal((2, 5, 3))

    def pool_lg():
        y, cache = ops.maxpool_time_forward(pool_arrays["x"])
        dx = ops.maxpool_time_backward(pool_proj, cache)
        return float(np.sum(y * pool_proj)), {"x": dx}, cache[1].tobytes()

    worst["maxpool"] = gradient_check_arrays(pool_lg, pool_arrays)

    # lstm
    lstm_arrays = {"Wx": rng.standard_normal((3, 16)) * 0.4,
                   "Wh": rng.standard_normal((4, 16)) * 0.4,
                   "b": rng.standard_normal(16) * 0.2,
                   "x": rng.standard_normal((2, 5, 3))}
    lstm_proj = rng.standard_normal((2, 5, 4))

    def lstm_lg():
        hs, cache = ops.lstm_forward(lstm_arrays["x"], lstm_arrays["Wx"],
                                     lstm_arrays["Wh"], lstm_arrays["b"])
        dx, dWx, dWh, db = ops.lstm_backward(lstm_proj, cache)
        return float(np.sum(hs * lstm_proj)), {"Wx": dWx, "Wh": dWh, "b": db, "x": dx}

    worst["lstm"] = gradient_check_arrays(lstm_lg, lstm_arrays)

    # attention
    mha_arrays = {
        "hq": rng.standard_normal((1, 4, 6)), "hk": rng.standard_normal((1, 4, 6)),
        "hv": rng.standard_normal((1, 4, 6)),
        "Wq": rng.standard_normal((6, 6)) * 0.5, "Wk": rng.standard_normal((6, 6)) * 0.5,
        "Wv": rng.standard_normal((6, 6)) * 0.5, "Wo": rng.standard_normal((6, 6)) * 0.5,
    }
    mha_proj = rng.standard_normal((1, 4, 6))

    def mha_lg():
        y, cache = ops.mha_forward(mha_arrays["hq"], mha_arrays["hk"], mha_arrays["hv"],
                                   mha_arrays["Wq"], mha_arrays["Wk"],
                                   mha_arrays["Wv"], mha_arrays["Wo"], n_heads=2)
        dq, dk, dv, dWq, dWk, dWv, dWo = ops.mha_backward(mha_proj, cache)
        return float(np.sum(y * mha_proj)), {
            "hq": dq, "hk": dk, "hv": dv,
            "Wq": dWq, "Wk": dWk, "Wv": dWv, "Wo": dWo,
        }

    worst["mha"] = gradient_check_arrays(mha_lg, mha_arrays)

    # linear layer (near-exact for a quadratic loss)
    lin_arrays = {"W": rng.standard_normal((5, 3)), "b": rng.standard_normal(3),
                  "x": rng.standard_normal((4, 5))}
    lin_proj = rng.standard_normal((4, 3))

    def lin_lg():
        y, cache = ops.linear_forward(lin_arrays["x"], lin_arrays["W"], lin_arrays["b"])
        dx, dW, db = ops.linear_backward(lin_proj, cache)
        return float(np.sum(y * lin_proj)), {"W": dW, "b": db, "x": dx}

    worst["linear"] = gradient_check_arrays(lin_lg, lin_arrays)
    assert worst["linear"] < 1e-8

    # both full model variants
    tiny = dict(n_bins=9, conv_channels=6, lstm_cells=8, mlp_hidden=5, n_heads=2)
    x_hyp = rng.standard_normal((2, 13, 9))
    x_ref = rng.standard_normal((2, 13, 9))
    labels = np.array([1.0, 0.0])
    for name, attn in (("model_attention", True), ("model_concat", False)):
        params = init_params(ModelConfig(**tiny, use_attention=attn), seed=203)
        worst[name] = gradient_check_model(params, x_hyp, x_ref, labels, max_coords=8)

    for name, err in worst.items():
        assert err < 1e-4, f"{name}: {err}"
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, f"{summary} (all < 1e-4, {time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------
# Criterion 3: injection / alignment round trip
# ---------------------------------------------------------------------


def test_criterion_3_injection_alignment_round_trip():
    t0 = time.time()
    dist = DropDistribution()  # N(600, 150) ms, cut 50
    stft_cfg = StftConfig(32)

    recovered = 0
    n = 50
    for i in range(n):
        cfg = random_scene_config(seed=[300, i], n_devices=2,
                                  duration_range=(10.0, 14.0))
        scene = render_scene(cfg)
        rng = np.random.default_rng([301, i])
        dropped, events = inject_scene_drops(
            scene, 1, dist, rng, onset_range=(2.5, cfg.duration_s - 3.0)
        )
        ev = events[0]
        specs = [spectrogram(dropped.channel(d, 0), stft_cfg) for d in range(2)]
        scan = scan_device(specs, ev.device_id - 1)
        if scan.candidates:
            best = max(scan.candidates, key=lambda c: abs(c.estimated_drop_samples))
            if (abs(best.estimated_drop_samples - ev.duration_samples) <= 256
                    and best.contains(ev.onset_sample)):
                recovered += 1
    assert recovered >= 0.9 * n, f"recovered only {recovered}/{n}"

    false_scenes = 0
    for i in range(n):
        cfg = random_scene_config(seed=[302, i], n_devices=2,
                                  duration_range=(10.0, 14.0))
        scene = render_scene(cfg)
        specs = [spectrogram(scene.channel(d, 0), stft_cfg) for d in range(2)]
        if any(scan_device(specs, d).candidates for d in range(2)):
            false_scenes += 1
    assert false_scenes <= 2, f"{false_scenes} clean scenes raised candidates"

    report(3, f"recovered {recovered}/{n} drops within 256 samples, "
              f"{false_scenes}/{n} clean-scene false alarms "
              f"({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------
# Criterion 4: overfit sanity
# ---------------------------------------------------------------------


def test_criterion_4_overfit_sanity():
    t0 = time.time()
    cfg = ExperimentConfig(stage1_pairs=60, seed=404)
    pairs = build_stage1_dataset(cfg)[:10]
    x_hyp, x_ref, y = featurize_pairs(pairs)
    params = init_params(ModelConfig.preset("desk"), seed=404)
    mean, std = feature_stats(x_hyp, x_ref)
    params.feat_mean, params.feat_std = mean, std

    bh, br = x_hyp.astype(np.float64), x_ref.astype(np.float64)
    state = AdamState(lr=5e-4)  # criterion permits lr x10 here
    final = None
    for step in range(500):
        p, cache = forward_pair(bh, br, params)
        loss = float(np.mean(bce_loss(p, y)))
        if loss < 0.01:
            final = (step, loss)
            break
        grads = backward_pair((p - y) / len(y), cache, params)
        adam_step(params, grads, state)
    assert final is not None, "BCE never fell below 0.01 within 500 steps"
    report(4, f"BCE {final[1]:.4f} after {final[0]} Adam steps "
              f"({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------
# Criterion 5: end-to-end detection quality
# ---------------------------------------------------------------------


def test_criterion_5_end_to_end_f1():
    t0 = time.time()
    cfg = ExperimentConfig(seed=11)
    stage1 = build_stage1_dataset(cfg)
    corpus = build_stage2_dataset(cfg)
    n_eval = len(corpus.eval_windows)
    n_pos = sum(w.label for w in corpus.eval_windows)
    assert n_eval >= 300, f"only {n_eval} eval windows"
    assert 0.4 <= n_pos / n_eval <= 0.6, "eval windows not balanced"

    tc = TrainConfig(
        epochs=cfg.epochs, stage1_batch=cfg.stage1_batch,
        stage2_batch=cfg.stage2_batch, lr=cfg.lr, stage2_lr=cfg.stage2_lr,
        seed=cfg.seed,
    )
    params, _ = train(tc, stage1, corpus.train_pairs,
                      dev_pairs=corpus.dev_pairs, stft_cfg=cfg.stft())
    report_m, _ = evaluate_windows(params, corpus.eval_windows,
                                   Combiner(cfg.combiner))
    assert report_m.f1 >= 0.80, f"F1 {report_m.f1:.3f} < 0.80"
    report(5, f"eval F1 {report_m.f1:.3f} (P {report_m.precision:.3f}, "
              f"R {report_m.recall:.3f}) on {n_eval} windows "
              f"({(time.time() - t0) / 60:.1f} min)")


# ---------------------------------------------------------------------
# Criterion 6: invariant suites
# ---------------------------------------------------------------------


def test_criterion_6_invariants(tmp_path):
    t0 = time.time()

    # truncated-normal sampler: mean within 0.5% and KS at 1%
    dist = DropDistribution(unit="samples")
    rng = np.random.default_rng(606)
    draws = sample_durations(dist, FS, rng, 1_000_000).astype(float)
    analytic = truncated_normal_mean(dist)
    mean_err = abs(draws.mean() - analytic) / analytic
    assert mean_err < 0.005
    a = (dist.left_cut - dist.mean) / dist.std
    ks = stats.kstest(draws[:100_000],
                      stats.truncnorm(a, np.inf, loc=dist.mean, scale=dist.std).cdf)
    assert ks.pvalue > 0.01

    # SNR mixing accuracy
    rng = np.random.default_rng(607)
    clean = Waveform(rng.standard_normal(30000) * 0.4, FS)
    noise = Waveform(rng.standard_normal(30000) * 1.3, FS)
    for target in (0.0, 7.5, 20.0):
        out = mix_at_snr(clean, noise, target)
        added = out.samples - clean.samples
        measured = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(added ** 2))
        assert abs(measured - target) <= 0.01

    # combiner permutation invariance and monotonicity
    rngc = np.random.default_rng(608)
    for kind in ("mean", "median", "majority"):
        comb = Combiner(kind)
        probs = list(rngc.uniform(0, 1, 5))
        scores = {round(comb.combine(list(p)), 12)
                  for p in itertools.permutations(probs)}
        assert len(scores) == 1
        for _ in range(100):
            ps = rngc.uniform(0, 1, 5)
            base = comb.combine(ps)
            j = rngc.integers(0, 5)
            up = ps.copy()
            up[j] = min(1.0, up[j] + rngc.uniform(0, 0.4))
            assert comb.combine(up) >= base - 1e-12

    # siamese parameter sharing: one storage, both branches byte-identical
    tiny = ModelConfig(n_bins=9, conv_channels=6, lstm_cells=8, mlp_hidden=5,
                       n_heads=2)
    params = init_params(tiny, seed=609)
    assert not any("hyp" in k or "ref" in k for k in params.arrays)
    x = np.random.default_rng(610).standard_normal((1, 13, 9))
    from dropscan.neural.model import encode
    h1, _ = encode(x, params)
    h2, _ = encode(x, params)
    np.testing.assert_array_equal(h1, h2)

    # checkpoint round trip is bit-exact
    params.feat_mean = np.random.default_rng(611).standard_normal(9)
    params.feat_std = np.abs(np.random.default_rng(612).standard_normal(9)) + 0.1
    save_checkpoint(params, tmp_path / "ck.npz")
    back = load_checkpoint(tmp_path / "ck.npz")
    for k in params.arrays:
        np.testing.assert_array_equal(back.arrays[k], params.arrays[k])
    np.testing.assert_array_equal(back.feat_mean, params.feat_mean)
    np.testing.assert_array_equal(back.feat_std, params.feat_std)

    # same-seed training is bit-reproducible in double precision
    cfg = ExperimentConfig(stage1_pairs=60, seed=613)
    pairs = build_stage1_dataset(cfg)
    tc = TrainConfig(epochs=2, lr=5e-4, seed=613, dtype="float64")
    pa, _ = train(tc, pairs, None)
    pb, _ = train(tc, pairs, None)
    for k in pa.arrays:
        np.testing.assert_array_equal(pa.arrays[k], pb.arrays[k])

    report(6, f"sampler mean err {100 * mean_err:.3f}% (<0.5%), KS p {ks.pvalue:.3f}, "
              f"SNR within 0.01 dB, combiner invariances, siamese sharing, "
              f"checkpoint + training bit-reproducibility ({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------
# Criterion 7: Table-1-shaped report
# ---------------------------------------------------------------------


def test_criterion_7_table1_ordering(tmp_path):
    t0 = time.time()
    from dropscan.cli import main

    out = tmp_path / "table1"
    code = main([
        "table1", "--out", str(out),
        "--train-scenes", "40", "--dev-scenes", "6", "--eval-scenes", "12",
        "--stage1-pairs", "900", "--eval-min-positives", "60",
        "--epochs", "14", "--seed", "11",
    ])
    assert code == 0
    lines = (out / "table1.csv").read_text().strip().splitlines()
    assert lines[0] == "row,precision,recall,f1,tp,fp,fn,tn"
    rows = {parts[0]: [float(v) for v in parts[1:]]
            for parts in (line.split(",") for line in lines[1:])}
    assert set(rows) == {"pre_nn", "nn_no_pretrain", "nn_no_attention", "nn_full"}
    f1_full = rows["nn_full"][2]
    f1_pre = rows["pre_nn"][2]
    assert f1_full > f1_pre, f"full {f1_full} must exceed pre-NN {f1_pre}"
    assert (out / "table1.md").exists()
    report(7, f"4 rows emitted; full F1 {f1_full:.3f} > Pre-NN F1 {f1_pre:.3f} "
              f"({(time.time() - t0) / 60:.1f} min)")
