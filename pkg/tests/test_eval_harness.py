import numpy as np
import pytest

from dropscan.detector import Combiner, DeviceDecision
from dropscan.drop_injector import DropEvent
from dropscan.eval_harness import (
    ExperimentConfig,
    MetricsReport,
    build_stage1_dataset,
    build_stage2_dataset,
    compute_metrics,
    evaluate_windows,
    format_table1_markdown,
    metrics_from_labels,
    write_table1_csv,
)
from dropscan.neural import ModelConfig, init_params

FS = 16000


def _decision(device, start, end, label, score=None):
    return DeviceDecision(
        device_id=device, window_start=start, window_end=end,
        per_reference_probs=[float(label)] * 5,
        combined_score=float(label) if score is None else score,
        label=label,
    )


# ---------------------------------------------------------------- metrics


def test_f1_matches_paper_reference_point():
    # P 87.5 and R 88.6 combine to the paper's reported 88.0
    p, r = 0.875, 0.886
    f1 = 2 * p * r / (p + r)
    assert f1 == pytest.approx(0.880, abs=5e-4)


def test_metrics_empty_case_convention():
    m = MetricsReport(tp=0, fp=0, fn=0, tn=0)
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0


def test_metrics_small_enumerated_case():
    m = MetricsReport(tp=3, fp=1, fn=1, tn=10)
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.75)
    assert m.f1 == pytest.approx(0.75)


def test_f1_from_rates_matches_f1_from_counts():
    rng = np.random.default_rng(0)
    for _ in range(50):
        tp, fp, fn = rng.integers(1, 100, 3)
        m = MetricsReport(tp=int(tp), fp=int(fp), fn=int(fn), tn=0)
        p, r = m.precision, m.recall
        assert abs(m.f1 - 2 * p * r / (p + r)) < 1e-12


def test_metrics_from_labels():
    y = [1, 1, 0, 0, 1]
    pred = [1, 0, 0, 1, 1]
    m = metrics_from_labels(y, pred)
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 1)


def test_compute_metrics_greedy_window_matching():
    events = [DropEvent(1, 2 * FS, 5000), DropEvent(2, 4 * FS, 3000)]
    decisions = [
        _decision(1, int(1.5 * FS), int(2.5 * FS), 1),   # covers onset -> TP
        _decision(1, int(1.9 * FS), int(2.9 * FS), 1),   # same onset -> FP
        _decision(1, 6 * FS, 7 * FS, 1),                 # no onset -> FP
        _decision(1, 8 * FS, 9 * FS, 0),                 # no onset -> TN
        # device 2 onset never covered by a positive -> FN
        _decision(2, 0, FS, 0),
    ]
    m = compute_metrics(decisions, events)
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 2, 1, 2)


def test_compute_metrics_order_invariance():
    events = [DropEvent(1, 2 * FS, 5000)]
    decisions = [
        _decision(1, int(1.5 * FS), int(2.5 * FS), 1),
        _decision(1, 5 * FS, 6 * FS, 0),
        _decision(1, 7 * FS, 8 * FS, 1),
    ]
    a = compute_metrics(decisions, events)
    b = compute_metrics(decisions[::-1], events)
    assert (a.tp, a.fp, a.fn, a.tn) == (b.tp, b.fp, b.fn, b.tn)


def test_compute_metrics_uses_observed_onsets():
    # two drops on one device: the second onset shifts earlier by the first
    events = [DropEvent(1, 2 * FS, FS), DropEvent(1, 6 * FS, 5000)]
    observed_second = 6 * FS - FS
    decisions = [
        _decision(1, observed_second - 4000, observed_second + 4000, 1),
    ]
    m = compute_metrics(decisions, events)
    assert m.tp == 1


# ----------------------------------------------------------- stage-1 data


def _small_cfg(**kw):
    base = dict(train_scenes=3, dev_scenes=1, eval_scenes=2, stage1_pairs=60,
                eval_min_positives=6, seed=123)
    base.update(kw)
    return ExperimentConfig(**base)


def test_stage1_dataset_balance_and_construction():
    pairs = build_stage1_dataset(_small_cfg())
    assert len(pairs) == 60
    assert sum(p.label for p in pairs) == 30
    for p in pairs:
        assert len(p.hypothesis) == FS and len(p.reference) == FS
        if p.label:
            assert 0.05 * FS <= p.drop_offset_in_window <= 0.95 * FS


def test_stage1_dataset_deterministic():
    a = build_stage1_dataset(_small_cfg())
    b = build_stage1_dataset(_small_cfg())
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.hypothesis.samples, pb.hypothesis.samples)
        np.testing.assert_array_equal(pa.reference.samples, pb.reference.samples)
        assert pa.label == pb.label


# ----------------------------------------------------------- stage-2 data


@pytest.fixture(scope="module")
def corpus():
    return build_stage2_dataset(_small_cfg())


def test_stage2_split_bookkeeping(corpus):
    assert set(corpus.scene_drops) == {"train", "dev", "eval"}
    assert len(corpus.scene_drops["train"]) == 3
    assert len(corpus.scene_drops["dev"]) == 1
    assert len(corpus.scene_drops["eval"]) == 2


def test_stage2_pairs_balanced_and_sized(corpus):
    labels = [p.label for p in corpus.train_pairs]
    assert abs(sum(labels) - len(labels) / 2) <= len(labels) * 0.2
    eval_pos = sum(w.label for w in corpus.eval_windows)
    assert eval_pos >= 6 or sum(corpus.scene_drops["eval"]) == 0


def test_stage2_eval_windows_have_all_references(corpus):
    cfg = _small_cfg()
    for w in corpus.eval_windows:
        assert w.ref_feats.shape[0] == cfg.n_devices - 1
        assert w.hyp_feats.shape == w.ref_feats.shape[1:]


def test_stage2_deterministic():
    a = build_stage2_dataset(_small_cfg())
    b = build_stage2_dataset(_small_cfg())
    assert a.scene_drops == b.scene_drops
    assert len(a.train_pairs) == len(b.train_pairs)
    for wa, wb in zip(a.eval_windows, b.eval_windows):
        np.testing.assert_array_equal(wa.hyp_feats, wb.hyp_feats)
        assert (wa.device_id, wa.start_sample, wa.label) == \
               (wb.device_id, wb.start_sample, wb.label)


# ------------------------------------------------------------- evaluation


def test_evaluate_windows_shapes(corpus):
    if not corpus.eval_windows:
        pytest.skip("no eval windows in this tiny corpus")
    tiny = ModelConfig(n_bins=257, conv_channels=4, lstm_cells=8, mlp_hidden=4,
                       n_heads=2)
    params = init_params(tiny, seed=0)
    report, decisions = evaluate_windows(params, corpus.eval_windows,
                                         Combiner("mean"))
    assert report.tp + report.fp + report.fn + report.tn == len(corpus.eval_windows)
    cfg = _small_cfg()
    for d in decisions:
        assert len(d.per_reference_probs) == cfg.n_devices - 1
        assert d.label in (0, 1)


# ------------------------------------------------------------ table shape


def test_table1_writers(tmp_path):
    results = {
        "pre_nn": MetricsReport(10, 5, 6, 9),
        "nn_no_pretrain": MetricsReport(11, 5, 5, 9),
        "nn_no_attention": MetricsReport(12, 4, 4, 10),
        "nn_full": MetricsReport(14, 2, 2, 12),
    }
    write_table1_csv(tmp_path / "t.csv", results)
    lines = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert len(lines) == 5
    md = format_table1_markdown(results)
    assert md.count("\n") == 5  # header + separator + 4 rows
    assert "Pre-NN" in md
