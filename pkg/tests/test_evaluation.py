import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crseg.evaluation import DEFAULT_THRESHOLDS, EvalReport, SweepAccumulator, iou, threshold_sweep

import oracles

masks = arrays(np.bool_, (6, 6))


def test_iou_cases():
    gt = np.zeros((4, 4), bool)
    gt[0, :] = True
    assert iou(gt, gt, 1) == 1.0
    assert iou(~gt, gt, 1) == 0.0
    pred = np.zeros((4, 4), bool)
    pred[0, 2:] = True
    pred[1, :2] = True
    assert iou(pred, gt, 1) == pytest.approx(2 / 6)


def test_iou_empty_union():
    z = np.zeros((3, 3), bool)
    assert iou(z, z, 1) == 1.0
    assert iou(~z, ~z, 0) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))


@given(masks, masks, st.sampled_from([0, 1]))
def test_iou_symmetric(a, b, cls):
    assert iou(a, b, cls) == iou(b, a, cls)


@given(masks, masks)
def test_miou_complement_invariant(p, g):
    m1 = (iou(p, g, 1) + iou(p, g, 0)) / 2
    m2 = (iou(~p, ~g, 1) + iou(~p, ~g, 0)) / 2
    assert m1 == pytest.approx(m2)


def test_default_sweep_has_19_entries():
    assert len(DEFAULT_THRESHOLDS) == 19
    assert DEFAULT_THRESHOLDS[0] == 0.05 and DEFAULT_THRESHOLDS[-1] == 0.95


def test_perfect_probability_map():
    rng = np.random.default_rng(0)
    gt = rng.random((10, 10)) < 0.2
    rep = threshold_sweep(gt.astype(float), gt)
    assert all(m == 1.0 for _, _, m in rep.per_threshold)


def test_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        prob = rng.random((8, 8))
        gt = rng.random((8, 8)) < 0.3
        # include thresholds equal to some pixel values to exercise >=
        ts = sorted(set(np.round(rng.uniform(0.01, 0.99, 6), 3).tolist() + [float(prob[0, 0])]))
        rep = threshold_sweep(prob, gt, ts)
        for t, row in zip(ts, rep.per_threshold):
            ref = oracles.sweep_counts(prob.ravel().tolist(), gt.ravel().tolist(), t)
            assert np.allclose(row, ref, rtol=0, atol=1e-9)


def test_global_accumulation():
    rng = np.random.default_rng(2)
    probs = [rng.random((5, 5)) for _ in range(4)]
    gts = [rng.random((5, 5)) < 0.4 for _ in range(4)]
    rep = threshold_sweep(probs, gts, [0.3, 0.5])
    flat_p = np.concatenate([p.ravel() for p in probs]).tolist()
    flat_g = np.concatenate([g.ravel() for g in gts]).tolist()
    for t, row in zip([0.3, 0.5], rep.per_threshold):
        assert np.allclose(row, oracles.sweep_counts(flat_p, flat_g, t), atol=1e-12)


def test_tie_breaks_to_smallest_threshold():
    prob = np.array([[0.1, 0.9]])
    gt = np.array([[0, 1]])
    rep = threshold_sweep(prob, gt, [0.2, 0.5, 0.8])
    assert [m for _, _, m in rep.per_threshold] == [1.0, 1.0, 1.0]
    assert rep.best_threshold == 0.2


def test_best_is_argmax():
    rng = np.random.default_rng(3)
    prob, gt = rng.random((16, 16)), rng.random((16, 16)) < 0.2
    rep = threshold_sweep(prob, gt)
    mious = [m for _, _, m in rep.per_threshold]
    assert rep.best_miou == max(mious)
    assert rep.best_threshold == rep.thresholds[mious.index(max(mious))]


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0.1, 10))
def test_argmax_stable_under_rescaling(mious, scale):
    def argmax_first(v):
        return int(np.argmax(np.asarray(v)))
    assert argmax_first(mious) == argmax_first([m * scale for m in mious])


@pytest.mark.parametrize("bad", [[], [0.5, 0.4], [0.0, 0.5], [0.5, 1.0], [0.3, 0.3]])
def test_bad_thresholds(bad):
    with pytest.raises(ValueError):
        threshold_sweep(np.zeros((2, 2)), np.zeros((2, 2)), bad)


def test_blank_on_blank_image():
    rep = threshold_sweep(np.zeros((4, 4)), np.zeros((4, 4)), [0.5])
    assert rep.per_threshold[0] == (1.0, 1.0, 1.0)


def test_csv(tmp_path):
    rep = threshold_sweep(np.array([[0.2, 0.8]]), np.array([[0, 1]]), [0.5])
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,iou_fg,iou_bg,miou"
    assert lines[1].startswith("0.5000,1.000000")
    assert rep.summary_line() == "0.5000,1.000000"
