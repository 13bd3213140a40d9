import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqseg import losses


def jac_grad_oracle(pred, truth):
    fg = truth.astype(bool)
    denom = fg.sum() + pred[~fg].sum()
    g = np.empty_like(pred)
    g[fg] = -1.0 / denom
    g[~fg] = pred[fg].sum() / denom ** 2
    return g


def test_jaccard_value_and_closed_form_gradient():
    rng = np.random.default_rng(0)
    pred = rng.uniform(size=(6, 6))
    truth = (rng.random((6, 6)) < 0.3).astype(np.uint8)
    r = losses.jaccard_loss(pred, truth)
    fg = truth.astype(bool)
    assert r.value == pytest.approx(1 - pred[fg].sum() / (fg.sum() + pred[~fg].sum()), abs=1e-15)
    np.testing.assert_allclose(r.grad, jac_grad_oracle(pred, truth), rtol=0, atol=1e-12)
    assert not r.empty_foreground


def test_jaccard_perfect_and_worst():
    truth = np.array([[1, 0], [0, 1]])
    assert losses.jaccard_loss(truth.astype(float), truth).value == 0.0
    assert losses.jaccard_loss(1.0 - truth, truth).value == 1.0


def test_jaccard_empty_foreground():
    pred = np.array([[0.2, 0.3], [0.0, 0.5]])
    r = losses.jaccard_loss(pred, np.zeros((2, 2)))
    assert r.empty_foreground
    assert r.value == pytest.approx(1.0 / 2.0)
    np.testing.assert_allclose(r.grad, 1.0 / 4.0)
    assert losses.jaccard_loss(np.zeros((2, 2)), np.zeros((2, 2))).value == 0.0


def test_ce_and_cbce_values():
    pred = np.array([0.9, 0.2, 0.6, 0.1])
    truth = np.array([1, 0, 1, 0])
    ce = losses.cross_entropy_loss(pred, truth).value
    assert ce == pytest.approx(-(math.log(0.9) + math.log(0.8) + math.log(0.6) + math.log(0.9)) / 4)
    truth = np.array([1, 0, 0, 0])
    beta = 3 / 4
    want = -(beta * math.log(0.9) + (1 - beta) * (math.log(0.8) + math.log(0.4) + math.log(0.9))) / 4
    assert losses.cbce_loss(pred, truth).value == pytest.approx(want)


def test_ce_clamps_extremes():
    r = losses.cross_entropy_loss(np.array([0.0, 1.0]), np.array([1, 0]))
    assert math.isfinite(r.value) and r.value == pytest.approx(-math.log(1e-7))
    np.testing.assert_array_equal(r.grad, 0.0)


def test_bad_inputs():
    with pytest.raises(ValueError, match="shape"):
        losses.jaccard_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="binary"):
        losses.jaccard_loss(np.zeros(3), np.array([0, 2, 1]))
    with pytest.raises(ValueError, match="unknown loss"):
        losses.get_loss("dice")


def test_batch_loss_is_mean_of_slices():
    rng = np.random.default_rng(1)
    pred = rng.uniform(size=(3, 1, 4, 4))
    truth = (rng.random((3, 1, 4, 4)) < 0.4).astype(np.uint8)
    b = losses.batch_loss("jac", pred, truth)
    singles = [losses.jaccard_loss(pred[i], truth[i]) for i in range(3)]
    assert b.value == pytest.approx(np.mean([s.value for s in singles]), abs=1e-15)
    np.testing.assert_allclose(b.grad[1], singles[1].grad / 3)


def test_deep_supervision_sums_terms():
    rng = np.random.default_rng(2)
    truth = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.uint8)
    units = [rng.uniform(size=(2, 1, 4, 4)) for _ in range(3)]
    fused = np.mean(units, axis=0)
    ds = losses.deep_supervision_objective(units, fused, truth, "ce")
    parts = [losses.batch_loss("ce", u, truth).value for u in [fused] + units]
    assert ds.value == pytest.approx(sum(parts), abs=1e-14)
    assert ds.unit_values == pytest.approx(parts[1:])
    with pytest.raises(ValueError):
        losses.deep_supervision_objective([np.zeros((2, 1, 3, 3))], fused, truth)


def test_threshold_sweep_and_range(tmp_path):
    truth = np.zeros((2, 4, 4), dtype=np.uint8)
    truth[:, 1:3, 1:3] = 1
    pred = truth * 0.8 + 0.1
    rows = losses.threshold_sweep(pred, truth)
    assert [t for t, _ in rows] == losses.default_thresholds()
    assert len(rows) == 19 and rows[0][0] == 0.05 and rows[-1][0] == 0.95
    assert losses.dsc_range(rows) == 1.0  # 0.4 at t <= 0.1, 1 in the middle, 0 above 0.9
    path = tmp_path / "sweep.csv"
    losses.write_sweep_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,dsc" and lines[1] == "0.050000,0.400000"
    with pytest.raises(ValueError):
        losses.threshold_sweep(pred, truth, [0.5, 0.4])
    with pytest.raises(ValueError):
        losses.threshold_sweep(pred, truth, [])


def test_dataset_sweep_averages_volumes():
    truth = np.ones((1, 2, 2), dtype=np.uint8)
    rows = losses.dataset_sweep([np.full((1, 2, 2), 0.3), np.full((1, 2, 2), 0.9)], [truth, truth], [0.2, 0.5])
    assert rows == [(0.2, 1.0), (0.5, 0.5)]


probs = arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0))
masks = arrays(np.uint8, (3, 4), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(probs, masks)
def test_jaccard_loss_bounded_and_gradient_matches_closed_form(pred, truth):
    r = losses.jaccard_loss(pred, truth)
    assert 0.0 <= r.value <= 1.0
    if truth.any():
        np.testing.assert_allclose(r.grad, jac_grad_oracle(pred, truth), rtol=0, atol=1e-12)
        assert np.all(r.grad[truth.astype(bool)] < 0)


@settings(max_examples=40, deadline=None)
@given(probs, masks)
def test_cross_entropies_nonnegative(pred, truth):
    for kind in ("ce", "cbce"):
        assert losses.get_loss(kind)(pred, truth).value >= 0.0
