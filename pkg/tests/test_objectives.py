import math

import numpy as np
import pytest
import torch

from tsgrounding.datamodel import MomentAnnotation, ValidationError
from tsgrounding.objectives import (
    LossWeights,
    interval_iou,
    loss_bound,
    loss_pre,
    make_labels,
    scaled_iou,
    total_loss,
)
from tsgrounding.pgmf import candidate_cells


def _cells(T):
    return (c.numpy() for c in candidate_cells(T))


def _ann(s, e, dur=10.0):
    return MomentAnnotation("v", s, e, ["q"], dur)


# -- labels ------------------------------------------------------------------------

def test_whole_video_labels():
    T = 8
    lab = make_labels(_ann(0.0, 10.0), T, *_cells(T))
    assert lab.y_start.tolist() == [1] + [0] * 7
    assert lab.y_end.tolist() == [0] * 7 + [1]
    assert np.all(lab.y_highlight == 1)


def test_exact_candidate_gets_one():
    T = 10
    cs, ce = _cells(T)
    lab = make_labels(_ann(2.0, 5.0), T, cs, ce)
    k = int(np.nonzero((cs == 2) & (ce == 4))[0][0])
    assert lab.y_match[k] == 1.0
    assert (lab.start, lab.end) == (2, 4)


def test_scaled_iou_three_quarters():
    assert scaled_iou(0.75, 0.5, 1.0) == 0.5
    # candidate [0, 3) against ground truth [0, 4) on unit bins has IoU 0.75
    T = 4
    cs, ce = _cells(T)
    lab = make_labels(_ann(0.0, 4.0, 4.0), T, cs, ce, t_min=0.5, t_max=1.0)
    k = int(np.nonzero((cs == 0) & (ce == 2))[0][0])
    assert lab.y_match[k] == 0.5


def test_highlight_extension():
    T = 20
    lab = make_labels(_ann(8.0, 12.0, 20.0), T, *_cells(T), extend_ratio=0.25)
    assert np.nonzero(lab.y_highlight)[0].tolist() == list(range(7, 13))


def test_labels_respect_padding():
    T = 8
    cs, ce = _cells(T)
    lab = make_labels(_ann(0.0, 10.0), T, cs, ce, n_valid=5)
    assert lab.end == 4 and lab.y_end[4] == 1
    assert np.all(lab.y_highlight[5:] == 0) and np.all(lab.y_match[ce >= 5] == 0)


def test_labels_reject_outside_duration():
    ann = _ann(1.0, 5.0)
    ann.end_sec = 12.0
    with pytest.raises(ValidationError):
        make_labels(ann, 4, *_cells(4))


def test_y_match_monotone_in_iou():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        iou = np.sort(rng.uniform(0, 1, 5))
        y = scaled_iou(iou)
        assert np.all(np.diff(y) >= 0) and np.all((0 <= y) & (y <= 1))


def test_labels_match_iou_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        T = int(rng.integers(2, 16))
        dur = float(rng.uniform(5, 50))
        a, b = sorted(rng.uniform(0, dur, 2))
        if b - a < 1e-3:
            continue
        cs, ce = _cells(T)
        lab = make_labels(_ann(a, b, dur), T, cs, ce)
        step = dur / T
        for k in range(len(cs)):
            s, e = cs[k] * step, (ce[k] + 1) * step
            inter = max(0.0, min(e, b) - max(s, a))
            iou = inter / (max(e, b) - min(s, a))
            want = min(max((iou - 0.5) / 0.5, 0.0), 1.0)
            assert abs(lab.y_match[k] - want) < 1e-5


def test_interval_iou_vectorised():
    got = interval_iou(np.array([2.0, 0.0]), np.array([6.0, 1.0]), 4.0, 8.0)
    assert np.allclose(got, [2 / 6, 0.0])


# -- losses ------------------------------------------------------------------------

def _onehot(T, i):
    y = torch.zeros(1, T, dtype=torch.float64)
    y[0, i] = 1
    return y


def test_loss_pre_perfect_prediction():
    ys, ye = _onehot(4, 1), _onehot(4, 2)
    yh = torch.tensor([[0, 1, 1, 0]], dtype=torch.float64)
    assert float(loss_pre(ys, ye, yh, ys, ye, yh, 5.0)) < 1e-5


def test_loss_pre_uniform_start():
    T = 4
    ys, ye = _onehot(T, 0), _onehot(T, 3)
    pe = torch.tensor([[0.1, 0.2, 0.3, 0.4]], dtype=torch.float64)
    ph = torch.full((1, T), 0.5, dtype=torch.float64)
    got = float(loss_pre(torch.full((1, T), 0.25, dtype=torch.float64), pe, ph, ys, ye, ph.round(), 0.0))
    assert abs(got - 0.5 * (math.log(4) - math.log(0.4))) < 1e-12


def test_loss_pre_highlight_over_valid_frames():
    ps = _onehot(4, 0)
    ph = torch.tensor([[0.5, 0.5, 0.9, 0.9]], dtype=torch.float64)
    yh = torch.tensor([[1.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
    mask = torch.tensor([[True, True, False, False]])
    got = float(loss_pre(ps, ps, ph, ps, ps, yh, 1.0, mask))
    assert abs(got - math.log(2)) < 1e-6


def test_loss_pre_rejects_bad_probabilities():
    p = torch.tensor([[1.2, -0.2]])
    with pytest.raises(ValueError):
        loss_pre(p, p, p, p, p, p)


def test_loss_pre_minimum_at_labels():
    torch.manual_seed(2)
    T = 5
    ys, ye = _onehot(T, 1), _onehot(T, 3)
    yh = torch.zeros(1, T, dtype=torch.float64)
    logits = torch.zeros(3, T, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([logits], lr=0.2)
    for _ in range(500):
        opt.zero_grad()
        loss = loss_pre(
            torch.softmax(logits[0:1], -1), torch.softmax(logits[1:2], -1), torch.sigmoid(logits[2:3]), ys, ye, yh, 1.0
        )
        loss.backward()
        opt.step()
    assert int(logits[0].argmax()) == 1 and int(logits[1].argmax()) == 3
    assert float(torch.softmax(logits[0].detach(), -1)[1]) > 0.95


def test_loss_bound_examples():
    y = torch.tensor([[0.0, 1.0, 1.0]], dtype=torch.float64)
    assert float(loss_bound(y, y)) < 1e-6
    half = torch.tensor([[0.5]], dtype=torch.float64)
    assert abs(float(loss_bound(half, half)) - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        loss_bound(torch.zeros(1, 0), torch.zeros(1, 0))
    with pytest.raises(ValueError):
        loss_bound(half, half, torch.zeros(1, 1, dtype=torch.bool))


def test_loss_bound_ignores_masked_candidates():
    p = torch.tensor([[0.5, 0.0]], dtype=torch.float64)
    y = torch.tensor([[0.5, 1.0]], dtype=torch.float64)
    got = float(loss_bound(p, y, torch.tensor([[True, False]])))
    assert abs(got - math.log(2)) < 1e-12


def test_losses_nonnegative_and_finite():
    gen = torch.Generator().manual_seed(3)
    for _ in range(500):
        T = int(torch.randint(2, 9, (1,), generator=gen))
        p = torch.rand(2, T, generator=gen, dtype=torch.float64)
        p[0, 0] = 0.0
        p[1, -1] = 1.0
        ps = p / p.sum(-1, keepdim=True)
        y = (torch.rand(2, T, generator=gen) > 0.5).double()
        for val in (loss_pre(ps, ps, p, y, y, y), loss_bound(p, y)):
            assert torch.isfinite(val) and float(val) >= 0


def test_total_loss():
    w = LossWeights(lambda2=1, lambda3=1, lambda4=0.5)
    assert total_loss(2.0, 3.0, 4.0, w) == 7.0
    assert total_loss(2.0, 3.0, 4.0, LossWeights(lambda4=0.0)) == 5.0
    assert total_loss(0.0, 0.0, 0.0, w) == 0.0
    assert total_loss(2.0, 3.0, 4.0, w, 1.0, 0.1) == 7.1
    with pytest.raises(ValueError, match="l_con"):
        total_loss(1.0, 1.0, float("nan"), w)


def test_total_loss_is_linear():
    rng = np.random.default_rng(4)
    w = LossWeights()
    for _ in range(1000):
        a, b, c, d = rng.uniform(0, 10, 4)
        base = total_loss(a, b, c, w)
        assert total_loss(a + d, b, c, w) - base == pytest.approx(w.lambda2 * d, abs=1e-12)
        assert total_loss(a, b + d, c, w) - base == pytest.approx(w.lambda3 * d, abs=1e-12)
        assert total_loss(a, b, c + d, w) - base == pytest.approx(w.lambda4 * d, abs=1e-12)


def test_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (5.0, 1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
