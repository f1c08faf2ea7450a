import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from auxmtl import losses as L
from auxmtl import tensor as T
from auxmtl.losses import Regularizer, TaskId, TaskWeights
from auxmtl.tensor import Tensor, grad_check


# depth transform

@pytest.mark.parametrize("d,r", [(1.0, 1.0), (1000.0, 0.0), (10.0, 2.0 / 3.0), (5000.0, 0.0), (0.2, 1.0)])
def test_depth_transform_values(d, r):
    assert abs(L.depth_target_transform(d) - r) < 1e-12


def test_depth_transform_rejects_nonpositive():
    with pytest.raises(ValueError):
        L.depth_target_transform(0.0)
    with pytest.raises(ValueError):
        L.depth_target_transform(np.array([1.0, -3.0]))


def test_depth_transform_monotone():
    d = np.geomspace(0.01, 1e5, 4000)
    r = L.depth_target_transform(d)
    assert np.all(np.diff(r) <= 0)
    inside = (d >= 1) & (d <= 1000)
    assert np.all(np.diff(r[inside]) < 0)


# depth loss

def test_depth_loss_examples(rng):
    gt = rng.random((4, 5))
    assert L.depth_loss(Tensor(gt), gt).item() == 0.0
    assert abs(L.depth_loss(Tensor(gt + 0.1), gt).item() - 0.01) < 1e-12
    assert L.depth_loss(Tensor([[0.0, 1.0]]), np.array([[1.0, 0.0]])).item() == 1.0


def test_depth_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        L.depth_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


# cross entropy

def test_pixelwise_ce_uniform():
    loss = L.pixelwise_ce_loss(Tensor(np.zeros((4, 5, 3))), np.zeros((4, 5), int))
    assert abs(loss.item() - math.log(3)) < 1e-12


def test_pixelwise_ce_margin_monotone():
    vals = []
    for m in [0.0, 1.0, 5.0, 20.0, 60.0]:
        vals.append(L.pixelwise_ce_loss(Tensor([[[m, 0.0, 0.0]]]), np.array([[0]])).item())
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-20


def test_pixelwise_ce_mean_of_two(rng):
    logits = rng.normal(size=(1, 2, 4))
    mask = np.array([[1, 3]])
    a = L.pixelwise_ce_loss(Tensor(logits[:, :1]), mask[:, :1]).item()
    b = L.pixelwise_ce_loss(Tensor(logits[:, 1:]), mask[:, 1:]).item()
    assert abs(L.pixelwise_ce_loss(Tensor(logits), mask).item() - (a + b) / 2) < 1e-12


def test_ce_out_of_range():
    with pytest.raises(ValueError):
        L.pixelwise_ce_loss(Tensor(np.zeros((1, 1, 3))), np.array([[3]]))
    with pytest.raises(ValueError):
        L.scalar_ce_loss(Tensor(np.zeros(11)), 11)


def test_scalar_ce_examples(rng):
    assert abs(L.scalar_ce_loss(Tensor(np.zeros(11)), 4).item() - math.log(11)) < 1e-12
    prev = None
    for m in [0.0, 0.5, 2.0, 8.0]:
        z = np.zeros(11)
        z[3] = m
        v = L.scalar_ce_loss(Tensor(z), 3).item()
        assert prev is None or v < prev
        prev = v
    z = rng.normal(size=11)
    one = L.scalar_ce_loss(Tensor(z), 7).item()
    two = L.scalar_ce_loss(Tensor(np.stack([z, z])), np.array([7, 7])).item()
    assert abs(one - two) < 1e-12


# time

def test_sctd_examples():
    assert L.sctd(600.0, 600.0) == 0.0
    assert L.sctd(1439.0, 0.0) == 1.0
    assert L.sctd(0.0, 720.0) == 518400.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1439.999), st.floats(0, 1439.999), st.integers(-3, 3))
def test_sctd_properties(t, u, k):
    v = L.sctd(t, u)
    assert 0.0 <= v <= 720.0 ** 2
    assert math.isclose(v, L.sctd(u, t), rel_tol=1e-9, abs_tol=1e-6)
    assert math.isclose(v, L.sctd(t, u + 1440.0 * k), rel_tol=1e-9, abs_tol=1e-6)


def test_time_loss_examples():
    assert L.time_loss([100.0, 200.0], Tensor([100.0, 200.0])).item() == 0.0
    assert abs(L.time_loss([500.0], Tensor([400.0])).item() - 0.1) < 1e-12
    t = np.array([10.0, 10.0, 10.0, 10.0])
    pred = Tensor(t + np.array([0.0, 1.0, 2.0, 3.0]))
    assert abs(L.time_loss(t, pred).item() - 3.5e-5) < 1e-15
    assert abs(L.time_loss([500.0], Tensor([400.0]), scale=1.0).item() - 1e4) < 1e-9


def test_time_loss_empty():
    with pytest.raises(ValueError):
        L.time_loss([], Tensor(np.zeros(0)))


# regularizers and combinations

def test_regularizer_examples():
    assert L.regularizer(0.0, "pos") == 0.0
    assert abs(L.regularizer(1.0, "pos") - math.log(2)) < 1e-15
    assert L.regularizer(0.5, "log") < 0 < L.regularizer(0.5, "pos")
    assert abs(L.regularizer(0.5, "log") - math.log(0.25)) < 1e-15
    assert abs(L.regularizer(0.5, "pos") - math.log(1.25)) < 1e-15
    with pytest.raises(ValueError):
        L.regularizer(0.0, "log")
    with pytest.raises(ValueError):
        L.regularizer(Tensor(0.0), "log")


def test_combine_fixed_examples():
    assert L.combine_fixed({TaskId.SEG: 3.0}, {TaskId.SEG: 1.0}) == 3.0
    assert L.combine_fixed({TaskId.SEG: 0.0, TaskId.DEPTH: 0.0}, {TaskId.SEG: 0.3, TaskId.DEPTH: 2.0}) == 0.0
    assert L.combine_fixed({TaskId.SEG: 1.0, TaskId.DEPTH: 2.0}, {TaskId.SEG: 0.5, TaskId.DEPTH: 0.25}) == 1.0
    with pytest.raises(KeyError):
        L.combine_fixed({TaskId.SEG: 1.0}, {TaskId.DEPTH: 1.0})


@given(st.floats(0, 10), st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
def test_combine_fixed_linear_in_coefficient(l1, l2, c1, c2, s):
    raw = {TaskId.SEG: l1, TaskId.DEPTH: l2}
    base = L.combine_fixed(raw, {TaskId.SEG: c1, TaskId.DEPTH: c2})
    scaled = L.combine_fixed(raw, {TaskId.SEG: c1 * s, TaskId.DEPTH: c2})
    assert math.isclose(scaled - base, l1 * c1 * (s - 1), rel_tol=1e-9, abs_tol=1e-9)


def _learned(loss, c, kind="pos"):
    w = TaskWeights({TaskId.DEPTH: Tensor(c, requires_grad=True)}, Regularizer(kind))
    return L.combine_learned({TaskId.DEPTH: Tensor(loss)}, w)


def test_combine_learned_examples():
    assert abs(_learned(2.0, 1.0).combined - (1 + math.log(2))) < 1e-12
    assert abs(_learned(0.0, 1.0).combined - math.log(2)) < 1e-12
    rep = _learned(1.0, 0.25)
    assert abs(rep.combined - (8.0 + math.log(1.0625))) < 1e-12
    assert round(rep.combined, 4) == 8.0606


def test_loss_report_sums(rng):
    raw = {t: Tensor(rng.random() * 3) for t in TaskId}
    w = TaskWeights.init(TaskId)
    rep = L.combine_learned(raw, w)
    assert abs(rep.combined - sum(rep.weighted[t] + rep.reg[t] for t in TaskId)) < 1e-12
    assert set(rep.raw) == set(TaskId)


def test_combine_learned_guard():
    with pytest.raises(ValueError):
        _learned(1.0, 1e-5)
    with pytest.raises(KeyError):
        L.combine_learned({TaskId.SEG: Tensor(1.0)}, TaskWeights.init([TaskId.DEPTH]))


def test_task_weights_init():
    assert all(v == 0.25 for v in TaskWeights.init(TaskId).values().values())
    assert all(v == 0.5 for v in TaskWeights.init([TaskId.SEG, TaskId.TIME]).values().values())


@given(st.lists(st.tuples(st.floats(0, 1e3), st.floats(-1e3, 1e3).filter(lambda c: c * c >= 1e-8)),
                min_size=1, max_size=4))
def test_pos_regularized_loss_non_negative(pairs):
    tasks = list(TaskId)[:len(pairs)]
    w = TaskWeights({t: Tensor(c) for t, (_, c) in zip(tasks, pairs)}, Regularizer.POS)
    rep = L.combine_learned({t: Tensor(l) for t, (l, _) in zip(tasks, pairs)}, w)
    assert rep.combined >= 0


@pytest.mark.parametrize("loss", [0.01, 0.1, 1.0, 2.5, 10.0])
def test_optimal_weight_closed_form(loss):
    res = minimize_scalar(lambda c: loss / (2 * c * c) + math.log1p(c * c), bounds=(1e-3, 100.0),
                          method="bounded", options={"xatol": 1e-12})
    assert abs(res.x ** 2 - L.optimal_c_squared(loss)) < 1e-6


# gradients

def test_grad_learned_loss_wrt_c():
    f = lambda c: L.combine_learned({TaskId.SEG: Tensor(1.0)}, TaskWeights({TaskId.SEG: c})).total
    assert grad_check(f, 0.7, eps=1e-6) < 1e-6


def test_grad_depth_loss_wrt_prediction(rng):
    gt = L.depth_target_transform(rng.uniform(0.5, 2000, (3, 4)))
    assert grad_check(lambda p: L.depth_loss(p, gt), rng.random((3, 4)), eps=1e-6) < 1e-6


def test_grad_ce_and_time(rng):
    mask = rng.integers(0, 3, (2, 3))
    assert grad_check(lambda z: L.pixelwise_ce_loss(z, mask), rng.normal(size=(2, 3, 3)), 1e-5) < 1e-4
    assert grad_check(lambda z: L.scalar_ce_loss(z, [3, 9]), rng.normal(size=(2, 11)), 1e-5) < 1e-4
    t = np.array([10.0, 700.0, 1430.0])
    assert grad_check(lambda p: L.time_loss(t, p), np.array([1400.0, 100.0, 20.0]), 1e-4) < 1e-4


def test_parse_tasks():
    assert L.parse_tasks("1,2,4") == {TaskId.SEG, TaskId.DEPTH, TaskId.WEATHER}
    assert L.task_set_label(L.parse_tasks([3, 1])) == "t1_3"
    for bad in ["5", "", "0,1", "x"]:
        with pytest.raises(ValueError):
            L.parse_tasks(bad)
    assert len(L.PAPER_TASK_SETS) == 8
