import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxmtl import tensor as T
from auxmtl.losses import TaskId, combine_learned, depth_loss, pixelwise_ce_loss, scalar_ce_loss, time_loss
from auxmtl.model import ModelConfig, build_model, encode, load_checkpoint, predict, save_checkpoint
from auxmtl.tensor import Tensor, backward

ALL = frozenset(TaskId)


def small_cfg(tasks=ALL, **kw):
    base = dict(encoder_channels=[4, 6, 8, 8], aspp_channels=8, decoder_channels=4, aux_channels=4)
    base.update(kw)
    return ModelConfig(task_set=tasks, **base)


def test_task_weight_initialisation():
    assert {float(v) for v in build_model(small_cfg()).weights.values().values()} == {0.25}
    two = build_model(small_cfg({TaskId.SEG, TaskId.WEATHER}))
    assert set(two.weights.values().values()) == {0.5}


def test_same_seed_same_parameters():
    a, b = build_model(small_cfg(), seed=3), build_model(small_cfg(), seed=3)
    c = build_model(small_cfg(), seed=4)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_output_shapes_default_config(rng):
    model = build_model(ModelConfig(), seed=0)
    out = predict(model, rng.random((4, 64, 48, 3)))
    assert {t: o.shape for t, o in out.items()} == {
        TaskId.SEG: (4, 64, 48, 3), TaskId.DEPTH: (4, 64, 48),
        TaskId.WEATHER: (4, 11), TaskId.TIME: (4, 1),
    }
    assert encode(model, Tensor(rng.random((4, 64, 48, 3)))).shape[1:3] == (4, 3)


def test_depth_output_is_bounded(rng):
    model = build_model(small_cfg({TaskId.DEPTH}), seed=1)
    out = predict(model, rng.normal(0, 50, (2, 64, 48, 3)))
    assert list(out) == [TaskId.DEPTH]
    d = out[TaskId.DEPTH].data
    assert np.all((d > 0) & (d < 1))


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.sets(st.sampled_from(list(TaskId)), min_size=1))
def test_shapes_follow_config(hm, wm, b, tasks):
    cfg = small_cfg(frozenset(tasks), input_h=16 * hm, input_w=16 * wm)
    out = predict(build_model(cfg), np.zeros((b, cfg.input_h, cfg.input_w, 3)))
    assert set(out) == set(tasks)
    expect = {TaskId.SEG: (b, cfg.input_h, cfg.input_w, 3), TaskId.DEPTH: (b, cfg.input_h, cfg.input_w),
              TaskId.WEATHER: (b, 11), TaskId.TIME: (b, 1)}
    for t, o in out.items():
        assert o.shape == expect[t]


def test_absent_tasks_have_no_parameters():
    model = build_model(small_cfg({TaskId.DEPTH}))
    names = model.named_parameters()
    assert not any(n.startswith(("t1.", "t3.", "t4.")) for n in names)
    assert "c.t2" in names and "c.t1" not in names


def test_every_parameter_receives_gradient(rng):
    model = build_model(small_cfg(), seed=2)
    x = rng.random((2, 64, 48, 3))
    out = predict(model, x)
    raw = {
        TaskId.SEG: pixelwise_ce_loss(out[TaskId.SEG], rng.integers(0, 3, (2, 64, 48))),
        TaskId.DEPTH: depth_loss(out[TaskId.DEPTH], rng.random((2, 64, 48))),
        TaskId.TIME: time_loss(rng.uniform(0, 1440, 2), T.reshape(out[TaskId.TIME], (2,))),
        TaskId.WEATHER: scalar_ce_loss(out[TaskId.WEATHER], rng.integers(0, 11, 2)),
    }
    grads = backward(combine_learned(raw, model.weights).total)
    for name, p in model.named_parameters().items():
        assert p in grads and np.any(grads[p] != 0), name


def test_predict_rejects_wrong_shape():
    model = build_model(small_cfg())
    with pytest.raises(T.ShapeError):
        predict(model, np.zeros((1, 48, 64, 3)))


@pytest.mark.parametrize("kw", [
    dict(input_h=60), dict(output_stride=8), dict(n_weather_classes=10), dict(aspp_rates=[]),
])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        build_model(small_cfg(**kw))


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(small_cfg({TaskId.SEG, TaskId.TIME}), seed=9, regularizer="log")
    model.weights.c[TaskId.TIME].data[...] = 0.7
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg.to_dict() == model.cfg.to_dict()
    assert back.weights.kind == model.weights.kind
    a, b = model.named_parameters(), back.named_parameters()
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    x = rng.random((1, 64, 48, 3))
    for t, o in predict(model, x).items():
        assert np.array_equal(o.data, predict(back, x)[t].data)


def test_checkpoint_byte_layout(tmp_path):
    model = build_model(small_cfg({TaskId.DEPTH}), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"AMTC"
    version, meta_len, count = struct.unpack_from("<III", raw, 4)
    assert version == 1 and count == len(model.named_parameters())
    meta = json.loads(raw[16:16 + meta_len])
    assert meta["config"]["task_set"] == [2]
    pos = 16 + meta_len
    (n,) = struct.unpack_from("<I", raw, pos)
    first = raw[pos + 4:pos + 4 + n].decode()
    assert first == min(model.named_parameters())
    pos += 4 + n
    (rank,) = struct.unpack_from("<I", raw, pos)
    shape = struct.unpack_from(f"<{rank}I", raw, pos + 4)
    pos += 4 + 4 * rank
    blob = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape)
    assert np.array_equal(blob, model.named_parameters()[first].data)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
