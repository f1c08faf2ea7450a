"""Shared convolutional encoder with ASPP and one decoder per task.

Decoder topologies:

* segmentation / depth: 3x3 conv + ReLU, 3x3 conv + ReLU, 1x1 conv,
  bilinear upsampling by the output stride (depth adds a sigmoid)
* weather: 5x5 conv + ReLU, 3x3/3 max-pool, 3x3 conv + ReLU, 3x3/3 max-pool,
  1x1 conv, fully-connected layer with one unit per class
* time: as weather, with a 5x5/5 first pool and a single output unit
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import Regularizer, TaskId, TaskWeights, parse_tasks
from .tensor import Tensor

CHECKPOINT_MAGIC = b"AMTC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_h: int = 64
    input_w: int = 48
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    aspp_rates: list[int] = field(default_factory=lambda: [1, 2, 4])
    aspp_channels: int = 64
    output_stride: int = 16
    decoder_channels: int = 32
    aux_channels: int = 32
    n_seg_classes: int = 3
    n_weather_classes: int = 11
    time_scale_min: float = 720.0
    task_set: frozenset = field(default_factory=lambda: frozenset(TaskId))

    def __post_init__(self):
        self.task_set = parse_tasks(sorted(int(t) for t in self.task_set))

    def validate(self) -> None:
        if 2 ** len(self.encoder_channels) != self.output_stride:
            raise ValueError(
                f"{len(self.encoder_channels)} stride-2 encoder stages give output stride "
                f"{2 ** len(self.encoder_channels)}, not {self.output_stride}")
        if self.input_h % self.output_stride or self.input_w % self.output_stride:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by output stride {self.output_stride}")
        if TaskId.WEATHER in self.task_set and self.n_weather_classes != 11:
            raise ValueError("weather head requires 11 classes")
        if not self.aspp_rates:
            raise ValueError("aspp_rates must be non-empty")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.input_h // self.output_stride, self.input_w // self.output_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_set"] = sorted(int(t) for t in self.task_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _pool_out(n: int, size: int, stride: int) -> int:
    return -(-max(n - size, 0) // stride) + 1


class Model:
    """Parameters of the encoder, the active decoders, and the task weights."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], weights: TaskWeights):
        self.cfg = cfg
        self.params = params
        self.weights = weights

    @property
    def tasks(self) -> list[TaskId]:
        return sorted(self.cfg.task_set)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for task, c in self.weights.c.items():
            out[f"c.{task.short}"] = c
        return out

    def __call__(self, batch) -> dict[TaskId, Tensor]:
        return predict(self, batch)


def _aux_flat_size(cfg: ModelConfig, first_pool: tuple[int, int]) -> int:
    h, w = cfg.feature_hw
    h, w = _pool_out(h, *first_pool), _pool_out(w, *first_pool)
    h, w = _pool_out(h, 3, 3), _pool_out(w, 3, 3)
    return h * w * cfg.aux_channels


def build_model(cfg: ModelConfig, seed: int = 0,
                regularizer: Regularizer | str = Regularizer.POS) -> Model:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, k, cin, cout):
        std = math.sqrt(2.0 / (k * k * cin))
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (k, k, cin, cout)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def fc(name, nin, nout):
        std = math.sqrt(1.0 / nin)
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (nin, nout)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(nout), requires_grad=True)

    cin = 3
    for i, ch in enumerate(cfg.encoder_channels):
        conv(f"enc.{i}", 3, cin, ch)
        cin = ch
    for rate in cfg.aspp_rates:
        conv(f"aspp.r{rate}", 3, cin, cfg.aspp_channels)
    conv("aspp.fuse", 1, cfg.aspp_channels * len(cfg.aspp_rates), cfg.aspp_channels)
    feat = cfg.aspp_channels

    for task in sorted(cfg.task_set):
        p = f"{task.short}"
        if task in (TaskId.SEG, TaskId.DEPTH):
            conv(f"{p}.conv1", 3, feat, cfg.decoder_channels)
            conv(f"{p}.conv2", 3, cfg.decoder_channels, cfg.decoder_channels)
            conv(f"{p}.out", 1, cfg.decoder_channels,
                 cfg.n_seg_classes if task is TaskId.SEG else 1)
        else:
            first_pool = (5, 5) if task is TaskId.TIME else (3, 3)
            n_out = 1 if task is TaskId.TIME else cfg.n_weather_classes
            conv(f"{p}.conv1", 5, feat, cfg.aux_channels)
            conv(f"{p}.conv2", 3, cfg.aux_channels, cfg.aux_channels)
            conv(f"{p}.conv3", 1, cfg.aux_channels, cfg.aux_channels)
            fc(f"{p}.fc", _aux_flat_size(cfg, first_pool), n_out)

    return Model(cfg, params, TaskWeights.init(cfg.task_set, regularizer))


def encode(model: Model, x: Tensor) -> Tensor:
    """Shared features at 1/output_stride resolution."""
    p = model.params
    for i in range(len(model.cfg.encoder_channels)):
        x = T.relu(T.conv2d(x, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=2, padding=1))
    branches = [
        T.relu(T.conv2d(x, p[f"aspp.r{r}.w"], p[f"aspp.r{r}.b"], padding=r, dilation=r))
        for r in model.cfg.aspp_rates
    ]
    return T.relu(T.conv2d(T.concat(branches, axis=-1), p["aspp.fuse.w"], p["aspp.fuse.b"]))


def _dense_head(model: Model, task: TaskId, feat: Tensor) -> Tensor:
    p, pre = model.params, task.short
    h = T.relu(T.conv2d(feat, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], padding=1))
    h = T.relu(T.conv2d(h, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], padding=1))
    h = T.conv2d(h, p[f"{pre}.out.w"], p[f"{pre}.out.b"])
    return T.upsample_bilinear(h, model.cfg.output_stride)


def _global_head(model: Model, task: TaskId, feat: Tensor) -> Tensor:
    p, pre = model.params, task.short
    first = 5 if task is TaskId.TIME else 3
    h = T.relu(T.conv2d(feat, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], padding=2))
    h = T.max_pool2d(h, first, first)
    h = T.relu(T.conv2d(h, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], padding=1))
    h = T.max_pool2d(h, 3, 3)
    h = T.conv2d(h, p[f"{pre}.conv3.w"], p[f"{pre}.conv3.b"])
    h = T.reshape(h, (h.shape[0], -1))
    return T.linear(h, p[f"{pre}.fc.w"], p[f"{pre}.fc.b"])


def predict(model: Model, batch) -> dict[TaskId, Tensor]:
    """Forward pass on a (B, H, W, 3) batch.

    Returns segmentation logits (B, H, W, K), depth in r-space (B, H, W),
    weather logits (B, 11) and time of day in minutes (B, 1) for the
    active tasks only.
    """
    x = T.as_tensor(batch)
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1:] != (cfg.input_h, cfg.input_w, 3):
        raise T.ShapeError(
            f"predict: expected (B, {cfg.input_h}, {cfg.input_w}, 3), got {x.shape}")
    feat = encode(model, x)
    out: dict[TaskId, Tensor] = {}
    for task in model.tasks:
        if task is TaskId.SEG:
            out[task] = _dense_head(model, task, feat)
        elif task is TaskId.DEPTH:
            d = _dense_head(model, task, feat)
            out[task] = T.sigmoid(T.reshape(d, d.shape[:3]))
        elif task is TaskId.WEATHER:
            out[task] = _global_head(model, task, feat)
        else:
            # unit-scale output mapped to minutes; periodicity is handled by the loss
            out[task] = T.mul(_global_head(model, task, feat), cfg.time_scale_min)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Write the model as ``AMTC`` header + config JSON + named float64 blobs."""
    named = model.named_parameters()
    meta = json.dumps({"config": model.cfg.to_dict(), "regularizer": model.weights.kind.value},
                      sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, len(meta), len(named)))
    buf.write(meta)
    for name in sorted(named):
        arr = np.asarray(named[name].data, dtype="<f8", order="C")
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len, count = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(raw[pos:pos + meta_len])
    pos += meta_len
    blobs = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(shape)) if rank else 1
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(cfg, seed=0, regularizer=meta["regularizer"])
    for name, tensor in model.named_parameters().items():
        if name not in blobs or blobs[name].shape != tensor.shape:
            raise ValueError(f"{path}: missing or mis-shaped parameter {name}")
        tensor.data[...] = blobs[name]
    return model
