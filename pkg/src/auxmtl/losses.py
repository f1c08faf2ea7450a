"""Single-task losses, target transforms, and multi-task loss combinations."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

MINUTES_PER_DAY = 1440.0
DEPTH_MIN_M = 1.0
DEPTH_MAX_M = 1000.0
TIME_LOSS_SCALE = 1e-5
C_SQUARED_MIN = 1e-8


class TaskId(enum.IntEnum):
    SEG = 1
    DEPTH = 2
    TIME = 3
    WEATHER = 4

    @property
    def short(self) -> str:
        return f"t{self.value}"


TaskSet = frozenset

PAPER_TASK_SETS: tuple[frozenset, ...] = tuple(
    frozenset(TaskId(i) for i in ids)
    for ids in [(1,), (2,), (3,), (4,), (1, 2), (1, 2, 3), (1, 2, 4), (1, 2, 3, 4)]
)


def parse_tasks(text: str | Iterable[int]) -> frozenset:
    """``"1,2,4"`` or ``[1, 2, 4]`` -> task set; raises ValueError on unknown ids."""
    items = text.replace(" ", "").split(",") if isinstance(text, str) else list(text)
    try:
        tasks = frozenset(TaskId(int(i)) for i in items if str(i) != "")
    except ValueError:
        raise ValueError(f"unknown task id in {text!r}; expected ids 1-4") from None
    if not tasks:
        raise ValueError("task set is empty")
    return tasks


def task_set_label(tasks: Iterable[TaskId]) -> str:
    return "t" + "_".join(str(int(t)) for t in sorted(tasks))


class Regularizer(str, enum.Enum):
    LOG = "log"
    POS = "pos"


# ---------------------------------------------------------------------------
# target transforms


def depth_target_transform(d):
    """Log-scaled range ``1 - log(d)/log(1000)``, clipped into [0, 1]."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("depth must be strictly positive")
    r = 1.0 - np.log(np.clip(d, DEPTH_MIN_M, DEPTH_MAX_M)) / math.log(DEPTH_MAX_M)
    return float(r) if r.ndim == 0 else r


def sctd(t, t_pred):
    """Squared cyclic time difference in minutes²; ``t_pred`` is wrapped first."""
    t = np.asarray(t, dtype=np.float64)
    diff = t - np.mod(np.asarray(t_pred, dtype=np.float64), MINUTES_PER_DAY)
    out = np.minimum(np.minimum(diff ** 2, (diff + MINUTES_PER_DAY) ** 2),
                     (diff - MINUTES_PER_DAY) ** 2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# single-task losses (Tensor in, scalar Tensor out)


def depth_loss(pred_r, gt_r) -> Tensor:
    pred_r = T.as_tensor(pred_r)
    gt_r = np.asarray(gt_r, dtype=np.float64)
    if pred_r.shape != gt_r.shape:
        raise T.ShapeError(f"depth_loss: prediction {pred_r.shape} vs target {gt_r.shape}")
    return T.mean(T.square(T.sub(pred_r, gt_r)))


def _one_hot(ids, k: int, op: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= k or np.any(ids != np.round(ids))):
        raise ValueError(f"{op}: class ids must be integers in [0, {k})")
    return np.eye(k)[ids.astype(np.int64)]


def pixelwise_ce_loss(logits, mask) -> Tensor:
    """Mean softmax cross-entropy over all pixels; logits (..., K), mask (...)."""
    logits = T.as_tensor(logits)
    mask = np.asarray(mask)
    if logits.shape[:-1] != mask.shape:
        raise T.ShapeError(f"pixelwise_ce_loss: logits {logits.shape} vs mask {mask.shape}")
    onehot = _one_hot(mask, logits.shape[-1], "pixelwise_ce_loss")
    n = mask.size
    return T.mul(T.sum_(T.mul(T.log_softmax(logits, axis=-1), onehot)), -1.0 / n)


def scalar_ce_loss(logits, classes) -> Tensor:
    """Softmax cross-entropy for (K,) or (B, K) logits, mean over the batch."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    classes = np.atleast_1d(np.asarray(classes))
    if classes.shape != (logits.shape[0],):
        raise T.ShapeError(f"scalar_ce_loss: logits {logits.shape} vs classes {classes.shape}")
    return pixelwise_ce_loss(logits, classes)


def time_loss(t_gt, t_pred, scale: float = TIME_LOSS_SCALE) -> Tensor:
    """Batch-mean squared cyclic time difference times ``scale``."""
    t_pred = T.as_tensor(t_pred)
    t_gt = np.asarray(t_gt, dtype=np.float64).reshape(t_pred.shape)
    if t_gt.size == 0:
        raise ValueError("time_loss: empty batch")
    diff = T.sub(t_gt, T.remainder(t_pred, MINUTES_PER_DAY))
    sq = T.minimum(T.minimum(T.square(diff), T.square(T.add(diff, MINUTES_PER_DAY))),
                   T.square(T.sub(diff, MINUTES_PER_DAY)))
    return T.mul(T.sum_(sq), scale / t_gt.size)


# ---------------------------------------------------------------------------
# multi-task combinations


def regularizer(c, kind: Regularizer | str):
    """``log(c²)`` or ``ln(1 + c²)``; accepts floats or Tensors."""
    kind = Regularizer(kind)
    if isinstance(c, Tensor):
        c2 = T.square(c)
        if kind is Regularizer.LOG:
            if np.any(c2.data == 0):
                raise ValueError("log regularizer undefined at c = 0")
            return T.log(c2)
        return T.log(T.add(c2, 1.0))
    c = float(c)
    if kind is Regularizer.LOG:
        if c == 0:
            raise ValueError("log regularizer undefined at c = 0")
        return math.log(c * c)
    return math.log1p(c * c)


def combine_fixed(raw: Mapping, coeffs: Mapping):
    if set(raw) != set(coeffs):
        raise KeyError(f"combine_fixed: task mismatch {sorted(raw)} vs {sorted(coeffs)}")
    total = 0.0
    for task in sorted(raw):
        total = total + raw[task] * float(coeffs[task])
    return total


@dataclass
class TaskWeights:
    """Learnable per-task coefficients ``c`` and the regularizer they pay."""

    c: dict[TaskId, Tensor]
    kind: Regularizer = Regularizer.POS

    @classmethod
    def init(cls, tasks: Iterable[TaskId], kind: Regularizer | str = Regularizer.POS,
             value: float | None = None) -> "TaskWeights":
        tasks = sorted(tasks)
        v = 1.0 / len(tasks) if value is None else value
        return cls({t: Tensor(np.array(v), requires_grad=True) for t in tasks}, Regularizer(kind))

    def values(self) -> dict[TaskId, float]:
        return {t: c.item() for t, c in self.c.items()}


@dataclass
class LossReport:
    raw: dict[TaskId, float]
    weighted: dict[TaskId, float]
    reg: dict[TaskId, float] = field(default_factory=dict)
    combined: float = 0.0
    total: Tensor | None = None


def combine_learned(raw: Mapping[TaskId, Tensor], weights: TaskWeights) -> LossReport:
    """Sum over tasks of ``L / (2 c²) + R(c)``, differentiable in losses and ``c``."""
    if set(raw) != set(weights.c):
        raise KeyError(f"combine_learned: task mismatch {sorted(raw)} vs {sorted(weights.c)}")
    report = LossReport({}, {}, {})
    total = None
    for task in sorted(raw):
        loss = T.as_tensor(raw[task])
        if not np.isfinite(loss.data).all():
            raise FloatingPointError(f"combine_learned: non-finite loss for {task.name}")
        c = weights.c[task]
        c2 = T.square(c)
        if c2.item() < C_SQUARED_MIN:
            raise ValueError(f"combine_learned: c² for {task.name} below {C_SQUARED_MIN}")
        weighted = T.div(loss, T.mul(c2, 2.0))
        reg = regularizer(c, weights.kind)
        report.raw[task] = loss.item()
        report.weighted[task] = weighted.item()
        report.reg[task] = reg.item()
        term = T.add(weighted, reg)
        total = term if total is None else T.add(total, term)
    report.total = total
    report.combined = total.item()
    return report


def optimal_c_squared(loss: float) -> float:
    """Stationary point of ``L/(2c²) + ln(1+c²)`` in ``c²`` for ``L > 0``."""
    return (loss + math.sqrt(loss * loss + 8.0 * loss)) / 4.0
