"""
Learned task weights
====================

Each task loss L is scaled by 1/(2c^2) and pays a regularizer R(c) for
shrinking its weight. Two regularizers are available:

    log:  R(c) = ln(c^2)       can push the total below zero
    pos:  R(c) = ln(1 + c^2)   keeps the total non-negative
"""

import math

from auxmtl import losses as L
from auxmtl.losses import Regularizer, TaskId, TaskWeights
from auxmtl.tensor import Tensor, backward
from auxmtl.trainer import AdamState, Hyperparams, adam_step


def total(loss, c, kind):
    w = TaskWeights({TaskId.DEPTH: Tensor(c)}, Regularizer(kind))
    return L.combine_learned({TaskId.DEPTH: Tensor(loss)}, w).combined


print("L=2, c=1     pos:", total(2.0, 1.0, "pos"), " (1 + ln 2 =", 1 + math.log(2), ")")
print("L=1, c=0.25  pos:", round(total(1.0, 0.25, "pos"), 4))
print("L=0, c=0.25  log:", total(0.0, 0.25, "log"), " <- negative total loss")
print("L=0, c=0.25  pos:", total(0.0, 0.25, "pos"))

# the pos objective has a unique minimum in c^2
for loss in (0.01, 0.5, 2.0, 10.0):
    print(f"L={loss:<5} optimal c^2 = {L.optimal_c_squared(loss):.4f}")

# with the losses frozen, Adam on c alone walks to that minimum
losses = {TaskId.SEG: 0.3, TaskId.DEPTH: 0.05, TaskId.WEATHER: 2.0}
weights = TaskWeights.init(losses)
state, hyper = AdamState(), Hyperparams(lr=0.02)
for step in range(1, 3001):
    report = L.combine_learned({t: Tensor(v) for t, v in losses.items()}, weights)
    grads = backward(report.total)
    adam_step({t.short: c.data for t, c in weights.c.items()},
              {t.short: grads[c] for t, c in weights.c.items()}, state, hyper)
    if step in (1, 100, 1000, 3000):
        print(step, {t.short: round(c.item() ** 2, 4) for t, c in weights.c.items()})
print("closed form", {t.short: round(L.optimal_c_squared(v), 4) for t, v in losses.items()})

# a small loss earns a large weight 1/(2c^2): the easy depth task dominates
print("effective multipliers:", {t.short: round(1 / (2 * c.item() ** 2), 2) for t, c in weights.c.items()})
