"""
Does an auxiliary task help?
============================

Trains segmentation + depth with and without the weather task on a small
dataset and prints the test MIoU and depth error at each snapshot. At this
scale the curves are noisy; treat them as a qualitative look, not a result.
Takes under two minutes on one core.
"""

import tempfile

from auxmtl.losses import TaskId
from auxmtl.scenegen import SceneDistribution, SplitSpec, generate_dataset, spatial_split
from auxmtl.trainer import ExperimentSpec, Hyperparams, TaskData, train

ITERS = 600

with tempfile.TemporaryDirectory() as tmp:
    manifest = generate_dataset(1200, 2, SceneDistribution(world_extent_m=1500.0), tmp)
    train_ids, test_ids, _ = spatial_split(manifest, SplitSpec(n_test_bins=40))
    train_data = TaskData.load(tmp, train_ids[:800])
    test_data = TaskData.load(tmp, test_ids[:128])
print(f"{len(train_data)} training and {len(test_data)} test scenes")

runs = {}
for tasks in ({TaskId.SEG, TaskId.DEPTH}, {TaskId.SEG, TaskId.DEPTH, TaskId.WEATHER}):
    hyper = Hyperparams(max_iters=ITERS, snapshot_every=100, seed=0)
    hist, model = train(ExperimentSpec(frozenset(tasks), hyper, train_data, test_data))
    runs[hist.label] = hist
    print(hist.label, "final task weights c:", {t.short: round(v[-1][1], 3) for t, v in hist.c.items()})

print("\niteration   MIoU {1,2} / {1,2,4}    depth RMSE {1,2} / {1,2,4}")
for a, b in zip(runs["t1_2"].records, runs["t1_2_4"].records):
    print(f"{a.iteration:9d}   {a.miou:.3f} / {b.miou:.3f}          {a.depth_rmse_r:.4f} / {b.depth_rmse_r:.4f}")
