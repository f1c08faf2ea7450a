"""
Synthetic road scenes and the spatial split
===========================================

Every sample carries four labels: a segmentation mask, a depth map, the time
of day and a weather class. Lighting follows the clock and weather changes
tint, fog and noise, so the auxiliary labels are visible in the pixels.
"""

import tempfile
from collections import Counter

import numpy as np

from auxmtl.scenegen import (WEATHER_CLASSES, SceneDistribution, SplitSpec, generate_dataset,
                             generate_sample, spatial_split)

s = generate_sample(seed=3, index=0)
print("image", s.image.shape, "depth", s.depth_m.shape, "mask", s.mask.shape)
print(f"time {s.time_min:.0f} min, weather {WEATHER_CLASSES[s.weather]}, at {np.round(s.world_pos, 1)} m")
print("objects (class, distance m):", [(c, round(d, 1)) for c, d in s.objects])

# coarse text view of the mask: . ground/sky, c car, p pedestrian
for row in s.mask[::4]:
    print("".join(".cp"[v] for v in row[::2]))

# brightness tracks the time of day
for t_index in range(6):
    smp = generate_sample(7, t_index, SceneDistribution(max_cars=0, max_pedestrians=0))
    print(f"{smp.time_min:7.1f} min  {WEATHER_CLASSES[smp.weather]:>12}  mean brightness {smp.image.mean():.3f}")

# a few hundred samples over a 1 km square, then the binned split
with tempfile.TemporaryDirectory() as tmp:
    manifest = generate_dataset(400, 1, SceneDistribution(image_h=16, image_w=16, world_extent_m=1000.0), tmp)
print("weather counts:", Counter(WEATHER_CLASSES[r["weather"]] for r in manifest).most_common(4))

train, test, buffer = spatial_split(manifest, SplitSpec(n_test_bins=20, rng_seed=0))
print(f"65 m bins, 20 test bins, 65 m buffer -> train {len(train)}, test {len(test)}, buffer {len(buffer)}")
