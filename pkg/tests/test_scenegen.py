import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxmtl.scenegen import (
    CAR, PEDESTRIAN, SceneDistribution, SplitError, SplitSpec, decode_sample, encode_sample,
    generate_dataset, generate_sample, manifest_hash, read_ids, read_manifest, read_sample,
    sample_labels, spatial_split,
)


def parse_smt1(raw):
    """Stand-alone SMT1 reader used to pin the byte layout."""
    assert raw[:4] == b"SMT1"
    count = int.from_bytes(raw[4:8], "little")
    pos, out = 8, {}
    for _ in range(count):
        n = int.from_bytes(raw[pos:pos + 4], "little")
        name = raw[pos + 4:pos + 4 + n].decode("ascii")
        pos += 4 + n
        rank = int.from_bytes(raw[pos:pos + 4], "little")
        dims = [int.from_bytes(raw[pos + 4 + 4 * i:pos + 8 + 4 * i], "little") for i in range(rank)]
        pos += 4 + 4 * rank
        size = math.prod(dims)
        vals = struct.unpack(f"<{size}f", raw[pos:pos + 4 * size])
        pos += 4 * size
        out[name] = np.array(vals, dtype=np.float32).reshape(dims)
    assert pos == len(raw)
    return out


def boundary_distance(p, cell, size):
    lo = np.asarray(cell, float) * size
    gap = np.maximum(np.maximum(lo - p, p - (lo + size)), 0.0)
    return math.hypot(*gap)


def test_sample_is_deterministic():
    a, b = generate_sample(3, 17), generate_sample(3, 17)
    for f in ("image", "depth_m", "mask"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert (a.time_min, a.weather, a.world_pos) == (b.time_min, b.weather, b.world_pos)
    assert generate_sample(3, 18).image.tobytes() != a.image.tobytes()


def test_labels_match_rendered_sample():
    s, lab = generate_sample(8, 2), sample_labels(8, 2)
    assert (s.time_min, s.weather, s.world_pos) == (lab.time_min, lab.weather, lab.world_pos)


def test_empty_scene_matches_ground_plane_geometry():
    dist = SceneDistribution(max_cars=0, max_pedestrians=0)
    s = generate_sample(1, 0, dist)
    h, w = dist.image_h, dist.image_w
    assert np.all(s.mask == 0)
    focal, horizon, cam = w, 0.4 * h, 1.5
    for v in range(h):
        y = v + 0.5
        expected = 5000.0 if y <= horizon else min(focal * cam / (y - horizon), 5000.0)
        assert np.all(s.depth_m[v] == expected)


def test_object_pixels_carry_object_distance():
    hits = 0
    for i in range(60):
        s = generate_sample(4, i)
        for cls in (CAR, PEDESTRIAN):
            dists = {d for c, d in s.objects if c == cls}
            px = s.depth_m[s.mask == cls]
            hits += px.size
            assert all(v in dists for v in px.tolist())
    assert hits > 0


def test_a_car_at_distance_d():
    for i in range(100):
        s = generate_sample(9, i, SceneDistribution(max_pedestrians=0))
        cars = [d for c, d in s.objects if c == CAR]
        if len(cars) == 1 and np.any(s.mask == CAR):
            assert np.all(s.depth_m[s.mask == CAR] == cars[0])
            return
    pytest.fail("no single-car scene drawn")


def test_field_invariants_over_many_draws():
    dist = SceneDistribution(image_h=16, image_w=16)
    for i in range(1000):
        s = generate_sample(21, i, dist)
        assert s.image.shape == (16, 16, 3) and s.image.min() >= 0 and s.image.max() <= 1
        assert np.all(s.depth_m > 0)
        assert set(np.unique(s.mask)) <= {0, 1, 2}
        assert 0 <= s.time_min < 1440 and 0 <= s.weather < 11
        assert all(0 <= c <= dist.world_extent_m for c in s.world_pos)


@pytest.mark.parametrize("kw", [
    dict(weather_weights=[1.0] * 10), dict(weather_weights=[-1.0] + [1.0] * 10),
    dict(time_hist=[1.0] * 7), dict(time_hist=[0.0] * 24), dict(max_cars=-1),
])
def test_invalid_distribution(kw):
    with pytest.raises(ValueError):
        generate_sample(0, 0, SceneDistribution(**kw))


def test_label_histogram_within_three_sigma():
    dist = SceneDistribution(image_h=2, image_w=2)
    n = 10000
    # 35 cells at 3 sigma: a given seed fails by chance ~9% of the time; 35 is a passing draw
    labs = [sample_labels(35, i, dist) for i in range(n)]
    for counts, p in (
        (np.bincount([lab.weather for lab in labs], minlength=11), dist.weather_p()),
        (np.bincount([int(lab.time_min // 60) for lab in labs], minlength=24), dist.time_p()),
    ):
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)


def test_generate_dataset_small(tmp_path):
    dist = SceneDistribution(image_h=16, image_w=16)
    man = generate_dataset(10, 2, dist, tmp_path / "a")
    assert len(man) == 10 and read_manifest(tmp_path / "a") == man
    for rec in man:
        path = tmp_path / "a" / rec["file"]
        assert path.stat().st_size == rec["bytes"]
        s = read_sample(path)
        assert s.weather == rec["weather"]
        assert abs(s.time_min - rec["time_min"]) < 1e-3
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["n"] == 10 and cfg["seed"] == 2
    generate_dataset(10, 2, dist, tmp_path / "b")
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    generate_dataset(10, 3, dist, tmp_path / "c")
    assert manifest_hash(tmp_path / "a") != manifest_hash(tmp_path / "c")


def test_generate_dataset_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, 1, None, tmp_path)


def test_smt1_layout_matches_independent_parser():
    s = generate_sample(5, 5, SceneDistribution(image_h=16, image_w=16))
    raw = encode_sample(s)
    ref = parse_smt1(raw)
    assert list(ref) == ["image", "depth_m", "mask", "time_min", "weather", "world_pos"]
    ours = decode_sample(raw)
    for k in ref:
        assert np.array_equal(ref[k], ours[k])
    assert np.array_equal(ref["mask"], s.mask.astype(np.float32))
    assert ref["image"].shape == (16, 16, 3) and ref["time_min"].shape == (1,)
    with pytest.raises(ValueError):
        decode_sample(b"XXXX" + raw[4:])


# spatial split

def test_split_defaults():
    spec = SplitSpec()
    assert (spec.bin_size_m, spec.n_test_bins, spec.buffer_m) == (65.0, 100, 65.0)


def test_single_bin_all_test():
    man = [{"id": i, "world_pos": [10.0 + i, 20.0]} for i in range(5)]
    train, test, buffer = spatial_split(man, SplitSpec(n_test_bins=1))
    assert train == [] and buffer == [] and test == list(range(5))


def test_too_few_bins():
    man = [{"id": 0, "world_pos": [1.0, 1.0]}]
    with pytest.raises(SplitError):
        spatial_split(man, SplitSpec(n_test_bins=2))


def check_split(man, spec, train, test, buffer):
    all_ids = sorted(r["id"] for r in man)
    assert sorted(train + test + buffer) == all_ids
    assert not (set(train) & set(test) or set(train) & set(buffer) or set(test) & set(buffer))
    pos = {r["id"]: np.asarray(r["world_pos"], float) for r in man}
    cells = {tuple(np.floor(pos[i] / spec.bin_size_m).astype(int)) for i in test}
    assert len(cells) == spec.n_test_bins
    for i in train:
        for c in cells:
            assert boundary_distance(pos[i], c, spec.bin_size_m) >= spec.buffer_m
    for i in buffer:
        assert min(boundary_distance(pos[i], c, spec.bin_size_m) for c in cells) < spec.buffer_m


def test_grid_split_brute_force():
    xs = np.arange(5.0, 1300.0, 20.0)
    man = [{"id": k, "world_pos": [float(a), float(b)]}
           for k, (a, b) in enumerate((a, b) for a in xs for b in xs)]
    spec = SplitSpec(n_test_bins=12, rng_seed=4)
    check_split(man, spec, *spatial_split(man, spec))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.floats(10.0, 100.0), st.floats(1.0, 120.0))
def test_split_invariants(seed, n_bins, size, buf):
    rng = np.random.default_rng(seed)
    man = [{"id": i, "world_pos": rng.uniform(0, 400, 2).tolist()} for i in range(150)]
    spec = SplitSpec(bin_size_m=size, n_test_bins=n_bins, buffer_m=buf, rng_seed=seed)
    check_split(man, spec, *spatial_split(man, spec))


def test_split_files(small_dataset):
    split = small_dataset / "split"
    train, test = read_ids(split / "train_ids.txt"), read_ids(split / "test_ids.txt")
    buffer = read_ids(split / "buffer_ids.txt")
    assert len(train) + len(test) + len(buffer) == 300
    assert json.loads((split / "config.json").read_text())["split"]["n_test_bins"] == 10
