"""Procedural road scenes with depth, masks, time of day and weather labels.

The scenes are deliberately crude: a ground plane seen from a fixed
pinhole camera, rectangular cars and pedestrians standing on it, a sky,
and global lighting/weather effects.  What matters is that every label
leaves a learnable trace in the image: lighting follows the time of day
(overall brightness tracks solar elevation, a left/right ramp tracks
morning vs. evening), weather changes tint, contrast and noise, and the
depth map is consistent with the drawn geometry.

Also holds the SMT1 per-sample file format and the binned spatial
train/test split.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

WEATHER_CLASSES = (
    "clear", "overcast", "light-rain", "heavy-rain", "fog", "snow",
    "thunder", "drizzle", "haze", "dawn-glare", "night-clear",
)
N_WEATHER = len(WEATHER_CLASSES)

BACKGROUND, CAR, PEDESTRIAN = 0, 1, 2

CAMERA_HEIGHT_M = 1.5
HORIZON_FRAC = 0.4
SKY_DEPTH_M = 5000.0
CAR_SIZE_M = (1.8, 1.5)
PEDESTRIAN_SIZE_M = (0.5, 1.75)
CAR_RANGE_M = (3.0, 25.0)
PEDESTRIAN_RANGE_M = (2.5, 15.0)
LATERAL_RANGE_M = 7.0

SMT_MAGIC = b"SMT1"


def _default_weather_weights() -> list[float]:
    return [0.26, 0.14, 0.08, 0.05, 0.06, 0.05, 0.03, 0.08, 0.07, 0.06, 0.12]


def _default_time_hist() -> list[float]:
    # hourly weights: morning and evening peaks over a low floor
    hours = np.arange(24) + 0.5
    w = 0.15 + np.exp(-0.5 * ((hours - 8.0) / 1.8) ** 2) + np.exp(-0.5 * ((hours - 18.0) / 2.2) ** 2)
    return [round(float(v), 6) for v in w]


@dataclass
class SceneDistribution:
    """Label distribution and rendering settings for the generator."""

    weather_weights: list[float] = field(default_factory=_default_weather_weights)
    time_hist: list[float] = field(default_factory=_default_time_hist)
    image_h: int = 64
    image_w: int = 48
    max_cars: int = 5
    max_pedestrians: int = 5
    world_extent_m: float = 10000.0

    def validate(self) -> None:
        w = np.asarray(self.weather_weights, dtype=float)
        if w.shape != (N_WEATHER,) or np.any(w < 0) or w.sum() <= 0 or not np.isfinite(w).all():
            raise ValueError(f"weather_weights must be {N_WEATHER} non-negative weights with positive sum")
        h = np.asarray(self.time_hist, dtype=float)
        if h.ndim != 1 or h.size == 0 or 1440 % h.size or np.any(h < 0) or h.sum() <= 0:
            raise ValueError("time_hist must be non-negative weights over equal slices of the day")
        if self.image_h < 1 or self.image_w < 1:
            raise ValueError("image size must be positive")
        if self.max_cars < 0 or self.max_pedestrians < 0:
            raise ValueError("object counts must be non-negative")
        if self.world_extent_m <= 0:
            raise ValueError("world_extent_m must be positive")

    def weather_p(self) -> np.ndarray:
        w = np.asarray(self.weather_weights, dtype=float)
        return w / w.sum()

    def time_p(self) -> np.ndarray:
        h = np.asarray(self.time_hist, dtype=float)
        return h / h.sum()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDistribution":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray
    depth_m: np.ndarray
    mask: np.ndarray
    time_min: float
    weather: int
    world_pos: tuple[float, float]
    objects: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class Labels:
    time_min: float
    weather: int
    world_pos: tuple[float, float]


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _draw_labels(rng: np.random.Generator, dist: SceneDistribution) -> Labels:
    weather = int(rng.choice(N_WEATHER, p=dist.weather_p()))
    slot_p = dist.time_p()
    slot_len = 1440.0 / slot_p.size
    slot = int(rng.choice(slot_p.size, p=slot_p))
    time_min = (slot + rng.random()) * slot_len
    north, east = rng.random(2) * dist.world_extent_m
    return Labels(float(time_min) % 1440.0, weather, (float(north), float(east)))


def sample_labels(seed: int, index: int, dist: SceneDistribution | None = None) -> Labels:
    """Scalar labels of sample ``(seed, index)`` without rendering the image."""
    dist = dist or SceneDistribution()
    dist.validate()
    return _draw_labels(_rng(seed, index), dist)


def _camera(h: int, w: int) -> tuple[float, float]:
    """Focal length in pixels and horizon row (in pixel-center coordinates)."""
    return float(w), HORIZON_FRAC * h


def ground_plane_depth(h: int, w: int) -> np.ndarray:
    """Depth of an empty scene: flat ground below the horizon, far sky above it."""
    focal, horizon = _camera(h, w)
    v = np.arange(h, dtype=np.float64) + 0.5
    rows = np.full(h, SKY_DEPTH_M)
    below = v > horizon
    rows[below] = np.minimum(focal * CAMERA_HEIGHT_M / (v[below] - horizon), SKY_DEPTH_M)
    return np.repeat(rows[:, None], w, axis=1)


# per class: rgb multiplier, brightness, fog visibility (m, 0 = none), fog rgb,
# gaussian noise sigma, streak density, speckle density
_WEATHER_FX = {
    0: ((1.00, 1.00, 1.00), 1.00, 0.0, None, 0.01, 0.00, 0.00),
    1: ((0.85, 0.87, 0.92), 0.80, 0.0, None, 0.01, 0.00, 0.00),
    2: ((0.80, 0.85, 0.95), 0.85, 0.0, None, 0.02, 0.03, 0.00),
    3: ((0.65, 0.72, 0.90), 0.70, 60.0, (0.55, 0.58, 0.65), 0.04, 0.10, 0.00),
    4: ((0.95, 0.95, 0.95), 0.90, 15.0, (0.78, 0.78, 0.80), 0.01, 0.00, 0.00),
    5: ((0.95, 0.97, 1.05), 1.05, 80.0, (0.90, 0.92, 0.95), 0.02, 0.00, 0.06),
    6: ((0.55, 0.55, 0.72), 0.60, 0.0, None, 0.03, 0.05, 0.00),
    7: ((0.90, 0.90, 0.95), 0.90, 0.0, None, 0.07, 0.00, 0.00),
    8: ((1.05, 0.95, 0.75), 0.95, 90.0, (0.85, 0.78, 0.58), 0.01, 0.00, 0.00),
    9: ((1.15, 1.00, 0.85), 1.10, 0.0, None, 0.01, 0.00, 0.00),
    10: ((0.60, 0.65, 0.95), 0.50, 0.0, None, 0.02, 0.00, 0.00),
}


def _paint_rect(canvas, depth, mask, d, cls, color, u0, u1, v0, v1):
    """Fill pixels whose centers fall in [u0, u1) x [v0, v1) where ``d`` is nearest."""
    h, w = depth.shape
    r0, r1 = max(int(math.ceil(v0 - 0.5)), 0), min(int(math.ceil(v1 - 0.5)), h)
    c0, c1 = max(int(math.ceil(u0 - 0.5)), 0), min(int(math.ceil(u1 - 0.5)), w)
    if r0 >= r1 or c0 >= c1:
        return
    win = (slice(r0, r1), slice(c0, c1))
    nearer = d < depth[win]
    depth[win] = np.where(nearer, d, depth[win])
    mask[win] = np.where(nearer, cls, mask[win])
    canvas[win] = np.where(nearer[..., None], color, canvas[win])


def generate_sample(seed: int, index: int, dist: SceneDistribution | None = None) -> Sample:
    """Render sample ``index`` of the stream ``seed`` (pure in both)."""
    dist = dist or SceneDistribution()
    dist.validate()
    rng = _rng(seed, index)
    labels = _draw_labels(rng, dist)
    h, w = dist.image_h, dist.image_w
    focal, horizon = _camera(h, w)

    depth = ground_plane_depth(h, w)
    mask = np.zeros((h, w), dtype=np.int64)
    sky = depth >= SKY_DEPTH_M

    # ground: asphalt road with a dashed center line, grass beside it
    u = np.arange(w) + 0.5
    lateral = (u[None, :] - w / 2.0) * depth / focal
    canvas = np.empty((h, w, 3))
    road = np.abs(lateral) < 4.0
    canvas[:] = (0.25, 0.45, 0.20)
    canvas[road] = (0.38, 0.38, 0.40)
    dash = (np.abs(lateral) < 0.15) & (np.mod(depth, 6.0) < 3.0)
    canvas[dash] = (0.90, 0.90, 0.85)
    canvas *= (1.0 + 0.12 * np.sin(2 * np.pi * depth / 5.0))[..., None]
    v = (np.arange(h) + 0.5)[:, None]
    sky_col = np.stack([0.45 + 0.25 * v / h, 0.65 + 0.15 * v / h, np.full_like(v, 0.95)], axis=-1)
    canvas[sky] = np.broadcast_to(sky_col, (h, 1, 3)).repeat(w, axis=1)[sky]

    objects = []
    n_cars = int(rng.integers(0, dist.max_cars + 1))
    n_peds = int(rng.integers(0, dist.max_pedestrians + 1))
    for cls, count, (size_w, size_h), (lo, hi) in (
        (CAR, n_cars, CAR_SIZE_M, CAR_RANGE_M),
        (PEDESTRIAN, n_peds, PEDESTRIAN_SIZE_M, PEDESTRIAN_RANGE_M),
    ):
        for _ in range(count):
            d = float(rng.uniform(lo, hi))
            x = float(rng.uniform(-LATERAL_RANGE_M, LATERAL_RANGE_M))
            color = rng.uniform(0.05, 0.95, 3) if cls == CAR else np.array([0.55, 0.25, 0.20])
            objects.append((cls, d, x, color))
    # far to near, so nearer objects overwrite
    objects.sort(key=lambda o: -o[1])
    for cls, d, x, color in objects:
        size_w, size_h = CAR_SIZE_M if cls == CAR else PEDESTRIAN_SIZE_M
        uc = w / 2.0 + focal * x / d
        half = focal * size_w / d / 2.0
        v1 = horizon + focal * CAMERA_HEIGHT_M / d
        v0 = v1 - focal * size_h / d
        _paint_rect(canvas, depth, mask, d, cls, color, uc - half, uc + half, v0, v1)
        # dark window band on the upper part of cars
        if cls == CAR:
            win_color = np.asarray(color) * 0.35
            band = (v0, v0 + (v1 - v0) * 0.35)
            r0, r1 = max(int(math.ceil(band[0] - 0.5)), 0), min(int(math.ceil(band[1] - 0.5)), h)
            c0 = max(int(math.ceil(uc - half - 0.5)), 0)
            c1 = min(int(math.ceil(uc + half - 0.5)), w)
            if r0 < r1 and c0 < c1:
                own = (mask[r0:r1, c0:c1] == CAR) & (depth[r0:r1, c0:c1] == d)
                canvas[r0:r1, c0:c1] = np.where(own[..., None], win_color, canvas[r0:r1, c0:c1])

    image = _apply_lighting(canvas, labels.time_min, w)
    image = _apply_weather(image, depth, labels.weather, rng)

    return Sample(
        image=np.clip(image, 0.0, 1.0),
        depth_m=depth,
        mask=mask,
        time_min=labels.time_min,
        weather=labels.weather,
        world_pos=labels.world_pos,
        objects=[(cls, d) for cls, d, _, _ in objects],
    )


def _apply_lighting(canvas: np.ndarray, time_min: float, w: int) -> np.ndarray:
    phi = 2.0 * np.pi * time_min / 1440.0
    daylight = (1.0 - math.cos(phi)) / 2.0
    brightness = 0.2 + 0.8 * daylight
    # sun azimuth: morning light from the right, evening from the left
    ramp = 1.0 + 0.35 * math.sin(phi) * ((np.arange(w) + 0.5) / w - 0.5) * 2.0
    warm = 0.15 * math.sin(phi) ** 2
    tint = np.array([1.0 + warm, 1.0, 1.0 - warm])
    return canvas * brightness * ramp[None, :, None] * tint


def _apply_weather(image: np.ndarray, depth: np.ndarray, weather: int,
                   rng: np.random.Generator) -> np.ndarray:
    rgb, bright, vis, fog_rgb, sigma, streaks, speckles = _WEATHER_FX[weather]
    h, w, _ = image.shape
    out = image * np.asarray(rgb) * bright
    if vis > 0:
        a = (1.0 - np.exp(-np.minimum(depth, 1000.0) / vis))[..., None]
        out = out * (1.0 - a) + a * np.asarray(fog_rgb) * bright
    if weather == 9:
        yy, xx = np.mgrid[0:h, 0:w]
        out = out + 0.5 * np.exp(-((yy / h) ** 2 + (xx / w) ** 2) / 0.08)[..., None]
    if weather == 6 and rng.random() < 0.5:
        out = out + 0.25
    noise = rng.normal(0.0, sigma, image.shape)
    if streaks > 0:
        cols = rng.random(w) < streaks * 3
        lines = np.zeros((h, w))
        lines[:, cols] = (rng.random((h, int(cols.sum()))) < 0.6) * 0.25
        noise = noise + lines[..., None]
    if speckles > 0:
        noise = noise + ((rng.random((h, w)) < speckles) * 0.7)[..., None]
    return out + noise


# ---------------------------------------------------------------------------
# SMT1 files and dataset directories


def encode_sample(sample: Sample) -> bytes:
    """Serialize as SMT1: magic, u32 field count, then named little-endian f32 arrays."""
    fields = {
        "image": sample.image,
        "depth_m": sample.depth_m,
        "mask": sample.mask,
        "time_min": np.array([sample.time_min]),
        "weather": np.array([sample.weather]),
        "world_pos": np.array(sample.world_pos),
    }
    parts = [SMT_MAGIC, struct.pack("<I", len(fields))]
    for name, arr in fields.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_sample(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != SMT_MAGIC:
        raise ValueError("not an SMT1 record (bad magic)")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    return out


def read_sample(path) -> Sample:
    f = decode_sample(Path(path).read_bytes())
    return Sample(
        image=f["image"],
        depth_m=f["depth_m"],
        mask=f["mask"].astype(np.int64),
        time_min=float(f["time_min"][0]),
        weather=int(f["weather"][0]),
        world_pos=(float(f["world_pos"][0]), float(f["world_pos"][1])),
    )


def generate_dataset(n: int, seed: int, dist: SceneDistribution | None, out_dir) -> list[dict]:
    """Write ``n`` samples plus ``manifest.jsonl`` and ``config.json`` to ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dist = dist or SceneDistribution()
    dist.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(n):
        s = generate_sample(seed, i, dist)
        name = f"s{i:06d}.smt"
        blob = encode_sample(s)
        (out / name).write_bytes(blob)
        manifest.append({
            "id": i,
            "file": name,
            "bytes": len(blob),
            "world_pos": list(s.world_pos),
            "time_min": s.time_min,
            "weather": s.weather,
            "n_cars": sum(1 for c, _ in s.objects if c == CAR),
            "n_pedestrians": sum(1 for c, _ in s.objects if c == PEDESTRIAN),
        })
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "config.json", "w") as fh:
        json.dump({"command": "generate", "n": n, "seed": seed, "dist": dist.to_dict()},
                  fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / "manifest.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def manifest_hash(data_dir) -> str:
    return hashlib.sha256((Path(data_dir) / "manifest.jsonl").read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# spatial split


@dataclass
class SplitSpec:
    bin_size_m: float = 65.0
    n_test_bins: int = 100
    buffer_m: float = 65.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.bin_size_m <= 0 or self.n_test_bins <= 0 or self.buffer_m <= 0:
            raise ValueError("bin size, test bin count and buffer width must be positive")


class SplitError(ValueError):
    pass


def spatial_split(manifest: list[dict], spec: SplitSpec | None = None):
    """Partition sample ids into (train, test, buffer) by 2D position bins.

    ``spec.n_test_bins`` occupied bins are drawn at random; their samples
    form the test set, samples closer than ``spec.buffer_m`` to any test
    bin are discarded as buffer, the rest is training data.
    """
    spec = spec or SplitSpec()
    spec.validate()
    ids = np.array([rec["id"] for rec in manifest], dtype=np.int64)
    pos = np.array([rec["world_pos"] for rec in manifest], dtype=np.float64).reshape(-1, 2)
    cells = np.floor(pos / spec.bin_size_m).astype(np.int64)
    occupied = np.unique(cells, axis=0)
    if len(occupied) < spec.n_test_bins:
        raise SplitError(f"only {len(occupied)} occupied bins, need {spec.n_test_bins} test bins")
    rng = np.random.default_rng(spec.rng_seed)
    chosen = occupied[np.sort(rng.choice(len(occupied), spec.n_test_bins, replace=False))]
    test_cells = {tuple(c) for c in chosen.tolist()}

    is_test = np.array([tuple(c) in test_cells for c in cells.tolist()], dtype=bool)
    near = np.zeros(len(ids), dtype=bool)
    reach = int(math.ceil(spec.buffer_m / spec.bin_size_m))
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            cand = cells + (di, dj)
            hit = np.array([tuple(c) in test_cells for c in cand.tolist()], dtype=bool) & ~is_test
            if not hit.any():
                continue
            idx = np.flatnonzero(hit)
            lo = cand[idx] * spec.bin_size_m
            gap = np.maximum(np.maximum(lo - pos[idx], pos[idx] - (lo + spec.bin_size_m)), 0.0)
            near[idx] |= np.hypot(gap[:, 0], gap[:, 1]) < spec.buffer_m
    buffer = near & ~is_test
    train = ~is_test & ~buffer
    return (sorted(ids[train].tolist()), sorted(ids[is_test].tolist()), sorted(ids[buffer].tolist()))


def write_split(out_dir, train, test, buffer, spec: SplitSpec, data_dir=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in (("train", train), ("test", test), ("buffer", buffer)):
        (out / f"{name}_ids.txt").write_text("".join(f"{i}\n" for i in ids))
    with open(out / "config.json", "w") as fh:
        json.dump({"command": "split", "data": str(data_dir) if data_dir else None,
                   "split": asdict(spec)}, fh, indent=2, sort_keys=True)


def read_ids(path) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]
