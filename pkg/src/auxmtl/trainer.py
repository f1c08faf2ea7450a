"""Adam training of network parameters and task weights, plus the task-set matrix."""

from __future__ import annotations

import csv
import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import metrics as M
from . import tensor as T
from .losses import PAPER_TASK_SETS, Regularizer, TaskId, task_set_label
from .model import Model, ModelConfig, build_model, predict
from .scenegen import read_manifest, read_sample

log = logging.getLogger(__name__)


class WeightingMode(str, enum.Enum):
    SINGLE = "single"
    FIXED = "fixed"
    LEARNED = "learned"


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None, history=None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history


@dataclass
class Hyperparams:
    lr: float = 1e-3
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 2000
    snapshot_every: int = 100
    regularizer: Regularizer = Regularizer.POS
    weighting_mode: WeightingMode = WeightingMode.LEARNED
    seed: int = 0
    c_lr: float | None = None
    c_min: float | None = None
    c_max: float | None = None
    fixed_coeffs: dict[int, float] | None = None
    time_loss_scale: float = L.TIME_LOSS_SCALE
    miou_classes: list[int] | None = None
    eval_batch_size: int = 32

    def __post_init__(self):
        self.regularizer = Regularizer(self.regularizer)
        self.weighting_mode = WeightingMode(self.weighting_mode)
        if self.fixed_coeffs is not None:
            self.fixed_coeffs = {int(k): float(v) for k, v in self.fixed_coeffs.items()}

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if self.max_iters < 0 or self.snapshot_every < 1:
            raise ValueError("max_iters must be >= 0 and snapshot_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regularizer"] = self.regularizer.value
        d["weighting_mode"] = self.weighting_mode.value
        return d


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              hyper: Hyperparams, lrs: dict[str, float] | None = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise T.ShapeError(f"adam_step: {name} has shape {p.shape}, gradient {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        lr = hyper.lr if lrs is None else lrs.get(name, hyper.lr)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
    return state


# ---------------------------------------------------------------------------
# data


@dataclass
class TaskData:
    """In-memory arrays for a list of sample ids."""

    ids: list[int]
    images: np.ndarray
    depth_r: np.ndarray
    mask: np.ndarray
    time_min: np.ndarray
    weather: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def load(cls, data_dir, ids) -> "TaskData":
        data_dir = Path(data_dir)
        manifest = {rec["id"]: rec for rec in read_manifest(data_dir)}
        samples = []
        for i in ids:
            if i not in manifest:
                raise KeyError(f"sample id {i} not in {data_dir}/manifest.jsonl")
            samples.append(read_sample(data_dir / manifest[i]["file"]))
        if not samples:
            raise ValueError(f"no samples selected from {data_dir}")
        return cls(
            ids=list(ids),
            images=np.stack([s.image for s in samples]).astype(np.float32),
            depth_r=np.stack([L.depth_target_transform(s.depth_m) for s in samples]).astype(np.float32),
            mask=np.stack([s.mask for s in samples]).astype(np.int8),
            time_min=np.array([s.time_min for s in samples]),
            weather=np.array([s.weather for s in samples], dtype=np.int64),
        )


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Sample positions for 1-based ``iteration``; a pure function of its arguments."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ValueError(f"need at least {batch_size} training samples, have {n}")
    epoch, pos = divmod(iteration - 1, per_epoch)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7])).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


# ---------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    tasks: list[TaskId]
    mode: WeightingMode = WeightingMode.LEARNED
    iterations: list[int] = field(default_factory=list)
    combined: list[float] = field(default_factory=list)
    raw: dict[TaskId, list[float]] = field(default_factory=dict)
    weighted: dict[TaskId, list[float]] = field(default_factory=dict)
    c: dict[TaskId, list[tuple[int, float]]] = field(default_factory=dict)
    records: list[M.MetricRecord] = field(default_factory=list)
    error: str | None = None

    def __post_init__(self):
        for t in self.tasks:
            self.raw.setdefault(t, [])
            self.weighted.setdefault(t, [])
            self.c.setdefault(t, [])

    @property
    def label(self) -> str:
        return task_set_label(self.tasks)

    def final_record(self) -> M.MetricRecord | None:
        return self.records[-1] if self.records else None

    def rows(self) -> list[tuple[int, str, str, float]]:
        """All logged values as (iteration, task, series, value), iteration-ordered."""
        by_iter: dict[int, list] = {}
        for t in self.tasks:
            for it, val in self.c[t]:
                by_iter.setdefault(it, []).append((it, t.short, "c", val))
        for k, it in enumerate(self.iterations):
            rows = by_iter.setdefault(it, [])
            rows.append((it, "all", "combined", self.combined[k]))
            for t in self.tasks:
                rows.append((it, t.short, "raw_loss", self.raw[t][k]))
                rows.append((it, t.short, "weighted_loss", self.weighted[t][k]))
        for rec in self.records:
            for t in self.tasks:
                name = M.METRIC_FOR_TASK[t]
                val = getattr(rec, name)
                if val is not None:
                    by_iter.setdefault(rec.iteration, []).append((rec.iteration, t.short, name, val))
        order = {"combined": 0, "raw_loss": 1, "weighted_loss": 2, "c": 3}
        out = []
        for it in sorted(by_iter):
            out.extend(sorted(by_iter[it], key=lambda r: (order.get(r[2], 4), r[1])))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "task", "series", "value"])
            for it, task, series, val in self.rows():
                w.writerow([it, task, series, repr(float(val))])

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = [(int(r["iteration"]), r["task"], r["series"], float(r["value"]))
                    for r in csv.DictReader(fh)]
        tasks = sorted({TaskId(int(task[1:])) for _, task, _, _ in rows if task != "all"})
        hist = cls(tasks)
        records: dict[int, M.MetricRecord] = {}
        for it, task, series, val in rows:
            if series == "combined":
                hist.iterations.append(it)
                hist.combined.append(val)
                continue
            t = TaskId(int(task[1:]))
            if series == "raw_loss":
                hist.raw[t].append(val)
            elif series == "weighted_loss":
                hist.weighted[t].append(val)
            elif series == "c":
                hist.c[t].append((it, val))
            else:
                setattr(records.setdefault(it, M.MetricRecord(it)), series, val)
        hist.records = [records[k] for k in sorted(records)]
        if not any(hist.c.values()):
            hist.mode = WeightingMode.SINGLE
        return hist


# ---------------------------------------------------------------------------
# training


@dataclass
class ExperimentSpec:
    task_set: frozenset
    hyper: Hyperparams
    train: TaskData
    test: TaskData
    model_cfg: ModelConfig | None = None

    def __post_init__(self):
        self.task_set = L.parse_tasks(sorted(int(t) for t in self.task_set))

    def resolved_model_cfg(self) -> ModelConfig:
        if self.model_cfg is not None:
            return replace(self.model_cfg, task_set=self.task_set)
        _, h, w, _ = self.train.images.shape
        return ModelConfig(input_h=h, input_w=w, task_set=self.task_set)


def task_losses(outputs: dict[TaskId, T.Tensor], data: TaskData, idx: np.ndarray,
                hyper: Hyperparams) -> dict[TaskId, T.Tensor]:
    raw = {}
    for task, out in outputs.items():
        if task is TaskId.SEG:
            raw[task] = L.pixelwise_ce_loss(out, data.mask[idx])
        elif task is TaskId.DEPTH:
            raw[task] = L.depth_loss(out, data.depth_r[idx].astype(np.float64))
        elif task is TaskId.TIME:
            raw[task] = L.time_loss(data.time_min[idx], out, hyper.time_loss_scale)
        else:
            raw[task] = L.scalar_ce_loss(out, data.weather[idx])
    return raw


def evaluate(model: Model, data: TaskData, iteration: int, hyper: Hyperparams | None = None
             ) -> M.MetricRecord:
    """Metrics of ``model`` on every sample of ``data``."""
    hyper = hyper or Hyperparams()
    preds: dict[TaskId, list[np.ndarray]] = {t: [] for t in model.tasks}
    with T.no_grad():
        for start in range(0, len(data), hyper.eval_batch_size):
            sl = slice(start, start + hyper.eval_batch_size)
            out = predict(model, data.images[sl].astype(np.float64))
            for task, y in out.items():
                if task in (TaskId.SEG, TaskId.WEATHER):
                    preds[task].append(y.data.argmax(axis=-1))
                elif task is TaskId.TIME:
                    preds[task].append(y.data[:, 0])
                else:
                    preds[task].append(y.data)
    rec = M.MetricRecord(iteration)
    for task, chunks in preds.items():
        p = np.concatenate(chunks)
        if task is TaskId.SEG:
            rec.miou = M.miou(p, data.mask, model.cfg.n_seg_classes, classes=hyper.miou_classes)
        elif task is TaskId.DEPTH:
            rec.depth_rmse_r = M.depth_rmse(p, data.depth_r)
        elif task is TaskId.TIME:
            rec.rmsctd_min = M.rmsctd(data.time_min, p)
        else:
            rec.weather_acc = M.accuracy(p, data.weather)
    return rec


def _mode_for(spec: ExperimentSpec) -> WeightingMode:
    mode = spec.hyper.weighting_mode
    if mode is WeightingMode.SINGLE and len(spec.task_set) != 1:
        raise ValueError("single-task mode needs exactly one task")
    return mode


def train(spec: ExperimentSpec) -> tuple[TrainHistory, Model]:
    """Run one experiment; raises DivergenceError (with the partial history) on NaN/inf."""
    hyper = spec.hyper
    hyper.validate()
    mode = _mode_for(spec)
    cfg = spec.resolved_model_cfg()
    model = build_model(cfg, seed=hyper.seed, regularizer=hyper.regularizer)
    tasks = model.tasks
    hist = TrainHistory(tasks, mode)

    if mode is WeightingMode.FIXED:
        coeffs = {t: (hyper.fixed_coeffs or {}).get(int(t), 1.0 / len(tasks)) for t in tasks}
        for t in tasks:
            model.weights.c[t].data[...] = coeffs[t]
    if mode is not WeightingMode.SINGLE:
        for t, v in model.weights.values().items():
            hist.c[t].append((0, v))

    trainable = dict(model.params)
    if mode is WeightingMode.LEARNED:
        trainable.update({f"c.{t.short}": c for t, c in model.weights.c.items()})
    lrs = {f"c.{t.short}": hyper.c_lr for t in tasks} if hyper.c_lr is not None else None
    state = AdamState()

    hist.records.append(evaluate(model, spec.test, 0, hyper))
    for it in range(1, hyper.max_iters + 1):
        idx = batch_indices(hyper.seed, it, len(spec.train), hyper.batch_size)
        out = predict(model, spec.train.images[idx].astype(np.float64))
        raw = task_losses(out, spec.train, idx, hyper)
        for t, loss in raw.items():
            if not np.isfinite(loss.data).all():
                hist.error = f"non-finite {t.name} loss at iteration {it}"
                raise DivergenceError(hist.error, it, hist)

        if mode is WeightingMode.LEARNED:
            try:
                report = L.combine_learned(raw, model.weights)
            except (ValueError, FloatingPointError) as exc:
                hist.error = f"iteration {it}: {exc}"
                raise DivergenceError(hist.error, it, hist) from exc
            total, weighted = report.total, report.weighted
        elif mode is WeightingMode.FIXED:
            coeffs = {t: model.weights.c[t].item() for t in tasks}
            total = L.combine_fixed(raw, coeffs)
            weighted = {t: raw[t].item() * coeffs[t] for t in tasks}
        else:
            (total,) = raw.values()
            weighted = {t: raw[t].item() for t in tasks}

        combined = total.item()
        if not math.isfinite(combined):
            hist.error = f"non-finite combined loss at iteration {it}"
            raise DivergenceError(hist.error, it, hist)

        T.backward(total)
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in trainable.items()}
        try:
            adam_step({k: p.data for k, p in trainable.items()}, grads, state, hyper, lrs)
        except DivergenceError as exc:
            hist.error = f"iteration {it}: {exc}"
            raise DivergenceError(hist.error, it, hist) from exc
        for p in trainable.values():
            p.grad = None
        if mode is WeightingMode.LEARNED and (hyper.c_min is not None or hyper.c_max is not None):
            for c in model.weights.c.values():
                c.data[...] = np.clip(c.data, hyper.c_min, hyper.c_max)

        hist.iterations.append(it)
        hist.combined.append(combined)
        for t in tasks:
            hist.raw[t].append(raw[t].item())
            hist.weighted[t].append(float(weighted[t]))
            if mode is not WeightingMode.SINGLE:
                cv = model.weights.c[t].item()
                hist.c[t].append((it, cv))
                if not math.isfinite(cv):
                    hist.error = f"c for {t.name} diverged at iteration {it}"
                    raise DivergenceError(hist.error, it, hist)

        if it % hyper.snapshot_every == 0 or it == hyper.max_iters:
            hist.records.append(evaluate(model, spec.test, it, hyper))
            log.info("%s it %d loss %.4f %s", hist.label, it, combined, hist.records[-1].present())
    return hist, model


# ---------------------------------------------------------------------------
# task-set matrix

RESULT_COLUMNS = ("miou", "depth_rmse_r", "rmsctd_min", "weather_acc")
ABSENT = "-"


def matrix_mode(task_set, base: WeightingMode) -> WeightingMode:
    """Single-task sets train on their raw loss; larger sets use ``base``."""
    return WeightingMode.SINGLE if len(task_set) == 1 else base


def _run_one(task_set, hyper, train_data, test_data, model_cfg):
    spec = ExperimentSpec(task_set, replace(hyper, weighting_mode=matrix_mode(task_set, hyper.weighting_mode)),
                          train_data, test_data, model_cfg)
    try:
        hist, model = train(spec)
        return hist, model
    except DivergenceError as exc:
        return exc.history, None
    except Exception as exc:  # one failed experiment must not abort the matrix
        hist = TrainHistory(sorted(task_set))
        hist.error = f"{type(exc).__name__}: {exc}"
        return hist, None


def run_matrix(base: Hyperparams, train_data: TaskData, test_data: TaskData,
               model_cfg: ModelConfig | None = None, task_sets=PAPER_TASK_SETS, jobs: int = 1,
               on_done=None) -> dict[frozenset, tuple[TrainHistory, Model | None]]:
    """Train every task set; returns ``{task_set: (history, model or None)}``."""
    results = {}
    if jobs <= 1:
        for ts in task_sets:
            results[ts] = _run_one(ts, base, train_data, test_data, model_cfg)
            if on_done:
                on_done(ts, *results[ts])
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {ts: pool.submit(_run_one, ts, base, train_data, test_data, model_cfg)
                   for ts in task_sets}
        for ts in task_sets:
            results[ts] = futures[ts].result()
            if on_done:
                on_done(ts, *results[ts])
    return results


def results_table(histories) -> list[dict[str, str]]:
    """One row per task set with the final metrics; absent cells are ``-``."""
    rows = []
    for hist in histories:
        rec = hist.final_record()
        row = {"task_set": "{" + ",".join(str(int(t)) for t in hist.tasks) + "}"}
        for task, col in zip(TaskId, RESULT_COLUMNS):
            val = getattr(rec, col) if rec is not None and task in hist.tasks else None
            row[col] = ABSENT if val is None else repr(float(val))
        row["status"] = "ok" if hist.error is None else hist.error
        rows.append(row)
    return rows


def write_results_csv(histories, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["task_set", *RESULT_COLUMNS, "status"], lineterminator="\n")
        w.writeheader()
        w.writerows(results_table(histories))


def write_curves(hist: TrainHistory, path) -> None:
    """gnuplot data: one two-column block (iteration, value) per metric, blocks split by two blank lines."""
    blocks = []
    for task in hist.tasks:
        name = M.METRIC_FOR_TASK[task]
        lines = [f"# task set {hist.label}  metric {name}"]
        lines += [f"{rec.iteration} {getattr(rec, name)!r}" for rec in hist.records
                  if getattr(rec, name) is not None]
        blocks.append("\n".join(lines))
    Path(path).write_text("\n\n\n".join(blocks) + "\n")
