"""Command line: generate, split, train, matrix, report.

Every command accepts ``--config FILE`` (JSON); explicit flags override
values from the file, and the fully resolved configuration is written as
``config.json`` next to the outputs so a run can be repeated with
``--config <out>/config.json``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import losses as L
from .model import ModelConfig, save_checkpoint
from .scenegen import (SceneDistribution, SplitError, SplitSpec, generate_dataset, read_ids,
                       read_manifest, spatial_split, write_split)
from .trainer import (ExperimentSpec, Hyperparams, TaskData, TrainHistory, WeightingMode,
                      DivergenceError, matrix_mode, run_matrix, train, write_curves,
                      write_results_csv)

log = logging.getLogger("auxmtl")

SEED_ENV = "AUXMTL_SEED"


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(loaded) - set(defaults) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _write_config(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve(args, {"n": None, "seed": _default_seed(), "out": None, "dist": None})
    _require(cfg, "n", "out")
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    dist_cfg = cfg["dist"]
    if isinstance(dist_cfg, str):
        try:
            dist_cfg = json.loads(Path(dist_cfg).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read distribution file: {exc}") from None
    try:
        dist = SceneDistribution.from_dict(dist_cfg or {})
        dist.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid distribution: {exc}") from None
    out = Path(cfg["out"])
    generate_dataset(cfg["n"], cfg["seed"], dist, out)
    _write_config(out, "generate", {**cfg, "dist": dist.to_dict()})
    print(f"wrote {cfg['n']} samples to {out}")
    return 0


def cmd_split(args) -> int:
    cfg = _resolve(args, {"data": None, "out": None, "bin": 65.0, "test_bins": 100,
                          "buffer": 65.0, "seed": _default_seed()})
    _require(cfg, "data")
    spec = SplitSpec(bin_size_m=cfg["bin"], n_test_bins=cfg["test_bins"], buffer_m=cfg["buffer"],
                     rng_seed=cfg["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = read_manifest(cfg["data"])
    train_ids, test_ids, buffer_ids = spatial_split(manifest, spec)
    out = Path(cfg["out"] or Path(cfg["data"]) / "split")
    write_split(out, train_ids, test_ids, buffer_ids, spec, cfg["data"])
    _write_config(out, "split", {**cfg, "out": str(out)})
    print(f"train {len(train_ids)}  test {len(test_ids)}  buffer {len(buffer_ids)} -> {out}")
    return 0


TRAIN_DEFAULTS = {
    "data": None, "split": None, "out": None,
    "tasks": None, "mode": "learned", "reg": "pos",
    "iters": 2000, "lr": 1e-3, "batch": 4, "snapshot_every": 100,
    "c_lr": None, "c_min": None, "c_max": None,
    "time_scale": L.TIME_LOSS_SCALE, "max_train": None, "max_test": None,
    "encoder_channels": [16, 32, 64, 64], "decoder_channels": 32, "aux_channels": 32,
    "miou_classes": None,
}


def _load_data(cfg: dict) -> tuple[TaskData, TaskData]:
    data = Path(cfg["data"])
    split = Path(cfg["split"] or data / "split")
    if not (data / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no dataset at {data} (manifest.jsonl missing)")
    if not (split / "train_ids.txt").exists():
        raise FileNotFoundError(f"no split at {split}; run `auxmtl split --data {data}` first")
    train_ids = read_ids(split / "train_ids.txt")[:cfg["max_train"]]
    test_ids = read_ids(split / "test_ids.txt")[:cfg["max_test"]]
    return TaskData.load(data, train_ids), TaskData.load(data, test_ids)


def _hyper(cfg: dict, mode: str) -> Hyperparams:
    try:
        return Hyperparams(
            lr=cfg["lr"], batch_size=cfg["batch"], max_iters=cfg["iters"],
            snapshot_every=cfg["snapshot_every"], regularizer=cfg["reg"], weighting_mode=mode,
            seed=cfg["seed"], c_lr=cfg["c_lr"], c_min=cfg["c_min"], c_max=cfg["c_max"],
            time_loss_scale=cfg["time_scale"], miou_classes=cfg["miou_classes"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_cfg(cfg: dict, data: TaskData, tasks) -> ModelConfig:
    _, h, w, _ = data.images.shape
    return ModelConfig(input_h=h, input_w=w, encoder_channels=list(cfg["encoder_channels"]),
                       decoder_channels=cfg["decoder_channels"], aux_channels=cfg["aux_channels"],
                       task_set=tasks)


def _save_run(out: Path, hist: TrainHistory, model) -> None:
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "history.csv")
    if model is not None:
        save_checkpoint(model, out / "model.ckpt")
    write_results_csv([hist], out / "results.csv")


def cmd_train(args) -> int:
    cfg = _resolve(args, {**TRAIN_DEFAULTS, "seed": _default_seed()})
    _require(cfg, "data", "out", "tasks")
    try:
        tasks = L.parse_tasks(cfg["tasks"] if isinstance(cfg["tasks"], str)
                              else ",".join(str(t) for t in cfg["tasks"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg["tasks"] = ",".join(str(int(t)) for t in sorted(tasks))
    hyper = _hyper(cfg, cfg["mode"])
    if hyper.weighting_mode is WeightingMode.SINGLE and len(tasks) != 1:
        raise UsageError("--mode single needs exactly one task")
    train_data, test_data = _load_data(cfg)
    out = Path(cfg["out"])
    _write_config(out, "train", cfg)
    spec = ExperimentSpec(tasks, hyper, train_data, test_data, _model_cfg(cfg, train_data, tasks))
    try:
        hist, model = train(spec)
    except DivergenceError as exc:
        _save_run(out, exc.history, None)
        print(f"diverged: {exc}", file=sys.stderr)
        return 1
    _save_run(out, hist, model)
    print(f"{hist.label}: final {hist.final_record().present()} -> {out}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _resolve(args, {**TRAIN_DEFAULTS, "seed": _default_seed(), "jobs": 1})
    cfg.pop("tasks")
    _require(cfg, "data", "out")
    base = _hyper(cfg, cfg["mode"])
    train_data, test_data = _load_data(cfg)
    out = Path(cfg["out"])
    _write_config(out, "matrix", cfg)

    def done(ts, hist, model):
        label = L.task_set_label(ts)
        run_dir = out / label
        mode = matrix_mode(ts, base.weighting_mode).value
        _write_config(run_dir, "train", {**{k: v for k, v in cfg.items() if k != "jobs"},
                                         "tasks": ",".join(str(int(t)) for t in sorted(ts)),
                                         "mode": mode})
        _save_run(run_dir, hist, model)
        status = "ok" if hist.error is None else f"FAILED ({hist.error})"
        print(f"{label}: {status}", flush=True)

    results = run_matrix(base, train_data, test_data, _model_cfg(cfg, train_data, L.PAPER_TASK_SETS[-1]),
                         jobs=cfg["jobs"], on_done=done)
    hists = [results[ts][0] for ts in L.PAPER_TASK_SETS]
    write_results_csv(hists, out / "results.csv")
    print(f"results table -> {out / 'results.csv'}")
    return 0 if all(h.error is None for h in hists) else 1


def _history_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*/history.csv")))
            if (p / "history.csv").exists():
                files.append(p / "history.csv")
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no history at {p}")
    if not files:
        raise FileNotFoundError("no history.csv files found")
    return files


def cmd_report(args) -> int:
    cfg = _resolve(args, {"history": None, "out": None})
    _require(cfg, "history", "out")
    paths = cfg["history"] if isinstance(cfg["history"], list) else [cfg["history"]]
    hists = [TrainHistory.read_csv(f) for f in _history_files(paths)]
    order = {ts: i for i, ts in enumerate(L.PAPER_TASK_SETS)}
    hists.sort(key=lambda h: (order.get(frozenset(h.tasks), len(order)), h.label))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for h in hists:
        write_curves(h, out / f"{h.label}.dat")
    write_results_csv(hists, out / "summary.csv")
    _write_config(out, "report", {**cfg, "history": [str(p) for p in paths]})
    print(f"{len(hists)} curve files + summary.csv -> {out}")
    return 0


# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", help="split directory (default <data>/split)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=[m.value for m in WeightingMode])
    p.add_argument("--reg", choices=[r.value for r in L.Regularizer])
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--snapshot-every", type=_positive_int)
    p.add_argument("--c-lr", type=float, help="learning rate for the task weights")
    p.add_argument("--c-min", type=float, help="optional lower clamp for task weights")
    p.add_argument("--c-max", type=float, help="optional upper clamp for task weights")
    p.add_argument("--time-scale", type=float, help="time loss scale (default 1e-5)")
    p.add_argument("--max-train", type=int)
    p.add_argument("--max-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dist", help="JSON label-distribution file")
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="spatial train/test split")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--bin", type=float)
    p.add_argument("--test-bins", type=int)
    p.add_argument("--buffer", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one task set")
    p.add_argument("--tasks", help="comma-separated task ids, e.g. 1,2,4")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrix", help="train all eight task sets")
    _add_train_flags(p)
    p.add_argument("--jobs", type=_positive_int)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="convergence curves and summary table")
    p.add_argument("--history", nargs="+", help="history.csv files or run directories")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"auxmtl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SplitError, OSError, KeyError, ValueError) as exc:
        print(f"auxmtl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
