"""Command-line entry point: ``cfnet <command> [options]``.

Data goes to files under ``--out-dir``; progress and errors go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import EngineConfig, init_network
from .ingest import RawDataset, interleaved_schedule, load_mnist, partition_tasks
from .kmeans import threshold_scan
from .lifecycle import (
    assign_labels,
    evaluate,
    load_checkpoint,
    train_disjoint,
    training_accuracy,
    write_metrics_csv,
    write_summary_json,
)
from .shotnoise import agreement_checks

log = logging.getLogger("cfnet")

DEFAULT_DATA_DIR = "data/mnist"
ENGINE_FIELDS = {f.name for f in fields(EngineConfig)}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    size: int = 400
    vth: float = 13.5
    epochs: int = 1
    order: tuple[int, ...] = tuple(range(10))
    seed: int = 0
    mode: str = "sequential"
    data_dir: str = DEFAULT_DATA_DIR
    out_dir: str = "out"
    limit_per_class: int | None = None
    assign_per_class: int | None = 1000
    eval_per_class: int | None = None
    engine: dict = field(default_factory=dict)

    def validate(self, need_square: bool = False) -> None:
        if self.size < 1:
            raise ConfigError("size must be positive")
        if not self.vth > 0:
            raise ConfigError("vth must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode not in ("sequential", "interleaved"):
            raise ConfigError(f"mode must be sequential or interleaved, not {self.mode!r}")
        if sorted(set(self.order)) != sorted(self.order) or not all(0 <= c <= 9 for c in self.order):
            raise ConfigError(f"bad class order {self.order}")
        unknown = set(self.engine) - ENGINE_FIELDS
        if unknown:
            raise ConfigError(f"unknown engine settings: {sorted(unknown)}")
        if need_square:
            check_square(self.size)
        try:
            self.engine_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def engine_config(self) -> EngineConfig:
        return EngineConfig(**{**self.engine, "n_neurons": self.size, "v_th": self.vth})


def check_square(m: int) -> int:
    side = math.isqrt(m)
    if side * side != m:
        raise ConfigError(f"network size {m} is not a perfect square; cannot lay out a grid")
    return side


def parse_order(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(c) for c in text.replace(" ", "").split(",") if c != "")
    except ValueError as exc:
        raise ConfigError(f"bad class order {text!r}") from exc


def load_run_config(args) -> RunConfig:
    """Defaults, then the JSON file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config must be a flat JSON object")
    run_names = {f.name for f in fields(RunConfig)} - {"engine"}
    engine = {k: values.pop(k) for k in list(values) if k in ENGINE_FIELDS}
    unknown = set(values) - run_names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "order" in values:
        o = values["order"]
        values["order"] = parse_order(o) if isinstance(o, str) else tuple(int(c) for c in o)
    cfg = RunConfig(**values, engine=engine)
    for name in ("size", "vth", "epochs", "seed", "mode", "data_dir", "out_dir",
                 "limit_per_class", "assign_per_class", "eval_per_class"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "order", None) is not None:
        cfg.order = parse_order(args.order)
    return cfg


# -- data ------------------------------------------------------------------------------


def load_split(cfg: RunConfig, split: str, classes=None) -> RawDataset:
    data = load_mnist(cfg.data_dir, split)
    if classes is None and cfg.limit_per_class is None:
        return data
    classes = range(10) if classes is None else classes
    rng = np.random.default_rng([cfg.seed, 0x11A])
    keep = []
    for c in classes:
        members = np.flatnonzero(data.labels == c)
        if cfg.limit_per_class is not None and len(members) > cfg.limit_per_class:
            members = np.sort(rng.choice(members, cfg.limit_per_class, replace=False))
        keep.append(members)
    return data.subset(np.concatenate(keep))


def make_schedule(cfg: RunConfig, train: RawDataset):
    if cfg.mode == "interleaved":
        return interleaved_schedule(train.labels, cfg.order, cfg.epochs, cfg.seed)
    return partition_tasks(train.labels, cfg.order, cfg.epochs, cfg.seed)


# -- weight grid -----------------------------------------------------------------------


def weight_grid(weights: np.ndarray, tile: tuple[int, int] = (28, 28)) -> np.ndarray:
    """Lay out weight columns as a square grid of min-max scaled tiles.

    Separator lines are 1 pixel wide and black. Constant tiles are mid-gray.
    """
    n_in, m = weights.shape
    side = check_square(m)
    h, w = tile
    if h * w != n_in:
        raise ConfigError(f"tile {tile} does not match {n_in} inputs")
    img = np.zeros((side * h + side - 1, side * w + side - 1), dtype=np.uint8)
    for j in range(m):
        col = weights[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi > lo:
            t = np.rint((col - lo) / (hi - lo) * 255.0)
        else:
            t = np.full(n_in, 128.0)
        r, c = divmod(j, side)
        img[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = t.reshape(h, w)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)


# -- commands --------------------------------------------------------------------------


def _progress(every: int):
    count = [0]
    t0 = time.time()

    def cb(task, idx):
        count[0] += 1
        if count[0] % every == 0:
            log.info("task %d: %d samples presented (%.0f s)", task, count[0], time.time() - t0)
    return cb


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    cfg.validate(need_square=args.export_grid)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.cfn"
    engine = cfg.engine_config()
    t0 = time.time()
    train = load_split(cfg, "train")
    test = train if args.eval_split == "train" else load_split(cfg, "test")
    rng = np.random.default_rng(cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    schedule = make_schedule(cfg, train)
    log.info("training %d neurons, v_th=%g, %d task(s), %d presentations",
             cfg.size, cfg.vth, len(schedule.tasks), schedule.n_presentations)
    state, metrics = train_disjoint(
        engine, schedule, train, rng, test, eval_seed=cfg.seed,
        assign_per_class=cfg.assign_per_class, eval_per_class=cfg.eval_per_class,
        evaluate_stages=not args.no_stage_eval, resume=resume, checkpoint_path=ckpt_path,
        checkpoint_every=args.checkpoint_every, on_sample=_progress(5000),
        stop_after=args.stop_after)
    if args.stop_after is not None and ckpt_path.exists() \
            and load_checkpoint(ckpt_path).position[0] < len(schedule.tasks):
        log.info("stopped after %d presentations; resume with --resume %s",
                 args.stop_after, ckpt_path)
        return 0
    write_metrics_csv(out / "metrics.csv", metrics)
    summary = {
        "size": cfg.size, "vth": cfg.vth, "epochs": cfg.epochs, "mode": cfg.mode,
        "order": list(cfg.order), "seed": cfg.seed, "engine": engine.to_dict(),
        "stages": [{"stage": m.stage, "classes_seen": list(m.classes_seen),
                    "accuracy": m.accuracy} for m in metrics],
        "fire_counts_total": int(state.fire_counts.sum()),
        "version": __version__,
    }
    if args.train_accuracy:
        log.info("scoring training accuracy")
        acc, label_map, _ = training_accuracy(state, train, np.random.default_rng([cfg.seed, 7]),
                                              engine)
        summary["train_accuracy"] = acc
        summary["neurons_per_class"] = np.bincount(
            label_map.labels[label_map.labels >= 0], minlength=10).tolist()
    summary["runtime_s"] = round(time.time() - t0, 3)
    write_summary_json(out / "summary.json", summary)
    if args.export_grid:
        write_pgm(out / "weights.pgm", weight_grid(state.weights))
    log.info("done in %.1f s; outputs in %s", time.time() - t0, out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        state, engine = ck.state, ck.config
        classes = tuple(sorted(set(ck.schedule.class_order)))
    else:
        cfg.validate()
        engine = cfg.engine_config()
        state = init_network(engine, np.random.default_rng(cfg.seed))
        classes = tuple(sorted(cfg.order))
        log.info("no checkpoint given; evaluating a fresh random network")
    train = load_split(cfg, "train", classes)
    target = train if args.split == "train" else load_split(cfg, "test", classes)
    a_rng = np.random.default_rng([cfg.seed, 1])
    label_map = assign_labels(state, train.rates(), train.labels, a_rng, engine)
    m = evaluate(state, label_map, target.rates(), target.labels,
                 np.random.default_rng([cfg.seed, 2]), engine, classes_seen=classes)
    write_metrics_csv(out / "eval.csv", [m])
    write_summary_json(out / "eval.json", {"split": args.split, "accuracy": m.accuracy,
                                           "n": len(target), "metrics": m.to_dict()})
    log.info("%s accuracy %.4f on %d samples", args.split, m.accuracy, len(target))
    return 0


def _sweep_point(point):
    cfg, train_indices = point
    data = load_mnist(cfg.data_dir, "train")
    train = data.subset(train_indices) if train_indices is not None else data
    engine = cfg.engine_config()
    rng = np.random.default_rng(cfg.seed)
    state, _ = train_disjoint(engine, make_schedule(cfg, train), train, rng,
                              evaluate_stages=False)
    acc, _, _ = training_accuracy(state, train, np.random.default_rng([cfg.seed, 7]), engine)
    return cfg.size, cfg.vth, cfg.epochs, acc


def sweep_rows(results):
    """Rows sorted by (size, vth, epochs) with a best-per-size flag."""
    rows = sorted(results)
    best = {}
    for size, _, _, acc in rows:
        best[size] = max(best.get(size, -1.0), acc)
    return [(s, v, e, a, int(a == best[s])) for s, v, e, a in rows]


def cmd_sweep(args) -> int:
    base = load_run_config(args)
    sizes = args.sizes or [base.size]
    vths = args.vths or [base.vth]
    epochs = args.epochs_list or [base.epochs]
    points = []
    for s in sizes:
        for v in vths:
            for e in epochs:
                cfg = replace(base, size=s, vth=v, epochs=e)
                cfg.validate()
                points.append(cfg)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = None
    if base.limit_per_class is not None:
        labels = load_mnist(base.data_dir, "train").labels
        rng = np.random.default_rng([base.seed, 0x11A])
        indices = np.concatenate([
            np.sort(rng.choice(np.flatnonzero(labels == c),
                               min(base.limit_per_class, int(np.sum(labels == c))), replace=False))
            for c in range(10)])
    log.info("sweep over %d points with %d worker(s)", len(points), args.workers)
    work = [(p, indices) for p in points]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_point, work))
    else:
        results = []
        for i, w in enumerate(work):
            results.append(_sweep_point(w))
            log.info("point %d/%d: %s", i + 1, len(work), results[-1])
    lines = ["size,vth,epochs,train_accuracy,best"]
    lines += [f"{s},{v:g},{e},{a:.6f},{b}" for s, v, e, a, b in sweep_rows(results)]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_stats_verify(args) -> int:
    out = Path(args.out_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    checks = agreement_checks(trials=args.trials, seed=args.seed or 0, n_specs=args.n_specs)
    with open(out / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "value", "reference", "error", "tolerance", "result"])
        for c in checks:
            writer.writerow([c.name, f"{c.value:.12g}", f"{c.reference:.12g}", f"{c.error:.3e}",
                             f"{c.tolerance:.3e}", "PASS" if c.passed else "FAIL"])
    failed = [c.name for c in checks if not c.passed]
    log.info("%d checks, %d failed, %.1f s", len(checks), len(failed), time.time() - t0)
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
        return 1
    return 0


def cmd_kmeans(args) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(cfg, "train")
    data = train.rates().astype(np.float32)
    seeds = list(range(cfg.seed, cfg.seed + args.n_seeds))
    lines = ["k,seed,cross_class_dot,std,potential"]
    summary = []
    for k in args.k:
        log.info("k=%d over %d seeds", k, len(seeds))
        rows = threshold_scan(data, train.labels, [k], seeds, max_iters=args.max_iters,
                              tau_mem=cfg.engine_config().tau_mem,
                              seed_candidates=args.seed_candidates)
        for _, s, dot, pot in rows:
            lines.append(f"{k},{s},{dot:.6f},,{pot:.6f}")
        dots = np.array([r[2] for r in rows])
        mean = float(dots.mean())
        std = float(dots.std(ddof=1)) if len(dots) > 1 else 0.0
        pot = cfg.engine_config().tau_mem * mean
        summary.append(f"{k},mean,{mean:.6f},{std:.6f},{pot:.6f}")
    (out / "kmeans.csv").write_text("\n".join(lines + summary) + "\n")
    return 0


def cmd_export_weights(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    write_pgm(args.out, weight_grid(ck.state.weights))
    log.info("wrote %s", args.out)
    return 0


# -- argument parsing ------------------------------------------------------------------


def _floats(text):
    return [float(x) for x in text.split(",") if x]


def _ints(text):
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run=True):
        sp.add_argument("--config", help="flat JSON file of settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        if run:
            sp.add_argument("--size", type=int, help="number of output neurons")
            sp.add_argument("--vth", type=float, help="firing threshold")
            sp.add_argument("--order", help="comma-separated class order")
            sp.add_argument("--mode", choices=["sequential", "interleaved"])
            sp.add_argument("--data-dir", dest="data_dir",
                            default=os.environ.get("CFN_DATA_DIR"))
            sp.add_argument("--limit-per-class", dest="limit_per_class", type=int,
                            help="use at most this many training samples per class")

    t = sub.add_parser("train", help="run the task curriculum")
    common(t)
    t.add_argument("--epochs", type=int, help="epochs per task")
    t.add_argument("--assign-per-class", dest="assign_per_class", type=int)
    t.add_argument("--eval-per-class", dest="eval_per_class", type=int)
    t.add_argument("--eval-split", choices=["train", "test"], default="test")
    t.add_argument("--no-stage-eval", action="store_true")
    t.add_argument("--train-accuracy", action="store_true",
                   help="score training-set accuracy after the run")
    t.add_argument("--export-grid", action="store_true", help="write weights.pgm")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", dest="stop_after", type=int,
                   help="checkpoint and exit after this many presentations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="label on training data and score a split")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="training accuracy over a size x v_th x epochs grid")
    common(s)
    s.add_argument("--sizes", type=_ints)
    s.add_argument("--vths", type=_floats)
    s.add_argument("--epochs", dest="epochs_list", type=_ints)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("stats-verify", help="analytic vs Monte Carlo agreement table")
    common(v, run=False)
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--n-specs", dest="n_specs", type=int, default=10)
    v.set_defaults(func=cmd_stats_verify)

    k = sub.add_parser("kmeans", help="cross-class closeness of k-means centroids")
    common(k)
    k.add_argument("--k", type=_ints, default=[400])
    k.add_argument("--n-seeds", dest="n_seeds", type=int, default=10)
    k.add_argument("--max-iters", dest="max_iters", type=int, default=20)
    k.add_argument("--seed-candidates", dest="seed_candidates", type=int, default=10_000)
    k.set_defaults(func=cmd_kmeans)

    x = sub.add_parser("export-weights", help="write a checkpoint's weights as a PGM grid")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
