"""Benchmark grid execution and report generation.

A plan enumerates (model kind, config, latent_dim, seed) cells over a
dataset. Each finished cell writes one atomic JSON record file keyed by the
cell id; rerunning a plan skips every cell whose file exists, so a finished
plan re-executes with zero training. Reports are a pure function of the
records directory: per-task tables pick each model's best config on the
validation split and report the test value.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .configio import ConfigError, canonical_dumps, load_json_file
from .data import Dataset, dataset_from_spec
from .evaluation import (BenchmarkRecord, TASKS, task_classification,
                         task_clustering, task_generation, task_interpolation,
                         task_reconstruction, write_pgm_grid)
from .models import ModelConfig
from .samplers import SamplerConfig, fit_sampler, sampler_needs_data
from .tensor import Rng, no_grad, Tensor
from .training import TrainConfig, train

__all__ = ["BenchmarkPlan", "load_plan", "run_benchmark", "generate_report",
           "load_grid", "LATENT_SWEEP"]

# The latent-dimension sweep used by the full-scale protocol.
LATENT_SWEEP = (16, 32, 64, 128, 256, 512)

_MINIMIZED = {"reconstruction": True, "generation": True,
              "classification": False, "clustering": False}
_SELECT_SPLIT = {"reconstruction": "val", "generation": "val",
                 "classification": "val", "clustering": "train"}
_REPORT_SPLIT = {"reconstruction": "test", "generation": "test",
                 "classification": "test", "clustering": "train"}


def load_grid(kind: str) -> list[dict]:
    """Packaged hyper-parameter grid (10 configs per swept model)."""
    ref = resources.files("gae_forge.grids").joinpath(f"{kind}.json")
    with ref.open("r", encoding="utf-8") as fh:
        return json.load(fh)["configs"]


@dataclass
class PlanEntry:
    kind: str
    configs: list  # list of {"config_id": str, **model kwargs}
    overrides: dict = field(default_factory=dict)


@dataclass
class BenchmarkPlan:
    dataset_spec: dict
    val_size: int
    test_size: int
    entries: list[PlanEntry]
    latent_dims: list[int]
    seeds: list[int]
    tasks: list[str]
    samplers: list[str] = field(default_factory=lambda: ["normal", "gmm"])
    generation_samples: int = 1000
    interpolation_steps: int = 8
    train_overrides: dict = field(default_factory=dict)
    sampler_overrides: dict = field(default_factory=dict)
    output_root: str = "benchmark_out"

    @property
    def records_dir(self) -> str:
        return os.path.join(self.output_root, "records")


def load_plan(path) -> BenchmarkPlan:
    obj = load_json_file(path)
    for key in ("dataset", "entries", "latent_dims", "seeds", "tasks"):
        if key not in obj:
            raise ConfigError(f"missing plan key {key!r}", f"/{key}")
    for task in obj["tasks"]:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}", "/tasks")
    entries = []
    for i, raw in enumerate(obj["entries"]):
        if "kind" not in raw:
            raise ConfigError("plan entry needs a model kind",
                              f"/entries/{i}/kind")
        if "configs" in raw:
            configs = raw["configs"]
        else:
            configs = load_grid(raw["kind"])
            if "config_ids" in raw:
                wanted = {str(c) for c in raw["config_ids"]}
                configs = [c for c in configs if c["config_id"] in wanted]
        entries.append(PlanEntry(kind=raw["kind"], configs=configs,
                                 overrides=raw.get("overrides", {})))
    return BenchmarkPlan(
        dataset_spec=obj["dataset"],
        val_size=int(obj.get("val_size", 0)),
        test_size=int(obj.get("test_size", 0)),
        entries=entries,
        latent_dims=[int(d) for d in obj["latent_dims"]],
        seeds=[int(s) for s in obj["seeds"]],
        tasks=list(obj["tasks"]),
        samplers=list(obj.get("samplers", ["normal", "gmm"])),
        generation_samples=int(obj.get("generation_samples", 1000)),
        interpolation_steps=int(obj.get("interpolation_steps", 8)),
        train_overrides=obj.get("train", {}),
        sampler_overrides=obj.get("sampler_overrides", {}),
        output_root=obj.get("output_root", "benchmark_out"),
    )


def _three_way_split(ds: Dataset, val_size: int, test_size: int):
    n = len(ds)
    if val_size + test_size >= n:
        raise ConfigError("val_size + test_size must be smaller than the dataset")
    test = ds.subset(slice(n - test_size, n), "test") if test_size else None
    rest = ds.subset(slice(0, n - test_size), "")
    if val_size:
        cut = len(rest) - val_size
        train_ds = rest.subset(slice(0, cut), "train")
        val = rest.subset(slice(cut, len(rest)), "val")
    else:
        train_ds, val = rest, rest
    return train_ds, val, (test if test is not None else val)


def _cell_key(kind: str, config_id: str, latent_dim: int, seed: int) -> str:
    return f"{kind}__cfg{config_id}__d{latent_dim}__seed{seed}"


def run_benchmark(plan: BenchmarkPlan, progress=None) -> dict:
    """Execute every unfinished cell; returns {'trained': n, 'skipped': n}.

    GAE_FORGE_THREADS (default 1) caps the number of parallel cell workers;
    each cell owns its model and tape, so cells never share mutable state.
    """
    os.makedirs(plan.records_dir, exist_ok=True)
    ds = dataset_from_spec(plan.dataset_spec)
    train_ds, val_ds, test_ds = _three_way_split(ds, plan.val_size,
                                                 plan.test_size)

    cells = []
    for entry in plan.entries:
        for cfg_row in entry.configs:
            for latent_dim in plan.latent_dims:
                for seed in plan.seeds:
                    cells.append((entry, cfg_row, latent_dim, seed))

    counters = {"trained": 0, "skipped": 0}

    def run_cell(cell):
        entry, cfg_row, latent_dim, seed = cell
        key = _cell_key(entry.kind, str(cfg_row.get("config_id", "0")),
                        latent_dim, seed)
        path = os.path.join(plan.records_dir, key + ".json")
        if os.path.exists(path):
            counters["skipped"] += 1
            return
        records = _run_one(plan, entry, cfg_row, latent_dim, seed,
                           train_ds, val_ds, test_ds, key)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(canonical_dumps([r.to_dict() for r in records]))
        os.replace(tmp, path)
        counters["trained"] += 1
        if progress:
            progress(key)

    workers = max(1, int(os.environ.get("GAE_FORGE_THREADS", "1")))
    if workers == 1:
        for cell in cells:
            run_cell(cell)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_cell, cells))
    return counters


def _run_one(plan, entry, cfg_row, latent_dim, seed, train_ds, val_ds,
             test_ds, key) -> list[BenchmarkRecord]:
    config_id = str(cfg_row.get("config_id", "0"))
    kwargs = {k: v for k, v in cfg_row.items() if k != "config_id"}
    kwargs.update(entry.overrides)
    if isinstance(kwargs.get("hidden_dims"), list):
        kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
    if isinstance(kwargs.get("adversary_hidden_dims"), list):
        kwargs["adversary_hidden_dims"] = tuple(kwargs["adversary_hidden_dims"])
    model_config = ModelConfig.from_dict({
        "kind": entry.kind, "input_dim": list(train_ds.image_shape),
        "latent_dim": latent_dim, **kwargs})
    train_config = TrainConfig.from_dict({**plan.train_overrides, "seed": seed})
    model, _ = train(model_config, train_config, train_ds.flat(), val_ds.flat())

    def rec(task, metric, value, split):
        return BenchmarkRecord(entry.kind, config_id, seed, latent_dim, task,
                               metric, float(value), split)

    records = []
    rng = Rng(seed).child(9000)
    if "reconstruction" in plan.tasks:
        records.append(rec("reconstruction", "mse",
                           task_reconstruction(model, val_ds.images), "val"))
        records.append(rec("reconstruction", "mse",
                           task_reconstruction(model, test_ds.images), "test"))
    if "generation" in plan.tasks:
        with no_grad():
            z_train = model.latent_codes(train_ds.flat())
            z_val = model.latent_codes(val_ds.flat())
        for sampler_kind in plan.samplers:
            if sampler_kind == "vamp" and entry.kind != "vamp":
                continue
            sampler_config = SamplerConfig.from_dict(
                {"kind": sampler_kind,
                 **plan.sampler_overrides.get(sampler_kind, {})})
            state = fit_sampler(sampler_kind, model, z_train, z_val,
                                rng.child(1), sampler_config)
            metric = f"frechet_{sampler_kind}"
            records.append(rec("generation", metric,
                               task_generation(model, state, val_ds.images,
                                               plan.generation_samples,
                                               rng.child(2)), "val"))
            records.append(rec("generation", metric,
                               task_generation(model, state, test_ds.images,
                                               plan.generation_samples,
                                               rng.child(3)), "test"))
    if "classification" in plan.tasks and train_ds.labels is not None:
        out = task_classification(model, train_ds.images, train_ds.labels,
                                  val_ds.images, val_ds.labels,
                                  test_ds.images, test_ds.labels,
                                  rng.child(4), n_runs=20)
        records.append(rec("classification", "accuracy", out["val_mean"], "val"))
        records.append(rec("classification", "accuracy_sd", out["val_sd"], "val"))
        records.append(rec("classification", "accuracy", out["test_mean"], "test"))
        records.append(rec("classification", "accuracy_sd", out["test_sd"], "test"))
    if "clustering" in plan.tasks and train_ds.labels is not None:
        out = task_clustering(model, train_ds.images, train_ds.labels,
                              rng.child(5), n_runs=100)
        records.append(rec("clustering", "accuracy", out["mean"], "train"))
        records.append(rec("clustering", "accuracy_sd", out["sd"], "train"))
    if "interpolation" in plan.tasks:
        frames = task_interpolation(model, test_ds.images[:1],
                                    test_ds.images[1:2],
                                    plan.interpolation_steps)
        grid_dir = os.path.join(plan.output_root, "interpolations")
        os.makedirs(grid_dir, exist_ok=True)
        write_pgm_grid(frames, os.path.join(grid_dir, key + ".pgm"),
                       cols=plan.interpolation_steps,
                       image_shape=train_ds.image_shape)
    return records


# -- reporting ----------------------------------------------------------------------


def _load_records(records_dir) -> list[BenchmarkRecord]:
    records, seen = [], set()
    if not os.path.isdir(records_dir):
        return records
    for name in sorted(os.listdir(records_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(records_dir, name), encoding="utf-8") as fh:
            for row in json.load(fh):
                record = BenchmarkRecord(**row)
                if record.key() in seen:
                    raise ValueError(f"duplicate benchmark record {record.key()}")
                seen.add(record.key())
                records.append(record)
    return records


def _mean_over_seeds(records, kind, config_id, latent_dim, task, metric, split):
    vals = [r.value for r in records
            if (r.model_kind, r.config_id, r.latent_dim, r.task, r.metric,
                r.split) == (kind, config_id, latent_dim, task, metric, split)]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def _metrics_for_task(records, task) -> list[str]:
    return sorted({r.metric for r in records
                   if r.task == task and not r.metric.endswith("_sd")})


def _best_config(records, kind, latent_dim, task, metric):
    """Config with the best selection-split mean; None when no records."""
    select_split = _SELECT_SPLIT[task]
    config_ids = sorted({r.config_id for r in records if r.model_kind == kind
                         and r.task == task and r.latent_dim == latent_dim})
    best_id, best_val = None, None
    for cid in config_ids:
        mean, _ = _mean_over_seeds(records, kind, cid, latent_dim, task,
                                   metric, select_split)
        if mean is None:
            continue
        better = best_val is None or (
            mean < best_val if _MINIMIZED[task] else mean > best_val)
        if better:
            best_id, best_val = cid, mean
    return best_id


def generate_report(records_dir, out_dir) -> dict:
    """Render per-task tables and latent-sweep series from the records.

    Missing cells are reported as gaps, never fabricated. Returns a summary
    {task: {kind: {metric: "value (sd)"}}} for programmatic use.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = _load_records(records_dir)
    summary = {}
    tasks = sorted({r.task for r in records}) or []
    kinds = sorted({r.model_kind for r in records})
    latent_dims = sorted({r.latent_dim for r in records})

    for task in tasks:
        metrics = _metrics_for_task(records, task)
        report_split = _REPORT_SPLIT[task]
        # Fixed-dimension table at the smallest latent dim present.
        table_dim = latent_dims[0] if latent_dims else 0
        rows = []
        summary[task] = {}
        for kind in kinds:
            row = {"model": kind}
            summary[task][kind] = {}
            for metric in metrics:
                best = _best_config(records, kind, table_dim, task, metric)
                if best is None:
                    row[metric] = "-"
                    continue
                mean, _ = _mean_over_seeds(records, kind, best, table_dim,
                                           task, metric, report_split)
                _, sd = _mean_over_seeds(records, kind, best, table_dim, task,
                                         metric, report_split)
                cell = f"{mean:.4f} ({sd:.4f})"
                row[metric] = cell
                summary[task][kind][metric] = cell
            rows.append(row)
        _write_table(rows, ["model"] + metrics, task, out_dir)
        if len(latent_dims) > 1:
            _write_sweep(records, task, metrics[0] if metrics else None,
                         kinds, latent_dims, out_dir)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(summary))
    return summary


def _write_table(rows, columns, task, out_dir) -> None:
    widths = {c: max(len(c), *(len(str(r.get(c, "-"))) for r in rows))
              if rows else len(c) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "-")).ljust(widths[c])
                               for c in columns))
    with open(os.path.join(out_dir, f"table_{task}.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, f"table_{task}.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(f'"{r.get(c, "-")}"' for c in columns) + "\n")


def _write_sweep(records, task, metric, kinds, latent_dims, out_dir) -> None:
    if metric is None:
        return
    report_split = _REPORT_SPLIT[task]
    series = {}
    lines = ["model,latent_dim,value"]
    for kind in kinds:
        pts = []
        for dim in latent_dims:
            best = _best_config(records, kind, dim, task, metric)
            if best is None:
                continue
            mean, _ = _mean_over_seeds(records, kind, best, dim, task, metric,
                                       report_split)
            pts.append((dim, mean))
            lines.append(f"{kind},{dim},{mean}")
        if pts:
            series[kind] = pts
    with open(os.path.join(out_dir, f"sweep_{task}.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    svg = _sweep_svg(series, task, metric)
    with open(os.path.join(out_dir, f"sweep_{task}.svg"), "w",
              encoding="utf-8") as fh:
        fh.write(svg)


_SVG_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _sweep_svg(series: dict, task: str, metric: str, width=640, height=400
               ) -> str:
    pad = 50
    xs = sorted({x for pts in series.values() for x, _ in pts})
    ys = [y for pts in series.values() for _, y in pts]
    if not xs or not ys:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" ' \
               f'height="{height}"><text x="10" y="20">no data</text></svg>'
    x_lo, x_hi = np.log2(min(xs)), np.log2(max(xs))
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi += 1
    if y_hi == y_lo:
        y_hi += 1

    def sx(x):
        return pad + (np.log2(x) - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}">',
             f'<text x="{width // 2}" y="20" text-anchor="middle">'
             f'{task}: {metric} vs latent dim</text>']
    for i, (kind, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" '
                     f'fill="{color}" font-size="10">{kind}</text>')
    for x in xs:
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 16}" '
                     f'font-size="10" text-anchor="middle">{x}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
