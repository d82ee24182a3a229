"""Command-line surface: train, generate, evaluate, benchmark, report.

Failures print one machine-readable JSON object to stderr; config schema
violations exit with code 2 and carry a JSON-pointer path, everything else
exits 1.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .configio import ConfigError, canonical_dumps, load_json_file
from .data import dataset_from_spec, split_train_val
from .evaluation import (task_classification, task_clustering,
                         task_generation, task_reconstruction, write_pgm_grid)
from .models import ModelConfig
from .samplers import (SamplerConfig, fit_sampler, sample, sampler_needs_data,
                       save_sampler)
from .tensor import Rng, no_grad
from .training import TrainConfig, load_checkpoint, train

__all__ = ["main"]


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc.to_json(), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not hides
        print(canonical_dumps({"error": type(exc).__name__,
                               "message": str(exc)}), file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gae-forge",
        description="Generative autoencoder training, sampling and benchmarks")
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="train one model end to end")
    p_train.add_argument("--model-config", required=True)
    p_train.add_argument("--train-config", required=True)
    p_train.add_argument("--data", required=True,
                         help="JSON data spec (synthetic or idx)")
    p_train.add_argument("--val-size", type=int, default=0,
                         help="validation tail size (default: 1/6 of the data)")
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=_cmd_train)

    p_gen = sub.add_parser("generate", help="sample from a trained model")
    p_gen.add_argument("--model", required=True, help="checkpoint directory")
    p_gen.add_argument("--sampler-config", required=True)
    p_gen.add_argument("--num-samples", type=int, required=True)
    p_gen.add_argument("--data", default=None,
                       help="data spec; required by fitted samplers")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_generate)

    p_eval = sub.add_parser("evaluate", help="run benchmark tasks on a model")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--tasks", default="reconstruction",
                        help="comma-separated task names")
    p_eval.add_argument("--val-size", type=int, default=0)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_bench = sub.add_parser("benchmark", help="execute a benchmark plan")
    p_bench.add_argument("--plan", required=True)
    p_bench.set_defaults(func=_cmd_benchmark)

    p_report = sub.add_parser("report", help="render tables from records")
    p_report.add_argument("--records", required=True)
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=_cmd_report)
    return parser


def _load_dataset(spec_path, val_size):
    ds = dataset_from_spec(load_json_file(spec_path))
    if val_size <= 0:
        # Mirror the classic 10k-of-60k convention at whatever scale.
        val_size = max(1, len(ds) // 6)
    return split_train_val(ds, val_size)


def _cmd_train(args) -> int:
    model_config = ModelConfig.from_dict(load_json_file(args.model_config))
    raw = load_json_file(args.train_config)
    raw["output_dir"] = args.out
    train_config = TrainConfig.from_dict(raw)
    train_ds, val_ds = _load_dataset(args.data, args.val_size)
    if model_config.input_dim != train_ds.image_shape:
        raise ConfigError(
            f"model input_dim {model_config.input_dim} does not match data "
            f"shape {train_ds.image_shape}", "/input_dim")
    _, run_log = train(model_config, train_config, train_ds.flat(),
                       val_ds.flat())
    print(canonical_dumps({"status": "ok", "out": args.out,
                           "epochs": len(run_log.records),
                           "final_val_loss": run_log.val_losses[-1],
                           "restarts": sum(1 for e in run_log.events
                                           if e["event"] == "restart")}))
    return 0


def _cmd_generate(args) -> int:
    model, model_config, _ = load_checkpoint(args.model)
    sampler_config = SamplerConfig.from_dict(load_json_file(args.sampler_config))
    if args.num_samples <= 0:
        raise ConfigError("num-samples must be positive", "/num_samples")
    rng = Rng(args.seed)
    if sampler_needs_data(sampler_config.kind):
        if args.data is None:
            raise ConfigError(
                f"sampler kind {sampler_config.kind!r} needs --data to fit",
                "/kind")
        train_ds, val_ds = _load_dataset(args.data, 0)
        with no_grad():
            z_train = model.latent_codes(train_ds.flat())
            z_val = model.latent_codes(val_ds.flat())
    else:
        z_train = z_val = None
    state = fit_sampler(sampler_config.kind, model, z_train, z_val,
                        rng.child(1), sampler_config)
    images = sample(state, model, args.num_samples, rng.child(2))
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "samples.npy"),
            images.reshape(len(images), *model_config.input_dim))
    write_pgm_grid(images, os.path.join(args.out, "samples.pgm"),
                   image_shape=model_config.input_dim)
    save_sampler(state, os.path.join(args.out, "sampler_state"))
    print(canonical_dumps({"status": "ok", "num_samples": args.num_samples,
                           "out": args.out}))
    return 0


def _cmd_evaluate(args) -> int:
    model, model_config, _ = load_checkpoint(args.model)
    train_ds, val_ds = _load_dataset(args.data, args.val_size)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    rng = Rng(args.seed)
    results = {}
    for task in tasks:
        if task == "reconstruction":
            results[task] = task_reconstruction(model, val_ds.images)
        elif task == "generation":
            with no_grad():
                z_train = model.latent_codes(train_ds.flat())
                z_val = model.latent_codes(val_ds.flat())
            state = fit_sampler("gmm", model, z_train, z_val, rng.child(1))
            results[task] = task_generation(model, state, val_ds.images,
                                            min(1000, 4 * len(val_ds)),
                                            rng.child(2))
        elif task == "classification":
            if train_ds.labels is None:
                raise ConfigError("classification needs labeled data", "/data")
            out = task_classification(model, train_ds.images, train_ds.labels,
                                      val_ds.images, val_ds.labels,
                                      val_ds.images, val_ds.labels,
                                      rng.child(3))
            results[task] = out["test_mean"]
        elif task == "clustering":
            if train_ds.labels is None:
                raise ConfigError("clustering needs labeled data", "/data")
            out = task_clustering(model, train_ds.images, train_ds.labels,
                                  rng.child(4))
            results[task] = out["mean"]
        else:
            raise ConfigError(f"unknown task {task!r}", "/tasks")
    os.makedirs(args.out, exist_ok=True)
    payload = canonical_dumps({"status": "ok", "results": results})
    with open(os.path.join(args.out, "evaluation.json"), "w",
              encoding="utf-8") as fh:
        fh.write(payload)
    print(payload)
    return 0


def _cmd_benchmark(args) -> int:
    from .benchmark import load_plan, run_benchmark
    plan = load_plan(args.plan)
    counters = run_benchmark(plan)
    print(canonical_dumps({"status": "ok", **counters,
                           "records": plan.records_dir}))
    return 0


def _cmd_report(args) -> int:
    from .benchmark import generate_report
    summary = generate_report(args.records, args.out)
    print(canonical_dumps({"status": "ok", "out": args.out,
                           "tasks": sorted(summary)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
