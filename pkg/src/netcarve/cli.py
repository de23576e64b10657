"""Batch front-end: build/train toy models, prune, shrink, verify, count,
calibrate, and estimate.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 unachievable
budget, 4 I/O. Every command that writes files drops a run manifest next to
them. All commands are deterministic given --seed (env NETCARVE_SEED sets the
default).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .cost import cost_report, count_macs
from .dependency import build_dependency_partition
from .energy import (
    DEFAULT_RAIL,
    EnergyError,
    estimate_energy,
    fit_energy_model,
    integrate_energy,
    load_calibration_points,
    parse_tegrastats,
)
from .graph import GraphError, infer_shapes, validate
from .onnx_io import ParseError, load_model, save_model
from .pruning import (
    PruningError,
    SlimmingConfig,
    SwdConfig,
    load_mask,
    save_mask,
    score_channels,
    select_mask,
)
from .shrink import shrink, verify_equivalence
from .train import (
    HrnetLiteSpec,
    SyntheticDatasetSpec,
    TrainConfig,
    build_hrnet_lite,
    generate_dataset,
    run_slimming_pipeline,
    run_swd_pipeline,
    train,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def _default_seed() -> int:
    return int(os.environ.get("NETCARVE_SEED", "0"))


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError as e:
        raise ConfigError(f"--input-shape: expected comma-separated ints, got {text!r}") from e
    if len(shape) != 4 or any(d <= 0 for d in shape):
        raise ConfigError(f"--input-shape must be four positive dims, got {text!r}")
    return shape


def _build_config(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError, PruningError) as e:
        raise ConfigError(f"{where}: {e}") from e


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   inputs: list[str], outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _load_inferred(path, input_shape=None):
    model = load_model(path)
    if input_shape is None:
        spec = model.tensors.get(model.inputs[0])
        if spec is None or spec.shape is None:
            raise ConfigError(f"{path}: model has no stored input shape; pass --input-shape")
        input_shape = spec.shape
    return infer_shapes(model, input_shape)


# ----------------------------------------------------------------- commands

def cmd_build(args) -> int:
    started = time.time()
    spec = HrnetLiteSpec(width=args.width, blocks_per_stage=args.blocks, n_classes=args.classes)
    model = build_hrnet_lite(spec, seed=args.seed)
    model = infer_shapes(model, (1, 3, args.image_size, args.image_size))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.onnx")
    report = cost_report(model, (1, 3, args.image_size, args.image_size))
    print(json.dumps({"params": report.params, "macs": report.macs}))
    write_manifest(out, "build", dataclasses.asdict(spec), args.seed, [],
                   [str(out / "model.onnx")], started)
    return EXIT_OK


def _train_setup(args):
    config = {}
    if args.config:
        try:
            with open(args.config) as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: not valid JSON ({e})")
    for section in set(config) - {"model", "dataset", "train", "regularizer"}:
        raise ConfigError(f"config: unknown section {section!r}")

    train_kw = dict(config.get("train", {}))
    train_kw.setdefault("seed", args.seed)
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    train_cfg = _build_config(TrainConfig, train_kw, "train")

    dataset_cfg = _build_config(SyntheticDatasetSpec, dict(config.get("dataset", {})), "dataset")

    model_section = dict(config.get("model", {}))
    model_path = model_section.pop("path", None)
    if model_path:
        model = load_model(model_path)
    else:
        spec = _build_config(HrnetLiteSpec, model_section, "model")
        if spec.n_classes != dataset_cfg.n_classes:
            raise ConfigError("model: n_classes must match dataset.n_classes")
        model = build_hrnet_lite(spec, seed=train_cfg.seed)

    reg_section = dict(config.get("regularizer", {}))
    kind = args.regularizer or reg_section.pop("kind", "none")
    if args.final_rate is not None:
        reg_section["final_rate"] = args.final_rate
    if kind == "none":
        regularizer = None
        if reg_section:
            raise ConfigError(f"regularizer: unexpected fields {sorted(reg_section)} for kind 'none'")
    elif kind == "slimming":
        regularizer = _build_config(SlimmingConfig, reg_section, "regularizer")
    elif kind == "swd":
        regularizer = _build_config(SwdConfig, reg_section, "regularizer")
    else:
        raise ConfigError(f"regularizer: unknown kind {kind!r}")
    return model, dataset_cfg, train_cfg, regularizer, kind


def cmd_train(args) -> int:
    started = time.time()
    model, dataset_cfg, train_cfg, regularizer, kind = _train_setup(args)
    dataset = generate_dataset(dataset_cfg)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.pipeline and kind == "slimming":
        result = run_slimming_pipeline(model, dataset, train_cfg, regularizer)
        history = result.report["final_history"]
        trained = result.model
        with open(out / "report.json", "w") as f:
            json.dump(result.report, f, indent=2, default=float)
    elif args.pipeline and kind == "swd":
        result = run_swd_pipeline(model, dataset, train_cfg, regularizer)
        history = result.report["final_history"]
        trained = result.model
        with open(out / "report.json", "w") as f:
            json.dump(result.report, f, indent=2, default=float)
    else:
        if args.pipeline:
            raise ConfigError("--pipeline needs --regularizer slimming or swd")
        result = train(model, dataset, train_cfg, regularizer=regularizer)
        history = result.history
        trained = result.model

    # store concrete input dims so downstream commands can default the shape
    run_shape = (train_cfg.batch_size, 3, dataset_cfg.image_size, dataset_cfg.image_size)
    save_model(infer_shapes(validate(trained), run_shape), out / "model.onnx")
    with open(out / "history.jsonl", "w") as f:
        for record in history:
            f.write(json.dumps(record, default=float) + "\n")
    print(json.dumps({"final_loss": history[-1]["loss"], "final_miou": history[-1]["miou"],
                      "epochs": len(history)}))
    config_snapshot = {
        "train": dataclasses.asdict(train_cfg),
        "dataset": dataclasses.asdict(dataset_cfg),
        "regularizer": kind if regularizer is None else dataclasses.asdict(regularizer),
    }
    write_manifest(out, "train", config_snapshot, train_cfg.seed,
                   [args.config] if args.config else [],
                   [str(out / "model.onnx"), str(out / "history.jsonl")], started)
    return EXIT_OK


def cmd_prune_shrink(args) -> int:
    started = time.time()
    budget = {"params": "parameter-fraction", "channels": "channel-fraction"}[args.budget]
    model = _load_inferred(args.model, _parse_shape(args.input_shape) if args.input_shape else None)
    partition = build_dependency_partition(model)
    scores = score_channels(model, partition)
    mask = select_mask(scores, partition, args.target, budget, min_keep=args.min_keep, model=model)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(mask, out / "mask.json")
    outputs = [str(out / "mask.json")]
    report = {
        "budget_kind": mask.budget_kind,
        "target": mask.target,
        "achieved_fraction": mask.achieved_fraction,
        "exact": mask.exact,
    }

    code = EXIT_OK
    if args.method == "full":
        shrunk, srep = shrink(model, partition, mask)
        err = verify_equivalence(model, partition, mask, shrunk, n_inputs=args.n_verify,
                                 tol=args.tol, seed=args.seed)
        save_model(shrunk, out / "shrunk.onnx")
        outputs.append(str(out / "shrunk.onnx"))
        report.update({
            "params_before": srep.params_before,
            "params_after": srep.params_after,
            "scatter_nodes": srep.scatter_nodes,
            "max_rel_err": err,
        })
        if err > args.tol:
            code = EXIT_VERIFY
    if not mask.exact and code == EXIT_OK:
        code = EXIT_BUDGET

    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    outputs.append(str(out / "report.json"))
    print(json.dumps(report))
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(out, "prune-shrink", snapshot, args.seed, [args.model], outputs, started)
    return code


def cmd_verify(args) -> int:
    original = _load_inferred(args.original, _parse_shape(args.input_shape) if args.input_shape else None)
    partition = build_dependency_partition(original)
    mask = load_mask(args.mask)
    shrunk = load_model(args.shrunk)
    shrunk = infer_shapes(shrunk, original.tensors[original.inputs[0]].shape)
    err = verify_equivalence(original, partition, mask, shrunk, n_inputs=args.n,
                             tol=args.tol, seed=args.seed)
    passed = err <= args.tol
    print(json.dumps({"pass": passed, "max_rel_err": err, "tol": args.tol, "n_inputs": args.n}))
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_cost(args) -> int:
    shape = _parse_shape(args.input_shape) if args.input_shape else None
    model = _load_inferred(args.model, shape)
    shape = model.tensors[model.inputs[0]].shape
    baseline = _load_inferred(args.baseline, shape) if args.baseline else None
    report = cost_report(model, shape, baseline)
    doc = {
        "params": report.params,
        "macs": report.macs,
        "running_stat_params": report.running_stat_params,
        "bookkeeping_params": report.bookkeeping_params,
        "per_node_params": report.param_breakdown,
        "per_node_macs": report.mac_breakdown,
    }
    if baseline is not None:
        doc["param_fraction"] = report.param_fraction
        doc["mac_fraction"] = report.mac_fraction
    print(json.dumps(doc))
    return EXIT_OK


def cmd_energy(args) -> int:
    if args.calibrate:
        points = load_calibration_points(args.series, args.resolution, path=args.calibrate)
    else:
        points = load_calibration_points(args.series, args.resolution)
    em = fit_energy_model(points, series=args.series, resolution=args.resolution)
    doc = {"slope_j": em.slope, "intercept_j": em.intercept, "r_squared": em.r_squared,
           "n_points": em.n_points, "series": em.series, "resolution": em.resolution}
    if args.estimate:
        if not args.baseline:
            raise ConfigError("--estimate needs --baseline for the MAC reference")
        shape = _parse_shape(args.input_shape) if args.input_shape else None
        model = _load_inferred(args.estimate, shape)
        shape = model.tensors[model.inputs[0]].shape
        baseline = _load_inferred(args.baseline, shape)
        base_macs = count_macs(baseline, shape).macs
        doc["estimated_joules"] = estimate_energy(model, base_macs, em, shape)
        doc["mac_fraction"] = count_macs(model, shape).macs / base_macs
    print(json.dumps(doc))
    return EXIT_OK


def cmd_power(args) -> int:
    with open(args.log) as f:
        text = f.read()
    trace = parse_tegrastats(text, rail=args.rail, period_s=args.period)
    window = (args.window[0], args.window[1]) if args.window else None
    report = integrate_energy(trace, window=window, n_inferences=args.inferences,
                              idle_mw=args.idle)
    print(json.dumps({
        "total_j": report.total_j,
        "per_inference_j": report.per_inference_j,
        "samples": report.samples,
        "skipped_lines": trace.skipped,
        "rail": report.rail,
    }))
    return EXIT_OK


# ----------------------------------------------------------------- wiring

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netcarve", description=__doc__)
    parser.add_argument("--version", action="version", version=f"netcarve {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="emit an untrained HRNet-lite model")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--output-dir", default="netcarve-out")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train (optionally with a sparsity schedule or full pipeline)")
    p.add_argument("--config", help="JSON config with model/dataset/train/regularizer sections")
    p.add_argument("--regularizer", choices=["none", "slimming", "swd"])
    p.add_argument("--final-rate", type=float, dest="final_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pipeline", action="store_true",
                   help="run the full prune pipeline for the chosen regularizer")
    p.add_argument("--output-dir", default="netcarve-out")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune-shrink", help="select a mask and physically shrink a model")
    p.add_argument("model")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--budget", choices=["params", "channels"], default="params")
    p.add_argument("--method", choices=["mask-only", "full"], default="full")
    p.add_argument("--min-keep", type=int, default=1)
    p.add_argument("--input-shape")
    p.add_argument("--n-verify", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--output-dir", default="netcarve-out")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_prune_shrink)

    p = sub.add_parser("verify", help="check a shrunk model against the masked oracle")
    p.add_argument("original")
    p.add_argument("mask")
    p.add_argument("shrunk")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--input-shape")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", help="parameter and MAC accounting")
    p.add_argument("model")
    p.add_argument("--input-shape")
    p.add_argument("--baseline")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("energy", help="calibrate the energy model / estimate a model's energy")
    p.add_argument("--calibrate", help="calibration CSV (defaults to the shipped series)")
    p.add_argument("--series", default="swd")
    p.add_argument("--resolution", default="512x1024")
    p.add_argument("--estimate", help="model file to estimate")
    p.add_argument("--baseline", help="baseline model the MAC fraction is relative to")
    p.add_argument("--input-shape")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("power", help="integrate a tegrastats power log")
    p.add_argument("--log", required=True)
    p.add_argument("--rail", default=DEFAULT_RAIL)
    p.add_argument("--inferences", type=int)
    p.add_argument("--period", type=float, default=1.0)
    p.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"))
    p.add_argument("--idle", type=float, help="idle baseline power (mW) to subtract")
    p.set_defaults(func=cmd_power)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PruningError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError, ParseError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (GraphError, EnergyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
