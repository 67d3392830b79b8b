"""Command-line entry point: ``tervit <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from tervit.exceptions import ConfigError, FormatError, TrainingDivergedError
from tervit.formats import (
    Checkpoint,
    RunConfig,
    load_checkpoint,
    parse_config,
    save_checkpoint,
)
from tervit.model import ViTConfig, VisionTransformer, layer_ids, model_size_bytes
from tervit.quantization import Int8Weight, QuantizationPolicy, TernaryTensor

log = logging.getLogger("tervit")

DEFAULT_SEED = 42
MODEL_PRESETS = {"deit-t": ViTConfig.deit_tiny, "deit-s": ViTConfig.deit_small,
                 "deit-b": ViTConfig.deit_base}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ----------------------------------------------------------------------------


def _load_run(path: str, seed: int | None) -> RunConfig:
    run = parse_config(path)
    if seed is not None:
        run.schedule = replace(run.schedule, seed=seed)
        if run.data.kind == "synthetic":
            run.data = replace(run.data, seed=seed)
    return run


def _resolve_policy(spec: str | None, fallback: QuantizationPolicy | None = None):
    if spec is None:
        return fallback or QuantizationPolicy.ternary()
    if Path(spec).is_file():
        from tervit.formats import parse_config_text

        text = Path(spec).read_text()
        if "[model]" not in text:
            text = ("[model]\nimage_size=16\npatch_size=8\nembed_dim=16\ndepth=1\nnum_heads=1\n"
                    "mlp_ratio=4\nnum_classes=2\n" + text)
            if "[policy.overrides]" in text:
                raise ConfigError("policy files with overrides must include a [model] section")
        return parse_config_text(text).policy
    return QuantizationPolicy.preset(spec)


def _resolve_model_config(spec: str) -> ViTConfig:
    if spec in MODEL_PRESETS:
        return MODEL_PRESETS[spec]()
    return parse_config(spec).model


def _load_dataset(spec: str | None, config: ViTConfig, run: RunConfig | None = None,
                  seed: int = DEFAULT_SEED):
    from tervit.data import load_idx, synthetic_blobs

    if spec is None:
        if run is not None:
            return run.data.load(config, run.base_dir)
        spec = "synthetic"
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        s = int(parts[1]) if len(parts) > 1 and parts[1] else seed
        n = int(parts[2]) if len(parts) > 2 else 200
        return synthetic_blobs(n, config.num_classes, config.image_size, config.in_chans, seed=s)
    if spec.startswith("idx:"):
        _, images, labels = spec.split(":", 2)
        return load_idx(images, labels, config.num_classes)
    if Path(spec).is_file():
        r = parse_config(spec)
        return r.data.load(config, r.base_dir)
    raise ConfigError(f"unrecognised data source {spec!r}", key="data")


def _model_from_checkpoint(ckpt: Checkpoint) -> VisionTransformer:
    model = VisionTransformer(ckpt.config)
    if any(isinstance(v, (TernaryTensor, Int8Weight)) for v in ckpt.tensors.values()):
        model.load_quantized(ckpt.tensors)
    else:
        model.load_state_dict(ckpt.tensors)
    return model


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- commands ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from tervit.training import PhaseRunner, pretrain, trace_csv, _PHASE_STREAM

    run = _load_run(args.config, args.seed)
    data = run.data.load(run.model, run.base_dir)
    model = VisionTransformer(run.model, seed=run.schedule.seed)
    trace = pretrain(model, run.schedule, data)
    policy = run.policy.with_mode(args.mode)
    epochs = run.schedule.total_epochs
    runner = PhaseRunner(model, run.schedule, epochs * -(-len(data) // run.schedule.batch_size))
    trace += runner.run(policy, data, epochs, args.mode, _PHASE_STREAM[args.mode])
    save_checkpoint(args.out, Checkpoint(run.model, model.state_dict(), policy,
                                         runner.optimizer.state, {"mode": args.mode}))
    if args.trace:
        Path(args.trace).write_text(trace_csv(trace))
    print(json.dumps({"mode": args.mode, "final_loss": trace[-1].train_loss,
                      "final_acc": trace[-1].train_acc}))
    return 0


def cmd_progressive(args) -> int:
    from tervit.training import pretrain, progressive_train, trace_csv

    run = _load_run(args.config, args.seed)
    data = run.data.load(run.model, run.base_dir)
    model = VisionTransformer(run.model, seed=run.schedule.seed)
    trace = pretrain(model, run.schedule, data)
    res = progressive_train(model, run.schedule, data, run.policy)
    trace += res.trace
    policy = run.policy.with_mode("ternary")
    save_checkpoint(args.out, Checkpoint(run.model, model.state_dict(), policy, None,
                                         {"mode": "progressive"}))
    if args.trace:
        Path(args.trace).write_text(trace_csv(trace))
    print(json.dumps({"handoff_exact": res.handoff_exact, "final_loss": trace[-1].train_loss,
                      "final_acc": trace[-1].train_acc}))
    return 0


def cmd_ablate(args) -> int:
    from tervit.training import ablation_suite, format_table, schedule_sweep, sweep_table, trace_csv

    run = _load_run(args.config, args.seed)
    data = run.data.load(run.model, run.base_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_suite(data, run.model, run.schedule, run.policy)
    lines = ["method,epochs,initial_loss,start_loss,final_loss,train_acc"]
    for r in rows:
        lines.append(f"{r.method},{r.epochs},{r.initial_loss!r},{r.start_loss!r},"
                     f"{r.final_loss!r},{r.train_acc!r}")
        slug = r.method.lower().replace(" ", "_").replace("(", "").replace(")", "") \
            .replace("+", "plus").replace("-", "_")
        (out / f"trace_{slug}.csv").write_text(trace_csv(r.trace))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    table = format_table(rows, "Component ablation")
    if args.sweep:
        sweep = schedule_sweep(data, run.model, run.schedule, base_policy=run.policy)
        table += "\n\n" + sweep_table(sweep)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval(args) -> int:
    from tervit.training import evaluate

    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    policy = _resolve_policy(args.policy, ckpt.policy or QuantizationPolicy.real32())
    data = _load_dataset(args.data, ckpt.config, seed=args.seed or DEFAULT_SEED)
    loss, acc = evaluate(model, data, policy)
    print(json.dumps({"loss": loss, "accuracy": acc, "samples": len(data)}))
    return 0


def cmd_quantize(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    policy = _resolve_policy(args.policy)
    tensors = model.export_quantized(policy)
    save_checkpoint(args.out, Checkpoint(ckpt.config, tensors, policy, None,
                                         {"quantized_from": Path(args.ckpt).name}))
    print(json.dumps({"policy": policy.to_dict(), "bytes": Path(args.out).stat().st_size}))
    return 0


def cmd_size(args) -> int:
    config = _resolve_model_config(args.config)
    policy = _resolve_policy(args.policy)
    r = model_size_bytes(config, policy)
    print(f"real-valued: {r.real_mb:.2f} MB")
    print(f"quantized: {r.quantized_mb:.2f} MB")
    print(f"compression: {r.compression_ratio:.2f}x")
    print(f"storage (with scales and 32-bit extras): {r.storage_mb:.2f} MB "
          f"({r.storage_ratio:.2f}x)")
    print(json.dumps({"real_bytes": r.real_bytes, "quantized_bytes": r.quantized_bytes,
                      "compression_ratio": r.compression_ratio,
                      "storage_bytes": r.storage_bytes}))
    return 0


def cmd_diagnose(args) -> int:
    from tervit.diagnostics import diagnose, hessian_by_layer

    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    reference = _model_from_checkpoint(load_checkpoint(args.reference)) if args.reference else None
    report = diagnose(model, reference)
    if args.hessian:
        data = _load_dataset(args.data, ckpt.config, seed=args.seed or DEFAULT_SEED)
        n = min(args.batch, len(data))
        report.hessian = hessian_by_layer(model, data.images[:n], data.labels[:n],
                                          ckpt.policy, iters=args.iters, seed=args.seed or 0)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cam.csv").write_text(report.cam_csv())
        (out / "sdam.csv").write_text(report.sdam_csv())
    else:
        sys.stdout.write(report.sdam_csv())
    if reference is not None:
        for lid, d in report.dead.items():
            print(json.dumps({"layer": lid, "dead": d.count, "total": d.total,
                              "fraction": d.fraction}))
    return 0


def cmd_landscape(args) -> int:
    from tervit.diagnostics import loss_landscape_2d

    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    policy = _resolve_policy(args.policy, ckpt.policy or QuantizationPolicy.real32())
    data = _load_dataset(args.data, ckpt.config, seed=args.seed or DEFAULT_SEED)
    n = min(args.batch, len(data))
    grid = loss_landscape_2d(model, data.images[:n], data.labels[:n], policy, args.resolution,
                             args.span, seed=args.seed if args.seed is not None else DEFAULT_SEED)
    _write(args.out, grid.to_csv())
    return 0


def _parse_shapes(spec: str) -> list[tuple[int, int, int]]:
    shapes = []
    for item in spec.split(","):
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise ConfigError(f"shape {item!r} is not MxKxN", key="shapes")
        shapes.append(tuple(int(p) for p in parts))
    return shapes


def cmd_bench(args) -> int:
    from tervit.kernels import PackedGemmPlan, bench, bench_csv, model_shapes

    shapes = _parse_shapes(args.shapes) if args.shapes else []
    if args.config:
        shapes += model_shapes(_resolve_model_config(args.config))
    if not shapes:
        shapes = model_shapes(ViTConfig())
    rows = []
    for m, k, n in shapes:
        rows += bench(PackedGemmPlan(m, k, n), args.reps, seed=args.seed or DEFAULT_SEED)
    _write(args.out, bench_csv(rows))
    return 0


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tervit", description="Ternary vision transformer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default: config seed or {DEFAULT_SEED})")
        return sp

    sp = add("train", cmd_train, "Train one quantization mode from a config file.")
    sp.add_argument("--config", required=True, help="run configuration (INI)")
    sp.add_argument("--mode", required=True, choices=("real32", "int8", "ternary"))
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--trace", help="loss-trace CSV to write")

    sp = add("progressive", cmd_progressive, "8-bit then ternary progressive training.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace", help="loss-trace CSV to write")

    sp = add("ablate", cmd_ablate, "Component ablation (and optional schedule sweep).")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--sweep", action="store_true", help="also run the schedule-split sweep")

    sp = add("eval", cmd_eval, "Loss and accuracy of a checkpoint.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="synthetic[:SEED[:N]] | idx:IMAGES:LABELS | config file")
    sp.add_argument("--policy", help="override the checkpoint's policy (preset or file)")

    sp = add("quantize", cmd_quantize, "One-shot requantization of checkpoint latents.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--policy", required=True, help="preset name or policy file")
    sp.add_argument("--out", required=True)

    sp = add("size", cmd_size, "Model size and compression ratio.")
    sp.add_argument("--config", required=True, help="config file or deit-t | deit-s | deit-b")
    sp.add_argument("--policy", required=True, help="preset name or policy file")

    sp = add("diagnose", cmd_diagnose, "CAM / SDAM / dead channels / Hessian eigenvalues.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--hessian", action="store_true", help="per-layer top Hessian eigenvalue")
    sp.add_argument("--reference", help="checkpoint whose minimum CAM defines dead channels")
    sp.add_argument("--data", help="data source for the Hessian batch")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--out", help="output directory for cam.csv / sdam.csv")

    sp = add("landscape", cmd_landscape, "2-D filter-normalised loss landscape grid.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--resolution", type=int, required=True)
    sp.add_argument("--span", type=float, required=True)
    sp.add_argument("--data", help="data source for the batch")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--policy", help="quantization mode to evaluate under")
    sp.add_argument("--out", help="CSV file (default: stdout)")

    sp = add("bench", cmd_bench, "Benchmark dense and packed ternary GEMM kernels.")
    sp.add_argument("--shapes", help="comma-separated MxKxN list")
    sp.add_argument("--config", help="add the GEMM shapes of this model config")
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--out", help="CSV file (default: stdout)")
    return p


def _thread_limit():
    value = os.environ.get("TERNVIT_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: {exc}\n{json.dumps(exc.dump, indent=1)}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
