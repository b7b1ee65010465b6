import argparse
import sys
from datetime import datetime
from pathlib import Path
from typing import Any
from zoneinfo import ZoneInfo

import structlog
from pydantic import BaseModel, ValidationError

from src.core.errors import ConfigError, InputError
from src.formats.documents import load_config, write_model
from src.schemas.models import BenchConfig, LossWeights, OptimizationMode, OptimizerConfig
from src.services.bench_service import VARIANTS, BenchService, summarize_bench
from src.services.evaluation_service import EvaluationService, render_report, write_report
from src.services.pipeline_service import PipelineService, RunOptions
from src.services.synthetic_service import SyntheticService

logger = structlog.get_logger(__name__)


def _from_flags(model: type[BaseModel], **values: Any) -> Any:
    try:
        return model.model_validate({k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        err = e.errors()[0]
        location = ".".join(str(part) for part in err["loc"]) or "<root>"
        raise ConfigError("<flags>", location, err["msg"]) from e


def _optimizer_config(args: argparse.Namespace, **extra: Any) -> OptimizerConfig:
    config: OptimizerConfig = _from_flags(
        OptimizerConfig,
        epochs=args.epochs,
        iters_per_epoch=args.iters,
        phase1_iters=args.phase1_iters,
        max_points=args.max_points,
        seed=args.seed,
        **extra,
    )
    return config


def _weights(args: argparse.Namespace) -> LossWeights:
    weights: LossWeights = _from_flags(LossWeights, lambda1=args.lambda1, lambda2=args.lambda2)
    return weights


def _add_optimizer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random choice")
    parser.add_argument("--epochs", type=int, help="Restarts per instance (default 20)")
    parser.add_argument("--iters", type=int, help="Iterations per epoch (default 2000)")
    parser.add_argument(
        "--phase1-iters", type=int, help="Leading iterations with the 3D term only (default 1200)"
    )
    parser.add_argument("--lambda1", type=float, help="Weight of the 3D term (default 1.0)")
    parser.add_argument("--lambda2", type=float, help="Weight of the 2D term (default 0.05)")
    parser.add_argument("--max-points", type=int, help="Stride-subsample clouds above this size")
    parser.add_argument("--jobs", type=int, default=1, help="Instances fitted in parallel")


def cmd_select(args: argparse.Namespace) -> int:
    report = PipelineService().select(args.manifest)
    write_model(args.out, report)
    for r in report.reports:
        print(f"{r.instance_id}\tcandidate {r.chosen}")
    return 0


def cmd_optimize(args: argparse.Namespace) -> int:
    options = RunOptions(
        config=_optimizer_config(args, mode=OptimizationMode(args.mode)),
        weights=_weights(args),
        selection_enabled=not args.no_selection,
        jobs=args.jobs,
    )
    pipeline = PipelineService()
    run = pipeline.optimize(args.manifest, options)
    layout = pipeline.write_run(run, args.out_dir, args.manifest, datetime.now(ZoneInfo("UTC")))
    for inst in layout.instances:
        detail = f"candidate {inst.candidate_index}" if inst.status == "ok" else inst.error
        print(f"{inst.instance_id}\t{inst.status}\t{detail}")
    run.raise_if_all_failed()
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    report = EvaluationService().evaluate_files(args.layout, args.ground_truth)
    if args.out is not None:
        write_report(report, args.format, args.out)
    elif args.format == "xlsx":
        raise InputError("--format xlsx requires --out")
    else:
        sys.stdout.write(render_report(report, args.format).decode("utf-8"))
    if report.mismatched:
        print("mismatched instance sets: " + ", ".join(report.mismatched), file=sys.stderr)
        return 1
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_config(args.config, BenchConfig) if args.config else BenchConfig()
    job = SyntheticService(config, seed=args.seed).write_job(args.out_dir)
    print(job.manifest_path)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    bench = load_config(args.config, BenchConfig) if args.config else BenchConfig()
    service = BenchService(
        bench,
        _optimizer_config(args),
        _weights(args),
        variants=args.variants,
        jobs=args.jobs,
    )
    frame = service.run(list(range(args.seed, args.seed + args.scenes)))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False)
    print(summarize_bench(frame).to_string(index=False))
    return 0


def register(subparsers: Any) -> None:
    p = subparsers.add_parser("select", help="Choose a candidate model per instance")
    p.add_argument("manifest", type=Path)
    p.add_argument("out", type=Path, help="Selection report (JSON)")
    p.set_defaults(handler=cmd_select)

    p = subparsers.add_parser("optimize", help="Fit the layout of every instance")
    p.add_argument("manifest", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument(
        "--mode", choices=[m.value for m in OptimizationMode], default=OptimizationMode.FULL.value
    )
    p.add_argument(
        "--no-selection", action="store_true", help="Pick a seeded random candidate instead"
    )
    _add_optimizer_flags(p)
    p.set_defaults(handler=cmd_optimize)

    p = subparsers.add_parser("evaluate", help="Score a layout against ground truth")
    p.add_argument("layout", type=Path)
    p.add_argument("ground_truth", type=Path, help="Bench sidecar or another layout file")
    p.add_argument("--format", choices=["text", "json", "csv", "xlsx"], default="text")
    p.add_argument("--out", type=Path, help="Write the report here instead of stdout")
    p.set_defaults(handler=cmd_evaluate)

    p = subparsers.add_parser("synth", help="Write a synthetic scene job with ground truth")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path, help="Bench config (JSON); defaults otherwise")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = subparsers.add_parser("bench", help="Run the ablation suite on synthetic scenes")
    p.add_argument("--config", type=Path, help="Bench config (JSON); defaults otherwise")
    p.add_argument("--scenes", type=int, default=5, help="Number of seeded scenes")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), help="Default: all")
    p.add_argument("--out", type=Path, help="Per-instance rows (CSV)")
    _add_optimizer_flags(p)
    p.set_defaults(handler=cmd_bench)
