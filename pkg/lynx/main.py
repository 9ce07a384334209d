import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from .config import settings
from .exceptions import ConfigurationError, LynxError
from .models.kernel_models import KernelConfig
from .models.lowrank_models import Solver, TrainConfig
from .models.sparsity_models import CompensationGranularity, NMPattern, ScoreMethod, ScoreSpec
from .models.stack_models import Preset, Stack, StackConfig
from .models.tensor_models import RandomSpec
from .services import analysis, bench, dit_stack, lowrank, nm_format, validation
from .services.sparsifier import sparsify_activation, topk_mask
from .services.spmm import spmm
from .services.tensor_ops import sample
from .utils.file_utils import load_packed, load_tensor, save_packed, save_tensor
from .utils.optional_imports import set_num_threads

logger = logging.getLogger(__name__)

USAGE_EXIT = 1


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code of this tool"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _pattern(text: str) -> NMPattern:
    try:
        return nm_format.parse_pattern(text)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def _metavar(options) -> str:
    return "{" + ",".join(o.value for o in options) + "}"


def _add_pattern(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pattern", type=_pattern, default=NMPattern(), help="N:M sparsity pattern (default: 2:4)")


def _add_granularity(p: argparse.ArgumentParser, default=CompensationGranularity.PER_TENSOR) -> None:
    p.add_argument(
        "--granularity",
        type=CompensationGranularity,
        choices=list(CompensationGranularity),
        metavar=_metavar(CompensationGranularity),
        default=default,
        help="norm-compensation granularity (default: %(default)s)",
    )


def _add_stack_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stack", required=True, type=Path, help="stack directory written by stack-build")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", type=Path, help="stack input tensor (rows x model width)")
    source.add_argument("--rows", type=int, help="sample this many spike-slab(0.1) input rows; needs --seed")
    p.add_argument("--seed", type=int, help="seed for --rows (required with --rows)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lynx", description="N:M activation sparsity toolkit")
    parser.add_argument("--threads", type=int, default=None, help="kernel threads (default: LYNX_THREADS or 1)")
    parser.add_argument("--log-level", default=settings.log_level, help="logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("sparsify", help="Top-K sparsify and norm-compensate a tensor")
    p.add_argument("--in", dest="input", required=True, type=Path)
    _add_pattern(p)
    _add_granularity(p)
    p.add_argument("--eps", type=float, default=settings.eps, help="compensation epsilon (default: %(default)g)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scale-out", type=Path, help="write the scale record as JSON")

    p = sub.add_parser("pack", help="compress a tensor that satisfies the pattern")
    p.add_argument("--in", dest="input", required=True, type=Path)
    _add_pattern(p)
    p.add_argument("--topk", action="store_true", help="apply Top-K masking before packing")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("spmm", help="multiply a packed activation by a dense D_out x D_in weight")
    p.add_argument("--packed", required=True, type=Path)
    p.add_argument("--weight", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tile-m", type=int, default=settings.tile_m, help="row tile, elements (default: %(default)s)")
    p.add_argument("--tile-n", type=int, default=settings.tile_n, help="output tile, elements (default: %(default)s)")
    p.add_argument("--tile-k", type=int, help=f"contraction tile, elements (default: {settings.tile_k} rounded down to a multiple of m)")

    p = sub.add_parser("fit", help="fit a LoRA compensation pair for one layer")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--layer", required=True, help="layer name or unique suffix, e.g. img_mlp.net.2")
    p.add_argument("--batch", required=True, type=Path, help="layer input batch, or a stack input batch to propagate")
    p.add_argument("--rank", type=int, default=settings.lora_rank, help="LoRA rank (default: %(default)s)")
    p.add_argument("--solver", type=Solver, choices=[Solver.RRR, Solver.GD], metavar="{rrr,gd}", default=Solver.RRR)
    p.add_argument("--seed", type=int, help="initialization seed (required for --solver gd)")
    p.add_argument("--steps", type=int, default=2000, help="gradient steps (default: %(default)s)")
    p.add_argument("--lr", type=float, default=settings.learning_rate, help="learning rate (default: %(default)g)")
    _add_pattern(p)
    _add_granularity(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("sweep", help="layer-local weight vs activation sparsity errors")
    _add_stack_input(p)
    _add_pattern(p)
    _add_granularity(p)
    p.add_argument("--score", type=ScoreMethod, choices=list(ScoreMethod), metavar=_metavar(ScoreMethod), default=ScoreMethod.MAGNITUDE)
    p.add_argument("--out", type=Path, help="JSON report (default: stdout)")
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("compare", help="end-to-end error of the method ladder")
    _add_stack_input(p)
    _add_pattern(p)
    p.add_argument("--rank", type=int, default=settings.lora_rank, help="LoRA rank (default: %(default)s)")
    p.add_argument("--solver", type=Solver, choices=[Solver.RRR, Solver.GD], metavar="{rrr,gd}", default=Solver.RRR)
    p.add_argument("--steps", type=int, default=2000, help="gradient steps for --solver gd (default: %(default)s)")
    p.add_argument("--no-weight-baselines", action="store_true", help="skip the weight-sparse rows")
    p.add_argument("--out", type=Path, help="JSON report (default: stdout)")
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("bench", help="time dense, staged and fused paths; CSV to stdout")
    p.add_argument("--preset", choices=["qwen-shapes", "table-grid", "acceptance"], default="qwen-shapes")
    p.add_argument("--scale", type=int, default=4, help="shape divisor (default: %(default)s)")
    p.add_argument("--repeats", type=int, default=settings.bench_repeats, help="timed runs (default: %(default)s)")
    p.add_argument("--warmup", type=int, default=settings.bench_warmup, help="untimed runs (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="input seed (default: %(default)s)")
    p.add_argument("--lora-rank", type=int, default=settings.lora_rank)
    _add_pattern(p)
    _add_granularity(p)
    p.add_argument("--json", type=Path, help="also write the full JSON report")

    p = sub.add_parser("stack-build", help="build a scaled toy DiT stack")
    p.add_argument("--preset", type=Preset, choices=list(Preset), metavar=_metavar(Preset), default=Preset.QWEN_LIKE)
    p.add_argument("--depth", type=int, default=6, help="blocks (default: %(default)s)")
    p.add_argument("--single-depth", type=int, help="single-stream blocks for flux-like (default: --depth)")
    p.add_argument("--scale", type=int, default=16, help="dimension divisor (default: %(default)s)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("validate", help="check any file or directory this tool writes")
    p.add_argument("--in", dest="input", required=True, type=Path)
    return parser


def _stack_input(args, stack: Stack) -> np.ndarray:
    if args.input is not None:
        return load_tensor(args.input)
    return sample(RandomSpec.spike_slab(seed=args.seed), args.rows, stack.d_model)


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text + ("" if text.endswith("\n") else "\n"))
    else:
        path.write_text(text)


def cmd_sparsify(args) -> int:
    record, sx = sparsify_activation(load_tensor(args.input), args.pattern, args.granularity, args.eps)
    save_tensor(args.out, sx)
    if args.scale_out:
        args.scale_out.write_text(record.model_dump_json(indent=2))
    return 0


def cmd_pack(args) -> int:
    x = load_tensor(args.input)
    if args.topk:
        x = np.where(topk_mask(x, args.pattern), x, np.float32(0.0))
    save_packed(args.out, nm_format.pack(x, args.pattern))
    return 0


def cmd_spmm(args) -> int:
    packed = load_packed(args.packed)
    cfg = KernelConfig.for_pattern(
        packed.pattern, args.tile_k, tile_m=args.tile_m, tile_n=args.tile_n, parallel_rows=args.threads_used > 1
    )
    save_tensor(args.out, spmm(packed, load_tensor(args.weight), cfg))
    return 0


def cmd_fit(args) -> int:
    stack = dit_stack.load_stack(args.stack)
    layer = stack.resolve(args.layer)
    batch = load_tensor(args.batch)
    if batch.shape[1] != layer.spec.d_in and batch.shape[1] == stack.d_model:
        logger.info(f"propagating the stack input to {layer.name}")
        batch = dit_stack.dense_inputs(stack, batch)[layer.name]

    if args.solver == Solver.RRR:
        pair = lowrank.rrr_fit(batch, layer.weight, args.pattern, args.granularity, rank=args.rank)
    else:
        train = TrainConfig.build(steps=args.steps, learning_rate=args.lr, seed=args.seed)
        pair, _ = lowrank.gd_fit(batch, layer.weight, args.pattern, args.granularity, rank=args.rank, cfg=train)
    lowrank.save_lora(args.out, pair)
    return 0


def cmd_sweep(args) -> int:
    stack = dit_stack.load_stack(args.stack)
    x0 = _stack_input(args, stack)
    reports = analysis.layer_sweep(stack, x0, pattern=args.pattern, score=ScoreSpec(method=args.score), granularity=args.granularity)
    report = analysis.sweep_report(stack, x0, reports=reports, pattern=args.pattern)
    _emit(report.model_dump_json(indent=2), args.out)
    if args.csv:
        args.csv.write_text(analysis.reports_to_csv(reports))
    return 0


def cmd_compare(args) -> int:
    stack = dit_stack.load_stack(args.stack)
    x0 = _stack_input(args, stack)
    train = TrainConfig.build(steps=args.steps, seed=args.seed) if args.solver == Solver.GD else None
    ladder = analysis.method_ladder(
        stack, x0, args.rank, args.solver, args.pattern, train=train, weight_baselines=not args.no_weight_baselines
    )
    report = analysis.compare_methods(stack, x0, ladder)
    _emit(report.model_dump_json(indent=2), args.out)
    if args.csv:
        args.csv.write_text(analysis.comparison_to_csv(report))
    return 0


def cmd_bench(args) -> int:
    cases = bench.default_cases(
        args.preset, args.scale, args.repeats, args.warmup, args.seed, args.lora_rank, args.pattern
    )
    cases = [case.model_copy(update={"granularity": args.granularity}) for case in cases]
    rows = bench.run_bench(cases, KernelConfig.for_pattern(args.pattern, parallel_rows=args.threads_used > 1))
    _emit(bench.rows_to_csv(rows), None)
    if args.json:
        args.json.write_text(bench.bench_report(rows, args.threads_used).model_dump_json(indent=2))
    return 0


def cmd_stack_build(args) -> int:
    cfg = StackConfig.build(
        preset=args.preset, depth=args.depth, single_depth=args.single_depth, scale=args.scale, seed=args.seed
    )
    dit_stack.save_stack(args.out, dit_stack.build_stack(cfg))
    return 0


def cmd_validate(args) -> int:
    print(f"ok: {validation.validate_path(args.input)}")
    return 0


def _usage_problem(args) -> Optional[str]:
    """Flag combinations argparse cannot express; stochastic commands never draw a seed themselves"""
    if getattr(args, "rows", None) is not None and args.seed is None:
        return "--rows needs an explicit --seed"
    if args.command in ("fit", "compare") and args.solver == Solver.GD and args.seed is None:
        return "--solver gd needs an explicit --seed"
    return None


COMMANDS: Dict[str, Callable] = {
    "sparsify": cmd_sparsify,
    "pack": cmd_pack,
    "spmm": cmd_spmm,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "stack-build": cmd_stack_build,
    "validate": cmd_validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else USAGE_EXIT
    problem = _usage_problem(args)
    if problem:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"lynx: error: {problem}\n")
        return USAGE_EXIT

    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"lynx: error: unknown log level '{args.log_level}'\n")
        return USAGE_EXIT
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s")

    args.threads_used = set_num_threads(args.threads or settings.threads)
    try:
        return COMMANDS[args.command](args)
    except LynxError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return ConfigurationError.exit_code
