"""Command line entry point.

Subcommands: gen-traces, orm, aggregate, allocate, sampling-study,
quantize-eval. Every flag can also be supplied through ``--config FILE``
(a JSON object keyed by flag name with dashes or underscores). The output
directory resolves as: ``--out-dir`` flag, then $MPQALLOC_OUTPUT_DIR, then
the config file, then ``./mpq_out``.

Exit codes: 0 success, 2 infeasible budget, 3 invalid input,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import aggregation, orm, pipeline, reports
from .errors import Infeasible, MpqError, TraceError, ZeroActivation
from .trace_store import read_trace, write_trace

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INVALID = 3
EXIT_INTERNAL = 4
ENV_OUTPUT_DIR = "MPQALLOC_OUTPUT_DIR"
DEFAULT_OUT = "mpq_out"

log = logging.getLogger("mpqalloc")


def _add_toy(p):
    g = p.add_argument_group("toy model")
    g.add_argument("--timesteps", type=int, default=50, help="denoising steps T")
    g.add_argument("--samples", type=int, default=32, help="calibration samples n")
    g.add_argument("--seed", type=int, default=7, help="sampling seed")
    g.add_argument("--model-seed", type=int, default=0, help="toy weight seed")
    g.add_argument("--width", type=int, default=32, help="toy hidden width")


def _add_alloc(p):
    p.add_argument("--mode", choices=aggregation.MODES, default="paper")
    p.add_argument("--bits", default="3,4,5,6,7,8", help="candidate bit-widths")
    p.add_argument(
        "--budget",
        default="uniform:4",
        help='size budget: bits ("38912"), bytes ("4864B"), megabits ("0.5Mb") or "uniform:<b>"',
    )
    p.add_argument("--pin", default=None, help='pinned layers "id:bits,..." (default: from manifest)')
    p.add_argument("--solver", choices=("dp", "greedy", "brute_force"), default="dp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpqalloc", description=__doc__.split("\n")[0])
    parser.add_argument("--config", default=None, help="JSON file with default flag values")
    parser.add_argument("--out-dir", default=None, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="run the toy model and write an activation trace")
    _add_toy(p)
    p.add_argument("--fraction", default="1", help="timestep sampling fraction (1, 1/2, 1/4, 1/8, 1/20)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")

    for name, text in (("orm", "write the per-timestep ORM matrices"), ("aggregate", "write per-layer importance")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--trace", default=None, help="trace directory (default: OUT/trace)")
        if name == "aggregate":
            p.add_argument("--mode", choices=aggregation.MODES, default="paper")

    p = sub.add_parser("allocate", help="solve the bit allocation for a trace")
    p.add_argument("--trace", default=None, help="trace directory (default: OUT/trace)")
    _add_alloc(p)

    p = sub.add_parser("sampling-study", help="theta stability under timestep sampling")
    p.add_argument("--trace", default=None, help="use this full trace instead of generating toy traces")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--mode", choices=aggregation.MODES, default="mean")
    _add_toy(p)
    p.set_defaults(timesteps=200, samples=16)

    p = sub.add_parser("quantize-eval", help="compare full, uniform and mixed precision toy runs")
    p.add_argument("--allocation", default=None, help="allocation report (default: OUT/allocation.json)")
    p.add_argument("--scheme", choices=("symmetric", "asymmetric"), default="symmetric")
    p.add_argument("--uniform-bits", type=int, default=None)
    _add_toy(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    data = json.loads(Path(known.config).read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    config = {k.replace("-", "_"): v for k, v in data.items()}
    defaults = {k: v for k, v in config.items() if k != "out_dir"}
    parser.set_defaults(**defaults)
    for action in parser._subparsers._group_actions:
        for subparser in action.choices.values():
            subparser.set_defaults(**defaults)
    return config


def _out_dir(args, config) -> Path:
    out = args.out_dir or os.environ.get(ENV_OUTPUT_DIR) or config.get("out_dir") or DEFAULT_OUT
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _toy(args) -> pipeline.ToyConfig:
    cfg = pipeline.ToyConfig(args.timesteps, args.samples, args.seed, args.model_seed, args.width)
    if cfg.timesteps < 1 or cfg.samples < 1 or cfg.width < 2:
        raise ValueError("timesteps and samples must be positive, width >= 2")
    return cfg


def _trace_path(args, out: Path) -> Path:
    path = Path(args.trace) if args.trace else out / "trace"
    if not path.is_dir():
        raise FileNotFoundError(f"trace directory {path} not found (run gen-traces first?)")
    return path


def cmd_gen_traces(args, out: Path) -> int:
    cfg = _toy(args)
    trace = pipeline.gen_traces(cfg, args.fraction, args.dtype)
    write_trace(trace, out / "trace")
    summary = pipeline.trace_summary(trace)
    summary["toy"] = cfg.to_dict()
    summary["fraction"] = str(pipeline.parse_fraction(args.fraction))
    reports.write_report(summary, out / "gen_summary.json")
    print(
        f"wrote {out / 'trace'}: {summary['num_layers']} layers, "
        f"{summary['traced_timesteps']}/{summary['num_timesteps']} timesteps, {summary['num_samples']} samples"
    )
    for layer in summary["layers"]:
        print(f"  {layer['name']:<10} d={layer['feature_dim']:<4} params={layer['param_count']}")
    print(f"  mean neighbouring-timestep gamma drift: {summary['neighbor_gamma_drift']:.6g}")
    return EXIT_OK


def cmd_orm(args, out: Path) -> int:
    trace = read_trace(_trace_path(args, out))
    reports.write_report(pipeline.orm_report(orm.orm_stack(trace)), out / "orm.json")
    print(f"wrote {out / 'orm.json'}")
    return EXIT_OK


def cmd_aggregate(args, out: Path) -> int:
    trace = read_trace(_trace_path(args, out))
    scores = aggregation.aggregate(orm.orm_stack(trace), args.mode)
    names = [x.name for x in trace.manifest.layers]
    reports.write_report(scores.to_dict(names), out / "importance.json")
    print(f"wrote {out / 'importance.json'}")
    return EXIT_OK


def cmd_allocate(args, out: Path) -> int:
    trace = read_trace(_trace_path(args, out))
    pins = None if args.pin is None else pipeline.parse_pins(args.pin)
    result = pipeline.allocate(trace, args.budget, args.bits, pins, args.mode, args.solver)
    reports.write_report(result.importance_report(), out / "importance.json")
    reports.write_report(result.allocation_report(), out / "allocation.json")
    a = result.allocation
    if args.solver != a.solver:
        print(f"notice: {args.solver} solver not applicable, used {a.solver}")
    print(f"bits: {a.bits}")
    print(f"used {a.used_bits} of {result.problem.budget_bits} bits, objective {a.objective_value:.6g} ({a.solver})")
    return EXIT_OK


def cmd_sampling_study(args, out: Path) -> int:
    if args.trace:
        traces = [read_trace(args.trace)]
    else:
        if args.num_seeds < 1:
            raise ValueError("--num-seeds must be positive")
        base = _toy(args)
        traces = []
        for k in range(args.num_seeds):
            cfg = pipeline.ToyConfig(base.timesteps, base.samples, base.seed + k, base.model_seed, base.width)
            traces.append(pipeline.gen_traces(cfg))
    report = pipeline.sampling_study(traces, mode=args.mode)
    reports.write_report(report, out / "sampling_study.json")
    print(pipeline.format_study_table(report))
    return EXIT_OK


def cmd_quantize_eval(args, out: Path) -> int:
    path = Path(args.allocation) if args.allocation else out / "allocation.json"
    if not path.is_file():
        raise FileNotFoundError(f"allocation report {path} not found (run allocate first?)")
    alloc = reports.load_report(path)
    bits = [layer["bits"] for layer in alloc["layers"]]
    budget = int(alloc["totals"]["budget_bits"])
    cfg = _toy(args)
    expected = cfg.model().param_counts
    if [layer["param_count"] for layer in alloc["layers"]] != expected:
        raise ValueError("allocation report does not match the toy model's layers")
    report = pipeline.quantize_eval(cfg, bits, budget, scheme=args.scheme, uniform_bits=args.uniform_bits)
    reports.write_report(report, out / "quantize_eval.json")
    for run in report["runs"]:
        print(f"{run['config']:<15} size={run['size_bits']:<8} output_mse={run['output_mse']:.6g}")
    print(f"mixed precision MSE is {report['mixed_vs_uniform']} than uniform {report['uniform_bits']}-bit")
    return EXIT_OK


COMMANDS = {
    "gen-traces": cmd_gen_traces,
    "orm": cmd_orm,
    "aggregate": cmd_aggregate,
    "allocate": cmd_allocate,
    "sampling-study": cmd_sampling_study,
    "quantize-eval": cmd_quantize_eval,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        config = _apply_config(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"error: bad config file: {exc}", file=sys.stderr)
        return EXIT_INVALID
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        out = _out_dir(args, config)
        return COMMANDS[args.command](args, out)
    except Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ZeroActivation as exc:
        print(f"error: {exc} (layer {exc.layer_id}, timestep {exc.timestep})", file=sys.stderr)
        return EXIT_INVALID
    except (TraceError, ValueError, FileNotFoundError, MpqError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AssertionError, ArithmeticError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
