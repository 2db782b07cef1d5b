"""Pipeline steps shared by the command line and the tests.

Each function takes already-parsed inputs and returns plain report dicts,
so the CLI stays a thin argument layer.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import aggregation, allocator, orm, quantizer
from .toy_diffusion import (
    DiffusionSchedule,
    ToyDenoiser,
    generate_trace,
    parse_fraction,
    run_reverse,
    sample_timesteps,
)
from .trace_store import ActivationTrace

log = logging.getLogger(__name__)

BITS_PER_MB = 8 * 10**6
STUDY_FRACTIONS = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 20))

_BUDGET_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(bits|bit|b|bytes|B|Mb|MB|mb)?\s*$")


def parse_bit_choices(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        vals = [int(v) for v in text]
    else:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    if not vals:
        raise ValueError("bit choices must be nonempty")
    if any(not 1 <= v <= 32 for v in vals):
        raise ValueError("bit choices must lie in [1, 32]")
    return sorted(set(vals))


def parse_pins(text) -> Dict[int, int]:
    """Parse "0:8,5:8" into {0: 8, 5: 8}."""
    if isinstance(text, dict):
        return {int(k): int(v) for k, v in text.items()}
    pins = {}
    for item in str(text).split(","):
        if not item.strip():
            continue
        layer, _, bits = item.partition(":")
        if not bits:
            raise ValueError(f"pin {item!r} must look like layer:bits")
        pins[int(layer)] = int(bits)
    return pins


def parse_budget(text, param_counts: Sequence[int] = (), pinned: Optional[Dict[int, int]] = None) -> int:
    """Budget in bits.

    Accepts a plain bit count ("38912", "38912bits"), bytes ("4864B"),
    megabits ("0.5Mb", 1 Mb = 8e6 bits as in model-size tables) or
    "uniform:<b>", the size of every free layer at b bits with pinned
    layers at their pinned width.
    """
    s = str(text).strip()
    if s.startswith("uniform:"):
        b = int(s.split(":", 1)[1])
        pinned = pinned or {}
        bits = sum(p * pinned.get(i, b) for i, p in enumerate(param_counts))
    else:
        m = _BUDGET_RE.match(s)
        if not m:
            raise ValueError(f"cannot parse budget {text!r}")
        value, unit = Fraction(m.group(1)), m.group(2) or "bits"
        if unit in ("bytes", "B"):
            value *= 8
        elif unit.lower() == "mb":
            value *= BITS_PER_MB
        bits = int(value)
        if bits != value:
            raise ValueError(f"budget {text!r} is not a whole number of bits")
    if bits <= 0:
        raise ValueError("budget must be a positive number of bits")
    return bits


@dataclass
class ToyConfig:
    timesteps: int = 50
    samples: int = 32
    seed: int = 7
    model_seed: int = 0
    width: int = 32
    data_dim: int = 8

    def model(self) -> ToyDenoiser:
        return ToyDenoiser.build(self.model_seed, data_dim=self.data_dim, width=self.width)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.timesteps)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def gen_traces(cfg: ToyConfig, fraction=1, dtype: str = "f64"):
    frac = parse_fraction(fraction)
    schedule = cfg.schedule()
    subset = None if frac == 1 else sample_timesteps(schedule.T, frac)
    trace = generate_trace(cfg.model(), schedule, cfg.samples, cfg.seed, timesteps=subset, dtype=dtype)
    return trace


def trace_summary(trace: ActivationTrace, stack: Optional[orm.OrmStack] = None) -> dict:
    m = trace.manifest
    stack = stack or orm.orm_stack(trace)
    gamma = aggregation.gamma_rows(stack)
    return {
        "model_name": m.model_name,
        "num_layers": m.num_layers,
        "num_timesteps": m.num_timesteps,
        "num_samples": m.num_samples,
        "dtype": m.dtype,
        "seed": m.seed,
        "traced_timesteps": len(trace.timesteps),
        "layers": [
            {"name": x.name, "param_count": x.param_count, "feature_dim": x.feature_dim, "pinned_bits": x.pinned_bits}
            for x in m.layers
        ],
        # reported only: adjacent timesteps of a trained model should move little
        "neighbor_gamma_drift": aggregation.neighbor_drift(gamma),
    }


def orm_report(stack: orm.OrmStack) -> dict:
    return stack.to_dict()


@dataclass
class AllocationResult:
    scores: aggregation.ImportanceScores
    problem: allocator.AllocationProblem
    allocation: allocator.BitAllocation
    names: List[str]

    def importance_report(self) -> dict:
        return self.scores.to_dict(self.names)

    def allocation_report(self) -> dict:
        return self.allocation.to_dict(self.problem, self.names)


def allocate(
    trace: ActivationTrace,
    budget="uniform:4",
    bit_choices=allocator.DEFAULT_BITS,
    pins: Optional[Dict[int, int]] = None,
    mode: str = "paper",
    solver: str = "dp",
) -> AllocationResult:
    """ORM stack, aggregation and LPP solve for one trace.

    Pins default to the manifest's pinned_bits.
    """
    metas = trace.manifest.layers
    param_counts = [x.param_count for x in metas]
    if pins is None:
        pins = {x.layer_id: x.pinned_bits for x in metas if x.pinned_bits is not None}
    bits_budget = parse_budget(budget, param_counts, pins)
    choices = parse_bit_choices(bit_choices)
    if mode not in aggregation.MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    # Validate the problem shape before the expensive ORM computation.
    allocator.AllocationProblem(np.ones(len(metas)), param_counts, bits_budget, choices, pins).check_feasible()
    scores = aggregation.aggregate(orm.orm_stack(trace), mode)
    problem = allocator.AllocationProblem(scores.theta, param_counts, bits_budget, choices, pins)
    alloc = allocator.solve(problem, solver)
    return AllocationResult(scores, problem, alloc, [x.name for x in metas])


def mapc(theta_sampled, theta_full):
    """Per-layer absolute percentage change; returns (mean, max)."""
    theta_sampled = np.asarray(theta_sampled, dtype=np.float64)
    theta_full = np.asarray(theta_full, dtype=np.float64)
    pct = np.abs(theta_sampled - theta_full) / theta_full * 100.0
    return float(pct.mean()), float(pct.max())


def sampling_study(traces: Sequence[ActivationTrace], fractions=STUDY_FRACTIONS, mode: str = "mean") -> dict:
    """MAPC of theta from sampled timesteps against the full-trace theta.

    Each trace (one per calibration seed) contributes one MAPC and one
    biggest change per fraction; rows report the mean over traces and the
    spread (population std) of the biggest change.
    """
    if not traces:
        raise ValueError("sampling study needs at least one trace")
    fracs = [parse_fraction(f) for f in fractions]
    per_frac = {f: ([], []) for f in fracs}
    T = traces[0].manifest.num_timesteps
    for trace in traces:
        if trace.manifest.timesteps is not None:
            raise ValueError("sampling study needs full traces")
        full = aggregation.aggregate(orm.orm_stack(trace), mode).theta
        for f in fracs:
            sub = trace.restrict(sample_timesteps(trace.manifest.num_timesteps, f))
            theta = aggregation.aggregate(orm.orm_stack(sub), mode).theta
            mean_pct, max_pct = mapc(theta, full)
            per_frac[f][0].append(mean_pct)
            per_frac[f][1].append(max_pct)
    rows = []
    for f in fracs:
        means, maxes = per_frac[f]
        rows.append(
            {
                "fraction": str(f),
                "timesteps": len(sample_timesteps(T, f)),
                "mapc": float(np.mean(means)),
                "biggest_change_percent": float(np.mean(maxes)),
                "biggest_change_std": float(np.std(maxes)),
            }
        )
    return {"mode": mode, "num_timesteps": T, "num_seeds": len(traces), "rows": rows}


def format_study_table(report: dict) -> str:
    lines = [f"{'sampling':>10} {'timesteps':>10} {'MAPC':>8}  biggest change (%)"]
    lines.append(f"{'all':>10} {report['num_timesteps']:>10} {'--':>8}  --")
    for r in report["rows"]:
        lines.append(
            f"{r['fraction']:>10} {r['timesteps']:>10} {r['mapc']:>8.2f}  "
            f"{r['biggest_change_percent']:.2f} +/- {r['biggest_change_std']:.2f}"
        )
    lines.append(f"(mode={report['mode']}, seeds={report['num_seeds']})")
    return "\n".join(lines)


def choose_uniform_bits(problem: allocator.AllocationProblem) -> int:
    """Largest candidate width whose uniform model fits the budget."""
    fitting = [
        b for b in problem.bit_choices
        if sum(p * problem.pinned.get(i, b) for i, p in enumerate(problem.param_counts)) <= problem.budget_bits
    ]
    if not fitting:
        raise allocator.Infeasible("no uniform width fits the budget", min_bits=problem.min_size())
    return max(fitting)


def _run_quantized(model: ToyDenoiser, schedule, n, seed, bits, scheme):
    qweights, errors = quantizer.apply_allocation(model.weights, bits, scheme)
    qmodel = model.with_weights(qweights, act_bits=quantizer.ACTIVATION_BITS)
    x0, _ = run_reverse(qmodel, schedule, n, seed, record=[])
    return x0, errors


def quantize_eval(
    cfg: ToyConfig,
    bits: Sequence[int],
    budget_bits: int,
    bit_choices=allocator.DEFAULT_BITS,
    scheme: str = quantizer.SYMMETRIC,
    uniform_bits: Optional[int] = None,
) -> dict:
    """Compare full precision, uniform and mixed precision runs at one seed."""
    model = cfg.model()
    schedule = cfg.schedule()
    counts = model.param_counts
    if len(bits) != len(counts):
        raise ValueError(f"allocation has {len(bits)} layers, model has {len(counts)}")
    pins = model.pinned()
    problem = allocator.AllocationProblem(np.ones(len(counts)), counts, budget_bits, parse_bit_choices(bit_choices), pins)
    ub = uniform_bits if uniform_bits is not None else choose_uniform_bits(problem)
    uniform = allocator.uniform_allocation(problem, ub)

    ref, _ = run_reverse(model, schedule, cfg.samples, cfg.seed, record=[])
    rows = []
    for label, config_bits in (("uniform", uniform), ("mixed", list(bits))):
        out, errors = _run_quantized(model, schedule, cfg.samples, cfg.seed, config_bits, scheme)
        rows.append(
            {
                "config": label,
                "bits": [int(b) for b in config_bits],
                "size_bits": sum(allocator.layer_size(p, b) for p, b in zip(counts, config_bits)),
                "output_mse": float(np.mean((out - ref) ** 2)),
                "weight_mse": [e.mse for e in errors],
            }
        )
    full = {"config": "full_precision", "size_bits": 32 * sum(counts), "output_mse": 0.0}
    mixed, unif = rows[1]["output_mse"], rows[0]["output_mse"]
    return {
        "toy": cfg.to_dict(),
        "scheme": scheme,
        "activation_bits": quantizer.ACTIVATION_BITS,
        "budget_bits": budget_bits,
        "uniform_bits": ub,
        "runs": [full] + rows,
        "mixed_vs_uniform": "lower" if mixed < unif else ("equal" if mixed == unif else "higher"),
    }
