"""
Command handlers: each validates its settings, runs one workflow and writes its artifacts.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

from src.analysis import (
    DEFAULT_LIMIT_TOLERANCE,
    DEFAULT_ORACLE_BUDGET,
    OracleFunctional,
    RateBoundParams,
    check_consensus_corollary,
    detect_limit,
    exact_expectation_oracle,
    exact_tau_distribution,
    rate_bound,
    tau_tail_bound,
)
from src.cli.app import parse_float_list
from src.clusters import MCPartition, mc_partition, verify_convexity, verify_gap
from src.control import drive_to_complete, hitting_tail_bound, split_or_shrink, verify_outcome
from src.engine import (
    DEFAULT_MEMORY_CAP_BYTES,
    ConfidenceProfile,
    ModelParams,
    OpinionState,
    Trace,
    VerificationResult,
    random_state,
    simulate,
    verify_replay,
)
from src.errors import ConfigError, PreconditionError, VerificationError
from src.experiments import (
    DEFAULT_CHECK_EVERY,
    DEFAULT_EPSILON,
    DEFAULT_MAX_STEPS,
    EIGHT_AGENT_BOUNDS,
    bound_comparison_curve,
    consensus_probability_sweep,
    eight_agent_trajectory,
    initial_rng,
    tau_tail_comparison,
    uniform_grid,
    w_matrix_exact,
    w_matrix_spot_check,
    w_matrix_targets,
)
from src.export import ArtifactWriter, load_sequence, load_trace
from src.utils.helpers import generate_timestamp_filename

logger = logging.getLogger(__name__)

Settings = Dict[str, Any]


@dataclass(frozen=True)
class CommandSpec:
    name: str
    help: str
    handler: Callable[[Settings], int]
    arguments: Tuple[Tuple[Tuple[str, ...], Dict[str, Any]], ...]
    defaults: Dict[str, Any]


def require(settings: Settings, key: str) -> Any:
    value = settings.get(key)
    if value is None:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return value


def as_int(settings: Settings, key: str) -> int:
    value = require(settings, key)
    try:
        result = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--{key.replace('_', '-')} must be an integer, got {value!r}") from None
    if result != float(value):
        raise ConfigError(f"--{key.replace('_', '-')} must be an integer, got {value!r}")
    return result


def as_float(settings: Settings, key: str) -> float:
    value = require(settings, key)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--{key.replace('_', '-')} must be a number, got {value!r}") from None


def as_floats(settings: Settings, key: str) -> List[float]:
    return parse_float_list(require(settings, key), f"--{key.replace('_', '-')}")


def model_params(settings: Settings) -> ModelParams:
    """
    Build model parameters from mu, bounds and (optionally) n.
    """
    bounds = as_floats(settings, "bounds")
    if settings.get("n") is not None and as_int(settings, "n") != len(bounds):
        raise ConfigError(f"--n is {settings['n']} but --bounds has {len(bounds)} entries")
    return ModelParams.build(as_float(settings, "mu"), bounds)


def opinion_state(settings: Settings, key: str, params: ModelParams) -> OpinionState:
    state = OpinionState.of(as_floats(settings, key))
    if state.n != params.n:
        raise ConfigError(f"--{key} has {state.n} entries, model has {params.n} agents")
    return state


def output_writer(settings: Settings, command: str) -> ArtifactWriter:
    out = settings.get("out")
    directory = Path(out) if out else Path("runs") / generate_timestamp_filename(command)
    return ArtifactWriter(directory)


def describe_partition(partition: MCPartition) -> None:
    for index, cluster in enumerate(partition.clusters, start=1):
        print(
            f"cluster {index}: members={list(cluster.members)} anchor={cluster.anchor} "
            f"span=[{cluster.x_min:.17g}, {cluster.x_max:.17g}] r_min={cluster.r_min:.17g} "
            f"complete={'yes' if cluster.complete else 'no'}"
        )


def cmd_simulate(settings: Settings) -> int:
    """
    Run one simulation and write its trace, final partition and limit report.
    """
    seed = as_int(settings, "seed")
    steps = as_int(settings, "steps")
    thinning = as_int(settings, "thinning")
    cap = as_int(settings, "memory_cap_mib") * 1024 * 1024
    tolerance = as_float(settings, "tolerance")
    preset = settings.get("preset")

    if preset is not None and preset != "eight-agent":
        raise ConfigError(f"unknown preset {preset!r}")
    if preset == "eight-agent":
        if settings.get("bounds") is not None or as_float(settings, "mu") != 0.5:
            raise ConfigError("--preset eight-agent fixes mu and the bounds; drop --mu and --bounds")
        if settings.get("n") is not None and as_int(settings, "n") != len(EIGHT_AGENT_BOUNDS):
            raise ConfigError(f"--preset eight-agent has {len(EIGHT_AGENT_BOUNDS)} agents, got --n {settings['n']}")
        x0 = as_floats(settings, "x0") if settings.get("x0") is not None else None
        trace = eight_agent_trajectory(seed, steps, thinning, x0, memory_cap_bytes=cap)
    else:
        params = model_params(settings)
        if settings.get("x0") is not None:
            x0 = opinion_state(settings, "x0", params)
        else:
            x0 = random_state(initial_rng(seed), params.n)
        trace = simulate(x0, params, steps, seed, thinning=thinning, memory_cap_bytes=cap)

    report = detect_limit(trace, tolerance)
    final = trace.final_state
    partition = mc_partition(final, trace.params.confidence)

    writer = output_writer(settings, "simulate")
    writer.write_trace(trace)
    writer.write_partition(partition, "final_partition")
    writer.write_limit_report(report)
    writer.write_manifest(settings, "simulate")

    print(f"steps={trace.steps} recorded_states={len(trace.states)} seed={trace.seed}")
    describe_partition(partition)
    if report.reached:
        values = sorted(set(report.x_star))
        print(f"tau={report.tau} consensus={'yes' if report.consensus else 'no'} "
              f"limit_values={','.join(f'{v:.17g}' for v in values)}")
    else:
        print("tau=not_yet")
    print(f"artifacts={writer.output_dir}")
    return 0


def cmd_partition(settings: Settings) -> int:
    """
    Print (and optionally write) the MC partition of a state.
    """
    if settings.get("trace") is not None:
        trace = load_trace(Path(settings["trace"]))
        confidence = trace.params.confidence
        if settings.get("time") is None:
            state = trace.final_state
        else:
            t = as_int(settings, "time")
            matches = [s for s in trace.states if s.t == t]
            if not matches:
                raise ConfigError(f"time {t} is not a recorded state of the trace")
            state = matches[0]
    else:
        bounds = as_floats(settings, "bounds")
        state = OpinionState.of(as_floats(settings, "x"))
        if state.n != len(bounds):
            raise ConfigError(f"--x has {state.n} entries, --bounds has {len(bounds)}")
        confidence = ConfidenceProfile(tuple(bounds))

    partition = mc_partition(state, confidence)
    describe_partition(partition)
    print(f"gap_check={'ok' if verify_gap(partition, state, confidence) else 'failed'}")
    print(f"consensus_guarantee={check_consensus_corollary(confidence).value}")
    if settings.get("out"):
        writer = output_writer(settings, "partition")
        writer.write_partition(partition)
        writer.write_manifest(settings, "partition")
    return 0


def cmd_synthesize(settings: Settings) -> int:
    """
    Synthesize a split-or-shrink or a drive-to-complete control sequence.
    """
    params = model_params(settings)
    x = opinion_state(settings, "x", params)
    mode = settings.get("mode")
    if mode == "complete":
        seq = drive_to_complete(x, params)
    elif mode == "split-or-shrink":
        params.require_theorem_domain("split_or_shrink")
        partition = mc_partition(x, params.confidence)
        if settings.get("cluster") is not None:
            index = as_int(settings, "cluster")
            if not 1 <= index <= len(partition):
                raise ConfigError(f"--cluster must lie in [1, {len(partition)}], got {index}")
            cluster = partition.clusters[index - 1]
        else:
            incomplete = [c for c in partition.clusters if not c.complete]
            if not incomplete:
                raise PreconditionError("every MC cluster is already complete")
            cluster = incomplete[0]
        seq = split_or_shrink(x, cluster, params)
    else:
        raise ConfigError(f"--mode must be 'split-or-shrink' or 'complete', got {mode!r}")

    result = verify_outcome(seq, params)
    writer = output_writer(settings, "synthesize")
    writer.write_sequence(seq, params)
    writer.write_manifest(settings, "synthesize")
    print(f"outcome={seq.claimed_outcome.value} length={len(seq)} bound={seq.length_bound} "
          f"verified={'yes' if result else 'no'}")
    print(f"artifacts={writer.output_dir}")
    if not result:
        raise VerificationError(result.reason)
    return 0


def cmd_replay(settings: Settings) -> int:
    """
    Replay a control sequence (checking its claim) or a trace (checking its states).
    """
    if settings.get("sequence") is None and settings.get("trace") is None:
        raise ConfigError("replay needs --sequence or --trace")
    if settings.get("sequence") is not None:
        seq, params = load_sequence(Path(settings["sequence"]))
        result = verify_outcome(seq, params)
        if not result:
            raise VerificationError(f"sequence: {result.reason}")
        print(f"sequence: outcome={seq.claimed_outcome.value} length={len(seq)} reproduced")
    if settings.get("trace") is not None:
        trace = load_trace(Path(settings["trace"]))
        result = verify_replay(trace)
        if not result:
            raise VerificationError(f"trace: {result.reason}")
        print(f"trace: {trace.steps} steps reproduced")
    return 0


def cmd_bound(settings: Settings) -> int:
    """
    Print the rate-bound constants and bound values at time t.
    """
    rate = RateBoundParams(
        n=as_int(settings, "n"),
        mu=as_float(settings, "mu"),
        r1=as_float(settings, "r1"),
        rn=as_float(settings, "rn"),
    )
    t = as_int(settings, "t")
    print(f"T={rate.T}")
    print(f"c={rate.c:.17g} log_one_minus_c={rate.log_one_minus_c:.17g}")
    print(f"rate_bound={rate_bound(rate, t):.17g}")
    if t >= 1:
        print(f"tau_tail_bound={tau_tail_bound(rate, t):.17g}")
        if settings.get("t_star") is not None:
            print(f"hitting_tail_bound={hitting_tail_bound(t, as_int(settings, 't_star'), rate.n):.17g}")
    return 0


def cmd_sweep(settings: Settings) -> int:
    """
    Run the consensus-probability sweep over the largest confidence bound.
    """
    if settings.get("seed") is None:
        raise ConfigError("sweep needs an explicit --seed")
    if settings.get("r_max") is not None:
        grid = as_floats(settings, "r_max")
    else:
        grid = uniform_grid(as_int(settings, "grid"))
    epsilon = None if settings.get("epsilon") in (None, 0, "none") else as_float(settings, "epsilon")

    def progress(done: int, total: int, info: Dict[str, Any]) -> None:
        logger.debug("Replica %d/%d done (%s)", done, total, info["status"])

    result = consensus_probability_sweep(
        n=as_int(settings, "n"),
        mu=as_float(settings, "mu"),
        r_max_grid=grid,
        replicas=as_int(settings, "replicas"),
        master_seed=as_int(settings, "seed"),
        max_steps=as_int(settings, "max_steps"),
        epsilon=epsilon,
        check_every=as_int(settings, "check_every"),
        jobs=as_int(settings, "jobs"),
        progress_callback=progress,
    )
    writer = output_writer(settings, "sweep")
    writer.write_sweep(result)
    writer.write_manifest(settings, "sweep")
    print(result.to_frame().to_string(index=False))
    print(f"artifacts={writer.output_dir}")
    return 0


def cmd_curve(settings: Settings) -> int:
    """
    Emit the empirical-vs-theoretical curve for the rate bound or the completion-time tail.
    """
    if settings.get("seed") is None:
        raise ConfigError("curve needs an explicit --seed")
    params = model_params(settings)
    x0 = opinion_state(settings, "x0", params).x if settings.get("x0") is not None else None
    stride = as_int(settings, "t_stride")
    if stride < 1:
        raise ConfigError(f"--t-stride must be >= 1, got {stride}")
    kind = settings.get("kind")
    if kind == "rate":
        t_grid = list(range(0, as_int(settings, "t_max") + 1, stride))
        frame = bound_comparison_curve(params, as_int(settings, "replicas"), t_grid,
                                       as_int(settings, "seed"), x0, as_int(settings, "max_steps"))
    elif kind == "tau":
        t_grid = list(range(stride, as_int(settings, "t_max") + 1, stride))
        frame = tau_tail_comparison(params, as_int(settings, "replicas"), t_grid,
                                    as_int(settings, "seed"), x0, as_int(settings, "max_steps"))
    else:
        raise ConfigError(f"--kind must be 'rate' or 'tau', got {kind!r}")

    writer = output_writer(settings, "curve")
    writer.write_table(frame, f"{kind}_curve", "bound-curve")
    writer.write_manifest(settings, "curve")
    print(frame.to_string(index=False))
    if not frame["dominated"].all():
        raise VerificationError(f"empirical values exceed the bound at {int((~frame['dominated']).sum())} times")
    return 0


def cmd_oracle(settings: Settings) -> int:
    """
    Print an exact expectation (or the exact completion-time tail) by enumeration.
    """
    params = model_params(settings)
    x = opinion_state(settings, "x", params)
    horizon = as_int(settings, "horizon")
    budget = as_int(settings, "budget")
    functional = settings.get("functional")
    if functional == "tau_tail":
        tail = exact_tau_distribution(x, params, horizon, budget)
        for t, p in enumerate(tail):
            print(f"P(tau>={t})={p:.17g}")
        return 0
    try:
        functional = OracleFunctional(functional)
    except ValueError:
        raise ConfigError(f"unknown functional {functional!r}") from None
    x_star = None
    if settings.get("x_star") is not None:
        x_star = as_floats(settings, "x_star")
        if len(x_star) != params.n:
            raise ConfigError(f"--x-star has {len(x_star)} entries, model has {params.n} agents")
    value = exact_expectation_oracle(x, params, horizon, functional, x_star, budget)
    print(f"{functional.value}={value:.17g}")
    return 0


def cmd_verify(settings: Settings) -> int:
    """
    Run every applicable verifier over the supplied artifacts.
    """
    if settings.get("sequence") is None and settings.get("trace") is None:
        raise ConfigError("verify needs --sequence and/or --trace")
    failures = []
    if settings.get("trace") is not None:
        trace = load_trace(Path(settings["trace"]))
        failures += _verify_trace(trace)
    if settings.get("sequence") is not None:
        seq, params = load_sequence(Path(settings["sequence"]))
        result = verify_outcome(seq, params)
        print(f"outcome: {'ok' if result else 'failed'}")
        if not result:
            failures.append(f"outcome: {result.reason}")
    if failures:
        raise VerificationError("; ".join(failures))
    return 0


def _verify_trace(trace: Trace) -> List[str]:
    failures = []
    checks = [("replay", verify_replay(trace))]
    confidence = trace.params.confidence
    gap = VerificationResult.passed()
    for state in trace.states:
        gap = verify_gap(mc_partition(state, confidence), state, confidence)
        if not gap:
            break
    checks.append(("gap", gap))
    checks.append(("convexity", verify_convexity(trace)))
    for name, result in checks:
        print(f"{name}: {'ok' if result else 'failed'}")
        if not result:
            failures.append(f"{name}: {result.reason}")
    return failures


def cmd_wcheck(settings: Settings) -> int:
    """
    Compare E[W^2] of one complete cluster with its closed form.
    """
    size = as_int(settings, "cluster_size")
    n = as_int(settings, "n")
    mu = as_float(settings, "mu")
    if settings.get("exact"):
        matrix = w_matrix_exact(size, n, mu)
        off, diag = w_matrix_targets(size, n, Fraction(mu))
        ok = all(
            entry == (diag if r == c else off)
            for r, row in enumerate(matrix)
            for c, entry in enumerate(row)
        )
        print(f"off_diagonal_target={off} diagonal_target={diag} exact_match={'yes' if ok else 'no'}")
    else:
        report = w_matrix_spot_check(size, n, mu, as_int(settings, "samples"), as_int(settings, "seed"))
        ok = report.ok
        print(f"off_diagonal_target={report.off_diagonal_target:.17g} "
              f"diagonal_target={report.diagonal_target:.17g} within_5se={'yes' if ok else 'no'}")
    if not ok:
        raise VerificationError("E[W^2] does not match its closed form")
    return 0


MODEL_ARGUMENTS = (
    (("--n",), {"type": int, "help": "Number of agents"}),
    (("--mu",), {"type": float, "help": "Weighting factor in (0, 1)"}),
    (("--bounds",), {"type": str, "help": "Comma-separated confidence bounds"}),
)
OUT_ARGUMENT = (("--out",), {"type": Path, "help": "Output directory for artifacts"})

COMMANDS = (
    CommandSpec(
        name="simulate",
        help="Run one simulation and write its trace",
        handler=cmd_simulate,
        arguments=MODEL_ARGUMENTS + (
            (("--x0",), {"type": str, "help": "Comma-separated initial opinions (default: uniform)"}),
            (("--seed",), {"type": int, "help": "Seed of the run"}),
            (("--steps",), {"type": int, "help": "Number of pair updates"}),
            (("--thinning",), {"type": int, "help": "Record every k-th state"}),
            (("--memory-cap-mib",), {"type": int, "help": "Largest trace size to accept"}),
            (("--tolerance",), {"type": float, "help": "Equality tolerance for limit values"}),
            (("--preset",), {"choices": ["eight-agent"], "help": "Use the eight-agent reference bounds"}),
            OUT_ARGUMENT,
        ),
        defaults={"n": None, "mu": 0.5, "bounds": None, "x0": None, "seed": 0, "steps": 1000,
                  "thinning": 1, "memory_cap_mib": DEFAULT_MEMORY_CAP_BYTES // (1024 * 1024),
                  "tolerance": DEFAULT_LIMIT_TOLERANCE, "preset": None, "out": None},
    ),
    CommandSpec(
        name="partition",
        help="Print the MC clusters of a state",
        handler=cmd_partition,
        arguments=(
            (("--x",), {"type": str, "help": "Comma-separated opinions"}),
            (("--bounds",), {"type": str, "help": "Comma-separated confidence bounds"}),
            (("--trace",), {"type": Path, "help": "Trace CSV to take the state from"}),
            (("--time",), {"type": int, "help": "Recorded time in the trace (default: last)"}),
            OUT_ARGUMENT,
        ),
        defaults={"x": None, "bounds": None, "trace": None, "time": None, "out": None},
    ),
    CommandSpec(
        name="synthesize",
        help="Synthesize a control sequence",
        handler=cmd_synthesize,
        arguments=MODEL_ARGUMENTS + (
            (("--x",), {"type": str, "help": "Comma-separated opinions"}),
            (("--mode",), {"choices": ["split-or-shrink", "complete"], "help": "Which construction to run"}),
            (("--cluster",), {"type": int, "help": "1-based MC cluster index (split-or-shrink)"}),
            OUT_ARGUMENT,
        ),
        defaults={"n": None, "mu": 0.5, "bounds": None, "x": None, "mode": "complete",
                  "cluster": None, "out": None},
    ),
    CommandSpec(
        name="replay",
        help="Replay a control sequence or a trace",
        handler=cmd_replay,
        arguments=(
            (("--sequence",), {"type": Path, "help": "Control-sequence JSON"}),
            (("--trace",), {"type": Path, "help": "Trace CSV"}),
        ),
        defaults={"sequence": None, "trace": None},
    ),
    CommandSpec(
        name="bound",
        help="Print the convergence-rate constants and bound",
        handler=cmd_bound,
        arguments=(
            (("--n",), {"type": int, "help": "Number of agents"}),
            (("--mu",), {"type": float, "help": "Weighting factor in [1/2, 1)"}),
            (("--r1",), {"type": float, "help": "Largest confidence bound"}),
            (("--rn",), {"type": float, "help": "Smallest confidence bound"}),
            (("--t",), {"type": int, "help": "Time"}),
            (("--t-star",), {"type": int, "help": "Control horizon for the hitting-time tail"}),
        ),
        defaults={"n": None, "mu": 0.5, "r1": None, "rn": None, "t": 0, "t_star": None},
    ),
    CommandSpec(
        name="sweep",
        help="Estimate the consensus probability over a grid of largest bounds",
        handler=cmd_sweep,
        arguments=(
            (("--n",), {"type": int, "help": "Number of agents"}),
            (("--mu",), {"type": float, "help": "Weighting factor"}),
            (("--grid",), {"type": int, "help": "Use the grid {i/k : i=1..k}"}),
            (("--r-max",), {"type": str, "help": "Comma-separated grid values instead of --grid"}),
            (("--replicas",), {"type": int, "help": "Runs per grid point"}),
            (("--seed",), {"type": int, "help": "Master seed (required)"}),
            (("--max-steps",), {"type": int, "help": "Step cap per run"}),
            (("--epsilon",), {"type": float, "help": "Within-cluster spread that ends a run"}),
            (("--check-every",), {"type": int, "help": "Stride of the stop-rule check"}),
            (("--jobs",), {"type": int, "help": "Worker processes"}),
            OUT_ARGUMENT,
        ),
        defaults={"n": 10, "mu": 0.5, "grid": 20, "r_max": None, "replicas": 1000, "seed": None,
                  "max_steps": DEFAULT_MAX_STEPS, "epsilon": DEFAULT_EPSILON,
                  "check_every": DEFAULT_CHECK_EVERY, "jobs": 1, "out": None},
    ),
    CommandSpec(
        name="curve",
        help="Compare empirical behaviour with the rate or tail bound",
        handler=cmd_curve,
        arguments=MODEL_ARGUMENTS + (
            (("--kind",), {"choices": ["rate", "tau"], "help": "Which bound to compare with"}),
            (("--x0",), {"type": str, "help": "Comma-separated initial opinions (default: uniform)"}),
            (("--replicas",), {"type": int, "help": "Number of runs"}),
            (("--t-max",), {"type": int, "help": "Last time of the grid"}),
            (("--t-stride",), {"type": int, "help": "Spacing of the time grid"}),
            (("--seed",), {"type": int, "help": "Master seed (required)"}),
            (("--max-steps",), {"type": int, "help": "Step cap per run"}),
            OUT_ARGUMENT,
        ),
        defaults={"n": None, "mu": 0.5, "bounds": None, "kind": "rate", "x0": None, "replicas": 1000,
                  "t_max": 200, "t_stride": 2, "seed": None, "max_steps": 100_000, "out": None},
    ),
    CommandSpec(
        name="oracle",
        help="Exact expectation by enumerating all pair sequences",
        handler=cmd_oracle,
        arguments=MODEL_ARGUMENTS + (
            (("--x",), {"type": str, "help": "Comma-separated initial opinions"}),
            (("--horizon",), {"type": int, "help": "Number of random updates"}),
            (("--functional",), {
                "choices": [f.value for f in OracleFunctional] + ["tau_tail"],
                "help": "Quantity to average",
            }),
            (("--x-star",), {"type": str, "help": "Reference vector for squared_distance"}),
            (("--budget",), {"type": int, "help": "Largest number of paths to enumerate"}),
        ),
        defaults={"n": None, "mu": 0.5, "bounds": None, "x": None, "horizon": 4,
                  "functional": OracleFunctional.COMPLETE_BY.value, "x_star": None,
                  "budget": DEFAULT_ORACLE_BUDGET},
    ),
    CommandSpec(
        name="verify",
        help="Check traces and control sequences against the structural properties",
        handler=cmd_verify,
        arguments=(
            (("--sequence",), {"type": Path, "help": "Control-sequence JSON"}),
            (("--trace",), {"type": Path, "help": "Trace CSV"}),
        ),
        defaults={"sequence": None, "trace": None},
    ),
    CommandSpec(
        name="wcheck",
        help="Spot-check E[W^2] of a complete cluster",
        handler=cmd_wcheck,
        arguments=(
            (("--cluster-size",), {"type": int, "help": "Size of the complete cluster"}),
            (("--n",), {"type": int, "help": "Number of agents"}),
            (("--mu",), {"type": float, "help": "Weighting factor"}),
            (("--samples",), {"type": int, "help": "Sampled pairs"}),
            (("--seed",), {"type": int, "help": "Seed of the pair draws"}),
            (("--exact",), {"action": "store_true", "help": "Enumerate all pairs in exact arithmetic"}),
        ),
        defaults={"cluster_size": None, "n": None, "mu": 0.5, "samples": 100_000, "seed": 0, "exact": None},
    ),
)
