# GridBP/main.py

import argparse
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from config import Config, configure_logging
from constants import *
from exceptions import ConfigError, GridBpError, NumericalError
from managers import (
    BpManager,
    BpOptions,
    EnsembleSpec,
    ExperimentManager,
    FactorGraphManager,
    GridManager,
    PartitionManager,
    ScenarioManager,
    WlsManager
)
from services import CaseLibrary, RunStore, read_config

logger = logging.getLogger(__name__)

METRICS = ["observability", "retrievability", "neff", "correlation", "rprofile", "variance", "bench"]

grid_manager = GridManager()
factor_graph_manager = FactorGraphManager()
bp_manager = BpManager()
wls_manager = WlsManager(grid_manager)
scenario_manager = ScenarioManager()
experiment_manager = ExperimentManager(grid_manager, factor_graph_manager, bp_manager, wls_manager, scenario_manager)
partition_manager = PartitionManager(grid_manager, wls_manager, factor_graph_manager, bp_manager)


@dataclass
class RunConfig:
    """Everything a run depends on; stored as config.json so `rerun` reproduces it."""
    command: str
    case: str = "ieee14"
    case_dir: str = None
    metric: str = None
    measurements: str = None
    fractions: list = field(default_factory=lambda: [0.0])
    strategy: str = STRATEGY_UNIFORM
    variance: float = DEFAULT_MEASUREMENT_VARIANCE
    seed: int = DEFAULT_BASE_SEED
    samples: int = DEFAULT_SAMPLES
    workers: int = 1
    max_depth: int = DEFAULT_MAX_DEPTH
    include_measured: bool = True
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    damping: float = DEFAULT_DAMPING
    oracle: bool = False
    cases: list = field(default_factory=list)
    repeats: int = DEFAULT_BENCH_REPEATS
    partitions: list = field(default_factory=list)
    search: int = None
    steps: int = DEFAULT_SEARCH_STEPS
    cut_weight: float = 0.0
    epsilon_scale: float = DEFAULT_EPSILON_SCALE
    output_dir: str = None
    run_name: str = None

    @classmethod
    def from_dict(cls, data):
        known = {item.name for item in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run configuration keys {sorted(unknown)}")
        return cls(**data)


def parse_fractions(text):
    """'0.1', '0.1,0.3', '0:0.5:0.1' (inclusive) or 'flow/injection' pairs such as '0.2/0.5'."""
    values = []
    for chunk in str(text).split(","):
        chunk = chunk.strip()
        try:
            if "/" in chunk:
                flow, injection = chunk.split("/")
                values.append([float(flow), float(injection)])
            elif ":" in chunk:
                start, stop, step = (float(value) for value in chunk.split(":"))
                if step <= 0 or stop < start:
                    raise ConfigError(f"invalid fraction range '{chunk}'")
                count = int(math.floor((stop - start) / step + 1e-9))
                values.extend(round(start + k * step, 12) for k in range(count + 1))
            else:
                values.append(float(chunk))
        except ValueError as error:
            if isinstance(error, ConfigError):
                raise
            raise ConfigError(f"cannot read missing fractions from '{chunk}'") from None
    return values


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _ArgumentParser(prog="gridbp", description="Gaussian belief propagation for DC grid state estimation")
    parser.add_argument("--log-level", default=None)
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = _ArgumentParser(add_help=False)
    common.add_argument("--case", default="ieee14", help="case name in the case directory, or a CDF path")
    common.add_argument("--case-dir", default=None)
    common.add_argument("--variance", type=float, default=DEFAULT_MEASUREMENT_VARIANCE)
    common.add_argument("--seed", type=int, default=DEFAULT_BASE_SEED)
    common.add_argument("--strategy", choices=STRATEGIES, default=STRATEGY_UNIFORM)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--output-dir", default=None)
    common.add_argument("--run-name", default=None)

    estimate = subparsers.add_parser("estimate", parents=[common], help="estimate line flows for one scenario")
    estimate.add_argument("--measurements", default=None, help="measurement CSV (kind,id,z,variance)")
    estimate.add_argument("--missing", default="0", help="missing fraction, or flow/injection pair")
    estimate.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)
    estimate.add_argument("--damping", type=float, default=DEFAULT_DAMPING)
    estimate.add_argument("--oracle", action="store_true", help="append weighted-least-squares columns")

    experiment = subparsers.add_parser("experiment", parents=[common], help="Monte-Carlo ensembles and timings")
    experiment.add_argument("metric", choices=METRICS)
    experiment.add_argument("--fractions", default=None)
    experiment.add_argument("--missing", default=None, help="shorthand for a single fraction")
    experiment.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    experiment.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)
    experiment.add_argument("--unmeasured-only", action="store_true",
                            help="group only lines without a flow measurement in the variance ratio")
    experiment.add_argument("--cases", default=None, help="comma separated case names for bench")
    experiment.add_argument("--repeats", type=int, default=DEFAULT_BENCH_REPEATS)

    partition = subparsers.add_parser("partition", parents=[common], help="inter-area flows and their covariance")
    partition.add_argument("partitions", nargs="*", help="partition files with 'bus_id area_label' lines")
    partition.add_argument("--search", type=int, default=None, metavar="N_AREAS")
    partition.add_argument("--steps", type=int, default=DEFAULT_SEARCH_STEPS)
    partition.add_argument("--cut-weight", type=float, default=0.0)
    partition.add_argument("--epsilon-scale", type=float, default=DEFAULT_EPSILON_SCALE)
    partition.add_argument("--measurements", default=None)
    partition.add_argument("--missing", default="0")

    stats = subparsers.add_parser("stats", parents=[common], help="topology and heterogeneity of one or more cases")
    stats.add_argument("--cases", default=None, help="comma separated case names; defaults to --case")

    rerun = subparsers.add_parser("rerun", help="repeat a run from its config.json")
    rerun.add_argument("--config", required=True)
    rerun.add_argument("--output-dir", default=None)
    rerun.add_argument("--run-name", default=None)
    return parser


def config_from_args(args):
    if args.command == "rerun":
        config = RunConfig.from_dict(read_config(args.config))
        config.output_dir = args.output_dir or config.output_dir
        config.run_name = args.run_name
        return config

    config = RunConfig(command=args.command, case=args.case, case_dir=args.case_dir, variance=args.variance,
                       seed=args.seed, strategy=args.strategy, workers=args.workers or Config.WORKERS,
                       output_dir=args.output_dir, run_name=args.run_name)
    if args.command == "estimate":
        config.measurements = args.measurements
        config.fractions = parse_fractions(args.missing)[:1]
        config.max_iterations = args.max_iterations
        config.damping = args.damping
        config.oracle = args.oracle
    elif args.command == "experiment":
        config.metric = args.metric
        config.fractions = parse_fractions(args.fractions or args.missing or "0")
        config.samples = args.samples
        config.max_depth = args.max_depth
        config.include_measured = not args.unmeasured_only
        config.cases = [name.strip() for name in args.cases.split(",")] if args.cases else []
        config.repeats = args.repeats
    elif args.command == "partition":
        config.partitions = list(args.partitions)
        config.search = args.search
        config.steps = args.steps
        config.cut_weight = args.cut_weight
        config.epsilon_scale = args.epsilon_scale
        config.measurements = args.measurements
        config.fractions = parse_fractions(args.missing)[:1]
    elif args.command == "stats":
        config.cases = [name.strip() for name in args.cases.split(",")] if args.cases else []
    return config


def _measurements(config, case, store):
    if config.measurements:
        return scenario_manager.read_measurements(config.measurements)
    mask = scenario_manager.make_mask(case, config.fractions[0], config.strategy, config.seed)
    meas = scenario_manager.sample_measurements(case, mask, config.variance, config.seed)
    scenario_manager.write_measurements(meas, store.file("measurements.csv"))
    return meas


def cmd_estimate(config, store, warnings_fn):
    case = CaseLibrary(config.case_dir, grid_manager).load(config.case, warnings_fn=warnings_fn)
    meas = _measurements(config, case, store)
    graph = factor_graph_manager.build_factor_graph(case, meas)
    opts = BpOptions(max_iterations=config.max_iterations, damping=config.damping,
                     trace_path=str(store.file("trace.csv")))
    result = bp_manager.run_bp(graph, opts, warnings_fn=warnings_fn)

    retrievable = result.retrievable
    first_finite = result.first_finite_iter
    df = pd.DataFrame({
        "line_id": graph.line_ids,
        "from_bus": [variable.from_bus for variable in graph.variables],
        "to_bus": [variable.to_bus for variable in graph.variables],
        "mean": np.where(retrievable, result.means, np.nan),
        "variance": result.variances,
        "retrievable": retrievable,
        "first_finite_iter": pd.array([first_finite[line_id] for line_id in graph.line_ids], dtype="Int64"),
    }, columns=ESTIMATE_COLUMNS)

    if config.oracle:
        solution = wls_manager.wls_flows(graph)
        df["wls_mean"] = solution.means
        df["wls_variance"] = solution.variances
        both = retrievable & solution.retrievable_mask
        deviation = float(np.max(np.abs(result.means[both] - solution.means[both]))) if both.any() else 0.0
        print(MESSAGES["oracle_deviation"].format(deviation=deviation))
    store.write_csv(df, output_files["estimate"], float_format="%.12g")
    store.write_manifest(asdict(config), config.seed, {"converged": result.converged,
                                                       "iterations": result.iterations})

    print(f"{case.name}: {int(retrievable.sum())}/{graph.n_variables} flows retrieved, "
          f"{'converged' if result.converged else 'not converged'} after {result.iterations} iterations")
    return EXIT_OK if result.converged else EXIT_NUMERICAL_ERROR


def cmd_experiment(config, store, warnings_fn):
    library = CaseLibrary(config.case_dir, grid_manager)
    if config.metric == "bench":
        cases = [library.load(name, warnings_fn=warnings_fn) for name in (config.cases or [config.case])]
        df = experiment_manager.timing_benchmark(cases, [_as_fraction(value) for value in config.fractions],
                                                 repeats=config.repeats, variance=config.variance, seed=config.seed)
        store.write_csv(df, output_files["bench"])
        if len(cases) >= 3:
            for label in df["fraction"].unique():
                try:
                    fit = experiment_manager.fit_linear_scaling(df, fraction=label)
                except ConfigError as error:
                    logger.info("No scaling fit at %s missing: %s", label, error)
                    continue
                print(f"BP time at {label} missing: {fit['slope']:.4g} ms per element, R^2 = {fit['r2']:.3f}")
        store.write_manifest(asdict(config), config.seed)
        return EXIT_OK

    case = library.load(config.case, warnings_fn=warnings_fn)
    spec = EnsembleSpec(case=case, n_samples=config.samples, fractions=tuple(_as_fraction(value) for value in
                                                                             config.fractions),
                        strategy=config.strategy, variance=config.variance, base_seed=config.seed,
                        workers=config.workers, max_depth=config.max_depth, converge=config.metric == "variance",
                        include_measured=config.include_measured)
    views = {
        "observability": experiment_manager.observability_probability,
        "retrievability": experiment_manager.retrievability_fraction,
        "neff": experiment_manager.effective_dof,
        "correlation": lambda value: experiment_manager.run_ensemble(value).summary[
            ["flow_fraction", "injection_fraction", "samples", "C", "C_se", "M", "M_se", "MC", "MC_se"]],
        "rprofile": experiment_manager.retrieval_ratios,
        "variance": experiment_manager.variance_ratio_by_depth,
    }
    progress = lambda done: logger.info("Ensemble progress: %.0f%%", 100.0 * done)
    result = experiment_manager.run_ensemble(spec, warnings_fn=warnings_fn, progress_fn=progress)
    df = views[config.metric](spec)
    store.write_csv(df, output_files[config.metric])
    store.write_manifest(asdict(config), config.seed, {"ensemble": spec.to_dict(), "fingerprint": spec.fingerprint(),
                                                       "ensemble_wall_time": result.wall_time,
                                                       "excluded": {str(key): value for key, value in
                                                                    result.excluded.items()}})
    print(df.to_string(index=False))
    return EXIT_OK


def cmd_partition(config, store, warnings_fn):
    case = CaseLibrary(config.case_dir, grid_manager).load(config.case, warnings_fn=warnings_fn)
    meas = _measurements(config, case, store)
    graph = factor_graph_manager.build_factor_graph(case, meas)

    if config.search:
        weights = {"trace": 1.0, "cut": config.cut_weight}
        partition, score, log = partition_manager.partition_search(case, graph, config.search, weights=weights,
                                                                   seed=config.seed, steps=config.steps,
                                                                   warnings_fn=warnings_fn)
        partition_manager.write_partition(partition, store.file(output_files["search_partition"]))
        store.write_csv(log, output_files["search_log"])
        print(f"Search objective: {score:.6e}")
        partitions = [partition]
    elif config.partitions:
        partitions = [partition_manager.read_partition(path) for path in config.partitions]
    else:
        raise ConfigError("give partition files or --search N_AREAS")

    reports = []
    for partition in partitions:
        report = partition_manager.area_flow_covariance(graph, partition, case, epsilon_scale=config.epsilon_scale,
                                                        workers=config.workers, warnings_fn=warnings_fn)
        partition_manager.export_report(report,
                                        store.file(output_files["partition_flows"].format(name=partition.name)),
                                        store.file(output_files["partition_covariance"].format(name=partition.name)))
        print(MESSAGES["partition_score"].format(name=partition.name, trace=partition_manager.partition_score(report)))
        reports.append(report)
    if len(reports) > 1:
        summary = partition_manager.compare_partitions(reports)
        store.write_csv(summary, output_files["partition_summary"])
        best = summary.loc[summary["best"]].iloc[0]
        print(MESSAGES["best_partition"].format(name=best["partition"], trace=best["trace"]))
    store.write_manifest(asdict(config), config.seed)
    return EXIT_OK


def cmd_stats(config, store, warnings_fn):
    library = CaseLibrary(config.case_dir, grid_manager)
    topology, degrees, buses, lines, spread = [], [], [], [], []
    for name in config.cases or [config.case]:
        case = library.load(name, warnings_fn=warnings_fn)
        stats = grid_manager.topology_stats(case)
        histogram = stats.pop("degree_histogram")
        topology.append(dict(case=case.name, **stats))
        degrees.extend((case.name, degree, count) for degree, count in histogram.items())
        for rows, table in ((buses, grid_manager.bus_table(case)), (lines, grid_manager.line_table(case)),
                            (spread, grid_manager.heterogeneity(case))):
            table.insert(0, "case", case.name)
            rows.append(table)
        print(f"{case.name}: {stats['buses']} buses, {stats['lines']} lines, {stats['loop_count']} loops")

    store.write_csv(pd.DataFrame(topology), output_files["stats_topology"])
    store.write_csv(pd.DataFrame(degrees, columns=["case", "degree", "count"]), output_files["stats_degrees"])
    store.write_csv(pd.concat(buses, ignore_index=True), output_files["stats_buses"])
    store.write_csv(pd.concat(lines, ignore_index=True), output_files["stats_lines"])
    store.write_csv(pd.concat(spread, ignore_index=True), output_files["stats_spread"])
    store.write_manifest(asdict(config), config.seed)
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
    "partition": cmd_partition,
    "stats": cmd_stats,
}


def _as_fraction(value):
    return tuple(value) if isinstance(value, (list, tuple)) else float(value)


def run(config):
    """Execute one RunConfig and map failures to exit codes."""
    collected = []
    try:
        store = RunStore(config.output_dir, config.run_name)
        store.write_config(asdict(config))
        code = COMMANDS[config.command](config, store, collected.append)
    except NumericalError as error:
        print(MESSAGES["numerical_error"].format(error=error), file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except (GridBpError, OSError, ValueError) as error:
        print(MESSAGES["input_error"].format(error=error), file=sys.stderr)
        return EXIT_INPUT_ERROR
    for message in collected:
        print(f"warning: {message}", file=sys.stderr)
    print(MESSAGES["run_written"].format(path=store.path))
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or Config.LOG_LEVEL)
    try:
        config = config_from_args(args)
    except (GridBpError, OSError, ValueError) as error:
        print(MESSAGES["input_error"].format(error=error), file=sys.stderr)
        return EXIT_INPUT_ERROR
    if config.command not in COMMANDS:
        print(MESSAGES["input_error"].format(error=f"cannot rerun command '{config.command}'"), file=sys.stderr)
        return EXIT_INPUT_ERROR
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
