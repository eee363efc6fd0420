DEFAULT_MEASUREMENT_VARIANCE = 1e-4  # MW^2, flow and injection alike

DEFAULT_MAX_ITERATIONS = 10000
DEFAULT_TOL_MEAN = 1e-10
DEFAULT_TOL_VAR = 1e-10
DEFAULT_DAMPING = 0.0

RANK_THRESHOLD = 1e-10  # relative to the largest eigenvalue of the precision matrix
NULLSPACE_TOLERANCE = 1e-7
DENSE_SOLVER_LIMIT = 500  # variables; sparse factorization above this

DEFAULT_EPSILON_SCALE = 1e-3  # linear response step, in units of the measurement std
ROUNDOFF_TOL_PER_LINE = 1e-15  # MW, lowest mean tolerance per variable for perturbed runs

DEFAULT_SAMPLES = 5000
DEFAULT_BASE_SEED = 0
DEFAULT_MAX_DEPTH = 12  # iterations tracked in the R(n) profile
DEFAULT_BENCH_REPEATS = 5

IMBALANCE_TOLERANCE = 1e-6  # relative to base_mva

KIND_FLOW = "flow"
KIND_INJECTION = "injection"

STRATEGY_UNIFORM = "Uniform"
STRATEGY_LEAST_CONNECTED = "LeastConnected"
STRATEGY_MIN_SUM_M_OVER_C = "MinSumMoverC"
STRATEGIES = [STRATEGY_UNIFORM, STRATEGY_LEAST_CONNECTED, STRATEGY_MIN_SUM_M_OVER_C]

# annealing
DEFAULT_SEARCH_STEPS = 2000
DEFAULT_COOLING = 0.995
DEFAULT_INITIAL_TEMPERATURE = 0.1  # fraction of the starting objective
DEFAULT_OBJECTIVE_WEIGHTS = {"trace": 1.0, "cut": 0.0}
AREA_LABELS = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII"]

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NUMERICAL_ERROR = 2

CASE_FILE_PATTERNS = ["{name}cdf.txt", "{name}.cdf", "{name}.txt", "{name}"]

SNAPSHOT_HEADER = "# gridbp case snapshot v1"

ESTIMATE_COLUMNS = ["line_id", "from_bus", "to_bus", "mean", "variance", "retrievable", "first_finite_iter"]
MEASUREMENT_COLUMNS = ["kind", "id", "z", "variance"]
TRACE_COLUMNS = ["iteration", "sum_delta_mean", "sum_delta_var", "finite_count"]
BENCH_COLUMNS = ["case", "fraction", "bp_ms", "wls_ms", "lines", "buses", "flagged"]

# experiment -> csv file name inside a run directory
output_files = {
    "estimate": "estimate.csv",
    "observability": "observability.csv",
    "retrievability": "retrievability.csv",
    "neff": "effective_dof.csv",
    "correlation": "correlations.csv",
    "rprofile": "retrieval_profile.csv",
    "variance": "variance_ratio.csv",
    "bench": "timing.csv",
    "partition_flows": "{name}_flows.csv",
    "partition_covariance": "{name}_covariance.csv",
    "partition_summary": "partition_scores.csv",
    "search_log": "search_log.csv",
    "search_partition": "best_partition.txt",
    "stats_topology": "topology.csv",
    "stats_degrees": "degree_histogram.csv",
    "stats_buses": "buses.csv",
    "stats_lines": "lines.csv",
    "stats_spread": "heterogeneity.csv",
}

MESSAGES = {
    "case_loaded": "Loaded case '{name}': {buses} buses, {lines} lines ({records} branch records).",
    "parallel_merged": "Merged {count} parallel circuit(s) into single lines: {pairs}.",
    "negative_reactance": "Line {from_bus}-{to_bus} has negative reactance {x}; kept as series compensation.",
    "phase_shift_ignored": "Ignored phase shift of {angle} deg on transformer {from_bus}-{to_bus} (DC approximation).",
    "imbalance": "Total injection imbalance {imbalance:.3e} MW exceeds {limit:.3e} MW.",
    "disconnected_area": "Area '{area}' of partition '{name}' is not connected.",
    "bp_not_converged": "BP did not converge within {iterations} iterations.",
    "bp_converged": "BP converged after {iterations} iterations; {finite}/{total} lines retrievable.",
    "sample_not_converged": "{count} of {total} samples did not converge at fraction {fraction}; excluded.",
    "fraction_rounded": "{kind} fraction {fraction} x {population} is not integral; rounded to {count}.",
    "oracle_deviation": "Max |BP mean - WLS mean| = {deviation:.3e} MW.",
    "partition_score": "Partition '{name}': trace = {trace:.6e} MW^2",
    "best_partition": "Lowest trace: '{name}' ({trace:.6e} MW^2)",
    "input_error": "Input error: {error}",
    "numerical_error": "Numerical error: {error}",
    "run_written": "Outputs written to {path}",
}
