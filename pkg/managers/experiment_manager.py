import hashlib
import json
import logging
import math
import timeit
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from constants import *
from exceptions import ConfigError
from managers.bp_manager import BpManager, BpOptions
from managers.factor_graph_manager import FactorGraphManager
from managers.scenario_manager import ScenarioManager
from managers.wls_manager import WlsManager

logger = logging.getLogger(__name__)

_WORKER_CASE = None


@dataclass(frozen=True)
class EnsembleSpec:
    case: object  # GridCase with derived DC state
    n_samples: int = DEFAULT_SAMPLES
    fractions: tuple = (0.0,)  # each entry a fraction or a (flow, injection) pair
    strategy: str = STRATEGY_UNIFORM
    variance: float = DEFAULT_MEASUREMENT_VARIANCE
    base_seed: int = DEFAULT_BASE_SEED
    workers: int = 1
    max_depth: int = DEFAULT_MAX_DEPTH
    # run BP to convergence instead of stopping at the finiteness fixed point
    converge: bool = False
    # measured lines belong to the depth-1 reference group
    include_measured: bool = True

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be positive, got {self.max_depth}")
        pairs = []
        for fraction in self.fractions:
            pair = (fraction, fraction) if isinstance(fraction, (int, float)) else tuple(fraction)
            if len(pair) != 2 or not all(0.0 <= float(value) <= 1.0 for value in pair):
                raise ConfigError(f"invalid missing fraction {fraction}")
            pairs.append((float(pair[0]), float(pair[1])))
        if not pairs:
            raise ConfigError("at least one missing fraction is required")
        object.__setattr__(self, "fractions", tuple(pairs))

    def to_dict(self):
        return {
            "case": self.case.name,
            "buses": self.case.n_buses,
            "lines": self.case.n_lines,
            "n_samples": self.n_samples,
            "fractions": [list(pair) for pair in self.fractions],
            "strategy": self.strategy,
            "variance": self.variance,
            "base_seed": self.base_seed,
            "max_depth": self.max_depth,
            "converge": self.converge,
            "include_measured": self.include_measured,
        }

    def fingerprint(self):
        # worker count never changes results, so it is not part of the key
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()


@dataclass
class EnsembleResult:
    spec: EnsembleSpec
    summary: pd.DataFrame
    r_profile: pd.DataFrame
    variance_ratio: pd.DataFrame
    wall_time: float = 0.0
    excluded: dict = field(default_factory=dict)  # fraction pair -> samples dropped for non-convergence


class ExperimentManager:
    def __init__(self, grid_manager, factor_graph_manager=None, bp_manager=None, wls_manager=None,
                 scenario_manager=None):
        self.grid_manager = grid_manager
        self.factor_graph_manager = factor_graph_manager or FactorGraphManager()
        self.bp_manager = bp_manager or BpManager()
        self.wls_manager = wls_manager or WlsManager(grid_manager)
        self.scenario_manager = scenario_manager or ScenarioManager()
        self._cache = {}

    def run_ensemble(self, spec, warnings_fn=None, progress_fn=None):
        """All per-fraction statistics of one ensemble; cached per spec fingerprint."""
        key = spec.fingerprint()
        if key in self._cache:
            return self._cache[key]

        started = timeit.default_timer()
        summary_rows, profile_rows, ratio_rows, excluded = [], [], [], {}
        for position, pair in enumerate(spec.fractions):
            jobs = [(pair, spec.strategy, spec.variance, spec.base_seed + k, spec.max_depth, spec.converge,
                     spec.include_measured) for k in range(spec.n_samples)]
            samples = self._map_samples(spec.case, jobs, spec.workers)
            valid = [sample for sample in samples if sample["valid"]]
            dropped = len(samples) - len(valid)
            if dropped:
                excluded[pair] = dropped
                message = MESSAGES["sample_not_converged"].format(count=dropped, total=len(samples), fraction=pair)
                logger.warning(message)
                if warnings_fn:
                    warnings_fn(message)
            summary_rows.append(self._summarize(pair, valid))
            profile_rows.extend(self._profile_rows(pair, valid, spec.max_depth))
            if spec.converge:
                ratio_rows.extend(self._variance_rows(pair, valid, spec.max_depth))
            if progress_fn:
                progress_fn((position + 1) / len(spec.fractions))

        result = EnsembleResult(
            spec=spec,
            summary=pd.DataFrame(summary_rows),
            r_profile=pd.DataFrame(profile_rows, columns=["flow_fraction", "injection_fraction", "depth",
                                                          "ratio", "ratio_se", "samples"]),
            variance_ratio=pd.DataFrame(ratio_rows, columns=["flow_fraction", "injection_fraction", "depth",
                                                             "count", "mean_variance", "mean_variance_se",
                                                             "ratio", "ratio_se"]),
            wall_time=timeit.default_timer() - started,
            excluded=excluded,
        )
        self._cache[key] = result
        return result

    def _map_samples(self, case, jobs, workers):
        if workers == 1:
            return [_sample_statistics(case, job) for job in jobs]
        chunksize = max(1, len(jobs) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(case,)) as executor:
            # map keeps submission order, so aggregation does not depend on scheduling
            return list(executor.map(_worker_sample, jobs, chunksize=chunksize))

    def _summarize(self, pair, samples):
        n = len(samples)
        row = {"flow_fraction": pair[0], "injection_fraction": pair[1], "samples": n}
        if n == 0:
            row.update({name: np.nan for name in ("P", "P_se", "p", "p_se", "N_eff", "N_eff_se",
                                                    "C", "C_se", "M", "M_se", "MC", "MC_se")})
            row["N_eff_defined"] = False
            return row
        observable = np.array([sample["observable"] for sample in samples], dtype=float)
        P = float(observable.mean())
        row["P"] = P
        row["P_se"] = math.sqrt(P * (1.0 - P) / n)
        for name in ("p", "C", "M", "MC"):
            values = np.array([sample[name] for sample in samples], dtype=float)
            row[name], row[f"{name}_se"] = _mean_and_se(values)
        neff, neff_se = self.effective_dof_value(P, row["p"], row["P_se"], row["p_se"])
        row["N_eff"], row["N_eff_se"] = neff, neff_se
        row["N_eff_defined"] = not math.isnan(neff)
        return row

    def _profile_rows(self, pair, samples, max_depth):
        rows = []
        if not samples:
            return rows
        ratios = np.array([sample["r_ratio"] for sample in samples], dtype=float)
        for depth in range(1, max_depth + 1):
            values = ratios[:, depth - 1]
            values = values[~np.isnan(values)]
            if values.size == 0:
                continue
            mean, se = _mean_and_se(values)
            rows.append((pair[0], pair[1], depth, mean, se, int(values.size)))
        return rows

    def _variance_rows(self, pair, samples, max_depth):
        totals = np.zeros(max_depth + 1)
        squares = np.zeros(max_depth + 1)
        counts = np.zeros(max_depth + 1)
        for sample in samples:
            totals += sample["depth_sum"]
            squares += sample["depth_sq"]
            counts += sample["depth_count"]
        if counts[1] == 0:
            logger.info("No depth-1 variables at fraction %s; variance ratios are undefined", pair)
        reference = totals[1] / counts[1] if counts[1] else np.nan
        rows = []
        for depth in range(1, max_depth + 1):
            count = counts[depth]
            if count == 0:
                continue
            mean = totals[depth] / count
            spread = max(squares[depth] / count - mean ** 2, 0.0)
            se = math.sqrt(spread / (count - 1)) if count > 1 else np.nan
            rows.append((pair[0], pair[1], depth, int(count), mean, se, mean / reference, se / reference))
        return rows

    @staticmethod
    def effective_dof_value(P, p, P_se=0.0, p_se=0.0):
        """N_eff = ln P / ln p with first-order error propagation; NaN when P or p is 0 or 1."""
        if not (0.0 < P < 1.0 and 0.0 < p < 1.0):
            return np.nan, np.nan
        log_P, log_p = math.log(P), math.log(p)
        value = log_P / log_p
        d_P = 1.0 / (P * log_p)
        d_p = -log_P / (p * log_p ** 2)
        return value, math.sqrt((d_P * P_se) ** 2 + (d_p * p_se) ** 2)

    def observability_probability(self, spec):
        return self._view(spec, ["P", "P_se"])

    def retrievability_fraction(self, spec):
        return self._view(spec, ["p", "p_se"])

    def effective_dof(self, spec):
        return self._view(spec, ["P", "p", "N_eff", "N_eff_se", "N_eff_defined"])

    def correlation_C(self, spec):
        return self._view(spec, ["C", "C_se"])

    def correlation_M(self, spec):
        # MC is the correlation of m_i / c_i with c_i, which vanishes for uniformly random masks
        return self._view(spec, ["M", "M_se", "MC", "MC_se"])

    def retrieval_ratios(self, spec):
        return self.run_ensemble(spec).r_profile

    def variance_ratio_by_depth(self, spec):
        if not spec.converge:
            spec = replace(spec, converge=True)
        return self.run_ensemble(spec).variance_ratio

    def _view(self, spec, columns):
        summary = self.run_ensemble(spec).summary
        return summary[["flow_fraction", "injection_fraction", "samples"] + columns]

    def timing_benchmark(self, cases, fractions, repeats=DEFAULT_BENCH_REPEATS, variance=DEFAULT_MEASUREMENT_VARIANCE,
                         seed=DEFAULT_BASE_SEED):
        """Median wall time of BP (to convergence) and WLS (through factorization) per case and fraction."""
        rows = []
        for case in cases:
            for fraction in fractions:
                mask = self.scenario_manager.make_mask(case, fraction, STRATEGY_UNIFORM, seed)
                meas = self.scenario_manager.sample_measurements(case, mask, variance, seed)
                graph = self.factor_graph_manager.build_factor_graph(case, meas)
                bp_times, wls_times, flagged = [], [], False
                for _ in range(repeats):
                    started = timeit.default_timer()
                    result = self.bp_manager.run_bp(graph)
                    elapsed = timeit.default_timer() - started
                    if result.converged:
                        bp_times.append(elapsed)
                    else:
                        flagged = True
                    started = timeit.default_timer()
                    self.wls_manager.wls_flows(graph)
                    wls_times.append(timeit.default_timer() - started)
                bp_ms = 1000.0 * float(np.median(bp_times)) if bp_times else np.nan
                rows.append((case.name, _fraction_label(fraction), bp_ms, 1000.0 * float(np.median(wls_times)),
                             case.n_lines, case.n_buses, flagged))
                logger.info("Timed %s at %s missing: BP %.2f ms, WLS %.2f ms", case.name, fraction, bp_ms, rows[-1][3])
        return pd.DataFrame(rows, columns=BENCH_COLUMNS)

    def fit_linear_scaling(self, df, column="bp_ms", fraction=None):
        """Least-squares line time = a * (lines + buses) + b over unflagged rows."""
        rows = df[~df["flagged"].astype(bool)]
        if fraction is not None:
            rows = rows[rows["fraction"] == fraction]
        rows = rows.dropna(subset=[column])
        if len(rows) < 3:
            raise ConfigError("at least three timed rows are needed for a scaling fit")
        fit = stats.linregress(rows["lines"] + rows["buses"], rows[column])
        return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r2": float(fit.rvalue ** 2)}


def _init_worker(case):
    global _WORKER_CASE
    _WORKER_CASE = case


def _worker_sample(job):
    return _sample_statistics(_WORKER_CASE, job)


def _sample_statistics(case, job):
    """Statistics of one seeded sample: mask, noise, BP and the retrievability bookkeeping."""
    pair, strategy, variance, seed, max_depth, converge, include_measured = job
    scenario_manager = ScenarioManager()
    mask = scenario_manager.make_mask(case, pair, strategy, seed)
    meas = scenario_manager.sample_measurements(case, mask, variance, seed)
    graph = FactorGraphManager().build_factor_graph(case, meas)
    bp_manager = BpManager()
    result = bp_manager.run_bp(graph, BpOptions(topological=not converge))
    valid = result.converged if converge else result.finite_stable

    flow_flags, injection_flags = scenario_manager.retrievable_items(meas, result)
    items = flow_flags.size + injection_flags.size
    retrieved = int(flow_flags.sum() + injection_flags.sum())

    n = case.n_buses
    degrees = case.degrees.astype(float)
    delta = (~injection_flags).astype(float)
    m_over_c = scenario_manager.m_over_c(case, mask.missing_injections)
    sample = {
        "valid": bool(valid),
        "observable": retrieved == items,
        "p": retrieved / items if items else 1.0,
        "C": float(np.sum(degrees * delta) / n - np.sum(degrees) * np.sum(delta) / n ** 2),
        "M": float(np.sum(m_over_c * delta) / n - np.sum(m_over_c) * np.sum(delta) / n ** 2),
        "MC": float(np.sum(m_over_c * degrees) / n - np.sum(m_over_c) * np.sum(degrees) / n ** 2),
    }

    profile = bp_manager.retrieval_profile(result, meas, max_depth=max_depth)
    ratios = np.full(max_depth, np.nan)
    if profile:
        unmeasured = np.array([meas.flow_missing(line_id) for line_id in graph.line_ids])
        total = int(np.count_nonzero(unmeasured & result.retrievable))
        if total:
            ratios = np.array([profile[depth] / total for depth in range(1, max_depth + 1)])
    sample["r_ratio"] = ratios

    depth_sum = np.zeros(max_depth + 1)
    depth_sq = np.zeros(max_depth + 1)
    depth_count = np.zeros(max_depth + 1)
    if converge:
        grouped = result.retrievable & (result.first_finite <= max_depth)
        if not include_measured:
            grouped &= np.array([meas.flow_missing(line_id) for line_id in graph.line_ids])
        depths = result.first_finite[grouped]
        variances = result.variances[grouped]
        np.add.at(depth_sum, depths, variances)
        np.add.at(depth_sq, depths, variances ** 2)
        np.add.at(depth_count, depths, 1.0)
    sample.update(depth_sum=depth_sum, depth_sq=depth_sq, depth_count=depth_count)
    return sample


def _mean_and_se(values):
    if values.size == 0:
        return np.nan, np.nan
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


def _fraction_label(fraction):
    if isinstance(fraction, (int, float)):
        return float(fraction)
    flow, injection = fraction
    return float(flow) if flow == injection else f"{flow}/{injection}"
