import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from constants import *
from exceptions import ConfigError, NumericalError
from managers.factor_graph_manager import Gaussian1D

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BpOptions:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    tol_mean: float = DEFAULT_TOL_MEAN
    tol_var: float = DEFAULT_TOL_VAR
    damping: float = DEFAULT_DAMPING
    # stop once the finite/infinite pattern of the messages is a fixed point
    topological: bool = False
    trace_path: str = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if not (self.tol_mean > 0 and self.tol_var > 0):
            raise ConfigError("convergence tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigError(f"damping must lie in [0, 1), got {self.damping}")


@dataclass
class BpResult:
    converged: bool
    iterations: int
    finite_stable: bool
    means: np.ndarray  # variable order of the graph; 0 where the belief is infinite
    variances: np.ndarray  # inf marks a variable that was not retrieved
    first_finite: np.ndarray  # 0 where the belief never became finite
    trace: pd.DataFrame
    messages: tuple  # factor-to-variable (means, variances) per edge, for warm starts
    graph: object = field(repr=False)

    @property
    def line_ids(self):
        return self.graph.line_ids

    @property
    def retrievable(self):
        return np.isfinite(self.variances)

    @property
    def beliefs(self):
        return {line_id: Gaussian1D(float(mean), float(variance))
                for line_id, mean, variance in zip(self.line_ids, self.means, self.variances)}

    @property
    def first_finite_iter(self):
        return {line_id: (int(depth) if depth > 0 else None)
                for line_id, depth in zip(self.line_ids, self.first_finite)}

    def belief(self, line_id):
        position = self.graph.var_index[line_id]
        return Gaussian1D(float(self.means[position]), float(self.variances[position]))


class BpManager:
    def run_bp(self, graph, opts=None, initial_messages=None, warnings_fn=None):
        """Synchronous Gaussian belief propagation on a flows-only factor graph.

        Each iteration sends variable-to-factor messages built from the previous
        factor-to-variable messages, then factor-to-variable messages, then forms beliefs.
        Messages are held in precision form on the variable side and in (mean, variance)
        form on the factor side, with explicit finiteness masks.
        """
        opts = opts or BpOptions()
        n_var, n_fac = graph.n_variables, graph.n_factors
        ef, ev, es = graph.edge_fac, graph.edge_var, graph.edge_sign
        fac_finite = np.isfinite(graph.fac_var)
        fac_var = np.where(fac_finite, graph.fac_var, 0.0)[ef]
        fac_z = graph.fac_z[ef]
        fac_ok = fac_finite[ef]
        damping = opts.damping

        with np.errstate(divide="ignore", invalid="ignore"):
            if initial_messages is None:
                fv_finite = np.zeros(graph.n_edges, dtype=bool)
                fv_prec = np.zeros(graph.n_edges)
                fv_h = np.zeros(graph.n_edges)
            else:
                fv_finite, fv_prec, fv_h = _precision_form(*initial_messages, graph.n_edges)

            prev_finite, prev_mean, prev_var = _beliefs(ev, fv_finite, fv_prec, fv_h, n_var)
            first_finite = np.zeros(n_var, dtype=int)

            var_slots = _edge_slots(ev, n_var)
            fac_slots = _edge_slots(ef, n_fac)
            trace_rows = []
            converged = False
            finite_stable = False
            iteration = 0
            for iteration in range(1, opts.max_iterations + 1):
                # variable -> factor: everything the variable heard except from the receiving factor
                vf_prec = _sum_of_others(ev, var_slots, fv_prec, n_var)
                vf_count = _sum_of_others(ev, var_slots, fv_finite, n_var)
                vf_finite = (vf_count > 0) & (vf_prec > 0)
                vf_var = np.where(vf_finite, 1.0 / vf_prec, 0.0)
                vf_mean = np.where(vf_finite, _sum_of_others(ev, var_slots, fv_h, n_var) * vf_var, 0.0)

                # factor -> variable: reading minus the other signed flows, variances add
                sum_mean = _sum_of_others(ef, fac_slots, es * vf_mean, n_fac)
                sum_var = _sum_of_others(ef, fac_slots, vf_var, n_fac)
                inf_count = _sum_of_others(ef, fac_slots, ~vf_finite, n_fac)
                new_finite = fac_ok & (inf_count == 0)
                new_var = np.where(new_finite, fac_var + sum_var, np.inf)
                new_mean = np.where(new_finite, es * (fac_z - sum_mean), 0.0)
                if np.isnan(new_mean).any() or np.isnan(new_var).any() or (new_var <= 0).any():
                    raise NumericalError("invalid factor-to-variable message", iteration=iteration)

                new_prec = np.where(new_finite, 1.0 / new_var, 0.0)
                new_h = new_prec * new_mean
                pattern_repeats = np.array_equal(new_finite, fv_finite)
                if damping > 0:
                    new_prec = np.where(new_finite, (1.0 - damping) * new_prec + damping * fv_prec, 0.0)
                    new_h = np.where(new_finite, (1.0 - damping) * new_h + damping * fv_h, 0.0)
                fv_finite, fv_prec, fv_h = new_finite, new_prec, new_h

                finite, mean, var = _beliefs(ev, fv_finite, fv_prec, fv_h, n_var)
                if np.isnan(mean).any():
                    raise NumericalError("NaN belief mean", iteration=iteration)
                first_finite[finite & (first_finite == 0)] = iteration

                both = finite & prev_finite
                delta_mean = float(np.sum(np.abs(mean[both] - prev_mean[both])))
                delta_var = float(np.sum(np.abs(var[both] - prev_var[both])))
                finiteness_changed = not np.array_equal(finite, prev_finite)
                trace_rows.append((iteration, delta_mean, delta_var, int(np.count_nonzero(finite))))
                prev_finite, prev_mean, prev_var = finite, mean, var

                if pattern_repeats:
                    finite_stable = True
                    if opts.topological:
                        break
                if (pattern_repeats and not finiteness_changed
                        and delta_mean < opts.tol_mean and delta_var < opts.tol_var):
                    converged = True
                    break

            message_var = np.where(fv_finite, 1.0 / np.where(fv_finite, fv_prec, 1.0), np.inf)
            message_mean = np.where(fv_finite, fv_h * np.where(fv_finite, message_var, 0.0), 0.0)

        trace = pd.DataFrame(trace_rows, columns=TRACE_COLUMNS)
        if opts.trace_path:
            trace.to_csv(opts.trace_path, index=False)

        result = BpResult(converged=converged, iterations=iteration, finite_stable=finite_stable,
                          means=prev_mean, variances=prev_var, first_finite=first_finite, trace=trace,
                          messages=(message_mean, message_var), graph=graph)
        if converged:
            logger.debug(MESSAGES["bp_converged"].format(iterations=iteration,
                                                         finite=int(np.count_nonzero(prev_finite)), total=n_var))
        elif not opts.topological:
            message = MESSAGES["bp_not_converged"].format(iterations=iteration)
            logger.info(message)
            if warnings_fn:
                warnings_fn(message)
        return result

    def retrieval_profile(self, result, meas, max_depth=None):
        """R(n): lines without a flow measurement whose belief is finite after n iterations.

        Cumulative in n; empty when every line is measured directly.
        """
        unmeasured = np.array([_missing(meas.flow.get(line_id)) for line_id in result.line_ids], dtype=bool)
        depths = result.first_finite[unmeasured & result.retrievable]
        if not unmeasured.any():
            return {}
        deepest = int(depths.max()) if depths.size else 0
        horizon = max_depth if max_depth is not None else deepest
        return {n: int(np.count_nonzero(depths <= n)) for n in range(1, horizon + 1)}


def _edge_slots(owner, n_owners):
    """Position of each edge among the edges of its owner, and a mask of the other positions."""
    counts = np.bincount(owner, minlength=n_owners)
    order = np.argsort(owner, kind="stable")
    slot = np.empty(len(owner), dtype=int)
    slot[order] = np.arange(len(owner)) - (np.cumsum(counts) - counts)[owner[order]]
    width = int(counts.max()) if len(owner) else 0
    return slot, np.arange(width)[None, :] != slot[:, None]


def _sum_of_others(owner, slots, values, n_owners):
    # per edge, the sum over the other edges of the same owner, added up without subtracting the own term
    slot, others = slots
    table = np.zeros((n_owners, others.shape[1]))
    table[owner, slot] = values
    return np.where(others, table[owner], 0.0).sum(axis=1)


def _beliefs(edge_var, fv_finite, fv_prec, fv_h, n_var):
    finite = np.bincount(edge_var, weights=fv_finite, minlength=n_var) > 0
    precision = np.bincount(edge_var, weights=fv_prec, minlength=n_var)
    h = np.bincount(edge_var, weights=fv_h, minlength=n_var)
    variance = np.where(finite, 1.0 / np.where(finite, precision, 1.0), np.inf)
    mean = np.where(finite, h * np.where(finite, variance, 0.0), 0.0)
    return finite, mean, variance


def _precision_form(means, variances, n_edges):
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if means.shape != (n_edges,) or variances.shape != (n_edges,):
        raise ConfigError(f"initial messages must have one entry per edge ({n_edges})")
    finite = np.isfinite(variances)
    precision = np.where(finite, 1.0 / np.where(finite, variances, 1.0), 0.0)
    return finite, precision, precision * np.where(finite, means, 0.0)


def _missing(measurement):
    return measurement is None or math.isinf(measurement.variance)
