import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd

from constants import *
from exceptions import NumericalError, PartitionError, RetrievabilityError
from managers.bp_manager import BpManager, BpOptions
from managers.factor_graph_manager import FactorGraphManager

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    name: str
    area_of: dict  # bus id -> area label
    areas: tuple = ()

    def __post_init__(self):
        if not self.areas:
            ordered = tuple(dict.fromkeys(self.area_of.values()))
            object.__setattr__(self, "areas", ordered)
        unknown = set(self.area_of.values()) - set(self.areas)
        if unknown:
            raise PartitionError(f"partition '{self.name}' uses undeclared areas {sorted(unknown)}")
        if len(set(self.area_of.values())) < 2:
            raise PartitionError(f"partition '{self.name}' needs at least two non-empty areas")

    def members(self, area):
        return sorted(bus_id for bus_id, label in self.area_of.items() if label == area)


@dataclass
class AreaFlowReport:
    partition: Partition
    pairs: list  # (Y, Z) with Y listed before Z in partition.areas
    flows: dict  # (Y, Z) and (Z, Y) -> MW
    covariance: pd.DataFrame  # MW^2, indexed by pair labels "Y->Z"
    boundary_lines: dict  # (Y, Z) -> [(line id, sign)], sign +1 when the line runs Y -> Z
    trace: float
    unavailable: set = field(default_factory=set)

    def flow(self, from_area, to_area):
        return self.flows[(from_area, to_area)]

    @property
    def std(self):
        return pd.Series(np.sqrt(np.diag(self.covariance.to_numpy())), index=self.covariance.index)


class PartitionManager:
    def __init__(self, grid_manager, wls_manager, factor_graph_manager=None, bp_manager=None):
        self.grid_manager = grid_manager
        self.wls_manager = wls_manager
        self.factor_graph_manager = factor_graph_manager or FactorGraphManager()
        self.bp_manager = bp_manager or BpManager()

    def validate(self, partition, case, warnings_fn=None):
        missing = set(case.bus_ids) - set(partition.area_of)
        if missing:
            raise PartitionError(f"partition '{partition.name}' leaves buses {sorted(missing)} unassigned")
        unknown = set(partition.area_of) - set(case.bus_ids)
        if unknown:
            raise PartitionError(f"partition '{partition.name}' names unknown buses {sorted(unknown)}")
        graph = self.grid_manager.to_networkx(case)
        for area in partition.areas:
            members = partition.members(area)
            if members and not nx.is_connected(graph.subgraph(members)):
                message = MESSAGES["disconnected_area"].format(area=area, name=partition.name)
                logger.warning(message)
                if warnings_fn:
                    warnings_fn(message)
        return True

    def boundary_lines(self, partition, case):
        order = {area: position for position, area in enumerate(partition.areas)}
        boundary = {}
        for i, first in enumerate(partition.areas):
            for second in partition.areas[i + 1:]:
                boundary[(first, second)] = []
        for line in case.lines:
            source, target = partition.area_of[line.from_bus], partition.area_of[line.to_bus]
            if source == target:
                continue
            if order[source] < order[target]:
                boundary[(source, target)].append((line.id, 1))
            else:
                boundary[(target, source)].append((line.id, -1))
        return boundary

    def area_flows(self, bp, partition, case):
        """Signed sums of boundary-line belief means; NaN marks a pair with an unretrieved line."""
        flows = {}
        for (first, second), lines in self.boundary_lines(partition, case).items():
            total = 0.0
            for line_id, sign in lines:
                belief = bp.belief(line_id)
                if not belief.is_finite:
                    total = math.nan
                    break
                total += sign * belief.mean
            flows[(first, second)] = total
            flows[(second, first)] = -total if not math.isnan(total) else math.nan
        return flows

    def linear_response_covariance(self, graph, lines, epsilon_scale=DEFAULT_EPSILON_SCALE, opts=None,
                                   workers=1):
        """Covariance of the listed flows from the response of BP means to perturbed flow readings.

        cov(x_i, x_j) = sigma_j^2 (mu_i(z_j + eps) - mu_i(z_j - eps)) / 2 eps, eps = epsilon_scale * sigma_j.
        """
        opts = opts or BpOptions()
        measured = np.isfinite(graph.flow_factor_variances())
        for line_id in lines:
            if not measured[graph.var_index[line_id]]:
                raise RetrievabilityError(f"line {line_id} has no direct flow measurement to perturb",
                                          line_id=line_id)
        base = self._base_run(graph, opts)
        for line_id in lines:
            if not math.isfinite(base.variances[graph.var_index[line_id]]):
                raise RetrievabilityError(f"line {line_id} is not retrievable", line_id=line_id)
        columns = self._response_columns(graph, lines, lines, epsilon_scale, opts, base, workers)
        matrix = np.column_stack([columns[line_id] for line_id in lines]) if lines else np.zeros((0, 0))
        return 0.5 * (matrix + matrix.T)

    def _base_run(self, graph, opts):
        base = self.bp_manager.run_bp(graph, opts)
        if not base.converged:
            raise NumericalError(f"BP did not converge within {base.iterations} iterations")
        return base

    def _response_columns(self, graph, rows, perturbed, epsilon_scale, opts, base, workers):
        positions = [graph.var_index[line_id] for line_id in rows]
        # perturbed runs stop at tol_mean * epsilon_scale, floored at round-off
        tol_mean = max(opts.tol_mean * min(epsilon_scale, 1.0), ROUNDOFF_TOL_PER_LINE * graph.n_variables)
        perturbed_opts = replace(opts, tol_mean=tol_mean, trace_path=None)
        jobs = [(line_id, epsilon_scale, perturbed_opts, base.messages, positions) for line_id in perturbed]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(_perturbed_column, [graph] * len(jobs), jobs))
        else:
            results = [_perturbed_column(graph, job) for job in jobs]
        return dict(zip(perturbed, results))

    def area_flow_covariance(self, graph, partition, case, epsilon_scale=DEFAULT_EPSILON_SCALE, opts=None,
                             workers=1, warnings_fn=None):
        """Flows between areas with their full covariance.

        Lines with a direct measurement contribute linear-response columns; the block of lines
        without one comes from the exact posterior covariance.
        """
        self.validate(partition, case, warnings_fn=warnings_fn)
        opts = opts or BpOptions()
        base = self._base_run(graph, opts)
        boundary = self.boundary_lines(partition, case)
        flows = self.area_flows(base, partition, case)
        pairs = list(boundary)

        lines = sorted({line_id for members in boundary.values() for line_id, _ in members})
        retrieved = [line_id for line_id in lines if math.isfinite(base.variances[graph.var_index[line_id]])]
        has_reading = np.isfinite(graph.flow_factor_variances())
        measured = [line_id for line_id in retrieved if has_reading[graph.var_index[line_id]]]
        unmeasured = [line_id for line_id in retrieved if line_id not in measured]

        where = {line_id: position for position, line_id in enumerate(retrieved)}
        K = np.zeros((len(retrieved), len(retrieved)))
        columns = self._response_columns(graph, retrieved, measured, epsilon_scale, opts, base, workers)
        for line_id, column in columns.items():
            K[:, where[line_id]] = column
        if unmeasured:
            block = self.wls_manager.exact_covariance(graph, unmeasured)
            cells = [where[line_id] for line_id in unmeasured]
            K[np.ix_(cells, cells)] = block
            measured_cells = [where[line_id] for line_id in measured]
            K[np.ix_(measured_cells, cells)] = K[np.ix_(cells, measured_cells)].T
        K = 0.5 * (K + K.T)

        S = np.zeros((len(pairs), len(retrieved)))
        unavailable = set()
        for row, pair in enumerate(pairs):
            for line_id, sign in boundary[pair]:
                if line_id not in where:
                    unavailable.add(pair)
                    continue
                S[row, where[line_id]] = sign
        covariance = S @ K @ S.T
        for row, pair in enumerate(pairs):
            if pair in unavailable:
                covariance[row, :] = np.nan
                covariance[:, row] = np.nan
        labels = [f"{first}->{second}" for first, second in pairs]
        trace = float(np.nansum(np.diag(covariance)))
        return AreaFlowReport(partition=partition, pairs=pairs, flows=flows,
                              covariance=pd.DataFrame(covariance, index=labels, columns=labels),
                              boundary_lines=boundary, trace=trace, unavailable=unavailable)

    def partition_score(self, report):
        return report.trace

    def compare_partitions(self, reports):
        rows = [(report.partition.name, report.trace, sum(1 for pair in report.pairs if report.boundary_lines[pair]),
                 sum(len(lines) for lines in report.boundary_lines.values())) for report in reports]
        df = pd.DataFrame(rows, columns=["partition", "trace", "boundary_pairs", "boundary_lines"])
        df["best"] = df["trace"] == df["trace"].min()
        best = df.loc[df["best"]].iloc[0]
        logger.info(MESSAGES["best_partition"].format(name=best["partition"], trace=best["trace"]))
        return df

    def initial_partition(self, case, n_areas, seed=0):
        """Seeded region growing from n_areas distinct start buses; every area is connected."""
        if n_areas < 2:
            raise PartitionError("a partition needs at least two areas")
        if n_areas > case.n_buses:
            raise PartitionError(f"cannot split {case.n_buses} buses into {n_areas} areas")
        rng = np.random.default_rng(seed)
        starts = rng.choice(np.array(case.bus_ids), size=n_areas, replace=False)
        assignment = {int(bus_id): area for area, bus_id in enumerate(starts)}
        while len(assignment) < case.n_buses:
            grown = False
            for area in range(n_areas):
                frontier = sorted({neighbor for bus_id, owner in assignment.items() if owner == area
                                   for neighbor in case.neighbor_buses[bus_id] if neighbor not in assignment})
                if frontier:
                    assignment[int(rng.choice(frontier))] = area
                    grown = True
            if not grown:
                raise PartitionError(f"no connected {n_areas}-area partition reachable from seed {seed}")
        labels = _area_labels(n_areas)
        return Partition(name=f"initial-seed{seed}", area_of={bus_id: labels[area] for bus_id, area in
                                                              sorted(assignment.items())}, areas=tuple(labels))

    def partition_search(self, case, graph, n_areas, weights=None, seed=0, steps=DEFAULT_SEARCH_STEPS,
                         cooling=DEFAULT_COOLING, initial=None, warnings_fn=None):
        """Simulated annealing over single-bus reassignments that keep every area connected.

        The objective is weights["trace"] * trace + weights["cut"] * number of boundary lines,
        evaluated with the exact posterior covariance of the lines (independent of z).
        Returns (best partition, best objective, log of accepted moves).
        """
        weights = dict(DEFAULT_OBJECTIVE_WEIGHTS, **(weights or {}))
        rng = np.random.default_rng(seed)
        start = initial or self.initial_partition(case, n_areas, seed=seed)
        self.validate(start, case, warnings_fn=warnings_fn)
        labels = list(start.areas)
        if len(labels) != n_areas:
            raise PartitionError(f"initial partition has {len(labels)} areas, expected {n_areas}")

        solution = self.wls_manager.wls_flows(graph)
        covariance = np.nan_to_num(solution.covariance, nan=0.0)
        retrievable = solution.retrievable_mask
        line_positions = np.array([graph.var_index[line.id] for line in case.lines])
        grid = self.grid_manager.to_networkx(case)

        def objective(assignment):
            source = assignment[case.from_index]
            target = assignment[case.to_index]
            cut = source != target
            if not cut.any():
                return math.inf
            variables = line_positions[cut]
            if not retrievable[variables].all():
                return math.inf
            low = np.minimum(source[cut], target[cut])
            high = np.maximum(source[cut], target[cut])
            keys = low * n_areas + high
            signs = np.where(source[cut] == low, 1.0, -1.0)
            unique_keys, rows = np.unique(keys, return_inverse=True)
            S = np.zeros((unique_keys.size, variables.size))
            S[rows, np.arange(variables.size)] = signs
            block = covariance[np.ix_(variables, variables)]
            trace = float(np.sum((S @ block) * S))
            return weights["trace"] * trace + weights["cut"] * int(cut.sum())

        position = {bus_id: index for index, bus_id in enumerate(case.bus_ids)}
        current = np.array([labels.index(start.area_of[bus_id]) for bus_id in case.bus_ids])
        current_score = objective(current)
        best, best_score = current.copy(), current_score
        temperature = DEFAULT_INITIAL_TEMPERATURE * current_score \
            if math.isfinite(current_score) and current_score > 0 else 1.0
        log_rows = [(0, None, None, None, current_score, temperature, best_score)]

        for step in range(1, steps + 1):
            candidates = [bus_id for bus_id in case.bus_ids
                          if any(current[position[neighbor]] != current[position[bus_id]]
                                 for neighbor in case.neighbor_buses[bus_id])]
            bus_id = int(rng.choice(candidates))
            source_area = int(current[position[bus_id]])
            targets = sorted({int(current[position[neighbor]]) for neighbor in case.neighbor_buses[bus_id]}
                             - {source_area})
            target_area = int(rng.choice(targets))
            remaining = [other for other in case.bus_ids
                         if current[position[other]] == source_area and other != bus_id]
            if remaining and nx.is_connected(grid.subgraph(remaining)):
                proposal = current.copy()
                proposal[position[bus_id]] = target_area
                score = objective(proposal)
                accept = score <= current_score or (
                    math.isfinite(score) and rng.random() < math.exp(-(score - current_score) / temperature))
                if accept:
                    current, current_score = proposal, score
                    if score < best_score:
                        best, best_score = proposal.copy(), score
                    log_rows.append((step, bus_id, labels[source_area], labels[target_area], score, temperature,
                                     best_score))
            temperature *= cooling

        if not math.isfinite(best_score):
            raise PartitionError(f"annealing found no {n_areas}-area partition with retrievable boundary lines")
        partition = Partition(name=f"search-seed{seed}",
                              area_of={bus_id: labels[best[position[bus_id]]] for bus_id in case.bus_ids},
                              areas=tuple(labels))
        log = pd.DataFrame(log_rows, columns=["step", "bus", "from_area", "to_area", "objective", "temperature",
                                              "best_objective"])
        logger.info("Annealing finished after %d steps: best objective %.6e", steps, best_score)
        return partition, best_score, log

    def read_partition(self, path, name=None):
        area_of = {}
        with open(path, "r") as handle:
            for line_number, raw in enumerate(handle, start=1):
                raw = raw.split("#", 1)[0].strip()
                if not raw:
                    continue
                fields = raw.split()
                if len(fields) != 2:
                    raise PartitionError(f"{path}:{line_number}: expected 'bus_id area_label'")
                try:
                    bus_id = int(fields[0])
                except ValueError:
                    raise PartitionError(f"{path}:{line_number}: bus id {fields[0]!r} is not an integer") from None
                if bus_id in area_of:
                    raise PartitionError(f"{path}:{line_number}: bus {bus_id} assigned twice")
                area_of[bus_id] = fields[1]
        return Partition(name=name or Path(path).stem, area_of=area_of)

    def write_partition(self, partition, path):
        with open(path, "w") as handle:
            handle.write(f"# partition {partition.name}\n")
            for bus_id in sorted(partition.area_of):
                handle.write(f"{bus_id} {partition.area_of[bus_id]}\n")

    def export_report(self, report, flows_path, covariance_path):
        std = report.std
        rows = []
        for first, second in report.pairs:
            label = f"{first}->{second}"
            lines = " ".join(f"{'+' if sign > 0 else '-'}{line_id}"
                             for line_id, sign in report.boundary_lines[(first, second)])
            rows.append((first, second, report.flow(first, second), std[label], lines,
                         (first, second) not in report.unavailable))
        flows = pd.DataFrame(rows, columns=["from_area", "to_area", "flow", "std", "boundary_lines", "available"])
        flows.to_csv(flows_path, index=False, float_format="%.10g")
        report.covariance.to_csv(covariance_path, float_format="%.10g")
        return flows


def _perturbed_column(graph, job):
    line_id, epsilon_scale, opts, messages, positions = job
    factor_graph_manager = FactorGraphManager()
    bp_manager = BpManager()
    factor = graph.factor(KIND_FLOW, line_id)
    epsilon = epsilon_scale * math.sqrt(factor.variance)
    means = []
    for shift in (epsilon, -epsilon):
        perturbed = factor_graph_manager.with_measurement(graph, KIND_FLOW, line_id, factor.z + shift, factor.variance)
        result = bp_manager.run_bp(perturbed, opts, initial_messages=messages)
        if not result.converged:
            raise NumericalError(f"perturbed run for line {line_id} did not converge", iteration=result.iterations)
        means.append(result.means[positions])
    return factor.variance * (means[0] - means[1]) / (2.0 * epsilon)


def _area_labels(count):
    return AREA_LABELS[:count] if count <= len(AREA_LABELS) else [f"A{k + 1}" for k in range(count)]
