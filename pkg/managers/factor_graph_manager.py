import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from constants import KIND_FLOW, KIND_INJECTION
from exceptions import FactorGraphError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Gaussian1D:
    """Gaussian over the extended reals; variance inf is the uninformative message."""
    mean: float = 0.0
    variance: float = math.inf

    def __post_init__(self):
        if math.isnan(self.variance) or math.isnan(self.mean):
            raise ValueError("Gaussian1D with NaN parameters")
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if math.isinf(self.variance):
            object.__setattr__(self, "mean", 0.0)

    @property
    def is_finite(self):
        return math.isfinite(self.variance)

    @property
    def precision(self):
        return 0.0 if math.isinf(self.variance) else 1.0 / self.variance


@dataclass(frozen=True)
class VariableNode:
    line_id: int
    from_bus: int  # positive orientation runs from_bus -> to_bus
    to_bus: int


@dataclass(frozen=True)
class FactorNode:
    kind: str  # KIND_FLOW or KIND_INJECTION
    id: int  # line id for flow factors, bus id for injection factors
    z: float
    variance: float
    lines: tuple
    signs: tuple

    @property
    def is_finite(self):
        return math.isfinite(self.variance)


class FactorGraph:
    """Bipartite flows-only factor graph.

    Flow factors come first, in line order, followed by one injection factor per bus.
    The edge arrays (edge_fac, edge_var, edge_sign) drive the vectorised message passing.
    """

    def __init__(self, variables, factors, bus_ids):
        self.variables = tuple(variables)
        self.factors = tuple(factors)
        self.bus_ids = list(bus_ids)
        self.line_ids = [variable.line_id for variable in self.variables]
        self.var_index = {line_id: position for position, line_id in enumerate(self.line_ids)}
        self.factor_index = {(factor.kind, factor.id): position for position, factor in enumerate(self.factors)}

        edge_fac, edge_var, edge_sign = [], [], []
        for position, factor in enumerate(self.factors):
            for line_id, sign in zip(factor.lines, factor.signs):
                if line_id not in self.var_index:
                    raise FactorGraphError(f"{factor.kind} factor {factor.id} touches unknown line {line_id}")
                edge_fac.append(position)
                edge_var.append(self.var_index[line_id])
                edge_sign.append(sign)
        self.edge_fac = _frozen(np.array(edge_fac, dtype=int))
        self.edge_var = _frozen(np.array(edge_var, dtype=int))
        self.edge_sign = _frozen(np.array(edge_sign, dtype=float))
        self.fac_z = _frozen(np.array([factor.z for factor in self.factors], dtype=float))
        self.fac_var = _frozen(np.array([factor.variance for factor in self.factors], dtype=float))

    @property
    def n_variables(self):
        return len(self.variables)

    @property
    def n_factors(self):
        return len(self.factors)

    @property
    def n_edges(self):
        return len(self.edge_fac)

    def factor(self, kind, item_id):
        try:
            return self.factors[self.factor_index[(kind, item_id)]]
        except KeyError:
            raise FactorGraphError(f"no {kind} factor for id {item_id}") from None

    def flow_factor_variances(self):
        """Flow-measurement variance per variable, in variable order."""
        return np.array([self.factor(KIND_FLOW, line_id).variance for line_id in self.line_ids])


def _frozen(array):
    array.flags.writeable = False
    return array


class FactorGraphManager:
    def build_factor_graph(self, case, meas):
        """One variable per line, one flow factor per line and one injection factor per bus.

        Items absent from the measurement set are treated as missing (variance inf).
        """
        unknown_lines = set(meas.flow) - set(case.line_ids)
        if unknown_lines:
            raise FactorGraphError(f"measurements reference unknown lines {sorted(unknown_lines)}")
        unknown_buses = set(meas.injection) - set(case.bus_ids)
        if unknown_buses:
            raise FactorGraphError(f"measurements reference unknown buses {sorted(unknown_buses)}")

        variables = [VariableNode(line.id, line.from_bus, line.to_bus) for line in case.lines]
        factors = []
        for line in case.lines:
            z, variance = _reading(meas.flow.get(line.id))
            factors.append(FactorNode(KIND_FLOW, line.id, z, variance, (line.id,), (1,)))
        for bus in case.buses:
            z, variance = _reading(meas.injection.get(bus.id))
            incident = case.incident_lines[bus.id]
            factors.append(FactorNode(KIND_INJECTION, bus.id, z, variance,
                                      tuple(line_id for line_id, _ in incident),
                                      tuple(sign for _, sign in incident)))
        graph = FactorGraph(variables, factors, case.bus_ids)
        logger.debug("Factor graph for %s: %d variables, %d factors, %d edges",
                     case.name, graph.n_variables, graph.n_factors, graph.n_edges)
        return graph

    def with_measurement(self, graph, kind, item_id, z, variance):
        """Copy of the graph with one factor's reading replaced."""
        position = graph.factor_index.get((kind, item_id))
        if position is None:
            raise FactorGraphError(f"no {kind} factor for id {item_id}")
        factors = list(graph.factors)
        factors[position] = replace(factors[position], z=float(z), variance=float(variance))
        return FactorGraph(graph.variables, factors, graph.bus_ids)

    def gaussian_product(self, msgs):
        precision = 0.0
        weighted = 0.0
        for message in msgs:
            if message.is_finite:
                precision += 1.0 / message.variance
                weighted += message.mean / message.variance
        if precision == 0.0:
            return Gaussian1D()
        return Gaussian1D(weighted / precision, 1.0 / precision)

    def gaussian_sum_message(self, factor, target_line, incoming):
        """Factor-to-variable message of a linear sum constraint.

        The target flow is what remains of the reading once the other incident flows are
        subtracted, so variances add and any infinite input makes the output infinite.
        """
        if target_line not in factor.lines:
            raise FactorGraphError(f"line {target_line} is not attached to {factor.kind} factor {factor.id}")
        target_sign = factor.signs[factor.lines.index(target_line)]
        residual = factor.z
        variance = factor.variance
        for line_id, sign in zip(factor.lines, factor.signs):
            if line_id == target_line:
                continue
            if line_id not in incoming:
                raise FactorGraphError(f"missing incoming message from line {line_id} "
                                       f"at {factor.kind} factor {factor.id}")
            message = incoming[line_id]
            residual -= sign * message.mean
            variance += message.variance
        if math.isinf(variance):
            return Gaussian1D()
        return Gaussian1D(target_sign * residual, variance)

    def variable_neighbors(self, graph, line_id, finite_only=False):
        """Factors attached to a flow variable, N(X_i)."""
        if line_id not in graph.var_index:
            raise FactorGraphError(f"unknown line {line_id}")
        variable = graph.var_index[line_id]
        positions = graph.edge_fac[graph.edge_var == variable]
        neighbors = [graph.factors[position] for position in positions]
        if finite_only:
            neighbors = [factor for factor in neighbors if factor.is_finite]
        return neighbors

    def factor_neighbors(self, graph, kind, item_id):
        """Line ids attached to a factor, N(f_a)."""
        return list(graph.factor(kind, item_id).lines)

    def export_text(self, graph, path):
        with open(path, "w") as handle:
            for line_id in graph.line_ids:
                handle.write(f"VAR {line_id}\n")
            for factor in graph.factors:
                ids = ",".join(f"{'+' if sign > 0 else '-'}{line_id}"
                               for line_id, sign in zip(factor.lines, factor.signs))
                handle.write(f"FAC {factor.kind} {factor.id} {ids or '-'} {factor.z!r} {factor.variance!r}\n")


def _reading(measurement):
    if measurement is None or math.isinf(measurement.variance):
        return 0.0, math.inf
    return float(measurement.z), float(measurement.variance)
