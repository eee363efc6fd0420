import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from constants import *
from exceptions import ConfigError, GridBpError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Measurement:
    z: float  # MW
    variance: float  # MW^2, inf when missing

    @property
    def missing(self):
        return math.isinf(self.variance)


@dataclass(frozen=True)
class MeasurementSet:
    flow: dict  # line id -> Measurement
    injection: dict  # bus id -> Measurement
    seed: int = None

    def flow_missing(self, line_id):
        return self.flow[line_id].missing

    def injection_missing(self, bus_id):
        return self.injection[bus_id].missing


@dataclass(frozen=True)
class MissingMask:
    missing_flows: frozenset
    missing_injections: frozenset
    strategy: str = STRATEGY_UNIFORM
    fractions: tuple = (0.0, 0.0)  # (flow, injection)
    counts: tuple = (0, 0)
    rounded: tuple = field(default=(False, False), compare=False)  # fraction x population was not integral


class ScenarioManager:
    def missing_count(self, fraction, population):
        """Round half-up, tolerant of binary representation error (0.35 * 10 -> 4)."""
        exact = fraction * population
        count = int(math.floor(exact + 0.5 + 1e-9))
        return min(max(count, 0), population), abs(exact - round(exact)) > 1e-9

    def make_mask(self, case, fractions, strategy=STRATEGY_UNIFORM, seed=0):
        """Choose the missing flow and injection measurements.

        A single number means equal flow and injection fractions.
        """
        flow_fraction, injection_fraction = _fraction_pair(fractions)
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")
        rng = np.random.default_rng(seed)

        flow_count, flow_rounded = self.missing_count(flow_fraction, case.n_lines)
        injection_count, injection_rounded = self.missing_count(injection_fraction, case.n_buses)
        if flow_rounded or injection_rounded:
            logger.debug(MESSAGES["fraction_rounded"].format(kind="flow/injection", fraction=fractions,
                                                            population=(case.n_lines, case.n_buses),
                                                            count=(flow_count, injection_count)))

        # flows are always masked uniformly; drawn first so every strategy sees the same flow mask
        missing_flows = rng.choice(np.array(case.line_ids), size=flow_count, replace=False)
        if strategy == STRATEGY_UNIFORM:
            missing_injections = rng.choice(np.array(case.bus_ids), size=injection_count, replace=False)
        elif strategy == STRATEGY_LEAST_CONNECTED:
            order = sorted(case.bus_ids, key=lambda bus_id: (case.degrees[case.bus_index[bus_id]], bus_id))
            missing_injections = order[:injection_count]
        else:
            # dropping bus j raises sum_i m_i / c_i by the sum of 1 / c_i over the neighbours of j,
            # independently of what was dropped before, so the greedy order is a sort
            increments = self.m_over_c_increments(case)
            order = sorted(case.bus_ids, key=lambda bus_id: (increments[bus_id], bus_id))
            missing_injections = order[:injection_count]

        return MissingMask(missing_flows=frozenset(int(i) for i in missing_flows),
                           missing_injections=frozenset(int(i) for i in missing_injections),
                           strategy=strategy, fractions=(flow_fraction, injection_fraction),
                           counts=(flow_count, injection_count), rounded=(flow_rounded, injection_rounded))

    def m_over_c_increments(self, case):
        degrees = dict(zip(case.bus_ids, case.degrees))
        return {bus_id: sum(1.0 / degrees[neighbor] for neighbor in case.neighbor_buses[bus_id])
                for bus_id in case.bus_ids}

    def m_over_c(self, case, missing_injections):
        """Per bus, the fraction of neighbouring buses whose injection measurement is missing."""
        values = []
        for bus_id in case.bus_ids:
            neighbors = case.neighbor_buses[bus_id]
            missing = sum(1 for neighbor in neighbors if neighbor in missing_injections)
            values.append(missing / len(neighbors) if neighbors else 0.0)
        return np.array(values)

    def sample_measurements(self, case, mask, variance=DEFAULT_MEASUREMENT_VARIANCE, seed=0,
                            injection_variance=None):
        """Noisy readings z = true value + N(0, variance); masked items get variance inf.

        Noise is drawn for every item in a fixed order (lines, then buses) so that one seed
        gives the same noise under every mask.
        """
        if not case.is_derived:
            raise GridBpError(f"case '{case.name}' has no DC state; derive it first")
        injection_variance = variance if injection_variance is None else injection_variance
        if not (variance > 0 and injection_variance > 0):
            raise ConfigError("measurement variances must be positive")

        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(case.n_lines + case.n_buses)
        flow_z = case.flows + math.sqrt(variance) * noise[:case.n_lines]
        injection_z = case.injections + math.sqrt(injection_variance) * noise[case.n_lines:]

        flow = {}
        for line_id, z in zip(case.line_ids, flow_z):
            flow[line_id] = Measurement(0.0, math.inf) if line_id in mask.missing_flows \
                else Measurement(float(z), float(variance))
        injection = {}
        for bus_id, z in zip(case.bus_ids, injection_z):
            injection[bus_id] = Measurement(0.0, math.inf) if bus_id in mask.missing_injections \
                else Measurement(float(z), float(injection_variance))
        return MeasurementSet(flow=flow, injection=injection, seed=seed)

    def full_measurements(self, case, variance=DEFAULT_MEASUREMENT_VARIANCE, seed=0):
        empty = MissingMask(missing_flows=frozenset(), missing_injections=frozenset())
        return self.sample_measurements(case, empty, variance=variance, seed=seed)

    def scale_measurements(self, meas, factor):
        """z -> factor * z and variance -> factor^2 * variance."""
        def scaled(measurement):
            if measurement.missing:
                return measurement
            return Measurement(factor * measurement.z, factor ** 2 * measurement.variance)
        return MeasurementSet(flow={key: scaled(value) for key, value in meas.flow.items()},
                              injection={key: scaled(value) for key, value in meas.injection.items()},
                              seed=meas.seed)

    def retrievable_items(self, meas, bp):
        """Retrievability flags of all flows (variable order) and all injections (bus order)."""
        graph = bp.graph
        flow_flags = bp.retrievable.copy()
        injection_flags = np.empty(len(graph.bus_ids), dtype=bool)
        for position, bus_id in enumerate(graph.bus_ids):
            injection_flags[position] = self._injection_rule(graph, bus_id, meas, flow_flags)
        return flow_flags, injection_flags

    def injection_retrievable(self, bus, meas, bp):
        return self._injection_rule(bp.graph, bus, meas, bp.retrievable)

    def _injection_rule(self, graph, bus_id, meas, flow_flags):
        # measured directly, or every incident flow is retrievable
        measurement = meas.injection.get(bus_id)
        if measurement is not None and not measurement.missing:
            return True
        lines = graph.factor(KIND_INJECTION, bus_id).lines
        return all(flow_flags[graph.var_index[line_id]] for line_id in lines)

    def write_measurements(self, meas, path):
        rows = [(KIND_FLOW, key, value.z, value.variance) for key, value in meas.flow.items()]
        rows += [(KIND_INJECTION, key, value.z, value.variance) for key, value in meas.injection.items()]
        df = pd.DataFrame(rows, columns=MEASUREMENT_COLUMNS)
        with open(path, "w", newline="") as handle:
            handle.write(f"# seed={'' if meas.seed is None else meas.seed}\n")
            df.to_csv(handle, index=False, float_format="%.17g")

    def read_measurements(self, path):
        with open(path, "r") as handle:
            first = handle.readline()
        match = re.match(r"#\s*seed=(-?\d+)?", first)
        seed = int(match.group(1)) if match and match.group(1) else None

        df = pd.read_csv(path, comment="#", float_precision="round_trip")
        missing_columns = [column for column in MEASUREMENT_COLUMNS if column not in df.columns]
        if missing_columns:
            raise ConfigError(f"{path}: missing required column(s) {missing_columns}")
        flow, injection = {}, {}
        for row in df.itertuples(index=False):
            variance = float(row.variance)
            if not variance > 0:
                raise ConfigError(f"{path}: non-positive variance for {row.kind} {row.id}")
            measurement = Measurement(float(row.z) if math.isfinite(variance) else 0.0, variance)
            if row.kind == KIND_FLOW:
                flow[int(row.id)] = measurement
            elif row.kind == KIND_INJECTION:
                injection[int(row.id)] = measurement
            else:
                raise ConfigError(f"{path}: unknown measurement kind '{row.kind}'")
        return MeasurementSet(flow=flow, injection=injection, seed=seed)


def _fraction_pair(fractions):
    if isinstance(fractions, (int, float)):
        pair = (float(fractions), float(fractions))
    else:
        pair = tuple(float(value) for value in fractions)
    if len(pair) != 2 or not all(0.0 <= value <= 1.0 for value in pair):
        raise ConfigError(f"missing fractions must be one or two numbers in [0, 1], got {fractions}")
    return pair
