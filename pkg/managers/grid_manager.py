import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd
from scipy import sparse

from constants import *
from exceptions import CaseParseError, TopologyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bus:
    id: int
    angle: float  # radians
    injection_true: float = None  # MW, filled by derive_dc_state
    name: str = field(default="", compare=False)
    listed_injection: float = field(default=None, compare=False)  # generation - load as printed in the case file


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    susceptance: float  # per unit, 1 / reactance
    flow_true: float = None  # MW, filled by derive_dc_state


@dataclass(frozen=True)
class GridCase:
    """Buses, oriented lines and the DC ground truth of one network.

    Immutable; the index helpers below are computed once and shared.
    """
    name: str
    base_mva: float
    buses: tuple
    lines: tuple
    provenance: dict = field(default_factory=dict, compare=False, repr=False)

    @cached_property
    def bus_ids(self):
        return [bus.id for bus in self.buses]

    @cached_property
    def line_ids(self):
        return [line.id for line in self.lines]

    @cached_property
    def bus_index(self):
        return {bus_id: position for position, bus_id in enumerate(self.bus_ids)}

    @cached_property
    def line_index(self):
        return {line_id: position for position, line_id in enumerate(self.line_ids)}

    @cached_property
    def from_index(self):
        return np.array([self.bus_index[line.from_bus] for line in self.lines], dtype=int)

    @cached_property
    def to_index(self):
        return np.array([self.bus_index[line.to_bus] for line in self.lines], dtype=int)

    @property
    def n_buses(self):
        return len(self.buses)

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def is_derived(self):
        return all(line.flow_true is not None for line in self.lines) and \
            all(bus.injection_true is not None for bus in self.buses)

    @cached_property
    def degrees(self):
        """Number of incident lines per bus, in bus order."""
        counts = np.bincount(self.from_index, minlength=self.n_buses) + \
            np.bincount(self.to_index, minlength=self.n_buses)
        return counts.astype(int)

    @cached_property
    def incident_lines(self):
        """bus id -> list of (line id, sign), sign +1 when the line leaves the bus."""
        incidence = {bus_id: [] for bus_id in self.bus_ids}
        for line in self.lines:
            incidence[line.from_bus].append((line.id, 1))
            incidence[line.to_bus].append((line.id, -1))
        return incidence

    @cached_property
    def neighbor_buses(self):
        neighbors = {bus_id: set() for bus_id in self.bus_ids}
        for line in self.lines:
            neighbors[line.from_bus].add(line.to_bus)
            neighbors[line.to_bus].add(line.from_bus)
        return {bus_id: sorted(values) for bus_id, values in neighbors.items()}

    @property
    def angles(self):
        return np.array([bus.angle for bus in self.buses], dtype=float)

    @property
    def susceptances(self):
        return np.array([line.susceptance for line in self.lines], dtype=float)

    @property
    def flows(self):
        return np.array([line.flow_true for line in self.lines], dtype=float)

    @property
    def injections(self):
        return np.array([bus.injection_true for bus in self.buses], dtype=float)


class GridManager:
    def __init__(self):
        # Fixed columns of the IEEE Common Data Format, 0-based [start, end)
        self.title_data_map = {
            "mva_base": {"start": 31, "end": 37, "format_func": float},
            "case_id": {"start": 45, "end": 73, "format_func": str.strip},
        }

        self.bus_data_map = {
            "bus_num": {"start": 0, "end": 4, "format_func": int},
            "bus_name": {"start": 5, "end": 17, "format_func": str.strip},
            "theta": {"start": 33, "end": 40, "format_func": lambda x: math.radians(float(x))},
            "load_p": {"start": 40, "end": 49, "format_func": float},
            "gen_p": {"start": 59, "end": 67, "format_func": float},
        }

        self.branch_data_map = {
            "tap_bus_num": {"start": 0, "end": 4, "format_func": int},
            # 4-digit bus numbers occupy column 6 in the larger cases
            "z_bus_num": {"start": 5, "end": 9, "format_func": int},
            "circuit": {"start": 16, "end": 17, "format_func": _int_or_zero},
            "type": {"start": 18, "end": 19, "format_func": _int_or_zero},
            "R": {"start": 19, "end": 29, "format_func": float},
            "X": {"start": 29, "end": 40, "format_func": float},
            "final_ratio": {"start": 76, "end": 82, "format_func": _float_or_zero},
            "final_angle": {"start": 83, "end": 90, "format_func": _float_or_zero},
        }

    def _parse_line(self, mapping, line, line_number, path):
        parsed_line = {}
        for data_name, parse_info in mapping.items():
            chunk = line[parse_info["start"]:parse_info["end"]]
            try:
                parsed_line[data_name] = parse_info["format_func"](chunk)
            except ValueError:
                raise CaseParseError(f"could not parse field '{data_name}' from {chunk!r}",
                                     line_number=line_number, path=path) from None
        return parsed_line

    def import_cdf(self, path, warnings_fn=None):
        """Read an IEEE Common Data Format file into a GridCase (angles only, no derived state)."""
        path = Path(path)
        with open(path, "r") as source_file:
            raw_lines = source_file.read().splitlines()

        title_data = None
        section = None
        bus_records = []
        branch_records = []
        for line_number, line in enumerate(raw_lines, start=1):
            if line.strip() == "":
                continue
            if title_data is None:
                title_data = self._parse_title(line)
                continue
            if section is None:
                if line.startswith("BUS DATA FOLLOWS"):
                    section = "bus"
                elif line.startswith("BRANCH DATA FOLLOWS"):
                    section = "branch"
                continue
            if line.strip().startswith("-999"):
                section = "done" if section == "branch" else None
                if section == "done":
                    break
                continue
            if section == "bus":
                bus_records.append((line_number, self._parse_line(self.bus_data_map, line, line_number, path)))
            elif section == "branch":
                branch_records.append((line_number, self._parse_line(self.branch_data_map, line, line_number, path)))

        if title_data is None or not bus_records:
            raise CaseParseError("no bus data section found", path=path)
        if not branch_records:
            raise CaseParseError("no branch data section found", path=path)

        angles = {}
        names = {}
        listed = {}
        for line_number, record in bus_records:
            bus_id = record["bus_num"]
            if bus_id in angles:
                raise CaseParseError(f"duplicate bus {bus_id}", line_number=line_number, path=path)
            angles[bus_id] = record["theta"]
            names[bus_id] = record["bus_name"]
            listed[bus_id] = record["gen_p"] - record["load_p"]

        branches = []
        phase_shifters = []
        for line_number, record in branch_records:
            from_bus, to_bus, reactance = record["tap_bus_num"], record["z_bus_num"], record["X"]
            if reactance == 0.0:
                raise CaseParseError(f"branch {from_bus}-{to_bus} has zero reactance",
                                     line_number=line_number, path=path)
            if record["final_angle"] != 0.0:
                phase_shifters.append((from_bus, to_bus))
                message = MESSAGES["phase_shift_ignored"].format(angle=record["final_angle"],
                                                                 from_bus=from_bus, to_bus=to_bus)
                logger.info(message)
            branches.append((from_bus, to_bus, 1.0 / reactance, line_number))

        name = title_data.get("case_id") or path.stem
        case = self._assemble(name, title_data.get("mva_base", 100.0), angles, branches, path=path,
                              warnings_fn=warnings_fn)
        names_filled = tuple(replace(bus, name=names[bus.id], listed_injection=listed[bus.id]) for bus in case.buses)
        provenance = dict(case.provenance, source=str(path), phase_shifters=phase_shifters)
        return replace(case, buses=names_filled, provenance=provenance)

    def _parse_title(self, line):
        title = {}
        for data_name, parse_info in self.title_data_map.items():
            try:
                title[data_name] = parse_info["format_func"](line[parse_info["start"]:parse_info["end"]])
            except ValueError:
                logger.debug("Title field %s unreadable in %r", data_name, line)
        return title

    def _assemble(self, name, base_mva, angles, branches, path=None, warnings_fn=None):
        # branches: (from, to, susceptance, source line number or None), merged per unordered bus pair
        merged = {}
        merged_pairs = []
        for from_bus, to_bus, susceptance, line_number in branches:
            for endpoint in (from_bus, to_bus):
                if endpoint not in angles:
                    raise TopologyError(f"line {from_bus}-{to_bus} refers to unknown bus {endpoint}"
                                        + (f" ({path}:{line_number})" if line_number else ""))
            if from_bus == to_bus:
                raise TopologyError(f"line {from_bus}-{to_bus} connects a bus to itself")
            if susceptance < 0:
                message = MESSAGES["negative_reactance"].format(from_bus=from_bus, to_bus=to_bus, x=1.0 / susceptance)
                logger.warning(message)
                if warnings_fn:
                    warnings_fn(message)
            key = frozenset((from_bus, to_bus))
            if key in merged:
                first_from, first_to, total = merged[key]
                # a reversed parallel circuit carries the same flow orientation with the same sign of b
                merged[key] = (first_from, first_to, total + susceptance)
                merged_pairs.append((first_from, first_to))
            else:
                merged[key] = (from_bus, to_bus, susceptance)

        if merged_pairs:
            message = MESSAGES["parallel_merged"].format(count=len(merged_pairs), pairs=merged_pairs)
            logger.info(message)
            if warnings_fn:
                warnings_fn(message)

        buses = tuple(Bus(id=bus_id, angle=float(angle)) for bus_id, angle in angles.items())
        lines = []
        for position, (from_bus, to_bus, susceptance) in enumerate(merged.values(), start=1):
            if susceptance == 0.0:
                raise TopologyError(f"parallel circuits {from_bus}-{to_bus} cancel to zero susceptance")
            lines.append(Line(id=position, from_bus=from_bus, to_bus=to_bus, susceptance=float(susceptance)))
        provenance = {"branch_records": len(branches), "merged_pairs": merged_pairs}
        return GridCase(name=name, base_mva=float(base_mva), buses=buses, lines=tuple(lines), provenance=provenance)

    def build_case(self, name, angles, branches, base_mva=100.0, derive=True, warnings_fn=None):
        """Construct a case in memory.

        angles: bus id -> angle in radians; branches: (from, to, susceptance) triples.
        """
        records = [(from_bus, to_bus, float(susceptance), None) for from_bus, to_bus, susceptance in branches]
        case = self._assemble(name, base_mva, dict(angles), records, warnings_fn=warnings_fn)
        return self.derive_dc_state(case, warnings_fn=warnings_fn) if derive else case

    def load_case(self, path, warnings_fn=None):
        case = self.derive_dc_state(self.import_cdf(path, warnings_fn=warnings_fn), warnings_fn=warnings_fn)
        logger.info(MESSAGES["case_loaded"].format(name=case.name, buses=case.n_buses, lines=case.n_lines,
                                                   records=case.provenance.get("branch_records", case.n_lines)))
        return case

    def incidence_matrix(self, case):
        """Signed bus x line incidence: +1 where the line leaves the bus, -1 where it enters."""
        columns = np.arange(case.n_lines)
        rows = np.concatenate([case.from_index, case.to_index])
        values = np.concatenate([np.ones(case.n_lines), -np.ones(case.n_lines)])
        return sparse.csr_matrix((values, (rows, np.concatenate([columns, columns]))),
                                 shape=(case.n_buses, case.n_lines))

    def derive_dc_state(self, case, warnings_fn=None):
        angles = case.angles
        flows = case.base_mva * case.susceptances * (angles[case.from_index] - angles[case.to_index])
        injections = self.incidence_matrix(case) @ flows

        imbalance = float(np.sum(injections))
        limit = IMBALANCE_TOLERANCE * case.base_mva
        if abs(imbalance) > limit:
            message = MESSAGES["imbalance"].format(imbalance=imbalance, limit=limit)
            logger.warning(message)
            if warnings_fn:
                warnings_fn(message)

        lines = tuple(replace(line, flow_true=float(flow)) for line, flow in zip(case.lines, flows))
        buses = tuple(replace(bus, injection_true=float(injection)) for bus, injection in zip(case.buses, injections))
        return replace(case, buses=buses, lines=lines)

    def to_networkx(self, case):
        graph = nx.Graph(name=case.name)
        graph.add_nodes_from(case.bus_ids)
        for line in case.lines:
            graph.add_edge(line.from_bus, line.to_bus, line_id=line.id, susceptance=line.susceptance)
        return graph

    def components(self, case):
        """Connected components as sorted bus-id lists, ordered by their smallest bus."""
        graph = self.to_networkx(case)
        return sorted((sorted(component) for component in nx.connected_components(graph)), key=lambda c: c[0])

    def topology_stats(self, case):
        component_count = len(self.components(case))
        degrees = case.degrees
        histogram = dict(sorted(Counter(int(degree) for degree in degrees).items()))
        return {
            "buses": case.n_buses,
            "lines": case.n_lines,
            "component_count": component_count,
            "loop_count": case.n_lines - case.n_buses + component_count,
            "degree_histogram": histogram,
            "mean_degree": float(np.mean(degrees)) if len(degrees) else 0.0,
            "max_degree": int(np.max(degrees)) if len(degrees) else 0,
        }

    def bus_table(self, case):
        return pd.DataFrame({
            "bus_id": case.bus_ids,
            "degree": case.degrees,
            "injection": [bus.injection_true for bus in case.buses],
            "listed_injection": [bus.listed_injection for bus in case.buses],
        })

    def line_table(self, case):
        return pd.DataFrame({
            "line_id": case.line_ids,
            "from_bus": [line.from_bus for line in case.lines],
            "to_bus": [line.to_bus for line in case.lines],
            "susceptance": [line.susceptance for line in case.lines],
            "flow": [line.flow_true for line in case.lines],
        })

    def heterogeneity(self, case):
        """Spread of degree, injection, susceptance and flow over the case, one row per quantity."""
        buses, lines = self.bus_table(case), self.line_table(case)
        samples = {
            "degree": buses["degree"].astype(float),
            "injection": buses["injection"].astype(float),
            "abs_injection": buses["injection"].astype(float).abs(),
            "susceptance": lines["susceptance"].astype(float),
            "abs_flow": lines["flow"].astype(float).abs(),
        }
        df = pd.DataFrame({name: values.describe() for name, values in samples.items()}).T
        df.index.name = "quantity"
        return df.reset_index()

    def spanning_tree(self, case, seed=0):
        """Seeded random spanning forest of the case, with the DC state re-derived on it."""
        rng = np.random.default_rng(seed)
        graph = self.to_networkx(case)
        for _, _, data in graph.edges(data=True):
            data["weight"] = rng.random()
        kept = {data["line_id"] for _, _, data in nx.minimum_spanning_edges(graph, data=True)}
        tree = replace(case, name=f"{case.name} tree {seed}",
                       lines=tuple(line for line in case.lines if line.id in kept),
                       provenance=dict(case.provenance, spanning_tree_seed=seed))
        return self.derive_dc_state(tree)

    def write_snapshot(self, case, path):
        with open(path, "w") as handle:
            handle.write(SNAPSHOT_HEADER + "\n")
            handle.write(f"name {case.name}\n")
            handle.write(f"base_mva {case.base_mva!r}\n")
            for bus in case.buses:
                handle.write(f"bus {bus.id} {bus.angle!r} {_token(bus.injection_true)}\n")
            for line in case.lines:
                handle.write(f"line {line.id} {line.from_bus} {line.to_bus} {line.susceptance!r} "
                             f"{_token(line.flow_true)}\n")

    def read_snapshot(self, path):
        name, base_mva, buses, lines = None, None, [], []
        with open(path, "r") as handle:
            for line_number, raw in enumerate(handle, start=1):
                raw = raw.rstrip("\n")
                if not raw or raw.startswith("#"):
                    continue
                keyword, _, rest = raw.partition(" ")
                fields = rest.split()
                try:
                    if keyword == "name":
                        name = rest
                    elif keyword == "base_mva":
                        base_mva = float(fields[0])
                    elif keyword == "bus":
                        buses.append(Bus(id=int(fields[0]), angle=float(fields[1]),
                                         injection_true=_value(fields[2])))
                    elif keyword == "line":
                        lines.append(Line(id=int(fields[0]), from_bus=int(fields[1]), to_bus=int(fields[2]),
                                          susceptance=float(fields[3]), flow_true=_value(fields[4])))
                    else:
                        raise CaseParseError(f"unknown record '{keyword}'", line_number=line_number, path=path)
                except (IndexError, ValueError):
                    raise CaseParseError(f"malformed {keyword} record", line_number=line_number, path=path) from None
        if name is None or base_mva is None:
            raise CaseParseError("snapshot lacks name or base_mva", path=path)
        known = {bus.id for bus in buses}
        for line in lines:
            if line.from_bus not in known or line.to_bus not in known:
                raise TopologyError(f"line {line.id} refers to an unknown bus")
        return GridCase(name=name, base_mva=base_mva, buses=tuple(buses), lines=tuple(lines),
                        provenance={"source": str(path)})


def _int_or_zero(chunk):
    return int(chunk) if chunk.strip() else 0


def _float_or_zero(chunk):
    return float(chunk) if chunk.strip() else 0.0


def _token(value):
    return "nan" if value is None else repr(value)


def _value(token):
    value = float(token)
    return None if math.isnan(value) else value
