"""Static network model: case ingestion, scaling, and island bookkeeping.

Quantities are MW / MVAr / per-unit as noted per field. Branch and bus ids
are the case file's ids; branch ids are dense 1..N in file order so that
published branch numberings (e.g. branch 37 = line 8-30 on the 118-bus
system) are preserved. Instances are treated as immutable once built and
may be shared freely across worker processes.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Raised for unparseable case files or invariant violations."""

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n  - " + "\n  - ".join(self.problems)
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.9
    v_max: float = 1.1
    g_shunt_mw: float = 0.0  # shunt conductance, MW consumed at 1.0 p.u.
    b_shunt_mvar: float = 0.0  # shunt susceptance, MVAr injected at 1.0 p.u.
    base_kv: float = 0.0  # nominal voltage level; 0 = unspecified


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0  # total line charging, p.u.
    tap: float = 1.0  # off-nominal turns ratio; 1.0 for lines
    f_lim1: float = 10000.0  # long-term thermal limit, MW
    f_lim2: float = 15000.0  # short-term emergency limit, MW
    hidden_failure_prob: float = 0.01

    @property
    def is_transformer(self) -> bool:
        return self.tap != 1.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float = 0.0  # MW
    p_max: float = 0.0  # MW
    q_min: float = 0.0  # MVAr
    q_max: float = 0.0  # MVAr
    slack_coeff: float | None = None  # r_g; None = proportional to p_max
    p_set: float = 0.0  # initial active dispatch, MW
    v_set: float = 1.0  # voltage set-point, p.u.


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float  # MW
    q: float  # MVAr


@dataclass
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    name: str = ""

    # -- derived index helpers (cached; the case itself is immutable) --

    @cached_property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_from(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches])

    @cached_property
    def branch_to(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches])

    @cached_property
    def load_bus(self) -> np.ndarray:
        return np.array([self.bus_index[ld.bus] for ld in self.loads], dtype=np.int64)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.int64)

    @cached_property
    def load_p(self) -> np.ndarray:
        return np.array([ld.p for ld in self.loads])

    @cached_property
    def load_q(self) -> np.ndarray:
        return np.array([ld.q for ld in self.loads])

    @cached_property
    def total_load_p(self) -> float:
        return float(self.load_p.sum())

    def validate(self):
        """Check the type invariants, collecting every offending record."""
        problems = []
        if self.base_mva <= 0:
            problems.append(f"base_mva must be positive, got {self.base_mva}")
        if not self.branches:
            problems.append("no branches")
        seen = set()
        for b in self.buses:
            if b.id in seen:
                problems.append(f"duplicate bus id {b.id}")
            seen.add(b.id)
            if not (0 < b.v_min < b.v_max):
                problems.append(f"bus {b.id}: need 0 < v_min < v_max, got {b.v_min}, {b.v_max}")
        ids = self.bus_index
        for i, br in enumerate(self.branches, start=1):
            if br.id != i:
                problems.append(f"branch ids must be dense 1..N in order; position {i} has id {br.id}")
            if br.from_bus not in ids or br.to_bus not in ids:
                problems.append(f"branch {br.id}: unknown endpoint {br.from_bus}-{br.to_bus}")
            if br.from_bus == br.to_bus:
                problems.append(f"branch {br.id}: self-loop at bus {br.from_bus}")
            if br.x == 0:
                problems.append(f"branch {br.id}: zero reactance")
            if not (br.f_lim2 >= br.f_lim1 > 0):
                problems.append(f"branch {br.id}: need f_lim2 >= f_lim1 > 0, got {br.f_lim1}, {br.f_lim2}")
            if not (0.0 <= br.hidden_failure_prob <= 1.0):
                problems.append(f"branch {br.id}: hidden_failure_prob outside [0,1]")
        for g in self.generators:
            if g.bus not in ids:
                problems.append(f"generator {g.id}: unknown bus {g.bus}")
            if g.p_min > g.p_max or g.q_min > g.q_max:
                problems.append(f"generator {g.id}: inverted limits")
        for ld in self.loads:
            if ld.bus not in ids:
                problems.append(f"load {ld.id}: unknown bus {ld.bus}")
            if ld.p < 0:
                problems.append(f"load {ld.id}: negative active power")
        if problems:
            raise CaseError("case invariant violations", problems)
        return self


def case_to_dict(case: GridCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [vars(b).copy() for b in case.buses],
        "branches": [vars(br).copy() for br in case.branches],
        "generators": [vars(g).copy() for g in case.generators],
        "loads": [vars(ld).copy() for ld in case.loads],
    }


def case_from_dict(data: dict) -> GridCase:
    try:
        case = GridCase(
            buses=tuple(Bus(**b) for b in data["buses"]),
            branches=tuple(Branch(**br) for br in data["branches"]),
            generators=tuple(Generator(**g) for g in data.get("generators", [])),
            loads=tuple(Load(**ld) for ld in data.get("loads", [])),
            base_mva=float(data.get("base_mva", 100.0)),
            name=data.get("name", ""),
        )
    except (KeyError, TypeError) as exc:
        raise CaseError(f"malformed case record: {exc}") from exc
    return case.validate()


def save_case(case: GridCase, path) -> None:
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=1, sort_keys=True)
        fh.write("\n")


def case_hash(case: GridCase) -> str:
    blob = json.dumps(case_to_dict(case), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_case(path, fmt: str = "auto") -> GridCase:
    """Load a case from the native JSON schema or a MATPOWER-style text file."""
    path = str(path)
    if fmt == "auto":
        fmt = "matpower" if path.endswith(".m") else "json"
    if fmt == "json":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CaseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return case_from_dict(data)
    if fmt == "matpower":
        return _parse_matpower(path)
    raise CaseError(f"unknown case format {fmt!r}")


# MATPOWER column layouts (only the leading columns we consume).
_MP_BUS = ["BUS_I", "TYPE", "PD", "QD", "GS", "BS", "AREA", "VM", "VA", "BASE_KV", "ZONE", "VMAX", "VMIN"]
_MP_GEN = ["BUS", "PG", "QG", "QMAX", "QMIN", "VG", "MBASE", "STATUS", "PMAX", "PMIN"]
_MP_BRANCH = ["F", "T", "R", "X", "B", "RATE_A", "RATE_B", "RATE_C", "RATIO", "ANGLE", "STATUS"]


def _matpower_matrix(text: str, name: str, path: str) -> list[list[float]]:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.S)
    if not m:
        raise CaseError(f"{path}: missing matrix mpc.{name}")
    rows = []
    for lineno, line in enumerate(m.group(1).splitlines(), start=1):
        line = line.split("%")[0].strip().rstrip(";")
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise CaseError(f"{path}: mpc.{name} row {lineno}: {exc}") from exc
    return rows


def _parse_matpower(path, default_rate_mw: float = 10000.0, flim2_ratio: float = 1.5,
                    hidden_failure_prob: float = 0.01) -> GridCase:
    with open(path) as fh:
        text = fh.read()
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    base_mva = float(m.group(1)) if m else 100.0

    buses = []
    for row in _matpower_matrix(text, "bus", path):
        if len(row) < 13:
            raise CaseError(f"{path}: bus row with {len(row)} columns, expected >= 13")
        buses.append(
            Bus(
                id=int(row[0]),
                v_min=float(row[12]),
                v_max=float(row[11]),
                g_shunt_mw=float(row[4]),
                b_shunt_mvar=float(row[5]),
                base_kv=float(row[9]),
            )
        )
    loads = []
    for row in _matpower_matrix(text, "bus", path):
        pd, qd = float(row[2]), float(row[3])
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(id=len(loads) + 1, bus=int(row[0]), p=pd, q=qd))

    gens = []
    for row in _matpower_matrix(text, "gen", path):
        if int(row[7]) == 0:  # out-of-service units are dropped on import
            continue
        gens.append(
            Generator(
                id=len(gens) + 1,
                bus=int(row[0]),
                p_min=float(row[9]),
                p_max=float(row[8]),
                q_min=float(row[4]),
                q_max=float(row[3]),
                p_set=float(row[1]),
                v_set=float(row[5]),
            )
        )

    branches = []
    for row in _matpower_matrix(text, "branch", path):
        if len(row) >= 11 and int(row[10]) == 0:
            continue
        rate = float(row[5])
        f_lim1 = rate if rate > 0 else default_rate_mw
        branches.append(
            Branch(
                id=len(branches) + 1,
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=float(row[2]),
                x=float(row[3]),
                b_shunt=float(row[4]),
                tap=float(row[8]) if float(row[8]) != 0.0 else 1.0,
                f_lim1=f_lim1,
                f_lim2=flim2_ratio * f_lim1,
                hidden_failure_prob=hidden_failure_prob,
            )
        )

    return GridCase(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(gens),
        loads=tuple(loads),
        base_mva=base_mva,
        name=path.rsplit("/", 1)[-1].removesuffix(".m"),
    ).validate()


def dominant_voltage_kv(case: GridCase) -> float:
    """The most common nonzero bus voltage level, 0 if none are given."""
    levels: dict[float, int] = {}
    for b in case.buses:
        if b.base_kv > 0:
            levels[b.base_kv] = levels.get(b.base_kv, 0) + 1
    if not levels:
        return 0.0
    return max(levels, key=lambda kv: (levels[kv], -kv))


def is_transformer_class(case: GridCase, br: Branch, nominal_kv: float | None = None) -> bool:
    """Transformer classification for uniform-limit rules.

    Off-nominal equipment counts with transformers: an explicit tap, or
    endpoints away from the system's dominant voltage level.
    """
    if br.tap != 1.0:
        return True
    if nominal_kv is None:
        nominal_kv = dominant_voltage_kv(case)
    if nominal_kv <= 0:
        return False
    kv_f = case.buses[case.bus_index[br.from_bus]].base_kv
    kv_t = case.buses[case.bus_index[br.to_bus]].base_kv
    return (kv_f > 0 and kv_f != nominal_kv) or (kv_t > 0 and kv_t != nominal_kv)


def scale_case(case: GridCase, load_factor: float = 1.0, limit_factor: float = 1.0,
               uniform_limits: dict | None = None, flim2_ratio: float = 1.5) -> GridCase:
    """Scale loads and thermal limits; optionally override limits uniformly.

    ``uniform_limits`` is ``{"line_mw": x, "xfmr_mw": y}``; it sets f_lim1
    per branch class (nominal-voltage lines vs transformers and other
    off-nominal equipment) and f_lim2 = flim2_ratio * f_lim1. Otherwise
    both limits are multiplied by ``limit_factor``.
    """
    if load_factor <= 0 or limit_factor <= 0:
        raise ValueError("scale factors must be positive")
    loads = tuple(
        replace(ld, p=ld.p * load_factor, q=ld.q * load_factor) for ld in case.loads
    )
    branches = []
    nominal = dominant_voltage_kv(case)
    for br in case.branches:
        if uniform_limits is not None:
            xfmr = is_transformer_class(case, br, nominal)
            lim1 = uniform_limits["xfmr_mw"] if xfmr else uniform_limits["line_mw"]
            branches.append(replace(br, f_lim1=lim1, f_lim2=flim2_ratio * lim1))
        else:
            branches.append(
                replace(br, f_lim1=br.f_lim1 * limit_factor, f_lim2=br.f_lim2 * limit_factor)
            )
    return replace(case, loads=loads, branches=tuple(branches)).validate()


@dataclass
class Topology:
    """Current island partition plus the lineage forest accumulated so far.

    ``islands`` maps island id -> frozenset of internal bus indices for
    the *live* islands; ``lineage`` keeps every island ever created
    (id -> parent id, roots map to None). Treated as immutable.
    """

    in_service: np.ndarray  # bool, len n_branch
    island_of_bus: np.ndarray  # int64, len n_bus
    islands: dict[int, frozenset[int]]
    lineage: dict[int, int | None]
    next_id: int

    def descends_from(self, island: int, ancestor: int) -> bool:
        """True if ``island`` is ``ancestor`` or one of its descendants."""
        cur: int | None = island
        while cur is not None:
            if cur == ancestor:
                return True
            cur = self.lineage.get(cur)
        return False

    def parent_of(self, island: int) -> int | None:
        return self.lineage.get(island)


def _components(case: GridCase, in_service: np.ndarray) -> np.ndarray:
    live = np.flatnonzero(in_service)
    n = case.n_bus
    if live.size:
        f = case.branch_from[live]
        t = case.branch_to[live]
        adj = coo_matrix((np.ones(live.size), (f, t)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
    else:
        labels = np.arange(n)
    return labels


def compute_islands(case: GridCase, in_service, parent_topology: Topology | None = None) -> Topology:
    """Partition buses into islands over the in-service branches.

    With a parent topology, any island whose bus set is a proper subset of
    its (unique) parent island gets a fresh id recorded as that parent's
    child; islands identical to a parent island keep the parent's id.
    """
    in_service = np.asarray(in_service, dtype=bool)
    if in_service.shape != (case.n_branch,):
        raise ValueError("in_service mask length must equal branch count")
    labels = _components(case, in_service)
    comps: dict[int, set[int]] = {}
    for bus, lab in enumerate(labels):
        comps.setdefault(int(lab), set()).add(bus)

    island_of_bus = np.full(case.n_bus, -1, dtype=np.int64)
    islands: dict[int, frozenset[int]] = {}

    if parent_topology is None:
        lineage: dict[int, int | None] = {}
        next_id = 0
        for lab in sorted(comps, key=lambda c: min(comps[c])):
            members = frozenset(comps[lab])
            islands[next_id] = members
            lineage[next_id] = None
            for b in members:
                island_of_bus[b] = next_id
            next_id += 1
        return Topology(in_service, island_of_bus, islands, lineage, next_id)

    lineage = dict(parent_topology.lineage)
    next_id = parent_topology.next_id
    by_parent: dict[int, list[set[int]]] = {}
    for comp in comps.values():
        parent = int(parent_topology.island_of_bus[next(iter(comp))])
        by_parent.setdefault(parent, []).append(comp)
    for parent in sorted(by_parent):
        parts = sorted(by_parent[parent], key=min)
        if len(parts) == 1 and parts[0] == set(parent_topology.islands[parent]):
            iid = parent  # island unchanged (possibly fewer branches)
            members = frozenset(parts[0])
            islands[iid] = members
            for b in members:
                island_of_bus[b] = iid
            continue
        for comp in parts:
            iid = next_id
            next_id += 1
            lineage[iid] = parent
            members = frozenset(comp)
            islands[iid] = members
            for b in members:
                island_of_bus[b] = iid
    return Topology(in_service, island_of_bus, islands, lineage, next_id)


def island_branches(case: GridCase, topo: Topology, island: int) -> np.ndarray:
    """Indices (0-based) of in-service branches wholly inside ``island``."""
    members = topo.islands[island]
    sel = [
        i
        for i in np.flatnonzero(topo.in_service)
        if int(case.branch_from[i]) in members and int(case.branch_to[i]) in members
    ]
    return np.array(sel, dtype=np.int64)
