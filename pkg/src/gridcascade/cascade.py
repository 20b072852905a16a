"""Stochastic cascading-failure simulator.

One sample (a cascading failure chain, CFC) starts from a random initial
branch outage set and propagates stage by stage: per island, a power flow
is solved, overloaded branches trip probabilistically (linear in loading
between the long-term and emergency limits, certain beyond the emergency
limit), branches adjacent to recent failures may trip as hidden failures,
and islands where nothing tripped are secured by the emergent dispatch
and leave the simulation. Island splits are tracked as a lineage forest
so interaction statistics can honor cause-effect structure.

Sampling is deterministic: sample ``i`` of a batch draws from streams
seeded by (master_seed, i), so batches are reproducible regardless of
worker count and a longer batch extends a shorter one exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .acpf import (
    SystemState,
    build_island_system,
    collapse_fallback,
    dead_island_state,
    rebalance_island,
    solve_power_flow,
)
from .dispatch import dc_minmax_dispatch, emergent_dispatch, violation_summary
from .grid import GridCase, Topology, case_hash, compute_islands

CAUSE_INITIAL = "initial"
CAUSE_OVERLOAD = "overload"
CAUSE_EMERGENCY = "emergency"
CAUSE_HIDDEN = "hidden"


@dataclass(frozen=True)
class OutageEvent:
    branch: int  # branch id (case numbering, 1-based)
    stage: int
    island: int
    cause: str


@dataclass
class CascadeRecord:
    sample: int
    events: list[OutageEvent]
    lineage: dict[int, int | None]
    losses: dict[tuple[int, int], float]  # (island, stage) -> MW shed
    total_loss: float
    capped: bool = False

    def loss_from(self, island: int, stage: int, inclusive: bool = True) -> float:
        """MW shed from ``stage`` onward in ``island`` and its descendants."""
        cut = stage if inclusive else stage + 1
        total = 0.0
        for (isl, st), mw in self.losses.items():
            if st >= cut and _descends(self.lineage, isl, island):
                total += mw
        return total

    def events_by_stage(self) -> dict[int, list[OutageEvent]]:
        grouped: dict[int, list[OutageEvent]] = {}
        for ev in self.events:
            grouped.setdefault(ev.stage, []).append(ev)
        return grouped


def _descends(lineage: dict[int, int | None], island: int, ancestor: int) -> bool:
    cur: int | None = island
    while cur is not None:
        if cur == ancestor:
            return True
        cur = lineage.get(cur)
    return False


@dataclass
class SimulationConfig:
    n_samples: int = 1000
    initial_policy: str = "uniform-n2"  # or "independent"
    initial_prob: float | list[float] = 0.001  # for the independent policy
    hidden_failure_default: float | None = None  # None = per-branch case values
    flim2_ratio: float | None = None  # None = keep the case's f_lim2
    max_stages: int = 50
    master_seed: int = 0
    dispatch_mode: str = "every-quiet-stage"  # or "once-per-island"; equivalent
    #   here because a dispatch either secures the island (it terminates) or
    #   blacks it out -- kept as a knob for experimentation.

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")
        if self.initial_policy not in ("uniform-n2", "independent"):
            raise ValueError(f"unknown initial policy {self.initial_policy!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        return cls(**data).validate()


def apply_config_overrides(case: GridCase, config: SimulationConfig) -> GridCase:
    """Fold the config's hidden-failure and emergency-limit rules into a case."""
    branches = []
    for br in case.branches:
        kw = {}
        if config.hidden_failure_default is not None:
            kw["hidden_failure_prob"] = config.hidden_failure_default
        if config.flim2_ratio is not None:
            kw["f_lim2"] = config.flim2_ratio * br.f_lim1
        branches.append(replace(br, **kw) if kw else br)
    return replace(case, branches=tuple(branches))


def branch_failure_prob(f_l: float, f_lim1: float, f_lim2: float) -> float:
    """Piecewise-linear tripping probability of a loaded branch."""
    if not (0 < f_lim1 <= f_lim2):
        raise ValueError("need 0 < f_lim1 <= f_lim2")
    if f_l <= f_lim1:
        return 0.0
    if f_l > f_lim2:
        return 1.0
    if f_lim2 == f_lim1:
        return 1.0  # degenerate step; f_l > f_lim1 here
    return (f_l - f_lim1) / (f_lim2 - f_lim1)


def sample_initial_outages(case: GridCase, policy, rng: np.random.Generator,
                           initial_prob=0.001) -> list[int]:
    """Draw the triggering outage set (branch ids)."""
    n = case.n_branch
    if policy == "uniform-n2":
        if n < 2:
            raise ValueError("uniform N-2 policy needs at least two branches")
        pair = rng.choice(n, size=2, replace=False)
        return sorted(int(b) + 1 for b in pair)
    if policy == "independent":
        probs = np.asarray(initial_prob, dtype=float)
        if probs.ndim == 0:
            probs = np.full(n, float(probs))
        if probs.shape != (n,):
            raise ValueError("initial_prob must be scalar or per-branch")
        while True:
            draws = rng.random(n) < probs
            if draws.any():
                return [int(b) + 1 for b in np.flatnonzero(draws)]
    raise ValueError(f"unknown initial policy {policy!r}")


def sample_sequent_outages(
    state: SystemState,
    case: GridCase,
    exposed: set[int],
    rng: np.random.Generator,
) -> list[OutageEvent]:
    """Draw this stage's dependent outages inside one island.

    Every in-service island branch trips with the loading-based
    probability (cause "overload", or "emergency" when certain); then
    every exposed branch (the given set, plus branches sharing a bus with
    a branch that tripped just now) trips with its own hidden-failure
    probability. Stage is filled in by the caller.
    """
    events: list[OutageEvent] = []
    tripped: set[int] = set()
    lim_trips: list[int] = []
    for k, bi in enumerate(state.branch_ids):
        br = case.branches[bi]
        p = branch_failure_prob(state.branch_flow[k], br.f_lim1, br.f_lim2)
        if p <= 0.0:
            continue
        if rng.random() < p:
            cause = CAUSE_EMERGENCY if p >= 1.0 else CAUSE_OVERLOAD
            events.append(OutageEvent(br.id, -1, state.island, cause))
            tripped.add(br.id)
            lim_trips.append(int(bi))

    # Branches touching a bus of a fresh failure join the exposed set.
    exposed_now = set(exposed)
    if lim_trips:
        hot_buses = set()
        for bi in lim_trips:
            hot_buses.add(int(case.branch_from[bi]))
            hot_buses.add(int(case.branch_to[bi]))
        for bi in state.branch_ids:
            if int(case.branch_from[bi]) in hot_buses or int(case.branch_to[bi]) in hot_buses:
                exposed_now.add(int(bi) + 1)

    in_island = {int(bi) + 1 for bi in state.branch_ids}
    for bid in sorted(exposed_now):
        if bid in tripped or bid not in in_island:
            continue
        br = case.branches[bid - 1]
        if rng.random() < br.hidden_failure_prob:
            events.append(OutageEvent(bid, -1, state.island, CAUSE_HIDDEN))
            tripped.add(bid)
    return events


@dataclass
class BasePoint:
    """Pre-contingency operating point shared by all samples of a batch."""

    topo: Topology
    states: dict[int, SystemState]
    gen_p: np.ndarray  # MW per generator
    gen_online: np.ndarray
    shed: np.ndarray  # retained fraction per load
    base_shed_mw: float  # load shed to secure the base point (not cascade loss)


def prepare_base(case: GridCase, config: SimulationConfig,
                 margins: tuple[float, ...] = (0.90, 0.95, 1.0)) -> BasePoint:
    """Solve and secure the pre-contingency operating point.

    Generation is ramped to meet load, then the emergent dispatch clears
    limit violations, standing in for the optimal-power-flow initial
    point. Dispatch is attempted at tightened flow limits first and the
    widest margin achievable *without shedding* is kept, mirroring the
    security headroom a planning dispatch leaves.
    """
    topo = compute_islands(case, np.ones(case.n_branch, dtype=bool))
    gen_p = np.array([g.p_set for g in case.generators])
    gen_online = np.ones(len(case.generators), dtype=bool)
    shed = np.ones(len(case.loads))
    states: dict[int, SystemState] = {}
    base_shed = 0.0
    for island in sorted(topo.islands):
        # Flatten branch loadings first (the planning-dispatch analogue),
        # then let the security dispatch clean up what the DC view missed.
        flat = dc_minmax_dispatch(case, topo, island, gen_online, shed)
        if flat is not None:
            ids = [
                g for g in range(len(case.generators))
                if gen_online[g] and int(case.gen_bus[g]) in topo.islands[island]
            ]
            gen_p[ids] = flat
        tgt = rebalance_island(case, topo, island, gen_online, gen_p, shed)
        gen_online, shed = tgt.gen_online, tgt.shed
        base_shed += tgt.shed_delta_mw
        if tgt.blackout:
            states[island] = dead_island_state(case, topo, island, shed)
            continue
        sys = build_island_system(case, topo, island)
        state = solve_power_flow(case, topo, island, tgt, sys=sys)
        if not state.converged:
            state, tgt2 = collapse_fallback(case, topo, island, gen_online, gen_p, shed, sys=sys)
            gen_online, shed = tgt2.gen_online, tgt2.shed
        served0 = state.served_load_mw(case)
        sol = None
        for margin in margins:
            cand = emergent_dispatch(
                case, topo, island, state, gen_online, shed,
                sys=sys, limit_scale=margin, max_outer=60,
            )
            # Prefer headroom, but not at the price of real load cuts:
            # accept a margin costing at most 1% of the island's load.
            if cand.feasible and (cand.shed_delta_mw <= 0.01 * served0 or margin == margins[-1]):
                sol = cand
                break
        if sol is None:
            sol = emergent_dispatch(case, topo, island, state, gen_online, shed, sys=sys)
        served_before = state.served_load_mw(case)
        base_shed += max(0.0, served_before - sol.state.served_load_mw(case))
        gen_online, shed = sol.gen_online, sol.shed
        states[island] = sol.state
        if sol.state.gen_ids.size:
            gen_p[sol.state.gen_ids] = sol.state.p_gen
    return BasePoint(topo, states, gen_p, gen_online, shed, base_shed)


@dataclass
class _Warm:
    bus_ids: np.ndarray
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_loss: float
    converged: bool = True
    dead: bool = False


def _warm_for(state: SystemState | None, buses: np.ndarray) -> _Warm | None:
    if state is None or state.dead or not state.converged:
        return None
    pos = np.searchsorted(state.bus_ids, buses)
    if np.any(pos >= state.bus_ids.size) or not np.array_equal(state.bus_ids[pos], buses):
        return None
    return _Warm(buses, state.v_mag[pos].copy(), state.v_ang[pos].copy(), state.p_loss)


def _served(case: GridCase, topo: Topology, island: int, shed: np.ndarray) -> float:
    members = topo.islands[island]
    return float(
        sum(case.load_p[i] * shed[i] for i in range(len(case.loads)) if int(case.load_bus[i]) in members)
    )


def run_cascade(case: GridCase, config: SimulationConfig, sample_index: int,
                base: BasePoint | None = None) -> CascadeRecord:
    """Simulate one cascading failure chain; deterministic in
    (master_seed, sample_index)."""
    config.validate()
    if base is None:
        base = prepare_base(case, config)
    rng_init = np.random.default_rng(
        np.random.SeedSequence((config.master_seed, sample_index, 0))
    )
    rng_prop = np.random.default_rng(
        np.random.SeedSequence((config.master_seed, sample_index, 1))
    )

    initial = sample_initial_outages(case, config.initial_policy, rng_init, config.initial_prob)
    events: list[OutageEvent] = []
    losses: dict[tuple[int, int], float] = {}

    in_service = base.topo.in_service.copy()
    for bid in initial:
        events.append(
            OutageEvent(bid, 0, int(base.topo.island_of_bus[case.branch_from[bid - 1]]), CAUSE_INITIAL)
        )
        in_service[bid - 1] = False

    topo = compute_islands(case, in_service, base.topo)
    shed = base.shed.copy()
    gen_online = base.gen_online.copy()
    gen_p = base.gen_p.copy()

    warm: dict[int, SystemState | _Warm] = {}
    for island, members in topo.islands.items():
        parent = island if island in base.states else topo.parent_of(island)
        src = base.states.get(parent) if parent is not None else None
        w = _warm_for(src, np.array(sorted(members), dtype=np.int64))
        if w is not None:
            warm[island] = w

    active = sorted(topo.islands)
    capped = False
    stage = 1
    while active:
        if stage > config.max_stages:
            capped = True
            break
        trips: list[int] = []
        tripped_islands: set[int] = set()
        prev_fail_buses = _failure_buses(case, events, stage - 1)
        for island in active:
            served0 = _served(case, topo, island, shed)
            tgt = rebalance_island(case, topo, island, gen_online, gen_p, shed)
            gen_online, shed = tgt.gen_online, tgt.shed
            if tgt.blackout:
                _note_loss(losses, island, stage, served0 - _served(case, topo, island, shed))
                continue
            sys = build_island_system(case, topo, island)
            w = warm.get(island)
            state = solve_power_flow(case, topo, island, tgt, warm=w, sys=sys)
            if not state.converged and w is not None:
                # A stale warm start can sink Newton after a big topology
                # change; retry cold before treating it as collapse.
                state = solve_power_flow(case, topo, island, tgt, sys=sys)
            if not state.converged:
                state, tgt2 = collapse_fallback(
                    case, topo, island, gen_online, gen_p, shed, warm=warm.get(island), sys=sys
                )
                gen_online, shed = tgt2.gen_online, tgt2.shed
            if state.dead:
                _note_loss(losses, island, stage, served0 - _served(case, topo, island, shed))
                continue
            if state.gen_ids.size:
                gen_p[state.gen_ids] = state.p_gen

            exposed = {
                int(bi) + 1
                for bi in state.branch_ids
                if int(case.branch_from[bi]) in prev_fail_buses
                or int(case.branch_to[bi]) in prev_fail_buses
            }
            outages = sample_sequent_outages(state, case, exposed, rng_prop)
            if outages:
                for ev in outages:
                    events.append(OutageEvent(ev.branch, stage, island, ev.cause))
                    trips.append(ev.branch)
                tripped_islands.add(island)
                warm[island] = state
                _note_loss(losses, island, stage, served0 - _served(case, topo, island, shed))
                continue

            sol = emergent_dispatch(case, topo, island, state, gen_online, shed, sys=sys)
            gen_online, shed = sol.gen_online, sol.shed
            if sol.state.gen_ids.size:
                gen_p[sol.state.gen_ids] = sol.state.p_gen
            _note_loss(losses, island, stage, served0 - _served(case, topo, island, shed))
            # Feasible dispatch (or a blackout) retires the island either way.

        if trips:
            for bid in trips:
                in_service[bid - 1] = False
            new_topo = compute_islands(case, in_service, topo)
            next_active = []
            next_warm: dict[int, SystemState | _Warm] = {}
            for island, members in new_topo.islands.items():
                parent = new_topo.parent_of(island)
                src_id = island if island in topo.islands else parent
                if src_id in tripped_islands:
                    next_active.append(island)
                    w = _warm_for(warm.get(src_id), np.array(sorted(members), dtype=np.int64))
                    if w is not None:
                        next_warm[island] = w
            topo = new_topo
            warm = next_warm
            active = sorted(next_active)
        else:
            active = []
        stage += 1

    total = sum(losses.values())
    return CascadeRecord(
        sample=sample_index,
        events=events,
        lineage=dict(topo.lineage),
        losses=losses,
        total_loss=total,
        capped=capped,
    )


def _note_loss(losses, island, stage, mw):
    if mw > 1e-9:
        losses[(island, stage)] = losses.get((island, stage), 0.0) + mw


def _failure_buses(case: GridCase, events: list[OutageEvent], stage: int) -> set[int]:
    buses: set[int] = set()
    for ev in events:
        if ev.stage == stage:
            bi = ev.branch - 1
            buses.add(int(case.branch_from[bi]))
            buses.add(int(case.branch_to[bi]))
    return buses


# ---------------------------------------------------------------------------
# Batch running and persistence
# ---------------------------------------------------------------------------

_POOL_CTX: dict = {}


def _pool_init(case, config, base):
    _POOL_CTX["case"] = case
    _POOL_CTX["config"] = config
    _POOL_CTX["base"] = base


def _pool_run(idx):
    return run_cascade(_POOL_CTX["case"], _POOL_CTX["config"], idx, _POOL_CTX["base"])


def run_batch(case: GridCase, config: SimulationConfig, workers: int = 1,
              progress=None) -> tuple[list[CascadeRecord], dict]:
    """Run the configured number of samples; results are worker-count
    invariant. Returns (records, summary) with CFR = mean loss in MW."""
    config.validate()
    base = prepare_base(case, config)
    indices = range(config.n_samples)
    if workers <= 1:
        records = []
        for i in indices:
            records.append(run_cascade(case, config, i, base))
            if progress is not None:
                progress(i + 1, config.n_samples)
    else:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(
            workers, initializer=_pool_init, initargs=(case, config, base)
        ) as pool:
            records = []
            for rec in pool.imap(_pool_run, indices, chunksize=64):
                records.append(rec)
                if progress is not None:
                    progress(len(records), config.n_samples)
    records.sort(key=lambda r: r.sample)
    losses = np.array([r.total_loss for r in records])
    summary = {
        "n_samples": int(config.n_samples),
        "cfr_mw": float(losses.mean()),
        "loss_std_mw": float(losses.std(ddof=1)) if losses.size > 1 else 0.0,
        "max_loss_mw": float(losses.max()),
        "capped_samples": int(sum(r.capped for r in records)),
        "base_shed_mw": float(base.base_shed_mw),
    }
    return records, summary


def record_to_json(rec: CascadeRecord) -> str:
    return json.dumps(
        {
            "sample": rec.sample,
            "events": [[e.branch, e.stage, e.island, e.cause] for e in rec.events],
            "lineage": [[k, -1 if v is None else v] for k, v in sorted(rec.lineage.items())],
            "losses": [[i, s, mw] for (i, s), mw in sorted(rec.losses.items())],
            "total_loss": rec.total_loss,
            "capped": rec.capped,
        },
        sort_keys=True,
    )


def record_from_json(line: str) -> CascadeRecord:
    d = json.loads(line)
    return CascadeRecord(
        sample=d["sample"],
        events=[OutageEvent(b, s, i, c) for b, s, i, c in d["events"]],
        lineage={k: (None if v == -1 else v) for k, v in d["lineage"]},
        losses={(i, s): mw for i, s, mw in d["losses"]},
        total_loss=d["total_loss"],
        capped=d["capped"],
    )


def save_batch(path, case: GridCase, config: SimulationConfig,
               records: list[CascadeRecord], summary: dict) -> None:
    """Line-delimited batch file: a header record then one CFC per line."""
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "case_hash": case_hash(case),
            "case_name": case.name,
            "total_load_mw": case.total_load_p,
            "config": config.to_dict(),
            "summary": summary,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def load_batch(path) -> tuple[dict, list[CascadeRecord]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: missing batch header line")
        records = [record_from_json(line) for line in fh if line.strip()]
    return header, records
