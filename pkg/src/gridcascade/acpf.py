"""Newton-Raphson AC power flow with distributed (multi-slack) loss sharing.

Per-island solves: each island gets its own admittance matrix, PV/PQ
classification and angle reference (the generator bus with the largest
total capacity). Transmission losses are shared by the online generators
in proportion to their slack coefficients; the loss total is resolved by
an outer fixed-point around the Newton iteration. Non-convergence is
reported, not raised -- the caller decides between the uniform-shedding
collapse fallback and harder measures.

All functions are pure with respect to their inputs, so islands and
samples can be solved concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import GridCase, Topology, island_branches

MISMATCH_TOL = 1e-8  # p.u.
MAX_NR_ITER = 30
LOSS_FP_TOL = 1e-7  # p.u. change in island losses between outer rounds;
#   comfortably inside the 1e-6 p.u. island power-balance budget


@dataclass
class SystemState:
    """Electrical solution of one island (local vectors + global indices)."""

    island: int
    bus_ids: np.ndarray  # internal bus indices, sorted ascending
    v_mag: np.ndarray  # p.u., per island bus
    v_ang: np.ndarray  # rad
    gen_ids: np.ndarray  # positions into case.generators (online, in island)
    p_gen: np.ndarray  # MW
    q_gen: np.ndarray  # MVAr
    load_ids: np.ndarray  # positions into case.loads (in island)
    shed_fraction: np.ndarray  # 1 - k_d per island load
    branch_ids: np.ndarray  # positions into case.branches (in service, in island)
    branch_flow: np.ndarray  # MW-scale apparent power at the heavier end
    p_loss: float  # MW
    converged: bool
    iterations: int = 0
    dead: bool = False  # fully de-energized island
    pq_switched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    #   local indices of generator buses that hit a Q limit and were solved
    #   as PQ; exposed so follow-up linearizations match the solved system
    pq_switched_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    #   the aggregate reactive output each switched bus was pinned at (p.u.)
    p_target: np.ndarray = field(default_factory=lambda: np.zeros(0))
    #   the pre-loss-share dispatch targets (MW) this state was solved for;
    #   follow-up redispatch must step in this space, p_gen = target + share

    def served_load_mw(self, case: GridCase) -> float:
        if self.load_ids.size == 0:
            return 0.0
        return float(np.sum(case.load_p[self.load_ids] * (1.0 - self.shed_fraction)))


@dataclass
class DispatchTargets:
    """Active-power set points produced by island rebalancing."""

    island: int
    gen_ids: np.ndarray  # online generators in the island
    p_target: np.ndarray  # MW, sums to the island's served load
    shed: np.ndarray  # updated retained fraction k_d, full-length per-load array
    gen_online: np.ndarray  # updated full-length online mask
    shed_delta_mw: float  # load dropped by this rebalance
    blackout: bool = False


@dataclass
class IslandSystem:
    """Cached per-island matrices and index sets."""

    island: int
    buses: np.ndarray  # global bus indices, sorted
    local: dict[int, int]
    branch_ids: np.ndarray
    Y: np.ndarray  # dense complex admittance
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f_loc: np.ndarray
    t_loc: np.ndarray


def build_island_system(case: GridCase, topo: Topology, island: int) -> IslandSystem:
    buses = np.array(sorted(topo.islands[island]), dtype=np.int64)
    local = {int(b): i for i, b in enumerate(buses)}
    n = buses.size
    br_ids = island_branches(case, topo, island)
    Y = np.zeros((n, n), dtype=complex)
    yff = np.zeros(br_ids.size, dtype=complex)
    yft = np.zeros(br_ids.size, dtype=complex)
    ytf = np.zeros(br_ids.size, dtype=complex)
    ytt = np.zeros(br_ids.size, dtype=complex)
    f_loc = np.zeros(br_ids.size, dtype=np.int64)
    t_loc = np.zeros(br_ids.size, dtype=np.int64)
    for k, bi in enumerate(br_ids):
        br = case.branches[bi]
        ys = 1.0 / complex(br.r, br.x)
        bc2 = 0.5j * br.b_shunt
        tau = br.tap
        yff[k] = (ys + bc2) / (tau * tau)
        yft[k] = -ys / tau
        ytf[k] = -ys / tau
        ytt[k] = ys + bc2
        f = local[int(case.branch_from[bi])]
        t = local[int(case.branch_to[bi])]
        f_loc[k], t_loc[k] = f, t
        Y[f, f] += yff[k]
        Y[f, t] += yft[k]
        Y[t, f] += ytf[k]
        Y[t, t] += ytt[k]
    for b in buses:
        bus = case.buses[b]
        Y[local[int(b)], local[int(b)]] += complex(bus.g_shunt_mw, bus.b_shunt_mvar) / case.base_mva
    return IslandSystem(island, buses, local, br_ids, Y, yff, yft, ytf, ytt, f_loc, t_loc)


def slack_coefficients(case: GridCase, gen_ids: np.ndarray) -> np.ndarray:
    """r_g renormalized over the given (online) generators."""
    if gen_ids.size == 0:
        return np.zeros(0)
    raw = np.array(
        [
            case.generators[g].slack_coeff
            if case.generators[g].slack_coeff is not None
            else max(case.generators[g].p_max, 0.0)
            for g in gen_ids
        ]
    )
    tot = raw.sum()
    if tot <= 0:
        return np.full(gen_ids.size, 1.0 / gen_ids.size)
    return raw / tot


def rebalance_island(
    case: GridCase,
    topo: Topology,
    island: int,
    gen_online: np.ndarray,
    prior_p: np.ndarray,
    shed: np.ndarray,
) -> DispatchTargets:
    """Ramp generation toward the island's served load, shedding if short.

    ``gen_online``/``prior_p`` are full-length per-generator arrays
    (online mask, prior MW output); ``shed`` is the full-length per-load
    retained fraction k_d. Returns new copies; inputs are not mutated.
    Every island yields a target, possibly a fully shed blackout.
    """
    members = topo.islands[island]
    shed = shed.copy()
    gen_online = gen_online.copy()

    load_ids = np.array(
        [i for i in range(len(case.loads)) if int(case.load_bus[i]) in members],
        dtype=np.int64,
    )
    gen_ids = np.array(
        [g for g in range(len(case.generators)) if gen_online[g] and int(case.gen_bus[g]) in members],
        dtype=np.int64,
    )
    served = float(np.sum(case.load_p[load_ids] * shed[load_ids])) if load_ids.size else 0.0
    shed_delta = 0.0

    if gen_ids.size == 0:
        if served > 0:
            shed[load_ids] = 0.0
            shed_delta = served
        return DispatchTargets(
            island, gen_ids, np.zeros(0), shed, gen_online, shed_delta, blackout=True
        )

    # Trip units whose combined minimum output exceeds the remaining load.
    order = sorted(gen_ids, key=lambda g: (case.generators[g].p_min, g))
    p_min = np.array([case.generators[g].p_min for g in order])
    while order and p_min.sum() > served:
        gen_online[order[0]] = False
        order = order[1:]
        p_min = p_min[1:]
    gen_ids = np.array(sorted(order), dtype=np.int64)
    if gen_ids.size == 0:
        if served > 0:
            shed[load_ids] = 0.0
            shed_delta = served
        return DispatchTargets(
            island, gen_ids, np.zeros(0), shed, gen_online, shed_delta, blackout=True
        )

    p_lo = np.array([case.generators[g].p_min for g in gen_ids])
    p_hi = np.array([case.generators[g].p_max for g in gen_ids])
    cap = p_hi.sum()
    if cap < served:
        factor = cap / served
        shed[load_ids] *= factor
        shed_delta = served - cap
        served = cap

    prior = np.clip(prior_p[gen_ids], p_lo, p_hi)
    delta = served - prior.sum()
    if delta > 0:
        room = p_hi - prior
        total = room.sum()
        target = prior + (delta * room / total if total > 0 else 0.0)
    elif delta < 0:
        room = prior - p_lo
        total = room.sum()
        target = prior + (delta * room / total if total > 0 else 0.0)
    else:
        target = prior
    return DispatchTargets(island, gen_ids, target, shed, gen_online, shed_delta)


def _mismatch_only(G, B, vm, va, p_sched, q_sched, pvpq, pq):
    p, q = kernels.bus_powers(G, B, vm, va)
    F = np.concatenate([p[pvpq] - p_sched[pvpq], q[pq] - q_sched[pq]])
    return F, p, q


def _distribute_loss(target, p_lo, p_hi, r_g, loss):
    """Spread ``loss`` over generators in proportion to r_g, respecting
    capacity limits; clipped units drop out and the rest re-share.

    Returns (p, residual) in per-unit; residual != 0 means the island's
    capacity cannot absorb the losses.
    """
    p = np.clip(target, p_lo, p_hi)
    need = target.sum() + loss
    active = np.ones(p.size, dtype=bool)
    for _ in range(p.size + 2):
        residual = need - p.sum()
        if abs(residual) < 1e-12:
            return p, 0.0
        share = np.where(active, r_g, 0.0)
        tot = share.sum()
        if tot <= 0:
            return p, residual
        p_new = p + share / tot * residual
        hit = (p_new > p_hi) | (p_new < p_lo)
        p = np.clip(p_new, p_lo, p_hi)
        active &= ~hit
    return p, need - p.sum()


def _branch_flows_mw(sys: IslandSystem, V: np.ndarray, base: float) -> np.ndarray:
    if sys.branch_ids.size == 0:
        return np.zeros(0)
    Vf = V[sys.f_loc]
    Vt = V[sys.t_loc]
    Sf = Vf * np.conj(sys.yff * Vf + sys.yft * Vt)
    St = Vt * np.conj(sys.ytf * Vf + sys.ytt * Vt)
    return np.maximum(np.abs(Sf), np.abs(St)) * base


def dead_island_state(case: GridCase, topo: Topology, island: int, shed: np.ndarray) -> SystemState:
    """Fully de-energized island: every load shed, nothing dispatched."""
    members = topo.islands[island]
    buses = np.array(sorted(members), dtype=np.int64)
    load_ids = np.array(
        [i for i in range(len(case.loads)) if int(case.load_bus[i]) in members],
        dtype=np.int64,
    )
    br_ids = island_branches(case, topo, island)
    return SystemState(
        island=island,
        bus_ids=buses,
        v_mag=np.zeros(buses.size),
        v_ang=np.zeros(buses.size),
        gen_ids=np.zeros(0, dtype=np.int64),
        p_gen=np.zeros(0),
        q_gen=np.zeros(0),
        load_ids=load_ids,
        shed_fraction=1.0 - shed[load_ids] if load_ids.size else np.zeros(0),
        branch_ids=br_ids,
        branch_flow=np.zeros(br_ids.size),
        p_loss=0.0,
        converged=True,
        dead=True,
    )


def solve_power_flow(
    case: GridCase,
    topo: Topology,
    island: int,
    targets: DispatchTargets,
    warm: SystemState | None = None,
    enforce_q_limits: bool = True,
    tol: float = MISMATCH_TOL,
    max_iter: int = MAX_NR_ITER,
    trace=None,
    sys: IslandSystem | None = None,
) -> SystemState:
    """Solve the island power flow for the given dispatch targets.

    Losses are distributed over the online generators by their slack
    coefficients (clipped to capacity, re-normalizing over the unclipped
    units); the reported iteration count is the total across loss and
    Q-limit rounds. Returns a state with ``converged=False`` on
    divergence or a singular Jacobian.
    """
    if targets.blackout or targets.gen_ids.size == 0:
        return dead_island_state(case, topo, island, targets.shed)
    if sys is None:
        sys = build_island_system(case, topo, island)
    base = case.base_mva
    n = sys.buses.size
    shed = targets.shed

    load_ids = np.array(
        [i for i in range(len(case.loads)) if int(case.load_bus[i]) in sys.local],
        dtype=np.int64,
    )
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    for i in load_ids:
        b = sys.local[int(case.load_bus[i])]
        p_load[b] += case.load_p[i] * shed[i] / base
        q_load[b] += case.load_q[i] * shed[i] / base

    gen_ids = targets.gen_ids
    gen_loc = np.array([sys.local[int(case.gen_bus[g])] for g in gen_ids], dtype=np.int64)
    p_tgt = targets.p_target / base
    q_lo = np.array([case.generators[g].q_min for g in gen_ids]) / base
    q_hi = np.array([case.generators[g].q_max for g in gen_ids]) / base
    v_set = np.array([case.generators[g].v_set for g in gen_ids])
    r_g = slack_coefficients(case, gen_ids)

    # Reference: generator bus with the largest aggregate capacity.
    cap_by_bus: dict[int, float] = {}
    for k, g in enumerate(gen_ids):
        cap_by_bus[int(gen_loc[k])] = cap_by_bus.get(int(gen_loc[k]), 0.0) + case.generators[g].p_max
    ref = min(cap_by_bus, key=lambda b: (-cap_by_bus[b], b))

    is_gen_bus = np.zeros(n, dtype=bool)
    is_gen_bus[gen_loc] = True
    vset_bus = np.ones(n)
    for k in range(gen_ids.size - 1, -1, -1):
        vset_bus[gen_loc[k]] = v_set[k]

    # Aggregate Q capability per generator bus, for PV->PQ switching.
    qmin_bus = np.zeros(n)
    qmax_bus = np.zeros(n)
    for k in range(gen_ids.size):
        qmin_bus[gen_loc[k]] += q_lo[k]
        qmax_bus[gen_loc[k]] += q_hi[k]

    if warm is not None and warm.v_mag.size == n and np.array_equal(warm.bus_ids, sys.buses):
        vm = warm.v_mag.copy()
        va = warm.v_ang.copy()
        if not np.all(vm > 0.1):
            vm = np.ones(n)
            va = np.zeros(n)
    else:
        vm = np.ones(n)
        va = np.zeros(n)
    vm[is_gen_bus] = vset_bus[is_gen_bus]
    va = va - va[ref]

    G = np.ascontiguousarray(sys.Y.real)
    B = np.ascontiguousarray(sys.Y.imag)

    pv_mask = is_gen_bus.copy()
    pv_mask[ref] = False
    pq_fixed_q = np.zeros(n)  # pinned Q for switched generator buses
    switched = np.zeros(n, dtype=bool)
    if (
        enforce_q_limits
        and warm is not None
        and getattr(warm, "pq_switched", np.zeros(0)).size
        and np.array_equal(getattr(warm, "bus_ids", np.zeros(0)), sys.buses)
    ):
        # Re-use the previous solve's PV->PQ classification; it is almost
        # always still valid and saves the switching rounds entirely.
        for b, qpin in zip(warm.pq_switched, warm.pq_switched_q):
            if pv_mask[b]:
                pv_mask[b] = False
                switched[b] = True
                pq_fixed_q[b] = qpin

    loss = 0.0
    if warm is not None and warm.converged and not warm.dead:
        loss = warm.p_loss / base
    total_iters = 0
    p_lo_pu = np.array([case.generators[g].p_min for g in gen_ids]) / base
    p_hi_pu = np.array([case.generators[g].p_max for g in gen_ids]) / base
    idx = np.arange(n)
    p_gen_pu = p_tgt.copy()

    for _outer in range(12):
        p_gen_pu, residual = _distribute_loss(p_tgt, p_lo_pu, p_hi_pu, r_g, loss)
        if abs(residual) > 1e-9:
            # Capacity cannot absorb the losses; hand over to the
            # collapse fallback via a non-converged state.
            return _unconverged_state(case, sys, island, shed, load_ids, gen_ids, total_iters)

        p_sched = -p_load.copy()
        np.add.at(p_sched, gen_loc, p_gen_pu)
        q_sched = -q_load + np.where(switched, pq_fixed_q, 0.0)
        pq = np.flatnonzero(~(pv_mask | (idx == ref))).astype(np.int64)
        pvpq = np.flatnonzero(idx != ref).astype(np.int64)

        ok = True
        for _nr in range(max_iter):
            F, J = kernels.mismatch_jacobian(G, B, vm, va, p_sched, q_sched, pvpq, pq)
            mis = np.max(np.abs(F)) if F.size else 0.0
            if trace is not None:
                trace.write(f"island={island} iter={total_iters} max_mismatch={mis:.3e}\n")
            if mis < tol or F.size == 0:
                break
            try:
                dx = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                ok = False
                break
            if not np.all(np.isfinite(dx)):
                ok = False
                break
            total_iters += 1  # counts Newton updates, not re-evaluations
            # Backtracking on the residual norm: stressed islands routinely
            # need damped steps where a full Newton step diverges.
            f0 = float(F @ F)
            size = 1.0
            va_base = va.copy()
            vm_base = vm.copy()
            for _ls in range(6):
                va[pvpq] = va_base[pvpq] - size * dx[: pvpq.size]
                vm[pq] = vm_base[pq] - size * dx[pvpq.size :]
                if np.all(vm > 0) and np.all(vm < 3.0):
                    F_try, _, _ = _mismatch_only(G, B, vm, va, p_sched, q_sched, pvpq, pq)
                    if float(F_try @ F_try) <= f0 * (1.0 - 1e-4 * size):
                        break
                size *= 0.5
            else:
                ok = False
                break
        else:
            ok = False

        if not ok:
            return _unconverged_state(case, sys, island, shed, load_ids, gen_ids, total_iters)

        p_calc, q_calc = kernels.bus_powers(G, B, vm, va)
        new_loss = float(p_calc.sum())

        # PV buses whose reactive support leaves its range become PQ.
        switch_candidates = []
        if enforce_q_limits:
            for b in np.flatnonzero(pv_mask):
                qb = q_calc[b] + q_load[b]
                if qb > qmax_bus[b] + 1e-9:
                    switch_candidates.append((int(b), qmax_bus[b]))
                elif qb < qmin_bus[b] - 1e-9:
                    switch_candidates.append((int(b), qmin_bus[b]))

        loss_moved = abs(new_loss - loss) > LOSS_FP_TOL
        loss = new_loss
        if switch_candidates:
            for b, qpin in switch_candidates:
                pv_mask[b] = False
                switched[b] = True
                pq_fixed_q[b] = qpin
            continue
        if loss_moved:
            continue
        break
    else:
        return _unconverged_state(case, sys, island, shed, load_ids, gen_ids, total_iters)

    # Any residual active mismatch lands on the reference bus (its P
    # equation is excluded from F); fold it back into the reference
    # units so reported outputs match the physical solution.
    ref_gens = np.flatnonzero(gen_loc == ref)
    if ref_gens.size:
        implied = p_calc[ref] + p_load[ref]
        delta_ref = implied - p_gen_pu[ref_gens].sum()
        caps = p_hi_pu[ref_gens] - p_lo_pu[ref_gens]
        w = caps / caps.sum() if caps.sum() > 0 else np.full(ref_gens.size, 1.0 / ref_gens.size)
        p_gen_pu[ref_gens] += delta_ref * w

    # Per-generator outputs: targets plus slack share; bus reactive output
    # split over co-located units in proportion to their Q range.
    p_gen = p_gen_pu * base
    q_gen = np.zeros(gen_ids.size)
    for b in set(gen_loc.tolist()):
        ks = np.flatnonzero(gen_loc == b)
        qb = (q_calc[b] + q_load[b]) * base
        rng = (q_hi[ks] - q_lo[ks]) * base
        if rng.sum() > 0:
            q_gen[ks] = q_lo[ks] * base + (qb - q_lo[ks].sum() * base) * rng / rng.sum()
        else:
            q_gen[ks] = qb / ks.size

    flows = _branch_flows_mw(sys, vm * np.exp(1j * va), base)
    return SystemState(
        island=island,
        bus_ids=sys.buses,
        v_mag=vm,
        v_ang=va,
        gen_ids=gen_ids,
        p_gen=p_gen,
        q_gen=q_gen,
        load_ids=load_ids,
        shed_fraction=1.0 - shed[load_ids] if load_ids.size else np.zeros(0),
        branch_ids=sys.branch_ids,
        branch_flow=flows,
        p_loss=loss * base,
        converged=True,
        iterations=total_iters,
        pq_switched=np.flatnonzero(switched).astype(np.int64),
        pq_switched_q=pq_fixed_q[switched].copy(),
        p_target=targets.p_target.copy(),
    )


def _unconverged_state(case, sys, island, shed, load_ids, gen_ids, iters) -> SystemState:
    return SystemState(
        island=island,
        bus_ids=sys.buses,
        v_mag=np.ones(sys.buses.size),
        v_ang=np.zeros(sys.buses.size),
        gen_ids=gen_ids,
        p_gen=np.zeros(gen_ids.size),
        q_gen=np.zeros(gen_ids.size),
        load_ids=load_ids,
        shed_fraction=1.0 - shed[load_ids] if load_ids.size else np.zeros(0),
        branch_ids=sys.branch_ids,
        branch_flow=np.zeros(sys.branch_ids.size),
        p_loss=0.0,
        converged=False,
        iterations=iters,
    )


def collapse_fallback(
    case: GridCase,
    topo: Topology,
    island: int,
    gen_online: np.ndarray,
    prior_p: np.ndarray,
    shed: np.ndarray,
    warm: SystemState | None = None,
    sys: IslandSystem | None = None,
) -> tuple[SystemState, DispatchTargets]:
    """Uniform 5% load-shedding retreat after a diverged power flow.

    Sheds the island's remaining load in 5% decrements (re-running the
    rebalance and the solver each step) until a solution is found; at
    100% shed a fully blacked-out island state is returned.
    """
    for step in range(1, 21):
        factor = 1.0 - 0.05 * step
        trial = shed.copy()
        members = topo.islands[island]
        for i in range(len(case.loads)):
            if int(case.load_bus[i]) in members:
                trial[i] = shed[i] * max(factor, 0.0)
        tgt = rebalance_island(case, topo, island, gen_online, prior_p, trial)
        if tgt.blackout:
            break
        state = solve_power_flow(case, topo, island, tgt, warm=warm, sys=sys)
        if not state.converged and warm is not None:
            state = solve_power_flow(case, topo, island, tgt, sys=sys)
        if state.converged:
            return state, tgt
    # Exhausted: the island blacks out entirely.
    trial = shed.copy()
    members = topo.islands[island]
    for i in range(len(case.loads)):
        if int(case.load_bus[i]) in members:
            trial[i] = 0.0
    online = gen_online.copy()
    for g in range(len(case.generators)):
        if int(case.gen_bus[g]) in members:
            online[g] = False
    tgt = DispatchTargets(
        island, np.zeros(0, dtype=np.int64), np.zeros(0), trial, online, 0.0, blackout=True
    )
    return dead_island_state(case, topo, island, trial), tgt
