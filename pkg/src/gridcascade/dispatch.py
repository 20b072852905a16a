"""Emergent dispatch: optimal load shedding that restores all limits.

Maximizes served load subject to AC balance, branch-flow, voltage and
generator constraints. Solved by successive linear programming: flow and
voltage sensitivities are built from the power-flow Jacobian at the
current operating point, an LP over (k_d, p_gen) is solved with an
active-set of near-binding constraints, the step is applied with damping
and the AC state re-solved, until no violations remain. The contract is
a feasibility-checked, near-optimal solution, not global optimality.

Shedding is monotone: k_d may only decrease along a cascade, so a
dispatch never restores previously shed load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import kernels
from .acpf import (
    DispatchTargets,
    IslandSystem,
    SystemState,
    build_island_system,
    dead_island_state,
    solve_power_flow,
)
from .grid import GridCase, Topology

FLOW_TOL_MW = 1e-3
V_TOL = 1e-6
LP_MARGIN = 1e-3  # relative tightening of limits inside the LP
MAX_OUTER = 20
DAMPING = 0.7
TRUST_K = 0.4  # per-round cap on a load's retained-fraction change
TRUST_P_FRAC = 0.15  # per-round generator move, fraction of capacity range


@dataclass
class DispatchSolution:
    island: int
    load_ids: np.ndarray
    k_d: np.ndarray  # retained fraction per island load
    gen_ids: np.ndarray
    p_gen: np.ndarray  # MW set-points
    q_gen: np.ndarray
    v_mag: np.ndarray
    objective: float  # served MW
    feasible: bool
    iterations: int
    state: SystemState  # verified post-dispatch AC state
    shed: np.ndarray  # updated full-length k_d array
    gen_online: np.ndarray  # updated full-length online mask
    shed_delta_mw: float


def violation_summary(case: GridCase, state: SystemState,
                      limit_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(overloaded branch positions, voltage-violating local bus positions)."""
    if state.dead or not state.converged:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    lim1 = np.array([case.branches[b].f_lim1 for b in state.branch_ids])
    over = np.flatnonzero(state.branch_flow > limit_scale * lim1 + FLOW_TOL_MW)
    v_min = np.array([case.buses[b].v_min for b in state.bus_ids])
    v_max = np.array([case.buses[b].v_max for b in state.bus_ids])
    vbad = np.flatnonzero((state.v_mag < v_min - V_TOL) | (state.v_mag > v_max + V_TOL))
    return over, vbad


def _flow_state_gradient(sys: IslandSystem, k: int, vm, va):
    """d|S|/d(va, vm) for island branch k at the heavier end, per-unit."""
    f, t = sys.f_loc[k], sys.t_loc[k]
    V = vm * np.exp(1j * va)
    Sf = V[f] * np.conj(sys.yff[k] * V[f] + sys.yft[k] * V[t])
    St = V[t] * np.conj(sys.ytf[k] * V[f] + sys.ytt[k] * V[t])
    if abs(Sf) >= abs(St):
        S, a, b = Sf, f, t
        yaa, yab = sys.yff[k], sys.yft[k]
    else:
        S, a, b = St, t, f
        yaa, yab = sys.ytt[k], sys.ytf[k]
    mag = max(abs(S), 1e-9)
    dS_dva_a = 1j * (S - abs(V[a]) ** 2 * np.conj(yaa))
    dS_dva_b = -1j * V[a] * np.conj(yab * V[b])
    dS_dvm_a = S / vm[a] + abs(V[a]) ** 2 * np.conj(yaa) / vm[a]
    dS_dvm_b = V[a] * np.conj(yab * V[b]) / vm[b]
    grad_va = np.zeros(vm.size)
    grad_vm = np.zeros(vm.size)
    for bus, d in ((a, dS_dva_a), (b, dS_dva_b)):
        grad_va[bus] += (S.real * d.real + S.imag * d.imag) / mag
    for bus, d in ((a, dS_dvm_a), (b, dS_dvm_b)):
        grad_vm[bus] += (S.real * d.real + S.imag * d.imag) / mag
    return grad_va, grad_vm


def emergent_dispatch(
    case: GridCase,
    topo: Topology,
    island: int,
    state: SystemState,
    gen_online: np.ndarray,
    shed: np.ndarray,
    sys: IslandSystem | None = None,
    max_outer: int = MAX_OUTER,
    damping: float = DAMPING,
    limit_scale: float = 1.0,
) -> DispatchSolution:
    """Shed load (and redispatch generation) until the island is secure.

    ``state`` must be the island's converged power flow. Returns the
    verified solution; ``feasible=False`` means the island could not be
    secured and was fully shed (treated as blacked out). A
    ``limit_scale`` below 1 secures to a tightened flow limit, used to
    dispatch the pre-contingency point with an operating margin.
    """
    shed = shed.copy()
    gen_online = gen_online.copy()
    base = case.base_mva

    if state.dead:
        return _trivial_solution(case, island, state, shed, gen_online, 0.0)

    over, vbad = violation_summary(case, state, limit_scale)
    if over.size == 0 and vbad.size == 0:
        return _trivial_solution(case, island, state, shed, gen_online, 0.0)

    if sys is None:
        sys = build_island_system(case, topo, island)

    load_ids = state.load_ids
    gen_ids = state.gen_ids
    n_d, n_g = load_ids.size, gen_ids.size
    p_d = case.load_p[load_ids]
    q_d = case.load_q[load_ids]
    load_loc = np.array([sys.local[int(case.load_bus[i])] for i in load_ids], dtype=np.int64)
    gen_loc = np.array([sys.local[int(case.gen_bus[g])] for g in gen_ids], dtype=np.int64)
    p_lo = np.array([case.generators[g].p_min for g in gen_ids])
    p_hi = np.array([case.generators[g].p_max for g in gen_ids])
    served_before = state.served_load_mw(case)

    k_cur = shed[load_ids].copy()
    p_lo_arr, p_hi_arr = p_lo, p_hi
    p_cur = (
        np.clip(state.p_target, p_lo_arr, p_hi_arr)
        if state.p_target.size == n_g
        else state.p_gen.copy()
    )
    cur = state
    act_branches: set[int] = set()  # active set persists across rounds to
    act_vbuses: set[int] = set()  # prevent constraint cycling
    lim1 = limit_scale * np.array([case.branches[b].f_lim1 for b in sys.branch_ids])
    v_min = np.array([case.buses[b].v_min for b in sys.buses])
    v_max = np.array([case.buses[b].v_max for b in sys.buses])
    trust = TRUST_P_FRAC

    for it in range(1, max_outer + 1):
        du = _slp_direction(
            case, sys, cur, load_ids, gen_ids, load_loc, gen_loc,
            p_d, q_d, p_lo, p_hi, k_cur, p_cur, base,
            act_branches, act_vbuses, trust, limit_scale,
        )
        worst0 = _worst_violation(case, cur, lim1, v_min, v_max)
        accepted = False
        if du is not None:
            for frac in (damping, 0.5 * damping, 0.25 * damping):
                k_try = np.clip(k_cur + frac * du[: load_ids.size], 0.0, 1.0)
                p_try = np.clip(p_cur + frac * du[load_ids.size :], p_lo, p_hi)
                shed[load_ids] = k_try
                tgt = DispatchTargets(
                    island, gen_ids, p_try.copy(), shed.copy(), gen_online.copy(), 0.0
                )
                nxt = solve_power_flow(case, topo, island, tgt, warm=cur, sys=sys)
                if nxt.converged and _worst_violation(case, nxt, lim1, v_min, v_max) <= worst0 + 1e-6:
                    k_cur, p_cur = k_try, p_try  # steps live in target space
                    cur = nxt
                    accepted = True
                    break
        if accepted:
            trust = min(1.5 * trust, 0.5)
        else:
            # Linear model locally inadequate: tighten the region; as a
            # last resort buy margin with a small uniform shed.
            trust *= 0.4
            shed[load_ids] = k_cur
            if trust < 0.01:
                trust = TRUST_P_FRAC
                k_cur = k_cur * 0.95
                shed[load_ids] = k_cur
                # Rebalance the targets to the reduced load before re-solving.
                scale_mw = (p_d * k_cur).sum()
                if p_cur.sum() > 0:
                    p_cur = np.clip(p_cur * scale_mw / p_cur.sum(), p_lo, p_hi)
                tgt = DispatchTargets(
                    island, gen_ids, p_cur.copy(), shed.copy(), gen_online.copy(), 0.0
                )
                nxt = solve_power_flow(case, topo, island, tgt, warm=cur, sys=sys)
                if nxt.converged:
                    cur = nxt
        over, vbad = violation_summary(case, cur, limit_scale)
        if cur.converged and not over.size and not vbad.size:
            shed[load_ids] = k_cur
            served_after = cur.served_load_mw(case)
            return DispatchSolution(
                island=island,
                load_ids=load_ids,
                k_d=k_cur.copy(),
                gen_ids=gen_ids,
                p_gen=cur.p_gen.copy(),
                q_gen=cur.q_gen.copy(),
                v_mag=cur.v_mag.copy(),
                objective=served_after,
                feasible=True,
                iterations=it,
                state=cur,
                shed=shed,
                gen_online=gen_online,
                shed_delta_mw=max(0.0, served_before - served_after),
            )

    # Could not secure the island: shed everything (blackout).
    shed[load_ids] = 0.0
    for g in range(len(case.generators)):
        if int(case.gen_bus[g]) in topo.islands[island]:
            gen_online[g] = False
    dead = dead_island_state(case, topo, island, shed)
    return DispatchSolution(
        island=island,
        load_ids=load_ids,
        k_d=np.zeros(n_d),
        gen_ids=gen_ids,
        p_gen=np.zeros(n_g),
        q_gen=np.zeros(n_g),
        v_mag=dead.v_mag,
        objective=0.0,
        feasible=False,
        iterations=max_outer,
        state=dead,
        shed=shed,
        gen_online=gen_online,
        shed_delta_mw=served_before,
    )


def _trivial_solution(case, island, state, shed, gen_online, delta) -> DispatchSolution:
    return DispatchSolution(
        island=island,
        load_ids=state.load_ids,
        k_d=shed[state.load_ids].copy() if state.load_ids.size else np.zeros(0),
        gen_ids=state.gen_ids,
        p_gen=state.p_gen.copy(),
        q_gen=state.q_gen.copy(),
        v_mag=state.v_mag.copy(),
        objective=state.served_load_mw(case),
        feasible=True,
        iterations=0,
        state=state,
        shed=shed,
        gen_online=gen_online,
        shed_delta_mw=delta,
    )


def _slp_direction(
    case, sys, cur, load_ids, gen_ids, load_loc, gen_loc,
    p_d, q_d, p_lo, p_hi, k_cur, p_cur, base,
    act_branches, act_vbuses, trust, limit_scale=1.0,
):
    """Linearize at ``cur`` and solve the shedding/redispatch LP.

    Returns the control step [dk, dp] or None when the LP cannot be
    formed; ``act_branches``/``act_vbuses`` grow monotonically."""
    n = sys.buses.size
    n_d, n_g = load_ids.size, gen_ids.size
    vm, va = cur.v_mag, cur.v_ang

    # Reduced Jacobian at the current solution. PV buses hold voltage, the
    # reference bus is excluded; this mirrors the solver's structure.
    is_gen_bus = np.zeros(n, dtype=bool)
    is_gen_bus[gen_loc] = True
    cap = {}
    for k, g in enumerate(gen_ids):
        cap[int(gen_loc[k])] = cap.get(int(gen_loc[k]), 0.0) + case.generators[g].p_max
    ref = min(cap, key=lambda b: (-cap[b], b))
    idx = np.arange(n)
    pv_mask = is_gen_bus.copy()
    pv_mask[ref] = False
    pv_mask[cur.pq_switched] = False  # mirror the solver's Q-limit switching
    pq = np.flatnonzero(~(pv_mask | (idx == ref))).astype(np.int64)
    pvpq = np.flatnonzero(idx != ref).astype(np.int64)
    G = np.ascontiguousarray(sys.Y.real)
    B = np.ascontiguousarray(sys.Y.imag)
    p_sched = np.zeros(n)
    q_sched = np.zeros(n)  # only the Jacobian is needed, not the mismatch
    _, J = kernels.mismatch_jacobian(G, B, vm, va, p_sched, q_sched, pvpq, pq)

    row_p = {int(b): r for r, b in enumerate(pvpq)}
    row_q = {int(b): pvpq.size + r for r, b in enumerate(pq)}

    nu = n_d + n_g
    M = np.zeros((pvpq.size + pq.size, nu))
    for j in range(n_d):
        b = int(load_loc[j])
        if b in row_p:
            M[row_p[b], j] = -p_d[j] / base
        if b in row_q:
            M[row_q[b], j] = -q_d[j] / base
    for j in range(n_g):
        b = int(gen_loc[j])
        if b in row_p:
            M[row_p[b], n_d + j] = 1.0 / base

    try:
        X = np.linalg.solve(J, M)  # state sensitivity d[va_pvpq, vm_pq]/du
    except np.linalg.LinAlgError:
        return None

    lim1 = limit_scale * np.array([case.branches[b].f_lim1 for b in sys.branch_ids])
    v_min = np.array([case.buses[b].v_min for b in sys.buses])
    v_max = np.array([case.buses[b].v_max for b in sys.buses])

    act_branches.update(int(k) for k in np.flatnonzero(cur.branch_flow > 0.75 * lim1))
    pq_set = {int(b) for b in pq}
    act_vbuses.update(
        int(b)
        for b in pq
        if vm[b] < v_min[b] + 0.02 or vm[b] > v_max[b] - 0.02
    )

    A_rows, b_rows = [], []
    for k in sorted(act_branches):
        g_va, g_vm = _flow_state_gradient(sys, int(k), vm, va)
        gx = np.concatenate([g_va[pvpq], g_vm[pq]])
        grad_u = gx @ X * base  # MW per unit control
        A_rows.append(grad_u)
        b_rows.append(lim1[k] * (1.0 - LP_MARGIN) - cur.branch_flow[k])
    pq_row = {int(b): r for r, b in enumerate(pq)}
    for b in sorted(act_vbuses):
        if b not in pq_set:
            continue  # bus became PV-held after a re-solve
        dv = X[pvpq.size + pq_row[b]]
        A_rows.append(-dv * base)
        b_rows.append((vm[b] - (v_min[b] + V_TOL)) * base)
        A_rows.append(dv * base)
        b_rows.append(((v_max[b] - V_TOL) - vm[b]) * base)

    # Variables: [dk (n_d), dp (n_g), |dp| helpers (n_g), elastic slacks].
    # The |dp| penalty discourages large no-benefit redispatch swings that
    # would leave the linearization's validity region; elastic slacks keep
    # the LP feasible when a violation cannot be cleared in one step.
    n_c = len(A_rows)
    nv = nu + n_g + n_c
    c = np.zeros(nv)
    c[:n_d] = -p_d * (1.0 + 1e-9 * np.asarray(load_ids, dtype=float))
    c[nu : nu + n_g] = 0.02  # per-MW movement cost, well below shed cost
    c[nu + n_g :] = 1e4
    # Trust region keeps each round inside the linearization's validity.
    bounds = [(max(-k_cur[j], -TRUST_K), 0.0) for j in range(n_d)]
    trust_p = np.maximum(trust * (p_hi - p_lo), 5.0)
    bounds += [
        (max(p_lo[j] - p_cur[j], -trust_p[j]), min(p_hi[j] - p_cur[j], trust_p[j]))
        for j in range(n_g)
    ]
    bounds += [(0.0, None)] * (n_g + n_c)

    rows = []
    rhs = []
    if n_c:
        A = np.zeros((n_c, nv))
        A[:, :nu] = np.array(A_rows)
        A[:, nu + n_g :] = -np.eye(n_c)
        rows.append(A)
        rhs.append(np.array(b_rows))
    # |dp| linearization: dp - h <= 0 and -dp - h <= 0.
    for sign in (1.0, -1.0):
        A = np.zeros((n_g, nv))
        A[:, n_d:nu] = sign * np.eye(n_g)
        A[:, nu : nu + n_g] = -np.eye(n_g)
        rows.append(A)
        rhs.append(np.zeros(n_g))
    A_ub = np.vstack(rows)
    b_ub = np.concatenate(rhs)

    # Loss-neutral active balance; the slack distribution absorbs the rest.
    A_eq = np.zeros((1, nv))
    A_eq[0, :n_d] = -p_d
    A_eq[0, n_d:nu] = 1.0
    b_eq = np.zeros(1)

    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success:
        # Degenerate LP: propose a uniform shed of the remaining load.
        du = np.zeros(nu)
        du[:n_d] = -0.1 * k_cur
        scale = (p_d * 0.1 * k_cur).sum()
        room = p_cur - p_lo
        if room.sum() > 0:
            du[n_d:] = -scale * room / room.sum()
        return du
    return res.x[:nu]


def dc_minmax_dispatch(case: GridCase, topo: Topology, island: int,
                       gen_online: np.ndarray, shed: np.ndarray) -> np.ndarray | None:
    """Generation pattern minimizing the island's worst relative DC loading.

    A stand-in for the security-minded optimal power flow that fixes the
    pre-contingency operating point: loads are held at their served
    values and generator outputs are chosen to flatten branch loadings.
    Returns MW targets aligned with the island's online generators (the
    order of ``rebalance_island``), or None when no useful LP exists.
    """
    from .grid import island_branches

    members = topo.islands[island]
    buses = sorted(members)
    local = {b: i for i, b in enumerate(buses)}
    n = len(buses)
    br_ids = island_branches(case, topo, island)
    gen_ids = [
        g for g in range(len(case.generators))
        if gen_online[g] and int(case.gen_bus[g]) in members
    ]
    if n < 2 or br_ids.size == 0 or not gen_ids:
        return None

    d = np.zeros(n)
    for i in range(len(case.loads)):
        b = int(case.load_bus[i])
        if b in members:
            d[local[b]] += case.load_p[i] * shed[i] / case.base_mva
    if d.sum() <= 0:
        return None

    b_ser = np.array([1.0 / (case.branches[k].x * case.branches[k].tap) for k in br_ids])
    f = np.array([local[int(case.branch_from[k])] for k in br_ids])
    t = np.array([local[int(case.branch_to[k])] for k in br_ids])
    Bbus = np.zeros((n, n))
    np.add.at(Bbus, (f, f), b_ser)
    np.add.at(Bbus, (t, t), b_ser)
    np.add.at(Bbus, (f, t), -b_ser)
    np.add.at(Bbus, (t, f), -b_ser)
    cap: dict[int, float] = {}
    for g in gen_ids:
        b = local[int(case.gen_bus[g])]
        cap[b] = cap.get(b, 0.0) + case.generators[g].p_max
    slack = min(cap, key=lambda b: (-cap[b], b))
    keep = np.flatnonzero(np.arange(n) != slack)
    L = br_ids.size
    Bf = np.zeros((L, n))
    Bf[np.arange(L), f] = b_ser
    Bf[np.arange(L), t] = -b_ser
    ptdf = np.zeros((L, n))
    try:
        ptdf[:, keep] = Bf[:, keep] @ np.linalg.inv(Bbus[np.ix_(keep, keep)])
    except np.linalg.LinAlgError:
        return None

    ng = len(gen_ids)
    Cg = np.zeros((n, ng))
    for j, g in enumerate(gen_ids):
        Cg[local[int(case.gen_bus[g])], j] = 1.0
    lim = np.array([case.branches[k].f_lim1 for k in br_ids]) / case.base_mva
    M = ptdf @ Cg
    base_flow = ptdf @ (-d)
    c = np.zeros(ng + 1)
    c[-1] = 1.0
    A_ub = np.zeros((2 * L, ng + 1))
    b_ub = np.zeros(2 * L)
    A_ub[:L, :ng] = M
    A_ub[:L, -1] = -lim
    b_ub[:L] = -base_flow
    A_ub[L:, :ng] = -M
    A_ub[L:, -1] = -lim
    b_ub[L:] = base_flow
    A_eq = np.zeros((1, ng + 1))
    A_eq[0, :ng] = 1.0
    b_eq = [d.sum()]
    bounds = [
        (case.generators[g].p_min / case.base_mva, case.generators[g].p_max / case.base_mva)
        for g in gen_ids
    ] + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success:
        return None
    return res.x[:ng] * case.base_mva


def _worst_violation(case, state, lim1, v_min, v_max) -> float:
    """Scalar violation measure (MW-scale) used for step backtracking."""
    if state.dead:
        return 0.0
    if not state.converged:
        return np.inf
    worst = 0.0
    if state.branch_flow.size:
        worst = max(worst, float(np.max(state.branch_flow - lim1)))
    if state.v_mag.size:
        dv = np.maximum(v_min - state.v_mag, state.v_mag - v_max)
        worst = max(worst, float(np.max(dv)) * case.base_mva)
    return worst
