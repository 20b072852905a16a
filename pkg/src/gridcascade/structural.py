"""Structure-based branch criticality baselines.

Three classical scores used for cross-validation against the
simulation-driven ranking: shortest-path betweenness, electrical
betweenness (generation/load-weighted current transfers), and extended
betweenness (transfer capability relative to the first limit hit). The
electrical variants run on the DC (susceptance-only) linearization via
injection shift factors, with unit injections withdrawn at the slack bus.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from math import fsum

import numpy as np

from .grid import GridCase

SENS_EPS = 1e-9  # |F_i - F_j| below this is treated as no coupling


@dataclass
class StructuralScores:
    metric: str  # "B1" | "B2" | "B3"
    score: np.ndarray  # per branch, case order
    order: list[int]  # branch ids, descending score, ties by id

    @classmethod
    def build(cls, metric: str, score: np.ndarray) -> "StructuralScores":
        order = sorted(range(score.size), key=lambda i: (-score[i], i))
        return cls(metric, score, [i + 1 for i in order])


@dataclass
class InjectionShiftFactors:
    """F[l][i]: p.u. flow on branch l per unit injection at bus i,
    withdrawn at the slack bus. F[:, slack] = 0."""

    F: np.ndarray
    slack: int  # internal bus index


def default_slack(case: GridCase) -> int:
    """Generator bus with the largest capacity (ties to the lower index)."""
    cap: dict[int, float] = {}
    for g in case.generators:
        b = case.bus_index[g.bus]
        cap[b] = cap.get(b, 0.0) + g.p_max
    if not cap:
        raise ValueError("case has no generators to anchor the slack")
    return min(cap, key=lambda b: (-cap[b], b))


def injection_shift_factors(case: GridCase, slack: int | None = None,
                            in_service=None) -> InjectionShiftFactors:
    """Dense DC shift-factor matrix over the in-service network."""
    n, L = case.n_bus, case.n_branch
    mask = np.ones(L, dtype=bool) if in_service is None else np.asarray(in_service, bool)
    if slack is None:
        slack = default_slack(case)
    b_ser = np.zeros(L)
    for k, br in enumerate(case.branches):
        if mask[k]:
            b_ser[k] = 1.0 / (br.x * br.tap)
    f, t = case.branch_from, case.branch_to
    Bbus = np.zeros((n, n))
    np.add.at(Bbus, (f, f), b_ser)
    np.add.at(Bbus, (t, t), b_ser)
    np.add.at(Bbus, (f, t), -b_ser)
    np.add.at(Bbus, (t, f), -b_ser)
    keep = np.flatnonzero(np.arange(n) != slack)
    Bred = Bbus[np.ix_(keep, keep)]
    Bf = np.zeros((L, n))
    rows = np.arange(L)
    Bf[rows, f] = b_ser
    Bf[rows, t] = -b_ser
    F = np.zeros((L, n))
    try:
        F[:, keep] = Bf[:, keep] @ np.linalg.inv(Bred)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular reduced susceptance matrix (islanded case?)") from exc
    return InjectionShiftFactors(F, slack)


def _bfs_counts(adj: list[list[int]], src: int, n: int):
    """Hop distances and integer shortest-path counts from one source."""
    dist = [-1] * n
    sigma = [0] * n
    dist[src] = 0
    sigma[src] = 1
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
            if dist[v] == dist[u] + 1:
                sigma[v] += sigma[u]
    return dist, sigma


def betweenness(case: GridCase) -> StructuralScores:
    """Shortest-path (hop-count) betweenness of each branch.

    For each unordered bus pair, the fraction of shortest paths running
    through the branch; parallel circuits split their group's fraction
    evenly. Accumulated in exact rational arithmetic (the counts are
    integers), so results are reproducible to the last bit across
    summation orders; converted to float at the end.
    """
    from fractions import Fraction

    n, L = case.n_bus, case.n_branch
    groups: dict[tuple[int, int], list[int]] = {}
    for k in range(L):
        u, v = int(case.branch_from[k]), int(case.branch_to[k])
        groups.setdefault((min(u, v), max(u, v)), []).append(k)
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in groups:
        adj[u].append(v)
        adj[v].append(u)

    dist = []
    sigma = []
    for s in range(n):
        d, sg = _bfs_counts(adj, s, n)
        dist.append(d)
        sigma.append(sg)

    pairs = list(groups.items())
    totals = [Fraction(0)] * L
    for i in range(n):
        di, si = dist[i], sigma[i]
        for j in range(i + 1, n):
            if dist[i][j] < 0 or sigma[i][j] == 0:
                continue
            dj, sj = dist[j], sigma[j]
            dij, sij = di[j], si[j]
            for (u, v), ks in pairs:
                paths = 0
                if di[u] >= 0 and dj[v] >= 0 and di[u] + 1 + dj[v] == dij:
                    paths += si[u] * sj[v]
                if di[v] >= 0 and dj[u] >= 0 and di[v] + 1 + dj[u] == dij:
                    paths += si[v] * sj[u]
                if paths:
                    share = Fraction(paths, sij * len(ks))
                    for k in ks:
                        totals[k] += share
    score = np.array([float(t) for t in totals])
    return StructuralScores.build("B1", score)


def _gen_load_buses(case: GridCase, use_real_time_output: bool = False):
    w_gen: dict[int, float] = {}
    for g in case.generators:
        b = case.bus_index[g.bus]
        w = g.p_set if use_real_time_output else g.p_max
        w_gen[b] = w_gen.get(b, 0.0) + max(w, 0.0)
    w_load: dict[int, float] = {}
    for ld in case.loads:
        b = case.bus_index[ld.bus]
        w_load[b] = w_load.get(b, 0.0) + max(ld.p, 0.0)
    return w_gen, w_load


def electrical_betweenness(case: GridCase, use_real_time_output: bool = False,
                           isf: InjectionShiftFactors | None = None) -> StructuralScores:
    """Generation/load-weighted sum of unit-transfer branch currents."""
    if isf is None:
        isf = injection_shift_factors(case)
    F = isf.F
    w_gen, w_load = _gen_load_buses(case, use_real_time_output)
    score = np.zeros(case.n_branch)
    for i, wi in sorted(w_gen.items()):
        for j, wj in sorted(w_load.items()):
            if i == j:
                continue
            weight = np.sqrt(wi * wj)
            score += weight * np.abs(F[:, i] - F[:, j])
    return StructuralScores.build("B2", score)


def extended_betweenness(case: GridCase,
                         isf: InjectionShiftFactors | None = None) -> StructuralScores:
    """Transfer-capability betweenness: per generation/load pair, the
    power transfer at which the first branch reaches its limit, summed
    directionally over each branch."""
    if isf is None:
        isf = injection_shift_factors(case)
    F = isf.F
    p_max = np.array([br.f_lim1 for br in case.branches]) / case.base_mva
    w_gen, w_load = _gen_load_buses(case)
    t_pos = np.zeros(case.n_branch)
    t_neg = np.zeros(case.n_branch)
    for i in sorted(w_gen):
        for j in sorted(w_load):
            if i == j:
                continue
            sens = F[:, i] - F[:, j]
            usable = np.abs(sens) >= SENS_EPS
            if not usable.any():
                continue
            p_ij = np.min(p_max[usable] / np.abs(sens[usable]))
            t_pos += np.maximum(sens, 0.0) * p_ij
            t_neg += np.abs(np.minimum(sens, 0.0)) * p_ij
    score = np.maximum(t_pos, t_neg) * case.base_mva
    return StructuralScores.build("B3", score)


def structural_scores(case: GridCase, metric: str) -> StructuralScores:
    if metric == "B1":
        return betweenness(case)
    if metric == "B2":
        return electrical_betweenness(case)
    if metric == "B3":
        return extended_betweenness(case)
    raise ValueError(f"unknown structural metric {metric!r}")


def export_scores_csv(scores: StructuralScores, case: GridCase, path) -> None:
    with open(path, "w") as fh:
        fh.write("rank,branch,from,to,score\n")
        for rank, bid in enumerate(scores.order, start=1):
            br = case.branches[bid - 1]
            fh.write(f"{rank},{bid},{br.from_bus},{br.to_bus},{scores.score[bid - 1]!r}\n")
