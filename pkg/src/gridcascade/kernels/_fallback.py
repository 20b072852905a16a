"""Pure-numpy implementations of the power-flow hot kernels.

Same call signatures as the compiled module ``_core``; the package picks
whichever is importable (see ``kernels.__init__``). These are vectorized
dense formulations, adequate for islands of a few hundred buses.
"""

from __future__ import annotations

import numpy as np


def bus_powers(G, B, vm, va):
    """Net complex bus injections implied by a voltage solution.

    Returns (p, q) in per-unit for every bus of the (dense) admittance
    matrix Y = G + jB.
    """
    V = vm * np.exp(1j * va)
    S = V * np.conj((G + 1j * B) @ V)
    return S.real.copy(), S.imag.copy()


def mismatch_jacobian(G, B, vm, va, p_sched, q_sched, pvpq, pq):
    """Polar Newton-Raphson mismatch vector and reduced Jacobian.

    The reduced system solves d[va[pvpq], vm[pq]] from
    F = [P(pvpq) - p_sched(pvpq), Q(pq) - q_sched(pq)].

    Returns (F, J) with J dense of order len(pvpq) + len(pq).
    """
    Y = G + 1j * B
    V = vm * np.exp(1j * va)
    Ibus = Y @ V
    S = V * np.conj(Ibus)

    # dS/dVa and dS/dVm, dense analogues of the classic sparse forms.
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(Ibus) - Y * V[None, :])
    Vnorm = V / vm
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :])
    dS_dVm[np.diag_indices_from(dS_dVm)] += np.conj(Ibus) * Vnorm

    F = np.concatenate(
        [
            S.real[pvpq] - p_sched[pvpq],
            S.imag[pq] - q_sched[pq],
        ]
    )
    J11 = dS_dVa[np.ix_(pvpq, pvpq)].real
    J12 = dS_dVm[np.ix_(pvpq, pq)].real
    J21 = dS_dVa[np.ix_(pq, pvpq)].imag
    J22 = dS_dVm[np.ix_(pq, pq)].imag
    J = np.block([[J11, J12], [J21, J22]])
    return F, J
