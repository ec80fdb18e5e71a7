"""Hot numeric inner loops.

Each kernel is plain numpy code restricted to what numba's nopython mode
supports; :func:`samimo._accel.njit` compiles it unless ``SAMIMO_NUMBA=0``.
The uncompiled function is always reachable as ``kernel.py_func``.
"""

import numpy as np

from samimo._accel import njit


@njit
def somp_kernel(A, Y, max_support, stop_energy):
    """Simultaneous OMP over a multiple-measurement-vector model.

    Returns the selected column indices in selection order.
    """
    L, K = A.shape
    AH = np.ascontiguousarray(A.conj().T)
    R = Y.copy()
    selected = np.zeros(K, dtype=np.bool_)
    order = np.empty(max(max_support, 0), dtype=np.int64)
    n = 0
    energy = np.sum(np.abs(R) ** 2)
    while n < max_support and energy > stop_energy:
        corr = AH @ R
        score = np.sum(np.abs(corr) ** 2, axis=1)
        score[selected] = -1.0
        k = np.argmax(score)
        selected[k] = True
        order[n] = k
        n += 1
        As = np.ascontiguousarray(A[:, order[:n]])
        X = np.linalg.lstsq(As, Y)[0]
        R = Y - As @ X
        energy = np.sum(np.abs(R) ** 2)
    return order[:n].copy()


@njit
def amp_mmv_kernel(A, Y, n_iter, p_active, gain, tau_floor):
    """MMV-AMP with the Bernoulli-Gaussian MMSE row denoiser.

    ``A`` must have unit-norm columns; nonzero rows of the unknown are modelled
    as CN(0, gain * I_M).  Returns (posterior activity per row, row estimates).
    """
    L, K = A.shape
    M = Y.shape[1]
    AH = np.ascontiguousarray(A.conj().T)
    eps = min(max(p_active, 1e-12), 1.0 - 1e-12)
    prior = np.log(eps / (1.0 - eps))
    X = np.zeros((K, M), dtype=np.complex128)
    R = Y.copy()
    pi = np.zeros(K)
    for _ in range(n_iter):
        tau = max(np.sum(np.abs(R) ** 2) / (L * M), tau_floor)
        Z = X + AH @ R
        c = gain / (gain + tau)
        dprec = 1.0 / tau - 1.0 / (gain + tau)
        rn = np.sum(np.abs(Z) ** 2, axis=1)
        llr = prior + M * np.log(tau / (gain + tau)) + rn * dprec
        for k in range(K):
            if llr[k] >= 0:
                pi[k] = 1.0 / (1.0 + np.exp(-llr[k]))
            else:
                e = np.exp(llr[k])
                pi[k] = e / (1.0 + e)
        Xn = np.empty_like(X)
        for k in range(K):
            Xn[k, :] = (pi[k] * c) * Z[k, :]
        # mean per-entry divergence of the row denoiser (Onsager term)
        div = np.mean(c * pi + c * (rn / M) * pi * (1.0 - pi) * dprec)
        R = Y - A @ Xn + (K / L) * div * R
        X = Xn
    return pi, X


@njit
def _mse_terms(H, V, sigma2):
    """Per-user received-signal gains and interference-plus-noise powers."""
    G = H @ V  # (U, U): G[k, j] = h_k v_j
    U = G.shape[0]
    total = np.empty(U)
    direct = np.empty(U, dtype=np.complex128)
    for k in range(U):
        total[k] = np.sum(np.abs(G[k, :]) ** 2) + sigma2
        direct[k] = G[k, k]
    return direct, total


@njit
def weighted_sum_rate(H, V, sigma2, weights):
    direct, total = _mse_terms(H, V, sigma2)
    r = 0.0
    for k in range(direct.shape[0]):
        s = np.abs(direct[k]) ** 2
        r += weights[k] * np.log2(1.0 + s / (total[k] - s))
    return r


@njit
def bisect_mu(Amat, B, power, n_bisect):
    """Smallest mu >= 0 with ||(A + mu I)^-1 B||_F^2 <= power.

    The power is evaluated through the eigendecomposition of ``A`` so the
    bisection itself is scalar.  ``mu = 0`` is taken only when ``A`` is safely
    invertible and the unregularised solution is already feasible.
    """
    lam, Q = np.linalg.eigh(Amat)
    QB = np.ascontiguousarray(Q.conj().T) @ B
    c = np.sum(np.abs(QB) ** 2, axis=1)
    top = max(abs(lam[-1]), 1e-300)
    if lam[0] > 1e-10 * top and np.sum(c / lam**2) <= power:
        return 0.0
    lo = 0.0
    hi = np.sqrt(np.sum(c) / power)
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if np.sum(c / (lam + mid) ** 2) > power:
            lo = mid
        else:
            hi = mid
    return hi


@njit
def wmmse_kernel(H, V0, power, sigma2, weights, n_iter, damping, n_bisect):
    """WMMSE for one subcarrier of a MISO broadcast channel.

    H is (U, N_t), V0 the (N_t, U) starting precoder.  ``damping[t]`` blends
    the update of iteration t with the previous iterate (1 = plain WMMSE).
    Returns the final precoder and the weighted sum-rate after each iteration.
    """
    U, Nt = H.shape
    V = V0.copy()
    trace = np.empty(n_iter)
    for t in range(n_iter):
        direct, total = _mse_terms(H, V, sigma2)
        u = direct / total
        e = 1.0 - np.abs(direct) ** 2 / total
        w = 1.0 / e
        Amat = np.zeros((Nt, Nt), dtype=np.complex128)
        B = np.empty((Nt, U), dtype=np.complex128)
        for k in range(U):
            hk = H[k, :]
            c = weights[k] * w[k]
            Amat += c * np.abs(u[k]) ** 2 * np.outer(hk.conj(), hk)
            B[:, k] = c * u[k] * hk.conj()
        mu = bisect_mu(Amat, B, power, n_bisect)
        Vn = np.linalg.solve(Amat + mu * np.eye(Nt, dtype=np.complex128), B)
        d = damping[t]
        V = d * Vn + (1.0 - d) * V
        trace[t] = weighted_sum_rate(H, V, sigma2, weights)
    return V, trace
