"""RK4 sweeps for the coefficient ODEs.

The integrated state is six stacked block matrices ``Y[slot, b, k, k]``:

=====  =================================================================
PSI    Psi(t, 0):            dPsi/dt = F Psi
SIG    Sigma_t:              dSig/dt = F Sig + Sig F^T + G G^T
RF     R_t:                  dR/dt   = (F + 1/2 G G^T Sig^{-1}) R
HAT    Psi_hat(t, t_ref):    dH/dt   = F_hat H,  F_hat = F + c G G^T Sig^{-1}
W      Psi_hat(t_seg, t):    dW/dt   = -W F_hat       (reset to I at segment starts)
P      segment covariance:   dP/dt   = lam^2 W G G^T W^T   (reset to 0)
=====  =================================================================

with ``c = (1 + lam^2) / 2``. In phase 0 only PSI and SIG are advanced (Sigma
may be singular there). Two interchangeable kernels exist: a numba one and a
numpy one vectorized over blocks; :data:`BACKEND` names the active one.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import HAVE_NUMBA, njit
from .errors import ConditioningError

PSI, SIG, RF, HAT, W, P = range(6)
N_SLOTS = 6
CHUNK_STEPS = 1 << 15
RK4_REL = 1e-3

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numba kernel


@njit(cache=True)
def _rhs_nb(F, GG, Y, dY, c_hat, lam2, phase, L, X, Fh, Fr, T1):
    nb = Y.shape[1]
    k = Y.shape[2]
    for bi in range(nb):
        for i in range(k):
            for j in range(k):
                s_psi = 0.0
                s_sig = 0.0
                for m in range(k):
                    s_psi += F[bi, i, m] * Y[0, bi, m, j]
                    s_sig += F[bi, i, m] * Y[1, bi, m, j] + Y[1, bi, i, m] * F[bi, j, m]
                dY[0, bi, i, j] = s_psi
                dY[1, bi, i, j] = s_sig + GG[bi, i, j]
        if phase == 0:
            for s in range(2, 6):
                for i in range(k):
                    for j in range(k):
                        dY[s, bi, i, j] = 0.0
            continue
        # Cholesky of Sigma (lower triangle)
        for j in range(k):
            acc = 0.5 * (Y[1, bi, j, j] + Y[1, bi, j, j])
            for m in range(j):
                acc -= L[j, m] * L[j, m]
            if not acc > 0.0:
                return bi + 1
            L[j, j] = math.sqrt(acc)
            for i in range(j + 1, k):
                acc = 0.5 * (Y[1, bi, i, j] + Y[1, bi, j, i])
                for m in range(j):
                    acc -= L[i, m] * L[j, m]
                L[i, j] = acc / L[j, j]
        # X = Sigma^{-1} GG, column by column
        for c in range(k):
            for i in range(k):
                acc = GG[bi, i, c]
                for m in range(i):
                    acc -= L[i, m] * X[m, c]
                X[i, c] = acc / L[i, i]
            for i in range(k - 1, -1, -1):
                acc = X[i, c]
                for m in range(i + 1, k):
                    acc -= L[m, i] * X[m, c]
                X[i, c] = acc / L[i, i]
        # GG Sigma^{-1} = X^T
        for i in range(k):
            for j in range(k):
                Fh[i, j] = F[bi, i, j] + c_hat * X[j, i]
                Fr[i, j] = F[bi, i, j] + 0.5 * X[j, i]
        for i in range(k):
            for j in range(k):
                s_r = 0.0
                s_h = 0.0
                s_w = 0.0
                s_t = 0.0
                for m in range(k):
                    s_r += Fr[i, m] * Y[2, bi, m, j]
                    s_h += Fh[i, m] * Y[3, bi, m, j]
                    s_w -= Y[4, bi, i, m] * Fh[m, j]
                    s_t += Y[4, bi, i, m] * GG[bi, m, j]
                dY[2, bi, i, j] = s_r
                dY[3, bi, i, j] = s_h
                dY[4, bi, i, j] = s_w
                T1[i, j] = s_t
        for i in range(k):
            for j in range(k):
                acc = 0.0
                for m in range(k):
                    acc += T1[i, m] * Y[4, bi, j, m]
                dY[5, bi, i, j] = lam2 * acc
    return 0


@njit(cache=True)
def _sweep_nb(Fs, GGs, hs, rec, reset, Y, out, slots, c_hat, lam2, phase):
    k = Y.shape[2]
    L = np.zeros((k, k))
    X = np.zeros((k, k))
    Fh = np.zeros((k, k))
    Fr = np.zeros((k, k))
    T1 = np.zeros((k, k))
    k1 = np.empty_like(Y)
    k2 = np.empty_like(Y)
    k3 = np.empty_like(Y)
    k4 = np.empty_like(Y)
    tmp = np.empty_like(Y)
    n = hs.shape[0]
    nb = Y.shape[1]
    Yf = Y.reshape(-1)
    tf = tmp.reshape(-1)
    f1 = k1.reshape(-1)
    f2 = k2.reshape(-1)
    f3 = k3.reshape(-1)
    f4 = k4.reshape(-1)
    m = Yf.size
    for step in range(n):
        h = hs[step]
        F0 = Fs[2 * step]
        Fm = Fs[2 * step + 1]
        F1 = Fs[2 * step + 2]
        G0 = GGs[2 * step]
        Gm = GGs[2 * step + 1]
        G1 = GGs[2 * step + 2]
        if _rhs_nb(F0, G0, Y, k1, c_hat, lam2, phase, L, X, Fh, Fr, T1):
            return step + 1
        for e in range(m):
            tf[e] = Yf[e] + 0.5 * h * f1[e]
        if _rhs_nb(Fm, Gm, tmp, k2, c_hat, lam2, phase, L, X, Fh, Fr, T1):
            return step + 1
        for e in range(m):
            tf[e] = Yf[e] + 0.5 * h * f2[e]
        if _rhs_nb(Fm, Gm, tmp, k3, c_hat, lam2, phase, L, X, Fh, Fr, T1):
            return step + 1
        for e in range(m):
            tf[e] = Yf[e] + h * f3[e]
        if _rhs_nb(F1, G1, tmp, k4, c_hat, lam2, phase, L, X, Fh, Fr, T1):
            return step + 1
        for e in range(m):
            Yf[e] += h / 6.0 * (f1[e] + 2.0 * f2[e] + 2.0 * f3[e] + f4[e])
        r = rec[step]
        if r >= 0:
            for si in range(slots.shape[0]):
                out[r, si] = Y[slots[si]]
        if reset[step]:
            for bi in range(nb):
                for i in range(k):
                    for j in range(k):
                        Y[4, bi, i, j] = 1.0 if i == j else 0.0
                        Y[5, bi, i, j] = 0.0
    return 0


@njit(cache=True)
def _rhs_scalar(f, g, y, d, c_hat, lam2, phase):
    d[0] = f * y[0]
    d[1] = 2.0 * f * y[1] + g
    if phase == 0:
        d[2] = 0.0
        d[3] = 0.0
        d[4] = 0.0
        d[5] = 0.0
        return 0
    if not y[1] > 0.0:
        return 1
    a = g / y[1]
    fh = f + c_hat * a
    d[2] = (f + 0.5 * a) * y[2]
    d[3] = fh * y[3]
    d[4] = -y[4] * fh
    d[5] = lam2 * y[4] * y[4] * g
    return 0


@njit(cache=True)
def _sweep_scalar_nb(Fs, GGs, hs, rec, reset, Y, out, slots, c_hat, lam2, phase):
    """Same contract as _sweep_nb for 1x1 blocks, which are independent scalars."""
    n = hs.shape[0]
    nb = Y.shape[1]
    y = np.empty(6)
    t = np.empty(6)
    d1 = np.empty(6)
    d2 = np.empty(6)
    d3 = np.empty(6)
    d4 = np.empty(6)
    fail = 0
    for bi in range(nb):
        for s in range(6):
            y[s] = Y[s, bi, 0, 0]
        for step in range(n):
            h = hs[step]
            st = _rhs_scalar(Fs[2 * step, bi, 0, 0], GGs[2 * step, bi, 0, 0], y, d1, c_hat, lam2, phase)
            for s in range(6):
                t[s] = y[s] + 0.5 * h * d1[s]
            st += _rhs_scalar(Fs[2 * step + 1, bi, 0, 0], GGs[2 * step + 1, bi, 0, 0], t, d2, c_hat, lam2, phase)
            for s in range(6):
                t[s] = y[s] + 0.5 * h * d2[s]
            st += _rhs_scalar(Fs[2 * step + 1, bi, 0, 0], GGs[2 * step + 1, bi, 0, 0], t, d3, c_hat, lam2, phase)
            for s in range(6):
                t[s] = y[s] + h * d3[s]
            st += _rhs_scalar(Fs[2 * step + 2, bi, 0, 0], GGs[2 * step + 2, bi, 0, 0], t, d4, c_hat, lam2, phase)
            if st:
                if fail == 0 or step + 1 < fail:
                    fail = step + 1
                break
            for s in range(6):
                y[s] += h / 6.0 * (d1[s] + 2.0 * d2[s] + 2.0 * d3[s] + d4[s])
            r = rec[step]
            if r >= 0:
                for si in range(slots.shape[0]):
                    out[r, si, bi, 0, 0] = y[slots[si]]
            if reset[step]:
                y[4] = 1.0
                y[5] = 0.0
        for s in range(6):
            Y[s, bi, 0, 0] = y[s]
    return fail


# ---------------------------------------------------------------------------
# numpy kernel


def _rhs_np(F, GG, Y, c_hat, lam2, phase):
    dY = np.zeros_like(Y)
    dY[PSI] = F @ Y[PSI]
    FS = F @ Y[SIG]
    dY[SIG] = FS + Y[SIG] @ np.swapaxes(F, -1, -2) + GG
    if phase == 0:
        return dY, 0
    sig = 0.5 * (Y[SIG] + np.swapaxes(Y[SIG], -1, -2))
    try:
        chol = np.linalg.cholesky(sig)
    except np.linalg.LinAlgError:
        return dY, 1
    X = np.linalg.solve(np.swapaxes(chol, -1, -2), np.linalg.solve(chol, GG))
    A = np.swapaxes(X, -1, -2)
    Fh = F + c_hat * A
    dY[RF] = (F + 0.5 * A) @ Y[RF]
    dY[HAT] = Fh @ Y[HAT]
    dY[W] = -Y[W] @ Fh
    dY[P] = lam2 * (Y[W] @ GG) @ np.swapaxes(Y[W], -1, -2)
    return dY, 0


def _sweep_np(Fs, GGs, hs, rec, reset, Y, out, slots, c_hat, lam2, phase):
    eye = np.eye(Y.shape[2])
    for step in range(hs.shape[0]):
        h = hs[step]
        F0, Fm, F1 = Fs[2 * step], Fs[2 * step + 1], Fs[2 * step + 2]
        G0, Gm, G1 = GGs[2 * step], GGs[2 * step + 1], GGs[2 * step + 2]
        k1, s1 = _rhs_np(F0, G0, Y, c_hat, lam2, phase)
        k2, s2 = _rhs_np(Fm, Gm, Y + 0.5 * h * k1, c_hat, lam2, phase)
        k3, s3 = _rhs_np(Fm, Gm, Y + 0.5 * h * k2, c_hat, lam2, phase)
        k4, s4 = _rhs_np(F1, G1, Y + h * k3, c_hat, lam2, phase)
        if s1 or s2 or s3 or s4:
            return step + 1
        Y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if rec[step] >= 0:
            out[rec[step]] = Y[slots]
        if reset[step]:
            Y[W] = eye
            Y[P] = 0.0
    return 0


def _sweep(*args):
    if BACKEND == "numba":
        if args[5].shape[2] == 1:
            return _sweep_scalar_nb(*args)
        return _sweep_nb(*args)
    return _sweep_np(*args)


# ---------------------------------------------------------------------------
# drivers


def initial_state(spec, zero_init=False):
    b, k = spec.n_blocks, spec.block_size
    Y = np.zeros((N_SLOTS, b, k, k))
    Y[PSI] = np.eye(k)
    if not zero_init:
        Y[SIG] = spec.init_block
    return Y


def start_factor(Y):
    """Switch to phase 1: R = symmetric root of Sigma, Psi_hat = W = I, P = 0."""
    Y = Y.copy()
    sig = 0.5 * (Y[SIG] + np.swapaxes(Y[SIG], -1, -2))
    w, v = np.linalg.eigh(sig)
    if np.any(w <= 0):
        raise ConditioningError("Sigma is singular at the factor start time; increase eps_start")
    Y[RF] = np.einsum("bij,bj,bkj->bik", v, np.sqrt(w), v)
    eye = np.eye(Y.shape[2])
    Y[HAT] = eye
    Y[W] = eye
    Y[P] = 0.0
    return Y


def gap_steps(ts, te, rk4_step, rel=0.0):
    """RK4 step edges from ts to te.

    Steps are at most ``rk4_step`` long and, when ``rel > 0``, also at most
    ``rel * t``: the factor ODEs carry G G^T Sigma^{-1}, whose scale grows like
    1/t near the start, so the steps shrink geometrically there.
    """
    gap = te - ts
    if gap <= 0:
        return np.array([ts])
    pieces = []
    lo = ts
    if rel > 0 and ts > 0 and ts * rel < rk4_step:
        sw = min(te, rk4_step / rel)
        n1 = max(1, int(math.ceil(math.log(sw / ts) / math.log1p(rel) - 1e-9)))
        pieces.append(ts * (sw / ts) ** (np.arange(n1) / n1))
        lo = sw
    if te > lo:
        n2 = max(1, int(math.ceil((te - lo) / rk4_step - 1e-9)))
        pieces.append(lo + (te - lo) * np.arange(n2) / n2)
    edges = np.concatenate(pieces + [[te]])
    return edges


def advance(spec, t0, Y, targets, rk4_step, lam=0.0, phase=1, slots=None, reset=None, chunk=CHUNK_STEPS,
            rel=None):
    """Advance state ``Y`` (modified in place) from ``t0`` through ``targets``.

    ``targets`` must be sorted, >= t0. Each gap is split by :func:`gap_steps`
    (graded near small t in phase 1). Returns records of shape
    (len(targets), len(slots), b, k, k). ``reset[j]`` restarts the W/P segment
    right after target ``j`` is recorded.
    """
    targets = np.asarray(targets, dtype=float)
    slots = np.arange(N_SLOTS) if slots is None else np.asarray(slots, dtype=np.int64)
    out = np.empty((targets.size, slots.size) + Y.shape[1:])
    if targets.size == 0:
        return out
    if np.any(np.diff(targets) < 0) or targets[0] < t0:
        raise ValueError("targets must be sorted and not before t0")
    reset = np.zeros(targets.size, dtype=bool) if reset is None else np.asarray(reset, dtype=bool)
    if rel is None:
        rel = RK4_REL if phase else 0.0
    c_hat = 0.5 * (1.0 + lam * lam)
    lam2 = lam * lam
    eye = np.eye(Y.shape[2])

    starts = np.concatenate([[t0], targets[:-1]])
    gaps = targets - starts
    zero = gaps <= 0
    # targets sharing the time of their predecessor reuse its record
    alias = np.arange(targets.size)
    for j in np.nonzero(zero)[0]:
        if j > 0:
            alias[j] = alias[j - 1]
    lead = 0
    while lead < targets.size and zero[lead]:
        out[lead] = Y[slots]
        if reset[lead]:
            Y[W] = eye
            Y[P] = 0.0
        lead += 1
    step_reset = reset.copy()
    for j in np.nonzero(zero)[0]:
        if j >= lead and reset[j]:
            step_reset[alias[j]] = True

    live = np.nonzero(~zero)[0]
    graded = live[(rel > 0) & (starts[live] > 0) & (starts[live] * rel < rk4_step)] if rel > 0 else live[:0]
    n = np.zeros(targets.size, dtype=np.int64)
    n[live] = np.maximum(1, np.ceil(gaps[live] / rk4_step - 1e-9).astype(np.int64))
    special = {}
    for j in graded:
        edges = gap_steps(starts[j], targets[j], rk4_step, rel)
        special[j] = edges
        n[j] = edges.size - 1
    total = int(n.sum())
    owner = np.repeat(np.arange(targets.size), n)
    first = np.concatenate([[0], np.cumsum(n)[:-1]])
    k = np.arange(total) - first[owner]
    h_all = gaps[owner] / np.maximum(n[owner], 1)
    tau = starts[owner] + k * h_all
    hs = h_all.copy()
    for j, edges in special.items():
        sl = slice(first[j], first[j] + n[j])
        tau[sl] = edges[:-1]
        hs[sl] = np.diff(edges)
    last = first[live] + n[live] - 1
    rec_idx = np.full(total, -1, dtype=np.int64)
    rec_idx[last] = live
    rst = np.zeros(total, dtype=bool)
    rst[last] = step_reset[live]

    for c0 in range(0, total, chunk):
        c1 = min(total, c0 + chunk)
        t_c, h_c = tau[c0:c1], hs[c0:c1]
        times = np.empty(2 * t_c.size + 1)
        times[0:-1:2] = t_c
        times[1::2] = t_c + 0.5 * h_c
        times[-1] = t_c[-1] + h_c[-1]
        # stage 4 of a step shares its evaluation with stage 1 of the next
        Fs, GGs = spec.blocks(times)
        status = _sweep(Fs, GGs, np.ascontiguousarray(h_c), rec_idx[c0:c1], rst[c0:c1], Y, out, slots,
                        c_hat, lam2, phase)
        if status:
            raise ConditioningError("Sigma is numerically singular during the coefficient solve",
                                    t=float(t_c[status - 1]))
    for j in range(lead, targets.size):
        if alias[j] != j:
            out[j] = out[alias[j]]
    return out


def integrate_forward(spec, times, rk4_step, lam=0.0, eps_start=None, with_factor=True, zero_init=False):
    """Solve from t=0 and record all slots at ``times`` (any order).

    With ``with_factor`` the factor slots start at ``eps_start`` and every
    requested time must be >= eps_start. Returns a dict of stacked blocks.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    order = np.argsort(times, kind="stable")
    ts = times[order]
    Y = initial_state(spec, zero_init=zero_init)
    if with_factor:
        if eps_start is None or ts[0] < eps_start:
            raise ValueError("factor quantities need times >= eps_start")
        advance(spec, 0.0, Y, [eps_start], rk4_step, lam=lam, phase=0)
        Y = start_factor(Y)
        rec = advance(spec, eps_start, Y, ts, rk4_step, lam=lam, phase=1)
    else:
        rec = advance(spec, 0.0, Y, ts, rk4_step, lam=lam, phase=0)
    res = np.empty_like(rec)
    res[order] = rec
    sig = res[:, SIG]
    cond = np.linalg.cond(sig) if with_factor else None
    return {"psi": res[:, PSI], "sigma": sig, "R": res[:, RF], "psihat": res[:, HAT], "cond": cond}
