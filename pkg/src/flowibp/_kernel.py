"""Compiled chunk integrator for the stochastic flow and its companions.

One kernel evolves a chunk of independent paths with the Stratonovich
Heun (predictor-corrector) scheme plus post-step projection, together with
the optional companion states:

* derivative flow ``D`` (variational equation, tangent-projected per step),
* orthonormal tangent frame ``E`` (projected and re-orthonormalized per
  step; composes to discrete parallel transport),
* damped transport ``W`` (transport step followed by an implicit-midpoint
  step of the linear ODE with coefficient -Ric/2 + grad Z).

Instead of storing the full operator histories the kernel records, per
step k (left point), the compact contractions that every estimator needs:

    xs[:, k]  path point x_k
    y1[:, k]  D_k^T  X(x_k) dB_k
    y2[:, k]  W_k^T  X(x_k) dB_k
    bt[:, k]  E_k^T  X(x_k) dB_k      (intrinsic antidevelopment increment)

so stochastic-integral sums like sum_k <D_k h_k, X dB_k> become single
einsum contractions of y1 with a per-step table.  Full operator snapshots
are taken only at the (few) marked node indices.

Threads split paths; every output row is written by exactly one path, so
results are bit-identical for any thread count.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import prange

MKIND_FLAT = 0
MKIND_UNIT = 1  # unit circle / unit sphere: radial projection, tangent X

BLOWUP_LIMIT = 1e12


@numba.njit(cache=True, parallel=True, fastmath=False)
def evolve_chunk(mkind, x0, dB, dt, m_stop,
                 a_code, a_param, z_code, z_param, ric,
                 need_deriv, need_frame, need_damped, need_es,
                 gtable, has_gt, snap_idx,
                 xs, y1, y2, bt, s2, dsnap, wsnap, es, errs):
    B, _, a = dB.shape
    di = a if mkind == MKIND_FLAT else a - 1
    nsnap = snap_idx.shape[0]
    # scalar damped coefficient when the linear ODE acts as a multiple of
    # the identity on the tangent space (flat dZ = c*I, or Z = 0)
    scalar_damp = z_code == 0 or z_code == 1
    cs = -0.5 * ric + (z_param if z_code == 1 else 0.0)
    rho = (1.0 + 0.5 * dt * cs) / (1.0 - 0.5 * dt * cs)

    for b in prange(B):
        x = np.empty(a)
        xp = np.empty(a)
        xn = np.empty(a)
        xdb = np.empty(a)
        a0 = np.empty(a)
        a1 = np.empty(a)
        D = np.eye(a)
        Dp = np.empty((a, a))
        G0 = np.empty((a, a))
        Dn = np.empty((a, a))
        E = np.zeros((a, di))
        En = np.empty((a, di))
        W = np.eye(a)
        Wt = np.empty((a, a))
        T = np.empty((di, a))
        C = np.empty((a, a))
        M1 = np.empty((a, a))
        rhs = np.empty((a, a))
        for i in range(a):
            x[i] = x0[b, i]
        if need_frame:
            _init_frame(mkind, a, di, x, E)
        for i in range(a):
            xs[b, 0, i] = x[i]
        if need_es:
            for i in range(a):
                for j in range(di):
                    es[b, 0, i, j] = E[i, j]
        sp = 0
        while sp < nsnap and snap_idx[sp] == 0:
            for i in range(a):
                for j in range(a):
                    dsnap[b, sp, i, j] = D[i, j]
                    wsnap[b, sp, i, j] = W[i, j]
            sp += 1
        s2acc = 0.0
        bad = False

        for k in range(m_stop):
            # --- point update (Heun predictor-corrector + projection) ---
            if mkind == MKIND_FLAT:
                for i in range(a):
                    xdb[i] = dB[b, k, i]
            else:
                c0 = 0.0
                for i in range(a):
                    c0 += x[i] * dB[b, k, i]
                for i in range(a):
                    xdb[i] = dB[b, k, i] - c0 * x[i]
            _drift_into(a_code, a_param, a, x, a0)
            for i in range(a):
                a0[i] = xdb[i] + a0[i] * dt
                xp[i] = x[i] + a0[i]
            if mkind != MKIND_FLAT:
                _normalize(a, xp)
            if mkind == MKIND_FLAT:
                for i in range(a):
                    a1[i] = dB[b, k, i]
            else:
                c1 = 0.0
                for i in range(a):
                    c1 += xp[i] * dB[b, k, i]
                for i in range(a):
                    a1[i] = dB[b, k, i] - c1 * xp[i]
            _drift_into(a_code, a_param, a, xp, xn)  # xn reused as drift buffer
            for i in range(a):
                a1[i] = a1[i] + xn[i] * dt
            for i in range(a):
                xn[i] = x[i] + 0.5 * (a0[i] + a1[i])
            if mkind != MKIND_FLAT:
                _normalize(a, xn)

            # --- derivative flow (same scheme, tangent-projected) --------
            if need_deriv:
                for j in range(a):
                    s = 0.0
                    for i in range(a):
                        s += D[i, j] * xdb[i]
                    y1[b, k, j] = s
                if has_gt:
                    q = 0.0
                    for i in range(a):
                        s = 0.0
                        for j in range(a):
                            s += D[i, j] * gtable[k, j]
                        q += s * s
                    s2acc += q * dt
                _dstep_into(mkind, a_code, a_param, a, x, D, dB[b, k], dt, G0)
                for i in range(a):
                    for j in range(a):
                        Dp[i, j] = D[i, j] + G0[i, j]
                _dstep_into(mkind, a_code, a_param, a, xp, Dp, dB[b, k], dt, Dn)
                for i in range(a):
                    for j in range(a):
                        Dn[i, j] = D[i, j] + 0.5 * (G0[i, j] + Dn[i, j])
                if mkind != MKIND_FLAT:
                    for j in range(a):
                        s = 0.0
                        for i in range(a):
                            s += xn[i] * Dn[i, j]
                        for i in range(a):
                            Dn[i, j] -= s * xn[i]
                for i in range(a):
                    for j in range(a):
                        D[i, j] = Dn[i, j]

            # --- frame transport and damped transport --------------------
            if need_frame:
                for j in range(di):
                    s = 0.0
                    for i in range(a):
                        s += E[i, j] * xdb[i]
                    bt[b, k, j] = s
                if mkind == MKIND_FLAT:
                    if need_damped:
                        _damped_step(scalar_damp, rho, mkind, z_code, z_param,
                                     ric, dt, a, xn, W, Wt, C, M1, rhs)
                        for j in range(a):
                            s = 0.0
                            for i in range(a):
                                s += W[i, j] * xdb[i]
                            y2[b, k, j] = s
                else:
                    for j in range(di):
                        s = 0.0
                        for i in range(a):
                            s += xn[i] * E[i, j]
                        for i in range(a):
                            En[i, j] = E[i, j] - s * xn[i]
                    _orthonormalize(a, di, En)
                    if need_damped:
                        # transport W through the frame step: W <- En Eold^T W
                        for p in range(di):
                            for j in range(a):
                                s = 0.0
                                for i in range(a):
                                    s += E[i, p] * W[i, j]
                                T[p, j] = s
                        for i in range(a):
                            for j in range(a):
                                s = 0.0
                                for p in range(di):
                                    s += En[i, p] * T[p, j]
                                Wt[i, j] = s
                        for i in range(a):
                            for j in range(a):
                                W[i, j] = Wt[i, j]
                        _damped_step(scalar_damp, rho, mkind, z_code, z_param,
                                     ric, dt, a, xn, W, Wt, C, M1, rhs)
                        for j in range(a):
                            s = 0.0
                            for i in range(a):
                                s += W[i, j] * xdb[i]
                            y2[b, k, j] = s
                    for j in range(di):
                        for i in range(a):
                            E[i, j] = En[i, j]

            for i in range(a):
                x[i] = xn[i]
                xs[b, k + 1, i] = x[i]
            if need_es:
                for i in range(a):
                    for j in range(di):
                        es[b, k + 1, i, j] = E[i, j]
            while sp < nsnap and snap_idx[sp] == k + 1:
                for i in range(a):
                    for j in range(a):
                        dsnap[b, sp, i, j] = D[i, j]
                        wsnap[b, sp, i, j] = W[i, j]
                sp += 1

            # --- blowup guard --------------------------------------------
            mx = 0.0
            for i in range(a):
                if abs(x[i]) > mx:
                    mx = abs(x[i])
                if need_deriv:
                    for j in range(a):
                        if abs(D[i, j]) > mx:
                            mx = abs(D[i, j])
            if mx > BLOWUP_LIMIT or mx != mx:
                bad = True
                break

        s2[b] = s2acc
        errs[b] = 1 if bad else 0


@numba.njit(cache=True, inline="always")
def _normalize(a, v):
    n = 0.0
    for i in range(a):
        n += v[i] * v[i]
    n = np.sqrt(n)
    for i in range(a):
        v[i] /= n


@numba.njit(cache=True, inline="always")
def _drift_into(code, c, a, x, out):
    if code == 0:
        for i in range(a):
            out[i] = 0.0
    elif code == 1:
        for i in range(a):
            out[i] = c * x[i]
    elif code == 2:
        xl = x[a - 1]
        for i in range(a):
            out[i] = -c * xl * x[i]
        out[a - 1] += c
    else:  # killing rotation in axes (0, 1)
        for i in range(a):
            out[i] = 0.0
        out[0] = -c * x[1]
        out[1] = c * x[0]


@numba.njit(cache=True, inline="always")
def _dstep_into(mkind, a_code, a_param, a, x, M, db, dt, out):
    """out = dX(x)[M .](db) + dA(x)[M .] dt, columnwise on M."""
    if mkind == MKIND_FLAT:
        for i in range(a):
            for j in range(a):
                out[i, j] = 0.0
    else:
        c = 0.0
        for i in range(a):
            c += x[i] * db[i]
        for j in range(a):
            q = 0.0
            for i in range(a):
                q += db[i] * M[i, j]
            for i in range(a):
                out[i, j] = -(c * M[i, j] + x[i] * q)
    if a_code == 1:
        for i in range(a):
            for j in range(a):
                out[i, j] += a_param * dt * M[i, j]
    elif a_code == 2:
        xl = x[a - 1]
        for j in range(a):
            zr = M[a - 1, j]
            for i in range(a):
                out[i, j] += -a_param * dt * (x[i] * zr + xl * M[i, j])
    elif a_code == 3:
        for j in range(a):
            m0 = M[0, j]
            m1 = M[1, j]
            out[0, j] += -a_param * dt * m1
            out[1, j] += a_param * dt * m0


@numba.njit(cache=True, inline="always")
def _orthonormalize(a, di, E):
    n0 = 0.0
    for i in range(a):
        n0 += E[i, 0] * E[i, 0]
    n0 = np.sqrt(n0)
    for i in range(a):
        E[i, 0] /= n0
    if di == 2:
        d01 = 0.0
        for i in range(a):
            d01 += E[i, 1] * E[i, 0]
        n1 = 0.0
        for i in range(a):
            E[i, 1] -= d01 * E[i, 0]
            n1 += E[i, 1] * E[i, 1]
        n1 = np.sqrt(n1)
        for i in range(a):
            E[i, 1] /= n1


@numba.njit(cache=True, inline="always")
def _init_frame(mkind, a, di, x, E):
    if mkind == MKIND_FLAT:
        for i in range(a):
            for j in range(di):
                E[i, j] = 1.0 if i == j else 0.0
        return
    jm = 0
    for i in range(1, a):
        if abs(x[i]) < abs(x[jm]):
            jm = i
    n1 = 0.0
    for i in range(a):
        v = (1.0 if i == jm else 0.0) - x[jm] * x[i]
        E[i, 0] = v
        n1 += v * v
    n1 = np.sqrt(n1)
    for i in range(a):
        E[i, 0] /= n1
    if di == 2:
        E[0, 1] = x[1] * E[2, 0] - x[2] * E[1, 0]
        E[1, 1] = x[2] * E[0, 0] - x[0] * E[2, 0]
        E[2, 1] = x[0] * E[1, 0] - x[1] * E[0, 0]


@numba.njit(cache=True, inline="always")
def _damped_step(scalar_damp, rho, mkind, z_code, z_param, ric, dt, a,
                 xn, W, Wt, C, M1, rhs):
    """One implicit-midpoint step of dv/ds = (-Ric/2 + grad Z) v on W's columns.

    W's columns are tangent at xn, so when the coefficient acts as a scalar
    there the step is a plain rescaling; otherwise solve the small linear
    system columnwise.
    """
    if scalar_damp:
        for i in range(a):
            for j in range(a):
                W[i, j] *= rho
        return
    # C = -(ric/2) P + P dZ P at xn, applied in ambient coordinates
    for i in range(a):
        for j in range(a):
            C[i, j] = 0.0
    if z_code == 2:
        # Z = c (e_last - x_last x):  dZ[i, j] = -c (x_i d_{j,last} + x_last d_{ij})
        xl = xn[a - 1]
        for i in range(a):
            C[i, a - 1] = -z_param * xn[i]
            C[i, i] += -z_param * xl
    elif z_code == 3:
        C[0, 1] = -z_param
        C[1, 0] = z_param
    # sandwich with tangent projections (flat: P = I)
    if mkind != MKIND_FLAT:
        # C <- P C P with P = I - xn xn^T
        for j in range(a):
            s = 0.0
            for i in range(a):
                s += xn[i] * C[i, j]
            for i in range(a):
                C[i, j] -= xn[i] * s
        for i in range(a):
            s = 0.0
            for j in range(a):
                s += C[i, j] * xn[j]
            for j in range(a):
                C[i, j] -= s * xn[j]
        for i in range(a):
            for j in range(a):
                C[i, j] += -0.5 * ric * ((1.0 if i == j else 0.0) - xn[i] * xn[j])
    # solve (I - dt/2 C) W_new = (I + dt/2 C) W
    for i in range(a):
        for j in range(a):
            M1[i, j] = (1.0 if i == j else 0.0) - 0.5 * dt * C[i, j]
    for i in range(a):
        for j in range(a):
            s = W[i, j]
            for p in range(a):
                s += 0.5 * dt * C[i, p] * W[p, j]
            rhs[i, j] = s
    _solve_small(a, M1, rhs, Wt)
    for i in range(a):
        for j in range(a):
            W[i, j] = Wt[i, j]


@numba.njit(cache=True, inline="always")
def _solve_small(a, M, rhs, out):
    """Gaussian elimination with partial pivoting for a <= 3, multiple RHS."""
    for i in range(a):
        for j in range(a):
            out[i, j] = rhs[i, j]
    for col in range(a):
        piv = col
        big = abs(M[col, col])
        for r in range(col + 1, a):
            if abs(M[r, col]) > big:
                big = abs(M[r, col])
                piv = r
        if piv != col:
            for j in range(a):
                tmp = M[col, j]
                M[col, j] = M[piv, j]
                M[piv, j] = tmp
                tmp = out[col, j]
                out[col, j] = out[piv, j]
                out[piv, j] = tmp
        p = M[col, col]
        for r in range(col + 1, a):
            f = M[r, col] / p
            if f != 0.0:
                for j in range(a):
                    M[r, j] -= f * M[col, j]
                    out[r, j] -= f * out[col, j]
    for col in range(a - 1, -1, -1):
        for j in range(a):
            s = out[col, j]
            for p2 in range(col + 1, a):
                s -= M[col, p2] * out[p2, j]
            out[col, j] = s / M[col, col]
