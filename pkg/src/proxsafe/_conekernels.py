"""Compiled primal-dual interior-point core for small dense cone QPs.

Problem form::

    minimize    0.5 x'Px + q'x
    subject to  Gx + s = h,   s in R+^l x Q^{k1} x ... x Q^{kr}

Nesterov-Todd scaling with a Mehrotra predictor-corrector. Each Newton
system is solved in its scaled quasi-definite form by dense LU with one
refinement step.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2
NUMERICAL = 3


@njit(cache=True, error_model="numpy")
def cholesky_solve(H, rhs):
    """Solve H x = rhs for symmetric positive definite H; returns (ok, x)."""
    n = H.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        acc = H[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if not acc > 0.0 or not math.isfinite(acc):
            return False, np.zeros(n)
        L[j, j] = math.sqrt(acc)
        for i in range(j + 1, n):
            acc = H[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    y = np.empty(n)
    for i in range(n):
        acc = rhs[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    return True, x


@njit(cache=True, error_model="numpy")
def _interior_shift(v, l, socdims):
    """Smallest t such that v + t e lies on the cone boundary."""
    t = -np.inf
    for i in range(l):
        t = max(t, -v[i])
    k = l
    for dim in socdims:
        nrm = 0.0
        for j in range(k + 1, k + dim):
            nrm += v[j] * v[j]
        t = max(t, math.sqrt(nrm) - v[k])
        k += dim
    return t


@njit(cache=True, error_model="numpy")
def _add_identity(v, t, l, socdims):
    for i in range(l):
        v[i] += t
    k = l
    for dim in socdims:
        v[k] += t
        k += dim


@njit(cache=True, error_model="numpy")
def _max_step(v, d, l, socdims):
    """Largest alpha with v + alpha d in the cone (inf if unbounded)."""
    alpha = np.inf
    for i in range(l):
        if d[i] < 0.0:
            alpha = min(alpha, -v[i] / d[i])
    k = l
    for dim in socdims:
        a = d[k] * d[k]
        b = v[k] * d[k]
        c = v[k] * v[k]
        for j in range(k + 1, k + dim):
            a -= d[j] * d[j]
            b -= v[j] * d[j]
            c -= v[j] * v[j]
        c = max(c, 0.0)
        disc = b * b - a * c
        if disc >= 0.0:
            den = -b + math.sqrt(disc)
            if den > 0.0:
                alpha = min(alpha, c / den)
        k += dim
    return alpha


@njit(cache=True, error_model="numpy")
def _nt_scaling(s, z, l, socdims):
    """Linear weights, per-cone beta, and the vectors defining each cone block of W."""
    m = s.shape[0]
    wlin = np.empty(l)
    for i in range(l):
        wlin[i] = math.sqrt(s[i] / z[i])
    beta = np.empty(socdims.shape[0])
    wbar = np.zeros(m)
    k = l
    for c in range(socdims.shape[0]):
        dim = socdims[c]
        sn = s[k] * s[k]
        zn = z[k] * z[k]
        for j in range(k + 1, k + dim):
            sn -= s[j] * s[j]
            zn -= z[j] * z[j]
        sn = math.sqrt(max(sn, 1e-300))
        zn = math.sqrt(max(zn, 1e-300))
        dot = 0.0
        for j in range(k, k + dim):
            dot += (s[j] / sn) * (z[j] / zn)
        gamma = math.sqrt(max((1.0 + dot) / 2.0, 1e-300))
        # w is the NT point with W^2 = beta^2 (2 w w' - J); store the
        # vector v with W = beta (2 v v' - J), v = (w + e) / sqrt(2 (w0 + 1))
        w0 = (s[k] / sn + z[k] / zn) / (2.0 * gamma)
        nv = math.sqrt(2.0 * (w0 + 1.0))
        wbar[k] = (w0 + 1.0) / nv
        for j in range(k + 1, k + dim):
            wbar[j] = (s[j] / sn - z[j] / zn) / (2.0 * gamma) / nv
        beta[c] = math.sqrt(sn / zn)
        k += dim
    return wlin, beta, wbar


@njit(cache=True, error_model="numpy")
def _apply_w(v, wlin, beta, wbar, l, socdims, inverse):
    """W v or W^-1 v for the block-diagonal NT scaling."""
    out = np.empty_like(v)
    for i in range(l):
        out[i] = v[i] / wlin[i] if inverse else v[i] * wlin[i]
    k = l
    for c in range(socdims.shape[0]):
        dim = socdims[c]
        if inverse:
            # (1/beta) (2 J w w' J - J) v
            jw_v = wbar[k] * v[k]
            for j in range(k + 1, k + dim):
                jw_v -= wbar[j] * v[j]
            out[k] = (2.0 * wbar[k] * jw_v - v[k]) / beta[c]
            for j in range(k + 1, k + dim):
                out[j] = (-2.0 * wbar[j] * jw_v + v[j]) / beta[c]
        else:
            # beta (2 w w' - J) v
            w_v = 0.0
            for j in range(k, k + dim):
                w_v += wbar[j] * v[j]
            out[k] = beta[c] * (2.0 * wbar[k] * w_v - v[k])
            for j in range(k + 1, k + dim):
                out[j] = beta[c] * (2.0 * wbar[j] * w_v + v[j])
        k += dim
    return out


@njit(cache=True, error_model="numpy")
def _jordan(u, v, l, socdims):
    out = np.empty_like(u)
    for i in range(l):
        out[i] = u[i] * v[i]
    k = l
    for dim in socdims:
        dot = 0.0
        for j in range(k, k + dim):
            dot += u[j] * v[j]
        for j in range(k + 1, k + dim):
            out[j] = u[k] * v[j] + v[k] * u[j]
        out[k] = dot
        k += dim
    return out


@njit(cache=True, error_model="numpy")
def _jordan_solve(lam, r, l, socdims):
    """x with lam o x = r."""
    out = np.empty_like(r)
    for i in range(l):
        out[i] = r[i] / lam[i]
    k = l
    for dim in socdims:
        det = lam[k] * lam[k]
        cross = lam[k] * r[k]
        for j in range(k + 1, k + dim):
            det -= lam[j] * lam[j]
            cross -= lam[j] * r[j]
        x0 = cross / det
        out[k] = x0
        for j in range(k + 1, k + dim):
            out[j] = (r[j] - x0 * lam[j]) / lam[k]
        k += dim
    return out


@njit(cache=True, error_model="numpy")
def lu_solve(K, rhs):
    """Gaussian elimination with partial pivoting; returns (ok, x)."""
    n = K.shape[0]
    A = K.copy()
    b = rhs.copy()
    for c in range(n):
        p = c
        best = abs(A[c, c])
        for r in range(c + 1, n):
            if abs(A[r, c]) > best:
                best = abs(A[r, c])
                p = r
        if not best > 0.0 or not math.isfinite(best):
            return False, np.zeros(n)
        if p != c:
            for j in range(n):
                tmp = A[c, j]
                A[c, j] = A[p, j]
                A[p, j] = tmp
            tmp = b[c]
            b[c] = b[p]
            b[p] = tmp
        for r in range(c + 1, n):
            f = A[r, c] / A[c, c]
            if f != 0.0:
                for j in range(c, n):
                    A[r, j] -= f * A[c, j]
                b[r] -= f * b[c]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= A[i, j] * x[j]
        x[i] = acc / A[i, i]
    return True, x


@njit(cache=True, error_model="numpy")
def _newton(P, G, wlin, beta, wbar, l, socdims, rx, rz, u):
    """Solve the scaled Newton system; returns (ok, dx, dz, ds, W dz).

    Unknowns are dx and W dz in the quasi-definite system
    [[P, M'], [M, -I]] with M = W^-1 G, followed by one step of
    iterative refinement.
    """
    n = P.shape[0]
    m = G.shape[0]
    M = np.empty((m, n))
    for j in range(n):
        M[:, j] = _apply_w(np.ascontiguousarray(G[:, j]), wlin, beta, wbar, l, socdims, True)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = M.T
    K[n:, :n] = M
    for i in range(m):
        K[n + i, n + i] = -1.0
    t = _apply_w(rz, wlin, beta, wbar, l, socdims, True) + u
    rhs = np.empty(n + m)
    rhs[:n] = -rx
    rhs[n:] = -t
    ok, sol = lu_solve(K, rhs)
    if not ok:
        return False, np.zeros(n), np.zeros(m), np.zeros(m), np.zeros(m)
    ok, corr = lu_solve(K, rhs - K @ sol)
    if ok:
        sol = sol + corr
    dx = sol[:n].copy()
    wdz = sol[n:].copy()
    dz = _apply_w(wdz, wlin, beta, wbar, l, socdims, True)
    ds = _apply_w(u - wdz, wlin, beta, wbar, l, socdims, False)
    return True, dx, dz, ds, wdz


@njit(cache=True, error_model="numpy")
def _inf_norm(v):
    r = 0.0
    for x in v:
        r = max(r, abs(x))
    return r


@njit(cache=True, error_model="numpy")
def solve_cone_qp(P, q, G, h, l, socdims, x0, use_x0, max_iter, tol):
    """Run the interior-point iteration.

    Returns (x, s, z, status, iterations).
    """
    n = P.shape[0]
    m = G.shape[0]
    deg = l + socdims.shape[0]
    # normalize the objective so iterates are well scaled; the argmin is unchanged
    pscale = 0.0
    for i in range(n):
        pscale = max(pscale, abs(q[i]))
        for j in range(n):
            pscale = max(pscale, abs(P[i, j]))
    if not pscale > 0.0:
        pscale = 1.0
    P = P / pscale
    q = q / pscale
    if m == 0:
        ok, x = cholesky_solve(P, -q)
        return x, np.zeros(0), np.zeros(0), OPTIMAL if ok else NUMERICAL, 0

    if use_x0:
        x = x0.copy()
        s = h - G @ x
        t = _interior_shift(s, l, socdims)
        if t >= -1e-8 * max(1.0, _inf_norm(s)):
            _add_identity(s, 1.0 + t, l, socdims)
        z = np.zeros(m)
        _add_identity(z, 1.0, l, socdims)
    else:
        H = P + G.T @ G
        ok, x = cholesky_solve(H, -q + G.T @ h)
        if not ok:
            return x, np.zeros(m), np.zeros(m), NUMERICAL, 0
        s = h - G @ x
        z = -s.copy()
        t = _interior_shift(s, l, socdims)
        if t >= -1e-8 * max(1.0, _inf_norm(s)):
            _add_identity(s, 1.0 + t, l, socdims)
        t = _interior_shift(z, l, socdims)
        if t >= -1e-8 * max(1.0, _inf_norm(z)):
            _add_identity(z, 1.0 + t, l, socdims)

    e = np.zeros(m)
    _add_identity(e, 1.0, l, socdims)
    status = MAX_ITER
    it = 0
    # last iterate that met the loose tolerance, kept in case refinement breaks down
    tol_d = tol
    tol_p = tol * max(1.0, _inf_norm(h))
    best_x, best_s, best_z = x.copy(), s.copy(), z.copy()
    have_best = False
    frac = 0.99
    prev_gap = np.inf
    for it in range(max_iter + 1):
        rx = P @ x + q + G.T @ z
        rz = G @ x + s - h
        gap = 0.0
        for i in range(m):
            gap += s[i] * z[i]
        if not (math.isfinite(gap) and math.isfinite(_inf_norm(rx)) and math.isfinite(_inf_norm(rz))):
            status = NUMERICAL
            break
        if _inf_norm(rx) <= tol_d and _inf_norm(rz) <= tol_p and gap <= tol_d:
            status = OPTIMAL
            break
        if _inf_norm(rx) <= 100.0 * tol_d and _inf_norm(rz) <= 100.0 * tol_p and gap <= 100.0 * tol_d:
            best_x[:] = x
            best_s[:] = s
            best_z[:] = z
            have_best = True
        hz = 0.0
        for i in range(m):
            hz += h[i] * z[i]
        if hz < 0.0 and _inf_norm(G.T @ z) <= 1e-9 * -hz and -hz > 1e6:
            status = INFEASIBLE
            break
        if it == max_iter:
            break
        # a growing gap signals cycling of the aggressive step rule
        if gap >= prev_gap:
            frac = 0.9
        prev_gap = gap
        mu = gap / deg
        wlin, beta, wbar = _nt_scaling(s, z, l, socdims)
        lam = _apply_w(z, wlin, beta, wbar, l, socdims, False)
        lam2 = _jordan(lam, lam, l, socdims)

        # affine predictor
        u = -lam
        ok, dxa, dza, dsa, wdza = _newton(P, G, wlin, beta, wbar, l, socdims, rx, rz, u)
        if not ok:
            status = NUMERICAL
            break
        aa = min(1.0, _max_step(s, dsa, l, socdims), _max_step(z, dza, l, socdims))
        gap_aff = 0.0
        for i in range(m):
            gap_aff += (s[i] + aa * dsa[i]) * (z[i] + aa * dza[i])
        sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3

        # combined centering-corrector
        wdsa = u - wdza
        rc = -lam2 + sigma * mu * e - _jordan(wdsa, wdza, l, socdims)
        u = _jordan_solve(lam, rc, l, socdims)
        ok, dx, dz, ds, _ = _newton(P, G, wlin, beta, wbar, l, socdims, rx, rz, u)
        if not ok:
            status = NUMERICAL
            break
        amax = min(_max_step(s, ds, l, socdims), _max_step(z, dz, l, socdims))
        alpha = min(1.0, frac * amax)
        if not alpha > 1e-14:
            status = NUMERICAL
            break
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
    if status != OPTIMAL and status != INFEASIBLE and have_best:
        return best_x, best_s, best_z * pscale, OPTIMAL, it
    return x, s, z * pscale, status, it
