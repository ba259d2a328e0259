"""Compiled kernels for the relative-motion right-hand side and its integration.

Used by :mod:`proxsafe.dynamics` (drift term) and :mod:`proxsafe.sim`
(plant plus observer over one control interval with the force held).
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def drift(p, e, mu, f, rx, ry, rz, vx, vy, vz, linearized, sign):
    """Unforced acceleration components and ``f_dot`` at true anomaly ``f``.

    ``p`` is the semi-latus rectum; the target sits at ``(0, 0, -p / c)``.
    """
    k = mu / p**3
    c = 1.0 + e * math.cos(f)
    fd = math.sqrt(k) * c**2
    fdd = -2.0 * k * e * math.sin(f) * c**3
    R = p / c
    if linearized:
        s = mu / R**3
        gx, gy, gz = s * rx, s * ry, -2.0 * s * rz
    else:
        ns = math.sqrt(rx * rx + ry * ry + (rz - R) ** 2)
        diff = -(-2.0 * R * rz + rx * rx + ry * ry + rz * rz) / (R + ns)
        cube_diff = diff * (R * R + R * ns + ns * ns)
        q = mu / ns**3
        gx, gy, gz = q * rx, q * ry, q * rz - R * mu * cube_diff / (ns**3 * R**3)
    ax = 2.0 * fd * vz + fdd * rz + fd * fd * rx + sign * gx
    ay = sign * gy
    az = -2.0 * fd * vx - fdd * rx + fd * fd * rz + sign * gz
    return ax, ay, az, fd


@njit(cache=True)
def _matvec(M, x, out):
    for i in range(M.shape[0]):
        acc = 0.0
        for j in range(M.shape[1]):
            acc += M[i, j] * x[j]
        out[i] = acc


@njit(cache=True)
def _rhs(t, y, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, out, w3, wq, wq2):
    ax, ay, az, fd = drift(p, e, mu, y[6], y[0], y[1], y[2], y[3], y[4], y[5], linearized, sign)
    out[0] = y[3]
    out[1] = y[4]
    out[2] = y[5]
    acc = (ax, ay, az)
    for i in range(3):
        d = amps[i] * math.sin(freqs[i] * t + phases[i])
        out[3 + i] = acc[i] + (F[i] + d) / m
    out[6] = fd
    nz = y.shape[0] - 7
    if nz == 0:
        return
    # z' = A z - L C z / m + A L v - L (C L v / m + drift + F / m)
    v = y[3:6]
    z = y[7:]
    _matvec(L, v, wq)           # L v
    _matvec(C, wq, w3)          # C L v
    for i in range(3):
        w3[i] = w3[i] / m + acc[i] + F[i] / m
    _matvec(L, w3, wq2)         # L (...)
    for i in range(nz):
        wq[i] = wq[i] + z[i]    # z + L v
    _matvec(A, wq, out[7:])     # A (z + L v)
    _matvec(C, z, w3)
    for i in range(nz):
        s = 0.0
        for j in range(3):
            s += L[i, j] * w3[j]
        out[7 + i] -= s / m + wq2[i]


@njit(cache=True)
def advance(y0, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, t0, h, nsub):
    """Classical RK4 over ``nsub`` steps of size ``h`` with sinusoidal disturbance.

    State layout: ``r (3), v (3), f, z (q)``; ``q = 0`` disables the observer.
    """
    n = y0.shape[0]
    nz = n - 7
    y = y0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    w3 = np.empty(3)
    wq = np.empty(max(nz, 1))
    wq2 = np.empty(max(nz, 1))
    for s in range(nsub):
        t = t0 + s * h
        _rhs(t, y, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, k1, w3, wq, wq2)
        for i in range(n):
            tmp[i] = y[i] + 0.5 * h * k1[i]
        _rhs(t + 0.5 * h, tmp, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, k2, w3, wq, wq2)
        for i in range(n):
            tmp[i] = y[i] + 0.5 * h * k2[i]
        _rhs(t + 0.5 * h, tmp, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, k3, w3, wq, wq2)
        for i in range(n):
            tmp[i] = y[i] + h * k3[i]
        _rhs(t + h, tmp, F, m, p, e, mu, linearized, sign, amps, freqs, phases, A, C, L, k4, w3, wq, wq2)
        for i in range(n):
            y[i] = y[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return y
