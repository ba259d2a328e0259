"""Independent reference solvers used by the tests.

Nothing here calls the package's interior-point code.
"""
from __future__ import annotations

import numpy as np


def project_robust_row(y: np.ndarray, g: np.ndarray, e: float, d: float, iters: int = 200) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{v : e ||v|| <= g'v + d}``.

    Stationarity gives ``v(mu) = (y + mu g)(1 - mu e / ||y + mu g||)`` for the
    multiplier ``mu >= 0``; the constraint residual is monotone in ``mu``, so a
    bisection on ``mu`` finds the projection.
    """

    def resid(v: np.ndarray) -> float:
        return e * np.linalg.norm(v) - g @ v - d

    if resid(y) <= 0.0:
        return y.copy()

    def v_of(mu: float) -> np.ndarray:
        w = y + mu * g
        nw = np.linalg.norm(w)
        if nw <= mu * e:
            return np.zeros_like(y)
        return w * (1.0 - mu * e / nw)

    lo, hi = 0.0, 1.0
    while resid(v_of(hi)) > 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("robust row appears infeasible")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if resid(v_of(mid)) > 0.0:
            lo = mid
        else:
            hi = mid
    return v_of(hi)


def dykstra_velocity_program(v_c: np.ndarray, v_max: float, grad: np.ndarray, cbf_rhs: float, e_grad: float,
                             ci: tuple[np.ndarray, float] | None, p: float,
                             iters: int = 20000, tol: float = 1e-13) -> np.ndarray:
    """Minimize ``0.5||v - v_c||^2 + p sigma^2`` over box, robust barrier row and circulation row.

    Works in scaled coordinates ``y = (v, sqrt(2p) sigma)`` where the problem
    is a Euclidean projection onto an intersection of convex sets, solved with
    Dykstra's alternating projections.
    """
    n = 4 if ci is not None else 3
    s = np.sqrt(2.0 * p)
    y0 = np.zeros(n)
    y0[:3] = v_c

    def p_box(y):
        out = y.copy()
        out[:3] = np.clip(y[:3], -v_max, v_max)
        return out

    def p_cbf(y):
        out = y.copy()
        out[:3] = project_robust_row(y[:3], grad, e_grad, cbf_rhs)
        return out

    projections = [p_box, p_cbf]
    if ci is not None:
        a, b = ci
        a_y = a.astype(float).copy()
        a_y[3] = a[3] / s

        def p_half(y):
            viol = a_y @ y - b
            return y if viol <= 0.0 else y - viol * a_y / (a_y @ a_y)

        projections.append(p_half)
    x = y0.copy()
    incr = [np.zeros(n) for _ in projections]
    for _ in range(iters):
        prev = x.copy()
        for k, proj in enumerate(projections):
            z = proj(x + incr[k])
            incr[k] = x + incr[k] - z
            x = z
        if np.max(np.abs(x - prev)) < tol:
            break
    out = x.copy()
    if ci is not None:
        out[3] = x[3] / s
    return out


def observer_error_decay(L: float, m: float, t: np.ndarray) -> np.ndarray:
    """Relative estimation-error norm ``exp(-(L/m) t)`` for a constant disturbance with A = 0, C = I."""
    return np.exp(-(L / m) * t)


def random_velocity_instance(rng: np.random.Generator):
    """A random velocity program shaped like the guidance layer's, plus its raw data.

    Returns ``(program, data)`` where ``data`` holds the nominal velocity, the
    field value and gradient, the bounds and the circulation row.
    """
    from proxsafe import guidance as gd
    from proxsafe.neural_sdf import ErrorBounds

    grad = rng.normal(size=3)
    grad *= rng.uniform(0.8, 1.2) / np.linalg.norm(grad)
    e_h = rng.uniform(0.0, 0.1)
    e_g = rng.uniform(0.0, 0.3)
    value = e_h + rng.exponential(0.5)
    cfg = gd.GuidanceConfig(k_p=rng.uniform(1.0, 20.0), bounds=ErrorBounds(e_h, e_g))
    r = rng.uniform(-10, 10, size=3)
    r_d = rng.uniform(-10, 10, size=3)
    prog, v_c = gd.build_program(r, r_d, value, grad, cfg, with_ci=True)
    a, b = gd.circulation_row(grad, value, cfg.Omega, cfg.upsilon, e_h)
    data = {"v_c": v_c, "v_max": cfg.v_max, "grad": grad, "cbf_rhs": cfg.alpha0(value - e_h), "e_grad": e_g,
            "ci": (a, b), "p": cfg.p}
    return prog, data

