"""Safe reference velocity from a second-order cone program.

The program keeps the commanded velocity close to a saturated
proportional law while enforcing a barrier condition that accounts for
errors in the distance field, an optional circulation row that pushes the
chaser sideways near the surface, and per-axis speed limits.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from proxsafe import socp
from proxsafe.neural_sdf import ErrorBounds

ACTIVE_TOL = 1e-7
FD_STEP = 1e-4

DEFAULT_OMEGA = ((0.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, 0.0, 0.0))


class FieldEvaluator(Protocol):
    def value_and_gradient(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values (n,) and gradients (n, 3) at an (n, 3) batch."""
        ...


@dataclass(frozen=True)
class GuidanceConfig:
    """Parameters of the velocity program.

    Attributes:
        v_max: per-axis speed limit (m/s).
        k_p: distance scale of the saturated nominal law (m).
        alpha0_gain: slope of the linear class-K function (1/s).
        Omega: circulation matrix; the tangent direction is ``Omega @ grad``.
        upsilon: ``(c0, slope)`` of the decreasing margin ``c0 - slope * x``.
        p: weight on the squared circulation slack.
        bounds: distance-field error bounds.
    """

    v_max: float = 0.1
    k_p: float = 5.0
    alpha0_gain: float = 0.08
    Omega: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_OMEGA))
    upsilon: tuple[float, float] = (0.1, 1.0)
    p: float = 1.0
    bounds: ErrorBounds = field(default_factory=lambda: ErrorBounds(0.0, 0.0))

    def __post_init__(self) -> None:
        omega = np.asarray(self.Omega, dtype=float).reshape(3, 3)
        object.__setattr__(self, "Omega", omega)
        object.__setattr__(self, "upsilon", (float(self.upsilon[0]), float(self.upsilon[1])))
        if not (self.v_max > 0.0 and self.k_p > 0.0 and self.alpha0_gain > 0.0 and self.p > 0.0):
            raise ValueError("v_max, k_p, alpha0_gain and p must be positive")
        if not (self.upsilon[0] > 0.0 and self.upsilon[1] > 0.0):
            raise ValueError("upsilon needs a positive value at zero and a positive slope")

    def upsilon_at(self, x: float) -> float:
        return self.upsilon[0] - self.upsilon[1] * x

    def alpha0(self, x: float) -> float:
        return self.alpha0_gain * x


@dataclass
class SafeVelocityResult:
    """Solution of the velocity program.

    ``active_constraints`` maps ``"cbf"``, ``"ci"`` and ``"box"`` to whether
    the row is tight at ``v_s``. ``status`` is the solver status; when
    ``fallback_used`` is set, ``v_s`` is zero and ``sigma`` is the smallest
    magnitude slack that keeps the circulation row satisfied.
    ``inside_margin`` flags a field value below ``e_h``: zero velocity then
    violates the barrier row and only an outward ``v_s`` can satisfy it.
    """

    v_s: np.ndarray
    sigma: float
    active_constraints: dict[str, bool]
    fallback_used: bool
    solve_time: float
    status: str = "optimal"
    h_value: float = float("nan")
    v_c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inside_margin: bool = False

    def active_set(self) -> tuple[bool, ...]:
        return tuple(self.active_constraints[k] for k in ("cbf", "ci", "box"))


def nominal_velocity(r: np.ndarray, r_d: np.ndarray, v_max: float, k_p: float) -> np.ndarray:
    """Saturated proportional velocity ``-v_max * tanh((r - r_d) / k_p)``."""
    if not k_p > 0.0:
        raise ValueError("k_p must be positive")
    return -v_max * np.tanh((np.asarray(r, dtype=float) - np.asarray(r_d, dtype=float)) / k_p)


def nominal_jacobian(r: np.ndarray, r_d: np.ndarray, v_max: float, k_p: float) -> np.ndarray:
    re = (np.asarray(r, dtype=float) - np.asarray(r_d, dtype=float)) / k_p
    return np.diag(-(v_max / k_p) / np.cosh(re) ** 2)


def robust_cbf_row(grad: np.ndarray, value: float, bounds: ErrorBounds, alpha0_gain: float,
                   n_vars: int = 3) -> socp.SocConstraint:
    """``e_grad_h * ||v|| <= grad'v + alpha0 * (value - e_h)`` over the first three variables."""
    A = np.zeros((3, n_vars))
    A[:, :3] = bounds.e_grad_h * np.eye(3)
    c = np.zeros(n_vars)
    c[:3] = np.asarray(grad, dtype=float)
    return socp.SocConstraint(A, np.zeros(3), c, alpha0_gain * (value - bounds.e_h))


def circulation_row(grad: np.ndarray, value: float, Omega: np.ndarray,
                    upsilon: tuple[float, float], e_h: float) -> tuple[np.ndarray, float]:
    """Linear row ``(a, b)`` meaning ``a @ (v, sigma) <= b``.

    Encodes ``T'v - sigma >= Upsilon(value - e_h)`` with ``T = Omega @ grad``.
    """
    T = np.asarray(Omega, dtype=float) @ np.asarray(grad, dtype=float)
    ups = upsilon[0] - upsilon[1] * (value - e_h)
    return np.concatenate([-T, [1.0]]), -ups


def fallback_sigma(value: float, cfg: GuidanceConfig) -> float:
    """Smallest-magnitude slack that makes ``v_s = 0`` satisfy the circulation row."""
    return min(0.0, -cfg.upsilon_at(value - cfg.bounds.e_h))


def build_program(r: np.ndarray, r_d: np.ndarray, value: float, grad: np.ndarray,
                  cfg: GuidanceConfig, with_ci: bool) -> tuple[socp.ConeProgram, np.ndarray]:
    """Cone program over ``v`` (and ``sigma`` when ``with_ci``) plus the nominal velocity."""
    v_c = nominal_velocity(r, r_d, cfg.v_max, cfg.k_p)
    n = 4 if with_ci else 3
    Q = np.eye(n)
    q = np.zeros(n)
    q[:3] = -v_c
    if with_ci:
        Q[3, 3] = 2.0 * cfg.p
    G = np.zeros((6, n))
    G[:3, :3] = -np.eye(3)
    G[3:, :3] = np.eye(3)
    h = np.full(6, cfg.v_max)
    rows, rhs = [G], [h]
    socs = []
    if cfg.bounds.e_grad_h > 0.0:
        socs.append(robust_cbf_row(grad, value, cfg.bounds, cfg.alpha0_gain, n))
    else:
        row = np.zeros(n)
        row[:3] = -np.asarray(grad, dtype=float)
        rows.append(row[None, :])
        rhs.append([cfg.alpha0(value - cfg.bounds.e_h)])
    if with_ci:
        a, b = circulation_row(grad, value, cfg.Omega, cfg.upsilon, cfg.bounds.e_h)
        rows.append(a[None, :])
        rhs.append([b])
    prog = socp.ConeProgram(Q, q, socs, np.vstack(rows), np.concatenate(rhs))
    return prog, v_c


def _active(v: np.ndarray, sigma: float, value: float, grad: np.ndarray,
            cfg: GuidanceConfig, with_ci: bool) -> dict[str, bool]:
    cbf_slack = grad @ v + cfg.alpha0(value - cfg.bounds.e_h) - cfg.bounds.e_grad_h * np.linalg.norm(v)
    act = {
        "cbf": bool(cbf_slack <= ACTIVE_TOL),
        "ci": False,
        "box": bool(np.any(cfg.v_max - np.abs(v) <= ACTIVE_TOL)),
    }
    if with_ci:
        a, b = circulation_row(grad, value, cfg.Omega, cfg.upsilon, cfg.bounds.e_h)
        act["ci"] = bool(b - a @ np.concatenate([v, [sigma]]) <= ACTIVE_TOL)
    return act


def nominal_is_optimal(v_c: np.ndarray, value: float, grad: np.ndarray, cfg: GuidanceConfig,
                       with_ci: bool) -> bool:
    """True when ``(v_c, sigma=0)`` satisfies every row with slack above ``ACTIVE_TOL``.

    The objective is minimised there, so it is then the exact solution.
    """
    if _active(v_c, 0.0, value, grad, cfg, with_ci) != {"cbf": False, "ci": False, "box": False}:
        return False
    return True


def solve_at(r: np.ndarray, r_d: np.ndarray, value: float, grad: np.ndarray,
             cfg: GuidanceConfig, with_ci: bool,
             solver: socp.ConeSolver | None = None) -> SafeVelocityResult:
    """Safe velocity given the field value and gradient at ``r``.

    The cone solver is skipped when the nominal velocity is already feasible
    with every row slack.
    """
    t0 = time.perf_counter()
    grad = np.asarray(grad, dtype=float).reshape(3)
    v_c = nominal_velocity(r, r_d, cfg.v_max, cfg.k_p)
    if nominal_is_optimal(v_c, value, grad, cfg, with_ci):
        return SafeVelocityResult(
            v_s=v_c.copy(), sigma=0.0, active_constraints={"cbf": False, "ci": False, "box": False},
            fallback_used=False, solve_time=time.perf_counter() - t0, status="optimal",
            h_value=value - cfg.bounds.e_h, v_c=v_c, inside_margin=bool(value < cfg.bounds.e_h))
    prog, v_c = build_program(r, r_d, value, grad, cfg, with_ci)
    sol = solver.solve(prog) if solver is not None else socp.solve(prog)
    if sol.optimal:
        v = np.clip(sol.x[:3], -cfg.v_max, cfg.v_max)
        sigma = float(sol.x[3]) if with_ci else 0.0
        fallback = False
    else:
        v = np.zeros(3)
        sigma = fallback_sigma(value, cfg) if with_ci else 0.0
        fallback = True
    return SafeVelocityResult(
        v_s=v, sigma=sigma, active_constraints=_active(v, sigma, value, grad, cfg, with_ci),
        fallback_used=fallback, solve_time=time.perf_counter() - t0, status=sol.status,
        h_value=value - cfg.bounds.e_h, v_c=v_c, inside_margin=bool(value < cfg.bounds.e_h))


def safe_velocity(r: np.ndarray, r_d: np.ndarray, sdf: FieldEvaluator, cfg: GuidanceConfig,
                  with_ci: bool = True, warm: socp.ConeSolver | None = None) -> SafeVelocityResult:
    """Solve the velocity program at position ``r``.

    Solver failure is not raised: the result carries ``fallback_used`` and
    ``v_s = 0``, which is always feasible while the field value is at least
    ``e_h``. A state inside the inflated surface makes the barrier row
    infeasible at ``v_s = 0``; the status field then reports it.
    """
    r = np.asarray(r, dtype=float).reshape(3)
    vals, grads = sdf.value_and_gradient(r[None, :])
    return solve_at(r, r_d, float(np.asarray(vals).reshape(-1)[0]), np.asarray(grads).reshape(-1, 3)[0],
                    cfg, with_ci, warm)


@dataclass
class JacobianResult:
    jacobian: np.ndarray
    method: str
    discontinuous: bool


def jacobian_vs(r: np.ndarray, r_d: np.ndarray, sdf: FieldEvaluator, cfg: GuidanceConfig,
                with_ci: bool = True, method: str = "finite_diff", step: float = FD_STEP,
                center: SafeVelocityResult | None = None) -> JacobianResult:
    """Jacobian of the safe velocity with respect to position.

    ``"finite_diff"`` uses central differences on six re-solved programs. If
    any of them lands on a different active set than the centre point (or
    falls back), the map is not smooth there and the nominal-law Jacobian is
    returned with ``discontinuous`` set. ``"nominal_only"`` skips the solves.
    """
    r = np.asarray(r, dtype=float).reshape(3)
    nominal = nominal_jacobian(r, r_d, cfg.v_max, cfg.k_p)
    if method == "nominal_only":
        return JacobianResult(nominal, "nominal_only", False)
    if method != "finite_diff":
        raise ValueError(f"unknown Jacobian method {method!r}")
    offsets = np.vstack([np.eye(3) * step, -np.eye(3) * step])
    pts = np.vstack([r[None, :], r + offsets])
    vals, grads = sdf.value_and_gradient(pts)
    vals = np.asarray(vals).reshape(-1)
    grads = np.asarray(grads).reshape(-1, 3)
    base = center if center is not None else solve_at(r, r_d, vals[0], grads[0], cfg, with_ci)
    jac = np.empty((3, 3))
    broken = base.fallback_used
    plus = [solve_at(pts[1 + k], r_d, vals[1 + k], grads[1 + k], cfg, with_ci) for k in range(3)]
    minus = [solve_at(pts[4 + k], r_d, vals[4 + k], grads[4 + k], cfg, with_ci) for k in range(3)]
    for k in range(3):
        for res in (plus[k], minus[k]):
            broken |= res.fallback_used or res.active_set() != base.active_set()
        jac[:, k] = (plus[k].v_s - minus[k].v_s) / (2.0 * step)
    if broken:
        return JacobianResult(nominal, "nominal_only", True)
    return JacobianResult(jac, "finite_diff", False)
