"""Force-level controller: disturbance observer, tracking law and smooth safety filter.

The tracking law drives the chaser velocity toward the safe reference
velocity. A scalar multiple of the velocity-error direction is then added
so that a barrier combining position margin, velocity error and observer
error cannot decrease faster than a linear rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from proxsafe.dynamics import RelState
from proxsafe.neural_sdf import ErrorBounds


class ObserverConfigError(ValueError):
    """Observer gains do not give stable estimation-error dynamics."""


class NonFiniteObserverError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    """Gains of the tracking law and safety filter.

    Attributes:
        mu_v: weight of the position Lyapunov gradient in the tracking law.
        lam: velocity-error damping gain.
        H0: positive definite weight of the position Lyapunov function.
        mu_h: scale of the velocity-error penalty in the barrier.
        beta: weight of the observer-error term in the barrier.
        beta_e: assumed observer error decay rate.
        beta_c: decay rate allowed for the barrier.
        epsilon_filter: sharpness of the smooth filter.
        F_max: per-axis force limit (N).
        allow_invalid_filter: accept ``2 beta_e <= beta_c``; the correction
            term then uses ``|2 beta_e - beta_c|`` so it stays a penalty.
    """

    mu_v: float = 1e-4
    lam: float = 15.0
    H0: np.ndarray = field(default_factory=lambda: np.eye(3))
    mu_h: float = 2.0
    beta: float = 1.0
    beta_e: float = 1.5
    beta_c: float = 1.0
    epsilon_filter: float = 10.0
    F_max: float = 0.1
    allow_invalid_filter: bool = False

    def __post_init__(self) -> None:
        H0 = np.asarray(self.H0, dtype=float).reshape(3, 3)
        object.__setattr__(self, "H0", H0)
        for name in ("mu_v", "lam", "mu_h", "beta", "beta_e", "beta_c", "epsilon_filter", "F_max"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if not np.allclose(H0, H0.T):
            raise ValueError("H0 must be symmetric")
        if np.linalg.eigvalsh(H0).min() <= 0.0:
            raise ValueError("H0 must be positive definite")
        gap = 2.0 * self.beta_e - self.beta_c
        if gap <= 0.0 and not self.allow_invalid_filter:
            raise ValueError(
                f"2*beta_e - beta_c = {gap:g} must be positive (set allow_invalid_filter to override)")
        if gap == 0.0:
            raise ValueError("2*beta_e - beta_c must be nonzero")

    @property
    def filter_denominator(self) -> float:
        return 2.0 * self.beta * abs(2.0 * self.beta_e - self.beta_c)


@dataclass(frozen=True)
class ModelTerms:
    """Orbit-dependent terms of the design model at the current state.

    ``g`` is the gravity term exactly as it enters the acceleration, sign
    included.
    """

    C1: np.ndarray
    C2: np.ndarray
    g: np.ndarray

    @classmethod
    def zero(cls) -> "ModelTerms":
        return cls(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3))


@dataclass
class ObserverState:
    """Disturbance observer with injection ``L v``.

    The estimate is ``xi_hat = z + L v`` and ``d_hat = C xi_hat``, giving
    estimation error dynamics ``A - L C / m``.
    """

    z: np.ndarray
    xi_hat: np.ndarray
    d_hat: np.ndarray
    A: np.ndarray
    C: np.ndarray
    L: np.ndarray
    m: float

    @property
    def error_matrix(self) -> np.ndarray:
        return self.A - self.L @ self.C / self.m

    def copy(self) -> "ObserverState":
        return ObserverState(self.z.copy(), self.xi_hat.copy(), self.d_hat.copy(),
                             self.A, self.C, self.L, self.m)


def observer_init(A: np.ndarray, C: np.ndarray, L: np.ndarray, state: RelState, m: float) -> ObserverState:
    """Observer with zero initial estimate.

    Raises:
        ObserverConfigError: shapes are inconsistent or ``A - L C / m`` has an
            eigenvalue with non-negative real part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    q = A.shape[0]
    if A.shape != (q, q) or C.shape != (3, q) or L.shape != (q, 3):
        raise ObserverConfigError(f"observer shapes A{A.shape} C{C.shape} L{L.shape} are inconsistent")
    if not m > 0.0:
        raise ObserverConfigError("mass must be positive")
    eig = np.linalg.eigvals(A - L @ C / m)
    if np.max(eig.real) >= 0.0:
        raise ObserverConfigError(f"A - L C / m is not Hurwitz (eigenvalues {np.round(eig, 6)})")
    z = -L @ state.v
    return ObserverState(z=z, xi_hat=np.zeros(q), d_hat=np.zeros(3), A=A, C=C, L=L, m=float(m))


def observer_decay_rate(obs: ObserverState) -> float:
    """``-max Re eig(A - L C / m)``."""
    return float(-np.max(np.linalg.eigvals(obs.error_matrix).real))


def observer_rhs(obs: ObserverState, z: np.ndarray, r: np.ndarray, v: np.ndarray,
                 terms: ModelTerms, F: np.ndarray) -> np.ndarray:
    """Time derivative of the observer's internal state."""
    return observer_rhs_from_drift(obs, z, v, -terms.C1 @ v - terms.C2 @ r + terms.g, F)


def observer_rhs_from_drift(obs: ObserverState, z: np.ndarray, v: np.ndarray, drift: np.ndarray,
                            F: np.ndarray) -> np.ndarray:
    """:func:`observer_rhs` with the unforced model acceleration precomputed."""
    A, C, L, m = obs.A, obs.C, obs.L, obs.m
    Lv = L @ v
    model_acc = C @ Lv / m + drift + F / m
    return A @ z - L @ (C @ z) / m + A @ Lv - L @ model_acc


def observer_update(obs: ObserverState, z: np.ndarray, v: np.ndarray) -> ObserverState:
    """New observer state with internal state ``z`` at velocity ``v``."""
    if not np.all(np.isfinite(z)):
        raise NonFiniteObserverError("observer state is not finite")
    xi = z + obs.L @ v
    return ObserverState(z=np.asarray(z, dtype=float), xi_hat=xi, d_hat=obs.C @ xi,
                         A=obs.A, C=obs.C, L=obs.L, m=obs.m)


def observer_step(obs: ObserverState, state: RelState, terms: ModelTerms, F: np.ndarray, dt: float,
                  state_end: RelState | None = None, terms_end: ModelTerms | None = None) -> ObserverState:
    """Advance the observer by one RK4 step of length ``dt``.

    Position, velocity and model terms are interpolated linearly between the
    start values and ``state_end`` / ``terms_end`` (held constant when those
    are omitted). The simulator instead integrates the observer jointly with
    the plant, which evaluates it at the plant's own stage values.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    F = np.asarray(F, dtype=float)
    end = state_end or state
    tend = terms_end or terms

    def at(s: float) -> tuple[np.ndarray, np.ndarray, ModelTerms]:
        r = (1.0 - s) * state.r + s * end.r
        v = (1.0 - s) * state.v + s * end.v
        t = ModelTerms((1.0 - s) * terms.C1 + s * tend.C1, (1.0 - s) * terms.C2 + s * tend.C2,
                       (1.0 - s) * terms.g + s * tend.g)
        return r, v, t

    def f(s: float, z: np.ndarray) -> np.ndarray:
        r, v, t = at(s)
        return observer_rhs(obs, z, r, v, t, F)

    z = obs.z
    k1 = f(0.0, z)
    k2 = f(0.5, z + 0.5 * dt * k1)
    k3 = f(0.5, z + 0.5 * dt * k2)
    k4 = f(1.0, z + dt * k3)
    z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return observer_update(obs, z, end.v)


def reference_control(state: RelState, r_d: np.ndarray, v_s: np.ndarray, J_vs: np.ndarray,
                      terms: ModelTerms, cfg: ControlConfig, m: float) -> np.ndarray:
    """Tracking force that cancels the model terms and drives ``v`` toward ``v_s``."""
    r_e = state.r - np.asarray(r_d, dtype=float)
    acc = (terms.C1 @ state.v + terms.C2 @ state.r - terms.g + np.asarray(J_vs) @ state.v
           - cfg.mu_v * (cfg.H0 @ r_e) - 0.5 * cfg.lam * (state.v - v_s))
    return m * acc


def smooth_filter_coeffs(state: RelState, v_s: np.ndarray, J_vs: np.ndarray, u_ref: np.ndarray,
                         value: float, grad: np.ndarray, bounds: ErrorBounds, terms: ModelTerms,
                         cfg: ControlConfig, m: float) -> tuple[float, float, np.ndarray]:
    """Return ``(a, b, P)``: the barrier condition reads ``a + Lambda * b >= 0``.

    ``P`` is the direction in which the filter modifies the force.
    """
    dv = state.v - np.asarray(v_s, dtype=float)
    P = -dv / (m * cfg.mu_h)
    drift = terms.C1 @ state.v + terms.C2 @ state.r - terms.g + np.asarray(J_vs) @ state.v
    b = float(P @ P)
    a = (float(P @ u_ref)
         + float(np.asarray(grad) @ state.v) - bounds.e_grad_h * float(np.linalg.norm(state.v))
         + float(dv @ drift) / cfg.mu_h
         + cfg.beta_c * (value - bounds.e_h - float(dv @ dv) / (2.0 * cfg.mu_h))
         - b / cfg.filter_denominator)
    return a, b, P


def lambda_filter(a: float, b: float, eps: float) -> float:
    """Smooth nonnegative multiplier with ``a + Lambda * b >= 0`` whenever ``b > 0``.

    Equals ``log(1 + exp(-eps * a / b)) / eps`` and zero when ``b == 0``.
    """
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    if b < 0.0:
        raise ValueError("b must be non-negative")
    if b == 0.0:
        return 0.0
    x = -eps * a / b
    lam = (max(x, 0.0) + math.log1p(math.exp(-abs(x)))) / eps
    # rounding can leave a + lam*b a hair below zero deep in the linear branch
    for _ in range(64):
        if a + lam * b > 0.0 or not math.isfinite(lam):
            break
        lam = math.nextafter(lam, math.inf) if lam > 0.0 else math.ulp(0.0)
        if a + lam * b <= 0.0:
            lam *= 1.0 + 4.0 * 2.0**-52
    return lam


@dataclass
class ControlTelemetry:
    u_ref: np.ndarray
    Lambda: float
    a_h1: float
    b_h1: float
    d_hat: np.ndarray
    saturated: bool
    F_unclamped: np.ndarray


def safe_control(state: RelState, r_d: np.ndarray, v_s: np.ndarray, J_vs: np.ndarray,
                 obs: ObserverState, value: float, grad: np.ndarray, bounds: ErrorBounds,
                 terms: ModelTerms, cfg: ControlConfig, m: float) -> tuple[np.ndarray, ControlTelemetry]:
    """Applied force: tracking law plus safety correction minus the disturbance estimate.

    The result is clamped per axis to ``cfg.F_max``; ``telemetry.saturated``
    records whether the clamp changed anything.
    """
    v_s = np.asarray(v_s, dtype=float)
    u_ref = reference_control(state, r_d, v_s, J_vs, terms, cfg, m)
    a, b, P = smooth_filter_coeffs(state, v_s, J_vs, u_ref, value, grad, bounds, terms, cfg, m)
    lam = lambda_filter(a, b, cfg.epsilon_filter)
    F_raw = u_ref + lam * P - obs.d_hat
    F = np.clip(F_raw, -cfg.F_max, cfg.F_max)
    saturated = bool(np.any(F != F_raw))
    return F, ControlTelemetry(u_ref=u_ref, Lambda=lam, a_h1=a, b_h1=b, d_hat=obs.d_hat.copy(),
                               saturated=saturated, F_unclamped=F_raw)


def barrier_h1(state: RelState, v_s: np.ndarray, e_d_true: np.ndarray, h: float, cfg: ControlConfig) -> float:
    """Composite barrier ``h - |v - v_s|^2 / (2 mu_h) - beta |e_d|^2 / 2``.

    ``h`` is the position-level margin (the learned field minus ``e_h`` in
    the control path, the exact distance in telemetry).
    """
    dv = state.v - np.asarray(v_s, dtype=float)
    ed = np.asarray(e_d_true, dtype=float)
    return float(h - dv @ dv / (2.0 * cfg.mu_h) - cfg.beta * 0.5 * (ed @ ed))
