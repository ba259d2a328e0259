"""Relative orbital motion of a chaser about a target on a Keplerian orbit.

Vectors live in the target's orbital frame: x along the velocity, z toward
the Earth's centre and y completing a right-handed triad, so the frame
rotates at ``(0, -f_dot, 0)`` where ``f`` is the target's true anomaly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import expm

from proxsafe import _simkernels as _sk

MU_EARTH = 3.986004418e14
GRAVITY_MODES = ("exact", "linearized")

ForceSignal = Callable[[float], np.ndarray]


class NonFiniteStateError(FloatingPointError):
    """Raised when integration produces NaN or infinite values."""


@dataclass(frozen=True)
class OrbitState:
    """Target orbit elements plus the current true anomaly."""

    a: float = 6_871_000.0
    e: float = 0.01
    f_theta: float = 0.0
    mu: float = MU_EARTH

    def __post_init__(self) -> None:
        if not self.a > 0.0:
            raise ValueError("semimajor axis must be positive")
        if not 0.0 <= self.e < 1.0:
            raise ValueError("eccentricity must lie in [0, 1)")
        if not self.mu > 0.0:
            raise ValueError("gravitational parameter must be positive")

    @property
    def semi_latus(self) -> float:
        return self.a * (1.0 - self.e**2)

    @property
    def radius(self) -> float:
        """Distance of the target from the Earth's centre."""
        return self.semi_latus / (1.0 + self.e * math.cos(self.f_theta))

    @property
    def r_TI(self) -> np.ndarray:
        """Target position relative to the Earth, in the orbital frame."""
        return np.array([0.0, 0.0, -self.radius])

    def with_anomaly(self, f_theta: float) -> "OrbitState":
        return replace(self, f_theta=float(f_theta))


@dataclass(frozen=True)
class RelState:
    r: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.r, dtype=float).reshape(3)
        v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise NonFiniteStateError("relative state is not finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class ChaserParams:
    m: float = 20.0
    F_max: float = 0.1
    v_max: float = 0.1

    def __post_init__(self) -> None:
        if not (self.m > 0.0 and self.F_max > 0.0 and self.v_max > 0.0):
            raise ValueError("mass, thrust bound and speed bound must be positive")


@dataclass(frozen=True)
class DisturbanceModel:
    """External force either from a linear exosystem or as per-axis sinusoids.

    The exosystem form is ``d(t) = C expm(A t) xi0``. The sinusoid form is
    ``d_i(t) = amplitudes_i * sin(frequencies_i * t + phases_i)``.
    """

    kind: str = "sinusoid"
    amplitudes: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frequencies: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phases: tuple[float, float, float] = (0.0, 0.0, 0.0)
    A: np.ndarray | None = None
    C: np.ndarray | None = None
    xi0: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind == "sinusoid":
            for name in ("amplitudes", "frequencies", "phases"):
                val = tuple(float(x) for x in getattr(self, name))
                if len(val) != 3:
                    raise ValueError(f"{name} must have three entries")
                object.__setattr__(self, name, val)
        elif self.kind == "exosystem":
            if self.A is None or self.C is None or self.xi0 is None:
                raise ValueError("exosystem needs A, C and xi0")
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            C = np.atleast_2d(np.asarray(self.C, dtype=float))
            xi0 = np.asarray(self.xi0, dtype=float).reshape(-1)
            q = xi0.shape[0]
            if A.shape != (q, q) or C.shape != (3, q):
                raise ValueError(f"exosystem shapes inconsistent: A{A.shape} C{C.shape} xi0({q},)")
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "C", C)
            object.__setattr__(self, "xi0", xi0)
        else:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")

    @classmethod
    def none(cls) -> "DisturbanceModel":
        return cls()

    @classmethod
    def reference_sinusoid(cls, scale: float = 0.01) -> "DisturbanceModel":
        """``scale * (sin 0.02t, cos 0.02t, sin 0.01t)`` newtons."""
        return cls("sinusoid", (scale, scale, scale), (0.02, 0.02, 0.01), (0.0, math.pi / 2.0, 0.0))

    def __call__(self, t: float) -> np.ndarray:
        return disturbance_signal(self, t)


def disturbance_signal(model: DisturbanceModel, t: float) -> np.ndarray:
    """Disturbance force (N) at time ``t``."""
    if model.kind == "sinusoid":
        amp = np.asarray(model.amplitudes)
        return amp * np.sin(np.asarray(model.frequencies) * t + np.asarray(model.phases))
    return model.C @ (expm(model.A * t) @ model.xi0)


def true_anomaly_rates(orbit: OrbitState) -> tuple[float, float]:
    """First and second time derivatives of the true anomaly."""
    k = orbit.mu / orbit.semi_latus**3
    c = 1.0 + orbit.e * math.cos(orbit.f_theta)
    f_dot = math.sqrt(k) * c**2
    f_ddot = -2.0 * k * orbit.e * math.sin(orbit.f_theta) * c**3
    return f_dot, f_ddot


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(w) @ x == cross(w, x)``."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def frame_matrices(orbit: OrbitState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coriolis matrix ``C1``, transport matrix ``C2`` and frame rate ``omega_o``."""
    f_dot, f_ddot = true_anomaly_rates(orbit)
    omega = np.array([0.0, -f_dot, 0.0])
    w = skew(omega)
    C1 = 2.0 * w
    C2 = skew(np.array([0.0, -f_ddot, 0.0])) + w @ w
    return C1, C2, omega


def differential_gravity(orbit: OrbitState, r: np.ndarray, mode: str = "exact") -> np.ndarray:
    """``mu * (r_S/|r_S|^3 - r_T/|r_T|^3)`` with ``r_S = r_T + r``, in the orbital frame.

    ``"linearized"`` keeps only the first-order tidal term.
    """
    r = np.asarray(r, dtype=float).reshape(3)
    r_t = orbit.r_TI
    if mode == "linearized":
        R = orbit.radius
        u = r_t / R
        return orbit.mu / R**3 * (r - 3.0 * (u @ r) * u)
    if mode != "exact":
        raise ValueError(f"gravity mode must be one of {GRAVITY_MODES}")
    r_s = r_t + r
    ns = float(np.linalg.norm(r_s))
    if ns == 0.0:
        raise ValueError("chaser at the Earth's centre")
    nt = orbit.radius
    # nt - ns computed without subtracting two nearly equal radii
    diff = -(2.0 * (r_t @ r) + r @ r) / (nt + ns)
    cube_diff = diff * (nt * nt + nt * ns + ns * ns)
    return orbit.mu * (r / ns**3 + r_t * cube_diff / (ns**3 * nt**3))


def drift_accel(orbit: OrbitState, f_theta: float, r: np.ndarray, v: np.ndarray,
                gravity_mode: str = "exact", gravity_sign: float = 1.0) -> tuple[np.ndarray, float]:
    """Unforced relative acceleration ``-C1 v - C2 r + sign * g`` and ``f_dot`` at anomaly ``f_theta``.

    Same quantity as :func:`relative_accel` with zero force, written out in
    components for use inside integrator loops.
    """
    ax, ay, az, fd = _sk.drift(orbit.semi_latus, orbit.e, orbit.mu, float(f_theta), float(r[0]), float(r[1]),
                               float(r[2]), float(v[0]), float(v[1]), float(v[2]),
                               gravity_mode == "linearized", float(gravity_sign))
    return np.array([ax, ay, az]), fd


@dataclass(frozen=True)
class DynamicsConfig:
    """Model options.

    Attributes:
        chaser: chaser mass and limits.
        gravity_mode: ``"exact"`` or ``"linearized"`` differential gravity.
        gravity_sign: coefficient on the gravity term in the acceleration;
            ``+1`` adds ``g`` as in the controller's design model, ``-1``
            gives the physically attractive convention.
    """

    chaser: ChaserParams = field(default_factory=ChaserParams)
    gravity_mode: str = "exact"
    gravity_sign: float = 1.0

    def __post_init__(self) -> None:
        if self.gravity_mode not in GRAVITY_MODES:
            raise ValueError(f"gravity_mode must be one of {GRAVITY_MODES}")
        if self.gravity_sign not in (1.0, -1.0):
            raise ValueError("gravity_sign must be +1 or -1")


def relative_accel(
    state: RelState,
    orbit: OrbitState,
    F: np.ndarray,
    d: np.ndarray,
    chaser: ChaserParams,
    gravity_mode: str = "exact",
    gravity_sign: float = 1.0,
) -> np.ndarray:
    """``-C1 v - C2 r + sign * g + (F + d) / m``."""
    C1, C2, _ = frame_matrices(orbit)
    g = differential_gravity(orbit, state.r, gravity_mode)
    return -C1 @ state.v - C2 @ state.r + gravity_sign * g + (np.asarray(F) + np.asarray(d)) / chaser.m


def rk4_step(fun: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = fun(t, y)
    k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = fun(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(
    state: RelState,
    orbit: OrbitState,
    F: np.ndarray,
    d_signal: ForceSignal | DisturbanceModel | None,
    dt: float,
    substeps: int = 1,
    t0: float = 0.0,
    config: DynamicsConfig | None = None,
) -> tuple[RelState, OrbitState]:
    """Advance position, velocity and true anomaly over ``dt`` seconds.

    ``F`` is held constant over the interval. ``d_signal`` is evaluated at
    absolute time (``t0`` plus the stage offset). Each of ``substeps`` pieces
    uses one classical Runge-Kutta step.

    Raises:
        NonFiniteStateError: the integration produced NaN or inf.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    cfg = config or DynamicsConfig()
    F = np.asarray(F, dtype=float).reshape(3)
    m = cfg.chaser.m

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        r, v = y[:3], y[3:6]
        d = np.zeros(3) if d_signal is None else np.asarray(d_signal(t), dtype=float)
        drift, f_dot = drift_accel(orbit, y[6], r, v, cfg.gravity_mode, cfg.gravity_sign)
        out = np.empty(7)
        out[:3] = v
        out[3:6] = drift + (F + d) / m
        out[6] = f_dot
        return out

    y = np.concatenate([state.r, state.v, [orbit.f_theta]])
    h = dt / substeps
    t = t0
    for _ in range(substeps):
        y = rk4_step(rhs, t, y, h)
        t += h
    if not np.all(np.isfinite(y)):
        raise NonFiniteStateError(f"non-finite state after step at t={t0 + dt:g}")
    return RelState(y[:3], y[3:6]), orbit.with_anomaly(y[6])
