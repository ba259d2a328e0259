"""Small dense second-order cone programs.

A :class:`ConeProgram` holds a convex quadratic objective, second-order cone
rows ``||A x + b|| <= c'x + d`` and linear rows ``G x <= h``. :func:`solve`
runs a primal-dual interior-point method and reports KKT residuals for the
returned point.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from proxsafe import _conekernels as ck

STATUS_NAMES = {
    ck.OPTIMAL: "optimal",
    ck.INFEASIBLE: "infeasible",
    ck.MAX_ITER: "max_iter",
    ck.NUMERICAL: "numerical_failure",
}
KKT_TOL = 1e-7


@dataclass
class SocConstraint:
    """``||A x + b|| <= c'x + d``."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.d = float(self.d)
        if self.A.shape[0] != self.b.shape[0] or self.A.shape[1] != self.c.shape[0]:
            raise ValueError(f"inconsistent cone row shapes A{self.A.shape} b{self.b.shape} c{self.c.shape}")

    def slack(self, x: np.ndarray) -> float:
        """Signed margin ``c'x + d - ||A x + b||`` (negative when violated)."""
        return float(self.c @ x + self.d - np.linalg.norm(self.A @ x + self.b))


@dataclass
class ConeProgram:
    """minimize 0.5 x'Qx + q'x over cone rows and linear rows ``G x <= h``."""

    Q: np.ndarray
    q: np.ndarray
    soc_constraints: list[SocConstraint] = field(default_factory=list)
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.shape[0]
        if self.G is None:
            self.G = np.zeros((0, n))
            self.h = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.q.shape[0])

    def validate(self) -> None:
        n = self.n
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if not np.allclose(self.Q, self.Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(self.Q).max())):
            raise ValueError("Q is not symmetric")
        shift = 1e-10 * max(1.0, float(np.abs(self.Q).max()))
        try:
            np.linalg.cholesky(self.Q + shift * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise ValueError("Q is not positive semidefinite") from exc
        if self.G.shape[0] != self.h.shape[0]:
            raise ValueError("G and h row counts differ")
        for k, c in enumerate(self.soc_constraints):
            if c.A.shape[1] != n:
                raise ValueError(f"cone row {k} has {c.A.shape[1]} columns, expected {n}")

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.q @ x)

    def standard_form(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int, np.ndarray]:
        """(P, q, G, h, l, socdims) for ``G x + s = h`` with s in the product cone."""
        rows = [self.G]
        rhs = [self.h]
        dims = []
        for c in self.soc_constraints:
            rows.append(np.vstack([-c.c[None, :], -c.A]))
            rhs.append(np.concatenate([[c.d], c.b]))
            dims.append(1 + c.A.shape[0])
        G = np.ascontiguousarray(np.vstack(rows))
        h = np.ascontiguousarray(np.concatenate(rhs))
        return (np.ascontiguousarray(self.Q), np.ascontiguousarray(self.q), G, h,
                int(self.G.shape[0]), np.asarray(dims, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(), "q": self.q.tolist(),
            "G": self.G.tolist(), "h": self.h.tolist(),
            "soc": [{"A": c.A.tolist(), "b": c.b.tolist(), "c": c.c.tolist(), "d": c.d}
                    for c in self.soc_constraints],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConeProgram":
        socs = [SocConstraint(np.array(c["A"]), np.array(c["b"]), np.array(c["c"]), c["d"])
                for c in data.get("soc", [])]
        n = len(data["q"])
        G = np.array(data.get("G", []), dtype=float).reshape(-1, n)
        h = np.array(data.get("h", []), dtype=float)
        return cls(np.array(data["Q"]), np.array(data["q"]), socs, G, h)

    def dump_json(self, path: str | Path) -> None:
        """Write the instance for offline reproduction."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "ConeProgram":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    gap: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.gap)


@dataclass
class ConeSolution:
    x: np.ndarray
    status: str
    kkt: KktResiduals
    iterations: int
    solve_time: float
    z: np.ndarray
    s: np.ndarray

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def verify_kkt(prog: ConeProgram, x: np.ndarray, duals: np.ndarray) -> KktResiduals:
    """KKT residuals of ``(x, duals)``; duals are ordered like the standard-form rows.

    Returns absolute residuals: stationarity ``||Qx + q + G'z||_inf``, largest
    constraint violation, largest dual-cone violation, and ``|s'z|`` with
    ``s = h - Gx``.
    """
    P, q, G, h, l, dims = prog.standard_form()
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(duals, dtype=float).reshape(-1)
    if x.shape[0] != prog.n or z.shape[0] != G.shape[0]:
        raise ValueError(f"expected x of length {prog.n} and duals of length {G.shape[0]}")
    stat = float(np.max(np.abs(P @ x + q + G.T @ z))) if prog.n else 0.0
    s = h - G @ x
    primal = 0.0
    dual = 0.0
    if l:
        primal = max(primal, float(np.max(-s[:l])))
        dual = max(dual, float(np.max(-z[:l])))
    k = l
    for dim in dims:
        primal = max(primal, float(np.linalg.norm(s[k + 1:k + dim]) - s[k]))
        dual = max(dual, float(np.linalg.norm(z[k + 1:k + dim]) - z[k]))
        k += dim
    gap = abs(float(s @ z))
    return KktResiduals(stat, max(primal, 0.0), max(dual, 0.0), gap)


def solve(
    prog: ConeProgram,
    warm_start: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-12,
) -> ConeSolution:
    """Solve ``prog`` by a primal-dual interior-point method.

    Args:
        prog: the program.
        warm_start: optional primal starting point; a cold start is retried
            if the warm-started run does not reach optimality.
        max_iter: iteration cap.
        tol: absolute stopping tolerance on residuals and duality gap.
    """
    t0 = time.perf_counter()
    P, q, G, h, l, dims = prog.standard_form()
    use_x0 = warm_start is not None
    x0 = np.ascontiguousarray(warm_start, dtype=float) if use_x0 else np.zeros(prog.n)
    x, s, z, code, iters = ck.solve_cone_qp(P, q, G, h, l, dims, x0, use_x0, max_iter, tol)
    if use_x0 and code != ck.OPTIMAL:
        x, s, z, code2, iters2 = ck.solve_cone_qp(P, q, G, h, l, dims, x0, False, max_iter, tol)
        code, iters = code2, iters + iters2
    kkt = verify_kkt(prog, x, z)
    if code == ck.OPTIMAL and kkt.max() > KKT_TOL:
        code = ck.NUMERICAL
    return ConeSolution(x=x, status=STATUS_NAMES[code], kkt=kkt, iterations=int(iters),
                        solve_time=time.perf_counter() - t0, z=z, s=s)


class ConeSolver:
    """Reusable solver that warm-starts from its previous optimal point.

    One instance is not safe to share across threads.
    """

    def __init__(self, max_iter: int = 100, tol: float = 1e-12, warm: bool = True) -> None:
        self.max_iter = max_iter
        self.tol = tol
        self.warm = warm
        self._last: np.ndarray | None = None

    def reset(self) -> None:
        self._last = None

    def solve(self, prog: ConeProgram) -> ConeSolution:
        ws = self._last if (self.warm and self._last is not None and len(self._last) == prog.n) else None
        sol = solve(prog, ws, self.max_iter, self.tol)
        self._last = sol.x.copy() if sol.optimal else None
        return sol


def quadratic_program(Q: np.ndarray, q: np.ndarray, G: np.ndarray | None = None,
                      h: np.ndarray | None = None,
                      socs: Sequence[SocConstraint] = ()) -> ConeProgram:
    return ConeProgram(Q, q, list(socs), G, h)
