"""Closed-loop episodes, scenario files and the Monte Carlo harness.

One control step evaluates the distance field, solves the velocity program,
estimates its Jacobian, computes the force and then holds that force while
the plant and the disturbance observer are integrated together.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from proxsafe import __version__, shapes
from proxsafe import _simkernels as _sk
from proxsafe import control as ctl
from proxsafe import dynamics as dyn_mod
from proxsafe import guidance as gd
from proxsafe.neural_sdf import ErrorBounds, NeuralSdf, load_model

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

ANALYTIC_SHAPES = {
    "sphere_with_panels": shapes.sphere_with_panels,
    "sphere": lambda: shapes.Sphere((0.0, 0.0, 0.0), 2.0),
}
OUTCOMES = ("converged", "stalled", "unsafe", "aborted")
# "hold": force fixed over the control period; "physics": guidance output held,
# force law re-evaluated from the current state at every physics step
FORCE_UPDATES = ("hold", "physics")

LOG_COLUMNS = (
    "t", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z",
    "v_c_x", "v_c_y", "v_c_z", "v_s_x", "v_s_y", "v_s_z", "sigma",
    "F_x", "F_y", "F_z", "d_x", "d_y", "d_z", "d_hat_x", "d_hat_y", "d_hat_z",
    "h", "h_true", "h1", "V0", "V1", "Lambda", "status", "saturated", "fallback",
)
TIMING_COLUMN = "compute_time"


class ScenarioError(ValueError):
    """Invalid or unsafe scenario configuration."""


@dataclass(frozen=True)
class TargetSpec:
    """Where the distance field comes from.

    ``kind="analytic"`` uses a built-in shape both for control and for the
    true margin. ``kind="neural"`` loads a trained model for control; the
    true margin then uses ``shape`` when given (or ``mesh``).
    """

    kind: str = "analytic"
    shape: str | None = "sphere_with_panels"
    model: str | None = None
    mesh: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("analytic", "neural"):
            raise ScenarioError(f"target kind must be 'analytic' or 'neural', got {self.kind!r}")
        if self.kind == "analytic" and self.shape not in ANALYTIC_SHAPES:
            raise ScenarioError(f"unknown analytic shape {self.shape!r}; choose from {sorted(ANALYTIC_SHAPES)}")
        if self.kind == "neural" and not self.model:
            raise ScenarioError("neural target needs a model path")


@dataclass(frozen=True)
class MonteCarloSpec:
    runs: int = 100
    x_range: tuple[float, float] = (-15.0, 15.0)
    y_range: tuple[float, float] = (-5.0, 5.0)
    z_range: tuple[float, float] = (-4.0, -4.0)
    workers: int = 1
    min_initial_margin: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    target: TargetSpec = field(default_factory=TargetSpec)
    r0: tuple[float, float, float] = (0.0, 10.0, 6.0)
    v0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_d: tuple[float, float, float] = (0.0, -10.0, -4.0)
    horizon: float = 3000.0
    control_period: float = 1.0
    physics_dt: float = 0.1
    converge_tol: float = 0.5
    orbit: dyn_mod.OrbitState = field(default_factory=dyn_mod.OrbitState)
    dynamics: dyn_mod.DynamicsConfig = field(default_factory=dyn_mod.DynamicsConfig)
    disturbance: dyn_mod.DisturbanceModel = field(default_factory=dyn_mod.DisturbanceModel.none)
    guidance: gd.GuidanceConfig = field(default_factory=gd.GuidanceConfig)
    with_ci: bool = True
    jacobian: str = "finite_diff"
    e_h_override: float | None = None
    e_grad_h_override: float | None = None
    control: ctl.ControlConfig = field(default_factory=ctl.ControlConfig)
    use_observer: bool = True
    force_update: str = "hold"
    observer_A: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    observer_C: np.ndarray = field(default_factory=lambda: np.eye(3))
    observer_L: np.ndarray = field(default_factory=lambda: 50.0 * np.eye(3))
    montecarlo: MonteCarloSpec = field(default_factory=MonteCarloSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.horizon > 0.0:
            raise ScenarioError("horizon must be positive")
        if not self.physics_dt > 0.0 or self.control_period < self.physics_dt:
            raise ScenarioError("need physics_dt > 0 and control_period >= physics_dt")
        if abs(self.control_period / self.physics_dt - round(self.control_period / self.physics_dt)) > 1e-9:
            raise ScenarioError("control_period must be a whole multiple of physics_dt")
        if self.jacobian not in ("finite_diff", "nominal_only"):
            raise ScenarioError("jacobian must be 'finite_diff' or 'nominal_only'")
        if self.force_update not in FORCE_UPDATES:
            raise ScenarioError(f"force_update must be one of {FORCE_UPDATES}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.control_period))

    @property
    def substeps(self) -> int:
        return int(round(self.control_period / self.physics_dt))

    def replace(self, **changes: Any) -> "ScenarioConfig":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return ScenarioConfig(**data)


# --------------------------------------------------------------------------- config files

def _vec(x: Any, n: int, name: str) -> tuple[float, ...]:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape[0] != n:
        raise ScenarioError(f"{name} must have {n} numbers, got {arr.shape[0]}")
    return tuple(float(v) for v in arr)


def _mat(x: Any, name: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if shape is not None:
        if arr.size != shape[0] * shape[1]:
            raise ScenarioError(f"{name} must have {shape[0] * shape[1]} entries")
        arr = arr.reshape(shape)
    return np.atleast_2d(arr)


def _take(block: dict, allowed: Sequence[str], where: str) -> dict:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ScenarioError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    return block


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Build a scenario from a parsed config mapping; unknown keys are rejected."""
    data = copy.deepcopy(data)
    top = ("name", "seed", "horizon", "control_period", "physics_dt", "r0", "v0", "r_d", "converge_tol",
           "target", "orbit", "disturbance", "guidance", "control", "montecarlo")
    _take(data, top, "top level")
    kw: dict[str, Any] = {}
    for key in ("name",):
        if key in data:
            kw[key] = str(data[key])
    for key in ("horizon", "control_period", "physics_dt", "converge_tol"):
        if key in data:
            kw[key] = float(data[key])
    if "seed" in data:
        kw["seed"] = int(data["seed"])
    for key in ("r0", "v0", "r_d"):
        if key in data:
            kw[key] = _vec(data[key], 3, key)

    if "target" in data:
        t = _take(data["target"], ("kind", "shape", "model", "mesh"), "target")
        paths = {}
        for key in ("model", "mesh"):
            if t.get(key):
                p = Path(t[key])
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                paths[key] = str(p)
        kind = t.get("kind", "analytic")
        kw["target"] = TargetSpec(kind=kind, shape=t.get("shape", "sphere_with_panels" if kind == "analytic" else None),
                                  model=paths.get("model"), mesh=paths.get("mesh"))

    if "orbit" in data:
        o = _take(data["orbit"], ("a_m", "e", "f0_rad", "mu", "gravity_mode", "gravity_sign"), "orbit")
        orbit_kw = {}
        for src, dst in (("a_m", "a"), ("e", "e"), ("f0_rad", "f_theta"), ("mu", "mu")):
            if src in o:
                orbit_kw[dst] = float(o[src])
        kw["orbit"] = dyn_mod.OrbitState(**orbit_kw)
        dyn_kw = {}
        if "gravity_mode" in o:
            dyn_kw["gravity_mode"] = str(o["gravity_mode"])
        if "gravity_sign" in o:
            dyn_kw["gravity_sign"] = float(o["gravity_sign"])
        kw["dynamics_kw"] = dyn_kw

    chaser_kw: dict[str, float] = {}
    if "disturbance" in data:
        d = _take(data["disturbance"], ("kind", "amplitudes", "frequencies", "phases", "A", "C", "xi0", "scale"),
                  "disturbance")
        kind = d.get("kind", "none")
        if kind == "none":
            kw["disturbance"] = dyn_mod.DisturbanceModel.none()
        elif kind == "reference":
            kw["disturbance"] = dyn_mod.DisturbanceModel.reference_sinusoid(float(d.get("scale", 0.01)))
        elif kind == "sinusoid":
            kw["disturbance"] = dyn_mod.DisturbanceModel(
                "sinusoid", _vec(d["amplitudes"], 3, "amplitudes"), _vec(d["frequencies"], 3, "frequencies"),
                _vec(d.get("phases", [0, 0, 0]), 3, "phases"))
        elif kind == "exosystem":
            xi0 = np.asarray(d["xi0"], dtype=float).reshape(-1)
            q = xi0.shape[0]
            kw["disturbance"] = dyn_mod.DisturbanceModel(
                "exosystem", A=_mat(d["A"], "A", (q, q)), C=_mat(d["C"], "C", (3, q)), xi0=xi0)
        else:
            raise ScenarioError(f"unknown disturbance kind {kind!r}")

    if "guidance" in data:
        g = _take(data["guidance"], ("v_max", "k_p", "alpha0_gain", "omega", "upsilon_c0", "upsilon_slope", "p",
                                     "with_ci", "e_h_override", "e_grad_h_override", "jacobian"), "guidance")
        g_kw: dict[str, Any] = {}
        for key in ("v_max", "k_p", "alpha0_gain", "p"):
            if key in g:
                g_kw[key] = float(g[key])
        if "omega" in g:
            g_kw["Omega"] = _mat(g["omega"], "omega", (3, 3))
        if "upsilon_c0" in g or "upsilon_slope" in g:
            g_kw["upsilon"] = (float(g.get("upsilon_c0", 0.1)), float(g.get("upsilon_slope", 1.0)))
        kw["guidance"] = gd.GuidanceConfig(**g_kw)
        if "v_max" in g:
            chaser_kw["v_max"] = float(g["v_max"])
        if "with_ci" in g:
            kw["with_ci"] = bool(g["with_ci"])
        if "jacobian" in g:
            kw["jacobian"] = str(g["jacobian"])
        for key in ("e_h_override", "e_grad_h_override"):
            if key in g:
                kw[key] = float(g[key])

    if "control" in data:
        c = _take(data["control"], ("mu_v", "lambda", "H0", "mu_h", "beta", "beta_e", "beta_c", "epsilon_filter",
                                    "F_max", "allow_invalid_filter", "use_observer", "force_update", "observer",
                                    "mass"), "control")
        c_kw: dict[str, Any] = {}
        for src, dst in (("mu_v", "mu_v"), ("lambda", "lam"), ("mu_h", "mu_h"), ("beta", "beta"),
                         ("beta_e", "beta_e"), ("beta_c", "beta_c"), ("epsilon_filter", "epsilon_filter"),
                         ("F_max", "F_max")):
            if src in c:
                c_kw[dst] = float(c[src])
        if "H0" in c:
            c_kw["H0"] = _mat(c["H0"], "H0", (3, 3))
        if "allow_invalid_filter" in c:
            c_kw["allow_invalid_filter"] = bool(c["allow_invalid_filter"])
        try:
            kw["control"] = ctl.ControlConfig(**c_kw)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        if "F_max" in c:
            chaser_kw["F_max"] = float(c["F_max"])
        if "mass" in c:
            chaser_kw["m"] = float(c["mass"])
        if "use_observer" in c:
            kw["use_observer"] = bool(c["use_observer"])
        if "force_update" in c:
            kw["force_update"] = str(c["force_update"])
        if "observer" in c:
            ob = _take(c["observer"], ("A", "C", "L"), "ctl.observer")
            A = np.atleast_2d(np.asarray(ob.get("A", np.zeros((3, 3))), dtype=float))
            q = int(round(math.sqrt(A.size))) if A.ndim == 1 or A.shape[0] == 1 else A.shape[0]
            kw["observer_A"] = A.reshape(q, q)
            kw["observer_C"] = _mat(ob.get("C", np.eye(3)), "C", (3, q))
            kw["observer_L"] = _mat(ob.get("L", 50.0 * np.eye(3)), "L", (q, 3))

    if "montecarlo" in data:
        m = _take(data["montecarlo"], ("runs", "x_range", "y_range", "z_range", "workers", "min_initial_margin"),
                  "montecarlo")
        m_kw: dict[str, Any] = {}
        for key in ("x_range", "y_range", "z_range"):
            if key in m:
                m_kw[key] = _vec(m[key], 2, key)
        for key in ("runs", "workers"):
            if key in m:
                m_kw[key] = int(m[key])
        if "min_initial_margin" in m:
            m_kw["min_initial_margin"] = float(m["min_initial_margin"])
        kw["montecarlo"] = MonteCarloSpec(**m_kw)

    dyn_kw = kw.pop("dynamics_kw", {})
    try:
        kw["dynamics"] = dyn_mod.DynamicsConfig(chaser=dyn_mod.ChaserParams(**chaser_kw), **dyn_kw)
        return ScenarioConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read a TOML (or JSON) scenario file.

    Relative model and mesh paths resolve against the file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_dict(data, base_dir=path.parent)


def builtin_scenario(name: str) -> ScenarioConfig:
    """Load one of the shipped presets by name (e.g. ``"case1_ci"``)."""
    from importlib import resources

    ref = resources.files("proxsafe").joinpath("scenarios", f"{name}.toml")
    if not ref.is_file():
        raise ScenarioError(f"no built-in scenario named {name!r}")
    data = tomllib.loads(ref.read_text(encoding="utf-8"))
    return scenario_from_dict(data)


def list_builtin_scenarios() -> list[str]:
    from importlib import resources

    root = resources.files("proxsafe").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Fully resolved scenario as plain data (round-trips through :func:`scenario_from_dict`)."""
    g, c, o, dy = cfg.guidance, cfg.control, cfg.orbit, cfg.dynamics
    dist = cfg.disturbance
    if dist.kind == "sinusoid":
        dd: dict[str, Any] = {"kind": "sinusoid", "amplitudes": list(dist.amplitudes),
                              "frequencies": list(dist.frequencies), "phases": list(dist.phases)}
    else:
        dd = {"kind": "exosystem", "A": dist.A.tolist(), "C": dist.C.tolist(), "xi0": dist.xi0.tolist()}
    target = {k: v for k, v in asdict(cfg.target).items() if v is not None}
    out = {
        "name": cfg.name, "seed": cfg.seed, "horizon": cfg.horizon, "control_period": cfg.control_period,
        "physics_dt": cfg.physics_dt, "r0": list(cfg.r0), "v0": list(cfg.v0), "r_d": list(cfg.r_d),
        "converge_tol": cfg.converge_tol, "target": target,
        "orbit": {"a_m": o.a, "e": o.e, "f0_rad": o.f_theta, "mu": o.mu,
                  "gravity_mode": dy.gravity_mode, "gravity_sign": dy.gravity_sign},
        "disturbance": dd,
        "guidance": {"v_max": g.v_max, "k_p": g.k_p, "alpha0_gain": g.alpha0_gain,
                     "omega": g.Omega.reshape(-1).tolist(), "upsilon_c0": g.upsilon[0],
                     "upsilon_slope": g.upsilon[1], "p": g.p, "with_ci": cfg.with_ci, "jacobian": cfg.jacobian},
        "control": {"mu_v": c.mu_v, "lambda": c.lam, "H0": c.H0.reshape(-1).tolist(), "mu_h": c.mu_h,
                    "beta": c.beta, "beta_e": c.beta_e, "beta_c": c.beta_c, "epsilon_filter": c.epsilon_filter,
                    "F_max": c.F_max, "allow_invalid_filter": c.allow_invalid_filter, "mass": dy.chaser.m,
                    "use_observer": cfg.use_observer, "force_update": cfg.force_update,
                    "observer": {"A": cfg.observer_A.tolist(), "C": cfg.observer_C.tolist(),
                                 "L": cfg.observer_L.tolist()}},
        "montecarlo": {"runs": cfg.montecarlo.runs, "x_range": list(cfg.montecarlo.x_range),
                       "y_range": list(cfg.montecarlo.y_range), "z_range": list(cfg.montecarlo.z_range),
                       "workers": cfg.montecarlo.workers, "min_initial_margin": cfg.montecarlo.min_initial_margin},
    }
    for key in ("e_h_override", "e_grad_h_override"):
        if getattr(cfg, key) is not None:
            out["guidance"][key] = getattr(cfg, key)
    return out


# --------------------------------------------------------------------------- fields

@dataclass
class ResolvedTarget:
    """Control-path field, its error bounds and the exact field (if any)."""

    field: gd.FieldEvaluator
    bounds: ErrorBounds
    truth: Any | None


def resolve_target(cfg: ScenarioConfig) -> ResolvedTarget:
    spec = cfg.target
    truth = None
    if spec.kind == "analytic":
        shape = ANALYTIC_SHAPES[spec.shape]()
        field_eval: gd.FieldEvaluator = shape
        bounds = ErrorBounds(0.0, 0.0)
        truth = shape
    else:
        params, meta = load_model(spec.model)
        b = meta.get("bounds") or {}
        bounds = ErrorBounds(float(b.get("e_h", 0.0)), float(b.get("e_grad_h", 0.0)))
        field_eval = NeuralSdf(params, bounds)
        if spec.shape:
            truth = ANALYTIC_SHAPES[spec.shape]()
        elif spec.mesh:
            from proxsafe.geometry import SdfOracle, load_mesh

            truth = SdfOracle(load_mesh(spec.mesh))
    bounds = ErrorBounds(
        bounds.e_h if cfg.e_h_override is None else cfg.e_h_override,
        bounds.e_grad_h if cfg.e_grad_h_override is None else cfg.e_grad_h_override,
    )
    return ResolvedTarget(field_eval, bounds, truth)


# --------------------------------------------------------------------------- episodes

@dataclass
class RunLog:
    """Per-control-step telemetry of one episode."""

    columns: tuple[str, ...]
    rows: np.ndarray  # (n_records, n_columns) float, status encoded as an int code
    compute_time: np.ndarray
    outcome: str
    message: str = ""
    config: dict = field(default_factory=dict)
    status_names: tuple[str, ...] = ("optimal", "infeasible", "max_iter", "numerical_failure")
    r_d: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def vector(self, prefix: str) -> np.ndarray:
        return np.stack([self.column(f"{prefix}_{a}") for a in "xyz"], axis=1)

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def position_error(self) -> np.ndarray:
        return np.linalg.norm(self.vector("r") - np.asarray(self.r_d), axis=1)

    def final_error(self) -> float:
        return float(self.position_error()[-1]) if len(self.rows) else float("nan")

    def min_h_true(self) -> float:
        h = self.column("h_true")
        return float(np.min(h)) if len(h) else float("nan")

    def min_h(self) -> float:
        h = self.column("h")
        return float(np.min(h)) if len(h) else float("nan")


def _terms(orbit: dyn_mod.OrbitState, r: np.ndarray, dyn: dyn_mod.DynamicsConfig) -> ctl.ModelTerms:
    C1, C2, _ = dyn_mod.frame_matrices(orbit)
    g = dyn.gravity_sign * dyn_mod.differential_gravity(orbit, r, dyn.gravity_mode)
    return ctl.ModelTerms(C1, C2, g)


class InitialSafetyError(ScenarioError):
    pass


def run_episode(cfg: ScenarioConfig, target: ResolvedTarget | None = None,
                config_record: dict | None = None) -> RunLog:
    """Simulate one closed-loop episode.

    Raises:
        InitialSafetyError: the start point is inside the inflated surface.
    """
    with threadpool_limits(1):
        return _run_episode(cfg, target or resolve_target(cfg), config_record)


def _run_episode(cfg: ScenarioConfig, target: ResolvedTarget, config_record: dict | None) -> RunLog:
    dyn = cfg.dynamics
    m = dyn.chaser.m
    if cfg.force_update == "hold" and 0.5 * cfg.control.lam * cfg.control_period >= 2.0:
        log.warning("velocity loop gain lambda/2 = %g with a %g s force hold is unstable in sampled form; "
                    "expect a thrust-limited oscillation (force_update = \"physics\" avoids it)",
                    0.5 * cfg.control.lam, cfg.control_period)
    gcfg = gd.GuidanceConfig(
        v_max=cfg.guidance.v_max, k_p=cfg.guidance.k_p, alpha0_gain=cfg.guidance.alpha0_gain,
        Omega=cfg.guidance.Omega, upsilon=cfg.guidance.upsilon, p=cfg.guidance.p, bounds=target.bounds)
    ccfg = cfg.control
    r_d = np.asarray(cfg.r_d, dtype=float)
    state = dyn_mod.RelState(np.asarray(cfg.r0, dtype=float), np.asarray(cfg.v0, dtype=float))
    orbit = cfg.orbit
    f0, _ = target.field.value_and_gradient(state.r[None, :])
    if float(np.asarray(f0).reshape(-1)[0]) < target.bounds.e_h:
        raise InitialSafetyError(
            f"start {state.r.tolist()} has field value {float(np.asarray(f0).reshape(-1)[0]):.6g} "
            f"below e_h = {target.bounds.e_h:.6g}")
    obs = ctl.observer_init(cfg.observer_A, cfg.observer_C, cfg.observer_L, state, m) if cfg.use_observer else None
    disturbance = cfg.disturbance
    solver = None  # cold starts keep each step independent of history beyond the state
    n_steps = cfg.n_steps
    h_ctrl = cfg.control_period
    sub = cfg.substeps
    rows = np.full((n_steps + 1, len(LOG_COLUMNS)), np.nan)
    times = np.zeros(n_steps + 1)
    status_code = {"optimal": 0, "infeasible": 1, "max_iter": 2, "numerical_failure": 3}
    outcome = "stalled"
    message = ""
    n_done = 0
    zero3 = np.zeros(3)
    for k in range(n_steps + 1):
        t = k * h_ctrl
        t_start = time.perf_counter()
        if cfg.jacobian == "finite_diff":
            offsets = np.vstack([np.zeros(3), np.eye(3) * gd.FD_STEP, -np.eye(3) * gd.FD_STEP])
            vals, grads = target.field.value_and_gradient(state.r + offsets)
        else:
            vals, grads = target.field.value_and_gradient(state.r[None, :])
        vals = np.asarray(vals, dtype=float).reshape(-1)
        grads = np.asarray(grads, dtype=float).reshape(-1, 3)
        value, grad = float(vals[0]), grads[0]
        res = gd.solve_at(state.r, r_d, value, grad, gcfg, cfg.with_ci, solver)
        if cfg.jacobian == "finite_diff":
            J = _fd_jacobian(state.r, r_d, vals, grads, gcfg, cfg.with_ci, res)
        else:
            J = gd.nominal_jacobian(state.r, r_d, gcfg.v_max, gcfg.k_p)
        terms = _terms(orbit, state.r, dyn)
        obs_now = obs if obs is not None else _null_observer(m)
        F, tel = ctl.safe_control(state, r_d, res.v_s, J, obs_now, value, grad, target.bounds, terms, ccfg, m)
        times[k] = time.perf_counter() - t_start

        d_now = disturbance(t)
        h = value - target.bounds.e_h
        h_true = float(target.truth.signed_distance(state.r[None, :])[0]) if target.truth is not None else math.nan
        e_d = d_now - obs_now.d_hat
        h1 = ctl.barrier_h1(state, res.v_s, e_d, h, ccfg)
        r_e = state.r - r_d
        V0 = 0.5 * float(r_e @ ccfg.H0 @ r_e)
        dv = state.v - res.v_s
        V1 = V0 + float(dv @ dv) / (2.0 * ccfg.mu_v)
        rows[k] = np.concatenate([
            [t], state.r, state.v, res.v_c, res.v_s, [res.sigma], F, d_now, obs_now.d_hat,
            [h, h_true, h1, V0, V1, tel.Lambda, status_code[res.status], float(tel.saturated),
             float(res.fallback_used)]])
        n_done = k + 1
        if k == n_steps:
            break
        try:
            if cfg.force_update == "hold":
                state, orbit, obs = _advance(state, orbit, obs, F, disturbance, t, h_ctrl, sub, dyn)
            else:
                h_phys = h_ctrl / sub
                F_i = F
                for i in range(sub):
                    if i:
                        t_start = time.perf_counter()
                        F_i = _force_from_state(state, orbit, obs, target, res.v_s, J, r_d, ccfg, dyn)
                        times[k] += time.perf_counter() - t_start
                    state, orbit, obs = _advance(state, orbit, obs, F_i, disturbance, t + i * h_phys,
                                                 h_phys, 1, dyn)
        except (FloatingPointError, ctl.NonFiniteObserverError) as exc:
            outcome, message = "aborted", str(exc)
            break
    rows = rows[:n_done]
    times = times[:n_done]
    record = config_record if config_record is not None else scenario_to_dict(cfg)
    run = RunLog(LOG_COLUMNS, rows, times, outcome, message, record, r_d=tuple(float(x) for x in r_d))
    if outcome != "aborted":
        run.outcome = classify(run, cfg.converge_tol)
    return run


def _force_from_state(state, orbit, obs, target, v_s, J, r_d, ccfg, dyn) -> np.ndarray:
    """Force law at the current state with the guidance output ``(v_s, J)`` held."""
    m = dyn.chaser.m
    vals, grads = target.field.value_and_gradient(state.r[None, :])
    value = float(np.asarray(vals, dtype=float).reshape(-1)[0])
    grad = np.asarray(grads, dtype=float).reshape(-1, 3)[0]
    obs_now = obs if obs is not None else _null_observer(m)
    F, _ = ctl.safe_control(state, r_d, v_s, J, obs_now, value, grad, target.bounds,
                            _terms(orbit, state.r, dyn), ccfg, m)
    return F


def classify(run: RunLog, converge_tol: float) -> str:
    """Outcome label from the logged trajectory."""
    h = run.column("h_true")
    if np.all(np.isnan(h)):
        h = run.column("h")
    if np.nanmin(h) < 0.0:
        return "unsafe"
    return "converged" if run.final_error() <= converge_tol else "stalled"


def _null_observer(m: float) -> ctl.ObserverState:
    return ctl.ObserverState(z=np.zeros(3), xi_hat=np.zeros(3), d_hat=np.zeros(3), A=np.zeros((3, 3)),
                                 C=np.eye(3), L=np.eye(3), m=m)


def _fd_jacobian(r, r_d, vals, grads, gcfg, with_ci, center) -> np.ndarray:
    step = gd.FD_STEP
    jac = np.empty((3, 3))
    broken = center.fallback_used
    for k in range(3):
        plus = gd.solve_at(r + step * np.eye(3)[k], r_d, vals[1 + k], grads[1 + k], gcfg, with_ci)
        minus = gd.solve_at(r - step * np.eye(3)[k], r_d, vals[4 + k], grads[4 + k], gcfg, with_ci)
        for res in (plus, minus):
            broken |= res.fallback_used or res.active_set() != center.active_set()
        jac[:, k] = (plus.v_s - minus.v_s) / (2.0 * step)
    if broken:
        return gd.nominal_jacobian(r, r_d, gcfg.v_max, gcfg.k_p)
    return jac


_EMPTY_OBSERVER = (np.zeros((0, 0)), np.zeros((3, 0)), np.zeros((0, 3)))


def _advance(state, orbit, obs, F, disturbance, t0, period, substeps, dyn):
    """Integrate plant (and observer) over one control period with the force held.

    Sinusoidal disturbances take the compiled path; the exosystem form is
    integrated in Python.
    """
    m = dyn.chaser.m
    h = period / substeps
    n_z = 0 if obs is None else obs.z.shape[0]
    y = np.concatenate([state.r, state.v, [orbit.f_theta], obs.z if obs is not None else []])
    if disturbance.kind == "sinusoid":
        if obs is not None:
            A, C, L = obs.A, obs.C, obs.L
        else:
            A, C, L = _EMPTY_OBSERVER
        y = _sk.advance(y, np.asarray(F, dtype=float), m, orbit.semi_latus, orbit.e, orbit.mu,
                        dyn.gravity_mode == "linearized", float(dyn.gravity_sign),
                        np.asarray(disturbance.amplitudes), np.asarray(disturbance.frequencies),
                        np.asarray(disturbance.phases), A, C, L, float(t0), h, substeps)
        return _finish_advance(y, orbit, obs, t0 + period)

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        r, v = y[:3], y[3:6]
        drift, f_dot = dyn_mod.drift_accel(orbit, y[6], r, v, dyn.gravity_mode, dyn.gravity_sign)
        d = disturbance(t)
        out = np.empty_like(y)
        out[:3] = v
        out[3:6] = drift + (F + d) / m
        out[6] = f_dot
        if n_z:
            out[7:] = ctl.observer_rhs_from_drift(obs, y[7:], v, drift, F)
        return out

    t = t0
    for i in range(substeps):
        y = dyn_mod.rk4_step(rhs, t, y, h)
        t = t0 + (i + 1) * h
    return _finish_advance(y, orbit, obs, t)


def _finish_advance(y, orbit, obs, t):
    if not np.all(np.isfinite(y)):
        raise dyn_mod.NonFiniteStateError(f"non-finite state at t={t:g}")
    new_state = dyn_mod.RelState(y[:3], y[3:6])
    new_obs = ctl.observer_update(obs, y[7:], new_state.v) if obs is not None else None
    return new_state, orbit.with_anomaly(y[6]), new_obs


# --------------------------------------------------------------------------- export

def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))


def runlog_csv(run: RunLog, include_timing: bool = False, header_comment: str | None = None) -> str:
    """CSV text: optional ``#`` comment line, one header row, then one row per record.

    Floats are written with ``repr`` (shortest round-tripping form), so
    parsing the file gives back the exact stored doubles.
    """
    buf = io.StringIO()
    if header_comment is not None:
        buf.write("# " + header_comment.replace("\n", " ") + "\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = list(run.columns) + ([TIMING_COLUMN] if include_timing else [])
    w.writerow(cols)
    si = run.columns.index("status")
    for i, row in enumerate(run.rows):
        out = [_fmt(v) for v in row]
        out[si] = run.status_names[int(row[si])]
        out[run.columns.index("saturated")] = str(int(row[run.columns.index("saturated")]))
        out[run.columns.index("fallback")] = str(int(row[run.columns.index("fallback")]))
        if include_timing:
            out.append(_fmt(run.compute_time[i]))
        w.writerow(out)
    return buf.getvalue()


def read_runlog_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, list(reader)


def runlog_dict(run: RunLog, include_timing: bool = False) -> dict:
    si = run.columns.index("status")
    records = []
    for i, row in enumerate(run.rows):
        rec: dict[str, Any] = {}
        rec["t"] = float(row[0])
        for prefix in ("r", "v", "v_c", "v_s"):
            rec[prefix] = [float(row[run.columns.index(f"{prefix}_{a}")]) for a in "xyz"]
        rec["sigma"] = float(row[run.columns.index("sigma")])
        for prefix in ("F", "d", "d_hat"):
            rec[prefix] = [float(row[run.columns.index(f"{prefix}_{a}")]) for a in "xyz"]
        for name in ("h", "h_true", "h1", "V0", "V1", "Lambda"):
            val = float(row[run.columns.index(name)])
            rec[name] = val if math.isfinite(val) else None
        rec["status"] = run.status_names[int(row[si])]
        rec["saturated"] = bool(row[run.columns.index("saturated")])
        rec["fallback"] = bool(row[run.columns.index("fallback")])
        if include_timing:
            rec[TIMING_COLUMN] = float(run.compute_time[i])
        records.append(rec)
    return {"tool": "proxsafe", "version": __version__, "config": run.config,
            "outcome": run.outcome, "message": run.message, "records": records}


def export_log(log_obj: "RunLog | MonteCarloReport", fmt: str, path: str | Path,
               include_timing: bool = False) -> None:
    """Write a run log or Monte Carlo report as ``"csv"`` or ``"json"``.

    Every file carries the tool version and the resolved configuration: as
    a leading ``#`` comment in CSV, as top-level keys in JSON. Timing is left
    out unless ``include_timing`` is set, since it differs between runs.
    """
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    if isinstance(log_obj, RunLog):
        if fmt == "csv":
            comment = json.dumps({"tool": "proxsafe", "version": __version__, "config": log_obj.config},
                                 sort_keys=True, separators=(",", ":"))
            text = runlog_csv(log_obj, include_timing, comment)
        else:
            text = json.dumps(runlog_dict(log_obj, include_timing), indent=1, sort_keys=True) + "\n"
    else:
        if fmt == "csv":
            text = log_obj.to_csv(include_timing)
        else:
            text = json.dumps(log_obj.to_dict(include_timing), indent=1, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------- Monte Carlo

@dataclass
class RunSummary:
    index: int
    seed: int
    r0: tuple[float, float, float]
    resamples: int
    min_h: float
    min_h_true: float
    final_error: float
    max_v_inf: float
    max_vs_inf: float
    v_exceed_steps: int
    outcome: str
    message: str = ""
    max_compute_time: float = 0.0
    median_compute_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        d["r0"] = list(self.r0)
        for key in ("min_h", "min_h_true", "final_error", "max_v_inf", "max_vs_inf"):
            if not math.isfinite(d[key]):
                d[key] = None
        if not include_timing:
            d.pop("max_compute_time")
            d.pop("median_compute_time")
        return d


@dataclass
class MonteCarloReport:
    runs: list[RunSummary]
    config: dict

    def counts(self) -> dict[str, int]:
        return {o: sum(1 for r in self.runs if r.outcome == o) for o in OUTCOMES}

    def min_of_min_h(self) -> float:
        vals = [r.min_h_true if math.isfinite(r.min_h_true) else r.min_h for r in self.runs]
        vals = [v for v in vals if math.isfinite(v)]
        return float(min(vals)) if vals else float("nan")

    def compute_percentiles(self) -> dict[str, float]:
        med = np.array([r.median_compute_time for r in self.runs])
        mx = np.array([r.max_compute_time for r in self.runs])
        if len(med) == 0:
            return {}
        return {"median_of_medians": float(np.median(med)), "p95_of_medians": float(np.percentile(med, 95)),
                "max": float(mx.max())}

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "tool": "proxsafe", "version": __version__, "config": self.config,
            "n_runs": len(self.runs), "counts": self.counts(), "min_of_min_h": self.min_of_min_h(),
            "max_vs_inf": max((r.max_vs_inf for r in self.runs), default=float("nan")),
            "runs": [r.to_dict(include_timing) for r in self.runs],
        }
        if include_timing:
            out["compute_time"] = self.compute_percentiles()
        return out

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        comment = json.dumps({"tool": "proxsafe", "version": __version__, "config": self.config},
                             sort_keys=True, separators=(",", ":"))
        buf.write("# " + comment + "\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["index", "seed", "r0_x", "r0_y", "r0_z", "resamples", "min_h", "min_h_true", "final_error",
                "max_v_inf", "max_vs_inf", "v_exceed_steps", "outcome"]
        if include_timing:
            cols += ["max_compute_time", "median_compute_time"]
        w.writerow(cols)
        for r in self.runs:
            row = [str(r.index), str(r.seed), *(_fmt(x) for x in r.r0), str(r.resamples), _fmt(r.min_h),
                   _fmt(r.min_h_true), _fmt(r.final_error), _fmt(r.max_v_inf), _fmt(r.max_vs_inf),
                   str(r.v_exceed_steps), r.outcome]
            if include_timing:
                row += [_fmt(r.max_compute_time), _fmt(r.median_compute_time)]
            w.writerow(row)
        return buf.getvalue()


def sample_start(cfg: ScenarioConfig, target: ResolvedTarget, seed: int) -> tuple[np.ndarray, int]:
    """Initial position for a Monte Carlo run, redrawn until it clears the surface.

    Returns the position and the number of rejected draws.
    """
    mc = cfg.montecarlo
    rng = np.random.default_rng(seed)
    lo = np.array([mc.x_range[0], mc.y_range[0], mc.z_range[0]])
    hi = np.array([mc.x_range[1], mc.y_range[1], mc.z_range[1]])
    for tries in range(10_000):
        r0 = lo + (hi - lo) * rng.random(3)
        val = float(np.asarray(target.field.value_and_gradient(r0[None, :])[0]).reshape(-1)[0])
        ok = val - target.bounds.e_h >= mc.min_initial_margin
        if ok and target.truth is not None:
            ok = float(target.truth.signed_distance(r0[None, :])[0]) >= mc.min_initial_margin
        if ok:
            return r0, tries
    raise ScenarioError("could not sample a safe initial position in 10000 draws")


def summarize(index: int, seed: int, r0: np.ndarray, resamples: int, run: RunLog, v_max: float) -> RunSummary:
    v = run.vector("v")
    vs = run.vector("v_s")
    v_inf = np.max(np.abs(v), axis=1) if len(v) else np.zeros(0)
    return RunSummary(
        index=index, seed=seed, r0=tuple(float(x) for x in r0), resamples=resamples,
        min_h=run.min_h(), min_h_true=run.min_h_true(), final_error=run.final_error(),
        max_v_inf=float(v_inf.max()) if len(v_inf) else float("nan"),
        max_vs_inf=float(np.max(np.abs(vs))) if len(vs) else float("nan"),
        v_exceed_steps=int(np.sum(v_inf > v_max)), outcome=run.outcome, message=run.message,
        max_compute_time=float(run.compute_time.max()) if len(run.compute_time) else 0.0,
        median_compute_time=float(np.median(run.compute_time)) if len(run.compute_time) else 0.0,
    )


_WORKER_TARGET: dict[str, ResolvedTarget] = {}


def _mc_task(args: tuple[ScenarioConfig, int, int]) -> RunSummary:
    cfg, index, seed = args
    key = repr(cfg.target) + repr((cfg.e_h_override, cfg.e_grad_h_override))
    target = _WORKER_TARGET.get(key)
    if target is None:
        target = _WORKER_TARGET.setdefault(key, resolve_target(cfg))
    with threadpool_limits(1):
        r0, resamples = sample_start(cfg, target, seed)
        run_cfg = cfg.replace(r0=tuple(r0), seed=seed)
        try:
            run = run_episode(run_cfg, target, config_record={})
        except ScenarioError as exc:
            return RunSummary(index, seed, tuple(r0), resamples, math.nan, math.nan, math.nan, math.nan,
                              math.nan, 0, "aborted", str(exc))
    return summarize(index, seed, r0, resamples, run, cfg.guidance.v_max)


def monte_carlo(cfg: ScenarioConfig, n_runs: int | None = None, workers: int | None = None,
                base_seed: int | None = None) -> MonteCarloReport:
    """Run independent episodes from random starts.

    Run ``i`` uses seed ``base_seed + i`` for its start position. Results are
    ordered by run index, so the report does not depend on ``workers``.
    """
    n = cfg.montecarlo.runs if n_runs is None else n_runs
    if n < 1:
        raise ValueError("n_runs must be at least 1")
    workers = cfg.montecarlo.workers if workers is None else workers
    base = cfg.seed if base_seed is None else base_seed
    tasks = [(cfg, i, base + i) for i in range(n)]
    if workers <= 1:
        results = [_mc_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_task, tasks, chunksize=1))
    results.sort(key=lambda s: s.index)
    record = scenario_to_dict(cfg)
    record["montecarlo"]["runs"] = n
    record["seed"] = base
    record["montecarlo"].pop("workers", None)
    return MonteCarloReport(results, record)
