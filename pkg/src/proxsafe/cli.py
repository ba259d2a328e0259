"""Command-line entry point: dataset sampling, SDF training and evaluation,
mesh export, closed-loop simulation and Monte Carlo batches.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 a simulated run left the safe set.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from proxsafe import __version__

log = logging.getLogger("proxsafe")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_UNSAFE = 3

GLOBAL_DEFAULTS: dict[str, Any] = {"config": None, "seed": 0, "threads": 1, "log_level": "INFO"}

# built-in defaults per subcommand; a value of None means "required" or "derived"
DEFAULTS: dict[str, dict[str, Any]] = {
    "sample": {"mesh": None, "shape": None, "n": 20000, "mix": "0.2,0.4,0.4", "out": "dataset.bin",
               "format": "bin"},
    "train-sdf": {"data": None, "arch": "3,128,128,128,128,1", "kappa": 2.0, "eta": 0.1, "iters": 5000,
                  "batch_size": 2048, "lr": 0.005, "lr_decay": 0.5, "decay_interval": 2000,
                  "loss": "asymmetric", "out": "model.nsdf", "mesh": None, "shape": None,
                  "n_eval": 100000, "n_surface": 10000},
    "eval-sdf": {"model": None, "mesh": None, "shape": None, "n_eval": 100000, "n_surface": 100000,
                 "quantile": 0.999, "out": None, "write_bounds": True},
    "export-mesh": {"model": None, "res": 128, "out": "surface.obj", "bbox": None, "pad": 0.1},
    "simulate": {"scenario": None, "out": ".", "format": "both", "horizon": None, "include_timing": False},
    "montecarlo": {"scenario": None, "runs": None, "out": ".", "format": "both", "include_timing": False},
}


class ConfigError(ValueError):
    """Invalid command line or configuration file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML or JSON file with per-subcommand defaults")
    p.add_argument("--seed", type=int, default=d, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=d, help="worker threads/processes (default 1)")
    p.add_argument("--log-level", default=d, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity (default INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxsafe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        return p

    def opt(p: argparse.ArgumentParser, flag: str, help_text: str, **kw: Any) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        default = DEFAULTS[p.prog.split()[-1]][dest]
        suffix = "" if default is None else f" (default {default})"
        p.add_argument(flag, default=None, help=help_text + suffix, **kw)

    p = cmd("sample", "draw a labelled point set from a mesh or analytic shape")
    opt(p, "--mesh", "OBJ/STL mesh of the target")
    opt(p, "--shape", "analytic target name instead of a mesh")
    opt(p, "--n", "number of points", type=int)
    opt(p, "--mix", "surface,near,uniform fractions")
    opt(p, "--out", "output dataset path")
    opt(p, "--format", "bin or csv", choices=["bin", "csv"])

    p = cmd("train-sdf", "fit a network distance field to a dataset")
    opt(p, "--data", "dataset written by 'sample'")
    opt(p, "--arch", "comma-separated layer widths")
    opt(p, "--kappa", "asymmetry factor of the value loss", type=float)
    opt(p, "--eta", "Eikonal weight", type=float)
    opt(p, "--iters", "Adam iterations", type=int)
    opt(p, "--batch-size", "mini-batch size", type=int)
    opt(p, "--lr", "initial learning rate", type=float)
    opt(p, "--lr-decay", "learning-rate factor per interval", type=float)
    opt(p, "--decay-interval", "iterations between decays", type=int)
    opt(p, "--loss", "asymmetric or paper-literal", choices=["asymmetric", "paper-literal"])
    opt(p, "--out", "output model path")
    opt(p, "--mesh", "mesh oracle for post-training error bounds")
    opt(p, "--shape", "analytic oracle for post-training error bounds")
    opt(p, "--n-eval", "evaluation points for the bounds", type=int)
    opt(p, "--n-surface", "surface points for the surface error", type=int)

    p = cmd("eval-sdf", "surface error and error bounds of a trained model")
    opt(p, "--model", "model file")
    opt(p, "--mesh", "mesh oracle")
    opt(p, "--shape", "analytic oracle")
    opt(p, "--n-eval", "evaluation points for the bounds", type=int)
    opt(p, "--n-surface", "surface points for the surface error", type=int)
    opt(p, "--quantile", "quantile for the gradient bound", type=float)
    opt(p, "--out", "metrics JSON path (default <model>.eval.json)")
    p.add_argument("--no-write-bounds", dest="write_bounds", action="store_const", const=False, default=None,
                   help="do not store the bounds in the model's sidecar")

    p = cmd("export-mesh", "extract the zero level set of a model as an OBJ mesh")
    opt(p, "--model", "model file")
    opt(p, "--res", "grid points per axis", type=int)
    opt(p, "--out", "output OBJ path")
    opt(p, "--bbox", "xmin,ymin,zmin,xmax,ymax,zmax; write --bbox=... when the first value is negative "
        "(default: training-data box from the sidecar)")
    opt(p, "--pad", "relative padding of the sidecar box", type=float)

    p = cmd("simulate", "run one closed-loop episode")
    opt(p, "--scenario", "scenario file or built-in name")
    opt(p, "--out", "output directory")
    opt(p, "--format", "csv, json or both", choices=["csv", "json", "both"])
    opt(p, "--horizon", "override the scenario horizon (s)", type=float)
    p.add_argument("--include-timing", action="store_const", const=True, default=None,
                   help="add per-step compute time to the log (makes files run-dependent)")

    p = cmd("montecarlo", "run a batch of episodes from random starts")
    opt(p, "--scenario", "scenario file or built-in name")
    opt(p, "--runs", "number of runs (default: scenario value)", type=int)
    opt(p, "--out", "output directory")
    opt(p, "--format", "csv, json or both", choices=["csv", "json", "both"])
    p.add_argument("--include-timing", action="store_const", const=True, default=None,
                   help="add compute-time statistics to the report")
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def resolve_settings(args: argparse.Namespace, file_cfg: dict) -> dict[str, tuple[Any, str]]:
    """Merge CLI flags, config-file values and defaults; values carry their source."""
    command = args.command
    known_tables = set(DEFAULTS) | {"global"}
    unknown = sorted(set(file_cfg) - known_tables)
    if unknown:
        raise ConfigError(f"unknown tables in config file: {', '.join(unknown)}")
    out: dict[str, tuple[Any, str]] = {}
    for table, defaults in (("global", GLOBAL_DEFAULTS), (command, DEFAULTS[command])):
        section = {k.replace("-", "_"): v for k, v in file_cfg.get(table, {}).items()}
        bad = sorted(set(section) - set(defaults))
        if bad:
            raise ConfigError(f"unknown keys in [{table}]: {', '.join(bad)}")
        for key, default in defaults.items():
            cli_val = getattr(args, key, None)
            if cli_val is not None:
                out[key] = (cli_val, "cli")
            elif key in section:
                out[key] = (section[key], "config")
            else:
                out[key] = (default, "default")
    return out


def _print_resolved(command: str, settings: dict[str, tuple[Any, str]], extra: dict | None = None) -> None:
    doc = {"tool": "proxsafe", "version": __version__, "command": command,
           "settings": {k: {"value": v, "source": s} for k, (v, s) in settings.items()}}
    if extra:
        doc.update(extra)
    print(json.dumps(doc, indent=1, sort_keys=True, default=str), flush=True)


def _oracle(mesh: str | None, shape: str | None):
    from proxsafe import sim

    if (mesh is None) == (shape is None):
        raise ConfigError("give exactly one of --mesh and --shape")
    if shape is not None:
        if shape not in sim.ANALYTIC_SHAPES:
            raise ConfigError(f"unknown shape {shape!r}; choose from {sorted(sim.ANALYTIC_SHAPES)}")
        return sim.ANALYTIC_SHAPES[shape](), {"shape": shape}
    from proxsafe.geometry import SdfOracle, load_mesh

    return SdfOracle(load_mesh(mesh)), {"mesh": str(mesh)}


def _floats(text: Any, n: int | None, name: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        vals = [float(x) for x in text]
    else:
        try:
            vals = [float(x) for x in str(text).split(",")]
        except ValueError as exc:
            raise ConfigError(f"{name}: expected comma-separated numbers") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def _surface_and_bounds(params, oracle, seed: int, n_surface: int, n_eval: int,
                        quantile: float = 0.999) -> dict:
    from proxsafe import geometry, neural_sdf

    rng = np.random.default_rng(seed + 1)
    metrics = neural_sdf.eval_metrics(params, oracle.sample_surface(n_surface, rng))
    ev = geometry.evaluation_points(oracle, n_eval, seed=seed + 2)
    bounds = neural_sdf.estimate_error_bounds(params, oracle, ev.points, quantile=quantile)
    return {"epsilon": metrics.epsilon, "epsilon_plus": metrics.epsilon_plus, "e_h": bounds.e_h,
            "e_grad_h": bounds.e_grad_h, "n_points": metrics.n_points, "n_eval": n_eval}


def _v(settings: dict[str, tuple[Any, str]], key: str) -> Any:
    return settings[key][0]


def cmd_sample(s: dict) -> int:
    from proxsafe import geometry

    oracle, src = _oracle(_v(s, "mesh"), _v(s, "shape"))
    mix = _floats(_v(s, "mix"), 3, "mix")
    ds = geometry.sample_dataset(oracle, int(_v(s, "n")), mix=mix, seed=int(_v(s, "seed")))
    out = Path(_v(s, "out"))
    if _v(s, "format") == "csv":
        ds.save_csv(out)
    else:
        ds.save(out)
    print(json.dumps({"written": str(out), "n_points": len(ds), **ds.meta, **src}, sort_keys=True))
    return EXIT_OK


def cmd_train(s: dict) -> int:
    from proxsafe import geometry, neural_sdf

    if _v(s, "data") is None:
        raise ConfigError("--data is required")
    ds = geometry.SdfDataset.load(_v(s, "data"))
    dims = [int(x) for x in _floats(_v(s, "arch"), None, "arch")]
    cfg = neural_sdf.TrainConfig(
        kappa=float(_v(s, "kappa")), eta=float(_v(s, "eta")), iterations=int(_v(s, "iters")),
        batch_size=int(_v(s, "batch_size")), lr_initial=float(_v(s, "lr")), lr_decay=float(_v(s, "lr_decay")),
        decay_interval=int(_v(s, "decay_interval")), seed=int(_v(s, "seed")), loss=_v(s, "loss"),
        normalize=False)
    history: list[float] = []
    t0 = time.perf_counter()
    params = neural_sdf.train(ds, dims, cfg, history=history)
    elapsed = time.perf_counter() - t0
    lo, hi = ds.points.min(axis=0), ds.points.max(axis=0)
    sidecar: dict[str, Any] = {
        "version": __version__, "train_config": cfg, "dataset": str(_v(s, "data")),
        "dataset_sha256": neural_sdf.dataset_hash(ds), "bbox": [lo.tolist(), hi.tolist()],
        "final_loss": history[-1] if history else None, "train_seconds": elapsed,
    }
    metrics: dict[str, Any] = {"final_loss": sidecar["final_loss"], "train_seconds": elapsed,
                               "iterations": cfg.iterations}
    if _v(s, "mesh") is not None or _v(s, "shape") is not None:
        oracle, src = _oracle(_v(s, "mesh"), _v(s, "shape"))
        ev = _surface_and_bounds(params, oracle, int(_v(s, "seed")), int(_v(s, "n_surface")), int(_v(s, "n_eval")))
        metrics.update(ev)
        sidecar["bounds"] = {"e_h": ev["e_h"], "e_grad_h": ev["e_grad_h"]}
        sidecar["oracle"] = src
    out = Path(_v(s, "out"))
    neural_sdf.save_model(out, params, sidecar)
    metrics_path = out.with_name(out.name + ".metrics.json")
    metrics_path.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"model": str(out), "metrics": str(metrics_path), **metrics}, sort_keys=True))
    return EXIT_OK


def cmd_eval(s: dict) -> int:
    from proxsafe import neural_sdf

    if _v(s, "model") is None:
        raise ConfigError("--model is required")
    model = Path(_v(s, "model"))
    params, meta = neural_sdf.load_model(model)
    oracle, src = _oracle(_v(s, "mesh"), _v(s, "shape"))
    res = _surface_and_bounds(params, oracle, int(_v(s, "seed")), int(_v(s, "n_surface")), int(_v(s, "n_eval")),
                              float(_v(s, "quantile")))
    doc = {"epsilon": res["epsilon"], "epsilon_plus": res["epsilon_plus"], "e_h": res["e_h"],
           "e_grad_h": res["e_grad_h"], "n_points": res["n_points"]}
    out = Path(_v(s, "out")) if _v(s, "out") else model.with_name(model.name + ".eval.json")
    record = {**doc, "n_eval": res["n_eval"], "model": str(model), "oracle": src, "version": __version__,
              "seed": int(_v(s, "seed"))}
    out.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if _v(s, "write_bounds"):
        meta = dict(meta)
        meta["bounds"] = {"e_h": res["e_h"], "e_grad_h": res["e_grad_h"]}
        meta["oracle"] = src
        for key in ("dims", "activation", "sha256"):
            meta.pop(key, None)
        neural_sdf.save_model(model, params, meta)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_export(s: dict) -> int:
    from proxsafe import geometry, neural_sdf

    if _v(s, "model") is None:
        raise ConfigError("--model is required")
    params, meta = neural_sdf.load_model(_v(s, "model"))
    if _v(s, "bbox") is not None:
        b = _floats(_v(s, "bbox"), 6, "bbox")
        lo, hi = np.array(b[:3]), np.array(b[3:])
    elif "bbox" in meta:
        lo, hi = np.array(meta["bbox"][0], dtype=float), np.array(meta["bbox"][1], dtype=float)
        pad = float(_v(s, "pad")) * (hi - lo)
        lo, hi = lo - pad, hi + pad
    else:
        raise ConfigError("model sidecar has no bbox; pass --bbox")
    if np.any(hi <= lo):
        raise ConfigError("bbox must have max > min on every axis")
    mesh = geometry.marching_cubes(lambda p: neural_sdf.forward(params, p), (lo, hi), int(_v(s, "res")))
    if mesh.n_triangles == 0:
        log.error("the model has no zero crossing inside the box")
        return EXIT_RUNTIME
    geometry.save_obj(mesh, _v(s, "out"))
    print(json.dumps({"written": str(_v(s, "out")), "vertices": int(len(mesh.vertices)),
                      "triangles": int(mesh.n_triangles)}, sort_keys=True))
    return EXIT_OK


def _scenario(s: dict):
    from proxsafe import sim

    name = _v(s, "scenario")
    if name is None:
        raise ConfigError(f"--scenario is required (built-in: {', '.join(sim.list_builtin_scenarios())})")
    if Path(name).exists():
        cfg = sim.load_scenario(name)
    elif name in sim.list_builtin_scenarios():
        cfg = sim.builtin_scenario(name)
    else:
        raise ConfigError(f"scenario {name!r} is neither a file nor a built-in")
    return cfg


def _formats(fmt: str) -> list[str]:
    return ["csv", "json"] if fmt == "both" else [fmt]


def cmd_simulate(s: dict) -> int:
    from proxsafe import sim

    cfg = _scenario(s)
    changes: dict[str, Any] = {}
    if s["seed"][1] != "default":
        changes["seed"] = int(_v(s, "seed"))
    if _v(s, "horizon") is not None:
        changes["horizon"] = float(_v(s, "horizon"))
    if changes:
        cfg = cfg.replace(**changes)
    _print_resolved("simulate", s, {"scenario": sim.scenario_to_dict(cfg)})
    run = sim.run_episode(cfg)
    out_dir = Path(_v(s, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in _formats(_v(s, "format")):
        path = out_dir / f"{cfg.name}.{fmt}"
        sim.export_log(run, fmt, path, include_timing=bool(_v(s, "include_timing")))
        written.append(str(path))
    summary = {"outcome": run.outcome, "final_error": run.final_error(), "min_h": run.min_h(),
               "min_h_true": run.min_h_true(), "steps": len(run.rows), "written": written}
    if run.message:
        summary["message"] = run.message
    print(json.dumps(summary, sort_keys=True, default=str))
    if run.outcome == "unsafe":
        return EXIT_UNSAFE
    if run.outcome == "aborted":
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_montecarlo(s: dict) -> int:
    from proxsafe import sim

    cfg = _scenario(s)
    base_seed = int(_v(s, "seed")) if s["seed"][1] != "default" else cfg.seed
    runs = int(_v(s, "runs")) if _v(s, "runs") is not None else cfg.montecarlo.runs
    workers = int(_v(s, "threads")) if s["threads"][1] != "default" else cfg.montecarlo.workers
    _print_resolved("montecarlo", s, {"scenario": sim.scenario_to_dict(cfg), "effective_runs": runs,
                                      "effective_workers": workers, "effective_base_seed": base_seed})
    report = sim.monte_carlo(cfg, n_runs=runs, workers=workers, base_seed=base_seed)
    out_dir = Path(_v(s, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in _formats(_v(s, "format")):
        path = out_dir / f"{cfg.name}_montecarlo.{fmt}"
        sim.export_log(report, fmt, path, include_timing=bool(_v(s, "include_timing")))
        written.append(str(path))
    counts = report.counts()
    print(json.dumps({"counts": counts, "min_of_min_h": report.min_of_min_h(), "written": written},
                     sort_keys=True))
    if counts["unsafe"]:
        return EXIT_UNSAFE
    if counts["aborted"]:
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS: dict[str, Callable[[dict], int]] = {
    "sample": cmd_sample, "train-sdf": cmd_train, "eval-sdf": cmd_eval, "export-mesh": cmd_export,
    "simulate": cmd_simulate, "montecarlo": cmd_montecarlo,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    from proxsafe.sim import ScenarioError

    try:
        args = build_parser().parse_args(argv)
        settings = resolve_settings(args, _load_config_file(getattr(args, "config", None)))
    except ConfigError as exc:
        print(f"proxsafe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(_v(settings, "log_level")).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    threads = int(_v(settings, "threads"))
    if threads < 1:
        print("proxsafe: config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command not in ("simulate", "montecarlo"):
        _print_resolved(args.command, settings)
    try:
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        with threadpool_limits(threads):
            return COMMANDS[args.command](settings)
    except (ConfigError, ScenarioError, FileNotFoundError) as exc:
        print(f"proxsafe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any other failure is a runtime error for the exit-code contract
        log.debug("failure", exc_info=True)
        print(f"proxsafe: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
