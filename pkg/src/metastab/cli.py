"""Command-line front end: ``metastab <command> [--config FILE] [flags]``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import TaskFamily, shift_bound, stability_grid, theoretical_gamma
from .federated import FedConfig, fed_train
from .figures import (
    DEFAULT_MS,
    DEFAULT_NS,
    FULL_MS,
    FULL_NS,
    WHICH,
    FigureSettings,
    charts,
    rows_from_csv,
    rows_to_csv,
    summary,
    sweep,
    trend_stats,
)
from .losses import ConstraintSet, LossError, RegularizedQuadratic, admissible_alpha, compute_constants
from .meta_objective import ErrorReport, MetaObjectiveError, NonConvergenceError, error_decomposition
from .task_model import (
    TaskModelError,
    dumps_collection,
    generate_collection,
    generate_task,
    load_collection,
    save_collection,
)
from .trainer import (
    ConfigurationError,
    DivergenceError,
    PremiseError,
    TrainerConfig,
    check_stability_premise,
    maml_train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_PREMISE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _radius(text):
    v = float(text)
    if math.isnan(v) or v <= 0:
        raise ValueError("radius must be positive")
    return v


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


KEYS = {
    "d": int, "m": int, "n": int, "seed": int, "mode": str, "feature_cov_scale": float, "noise_var": float,
    "tasks": str, "out": str,
    "k": int, "b": int, "r": int, "t_max": int, "alpha": float, "beta": float, "lam": float,
    "radius": _radius, "backend": str, "decompose": _bool, "tau": int, "verbose_trace": _bool,
    "grid": str, "trials": int, "probes": int, "iterate": str,
    "unseen": str, "samples": int, "weights": str,
    "which": str, "reps": int, "full": _bool, "plot_only": _bool,
}

DEFAULTS = {
    "seed": 0, "mode": "similar", "feature_cov_scale": 0.2, "noise_var": 0.1, "out": ".",
    "k": 5, "b": 10, "t_max": 20_000, "alpha": 0.1, "beta": 0.02, "lam": 0.01, "radius": 10.0,
    "decompose": False, "tau": 1, "verbose_trace": False, "trials": 12, "probes": 256, "iterate": "averaged",
    "unseen": "similar", "samples": 200_000, "reps": 5, "full": False, "plot_only": False,
    "which": ",".join(WHICH),
}

SCHEMA = """\
tasks file (gen-tasks):
  line 1            d n m
  '#spec' lines     #spec <i> <mean_1..mean_d> <coeff_1..coeff_d> <feature_cov_scale> <noise_var>
  data lines        <task> <in|out> <x_1..x_d> <y>
iterates.csv        kind,w_1,...,w_d           (kind = last | averaged)
trace.csv           t,beta_t,fhat,u_t,v_t       (empty where not recorded)
local_trace.csv     round,user,local_step,w_1,...,w_d
error_report.csv    test,gen,train,emp_min,pop_min,se_test,se_gen
figures.csv         which,m,n,rep,test_error
figures_summary.csv which,m,n,reps,mean,se
figures_trends.csv  which,m_slope,m_slope_se,n_slope,n_slope_se
stability.csv       m,n,gamma_hat,se,gamma_theory
stability_summary.csv fitted_slope,slope_se,trials,input_hash
shift.csv           i,tv,se
shift_summary.csv   tv_to_mixture,tv_to_mixture_se,d_bound,weighted_d_bound,largek_gamma,input_hash
exit codes          0 ok, 2 configuration error, 3 divergence, 4 premise violation
environment         METASTAB_THREADS caps the worker pool; METASTAB_PURE=1 forces the numpy kernel
"""


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown field '{key}'")
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for field '{key}': {exc}") from None
    return out


def _resolve(args, required=(), **overrides) -> dict:
    cfg = dict(DEFAULTS, **overrides)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg.update(parse_config(text, args.config))
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required field: {', '.join(missing)}")
    return cfg


def _collection_hash(collection) -> str:
    return hashlib.sha256(dumps_collection(collection).encode()).hexdigest()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _write_manifest(outdir: Path, command: str, cfg: dict, outputs: list, started: float, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "backend": kernels.BACKEND,
        "config": {k: _json_safe(v) for k, v in sorted(cfg.items())},
        "wall_clock_seconds": time.time() - started,
        "outputs": sorted(str(p) for p in outputs),
    }
    manifest.update({k: _json_safe(v) if not isinstance(v, dict) else v for k, v in extra.items()})
    path = outdir / f"{command}-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(cfg) -> Path:
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_or_generate(cfg):
    if cfg.get("tasks"):
        collection = load_collection(cfg["tasks"])
        for key, val in (("d", collection.dim), ("m", collection.m), ("n", collection.n)):
            if cfg.get(key) is not None and cfg[key] != val:
                raise ConfigError(f"field '{key}'={cfg[key]} disagrees with the tasks file ({val})")
            cfg[key] = val
        return collection
    missing = [k for k in ("d", "m", "n") if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required field: {', '.join(missing)} (or give 'tasks')")
    return generate_collection(cfg["seed"], cfg["d"], cfg["m"], cfg["n"], cfg["mode"],
                               cfg["feature_cov_scale"], cfg["noise_var"])


def _constants_or_none(loss, constraint, specs):
    if not math.isfinite(constraint.radius):
        return None
    return compute_constants(loss, constraint, specs)


def _warn_alpha(alpha, constants):
    if constants is not None and alpha > admissible_alpha(constants):
        print(f"warning: alpha={alpha} exceeds the admissible inner stepsize "
              f"{admissible_alpha(constants):.4g}; strong-convexity guarantees do not apply", file=sys.stderr)


def _write_iterates(path: Path, out):
    d = out.last_iterate.shape[0]
    lines = ["kind," + ",".join(f"w_{j + 1}" for j in range(d))]
    for kind, w in (("last", out.last_iterate), ("averaged", out.averaged_iterate)):
        lines.append(kind + "," + ",".join(format(v, ".17g") for v in w))
    path.write_text("\n".join(lines) + "\n")


def cmd_gen_tasks(args) -> int:
    started = time.time()
    cfg = _resolve(args, required=("d", "m", "n"))
    outdir = _outdir(cfg)
    collection = generate_collection(cfg["seed"], cfg["d"], cfg["m"], cfg["n"], cfg["mode"],
                                     cfg["feature_cov_scale"], cfg["noise_var"])
    path = outdir / (cfg.get("tasks") or "tasks.txt")
    save_collection(collection, path)
    _write_manifest(outdir, "gen-tasks", cfg, [path], started, collection_hash=_collection_hash(collection))
    print(path)
    return EXIT_OK


def _trainer_config(cfg, collection, cls=TrainerConfig, **extra):
    r = cfg.get("r") or min(collection.m, 5)
    return cls(m=collection.m, n=collection.n, k=cfg["k"], b=cfg["b"], r=r, t_max=cfg["t_max"],
               alpha=cfg["alpha"], beta_cap=cfg["beta"], seed=cfg["seed"],
               constraint=ConstraintSet(cfg["radius"]), trace_loss=True, backend=cfg.get("backend"), **extra)


def _run_training(args, command):
    started = time.time()
    cfg = _resolve(args)
    outdir = _outdir(cfg)
    collection = _load_or_generate(cfg)
    loss = RegularizedQuadratic(cfg["lam"])
    constraint = ConstraintSet(cfg["radius"])
    constants = _constants_or_none(loss, constraint, collection.specs)
    _warn_alpha(cfg["alpha"], constants)
    if command == "fed-train":
        tcfg = _trainer_config(cfg, collection, FedConfig, tau=cfg["tau"], verbose_trace=cfg["verbose_trace"])
        out = fed_train(collection, tcfg, loss)
    else:
        tcfg = _trainer_config(cfg, collection)
        out = maml_train(collection, tcfg, loss)
    outputs = [outdir / "iterates.csv", outdir / "trace.csv"]
    _write_iterates(outputs[0], out)
    outputs[1].write_text(out.trace_csv())
    if out.local_trace is not None:
        outputs.append(outdir / "local_trace.csv")
        outputs[-1].write_text(out.local_trace_csv())
    if cfg["decompose"]:
        dec = error_decomposition(out.averaged_iterate, collection, tcfg.meta_config(), loss, constraint,
                                  seed=cfg["seed"])
        outputs.append(outdir / "error_report.csv")
        outputs[-1].write_text(ErrorReport.CSV_HEADER + "\n" + dec.report.csv_row() + "\n")
    _write_manifest(outdir, command, cfg, outputs, started,
                    collection_hash=_collection_hash(collection),
                    constants=constants.as_dict() if constants else None,
                    output_hash=out.digest(), backend_used=out.backend)
    print(out.digest())
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, "train")


def cmd_fed_train(args) -> int:
    return _run_training(args, "fed-train")


def _parse_which(text):
    which = tuple(w.strip() for w in text.split(",") if w.strip())
    bad = [w for w in which if w not in WHICH]
    if bad:
        raise ConfigError(f"field 'which': unknown figure(s) {bad}; choose from {list(WHICH)}")
    return which


def _emit_figure_files(outdir: Path, rows, which) -> list[Path]:
    outputs = []
    lines = ["which,m,n,reps,mean,se"]
    trends = ["which,m_slope,m_slope_se,n_slope,n_slope_se"]
    for wh in which:
        table = summary(rows, wh)
        for (m, n), (mean, se, reps) in sorted(table.items()):
            lines.append(f"{wh},{m},{n},{reps},{mean:.17g},{se:.17g}")
        ts = trend_stats(rows, wh)
        trends.append(f"{wh},{ts.m_slope:.17g},{ts.m_slope_se:.17g},{ts.n_slope:.17g},{ts.n_slope_se:.17g}")
        for suffix, svg in charts(rows, wh).items():
            p = outdir / f"{wh}_{suffix}.svg"
            p.write_text(svg)
            outputs.append(p)
    for name, body in (("figures_summary.csv", lines), ("figures_trends.csv", trends)):
        p = outdir / name
        p.write_text("\n".join(body) + "\n")
        outputs.append(p)
    return outputs


def cmd_reproduce_figures(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    outdir = _outdir(cfg)
    which = _parse_which(cfg["which"])
    csv_path = outdir / "figures.csv"
    if cfg["plot_only"]:
        if not csv_path.exists():
            raise ConfigError(f"plot-only mode needs {csv_path}")
        rows = rows_from_csv(csv_path.read_text())
        present = {r[0] for r in rows}
        which = tuple(w for w in which if w in present)
        _emit_figure_files(outdir, rows, which)
        print(csv_path)
        return EXIT_OK
    if cfg["reps"] < 3:
        raise ConfigError("field 'reps' must be >= 3")
    settings = FigureSettings(seed=cfg["seed"], t_max=cfg["t_max"], alpha=cfg["alpha"], beta=cfg["beta"],
                              reg=cfg["lam"], k=cfg["k"], b=cfg["b"], radius=cfg["radius"],
                              dim=cfg.get("d") or 10, feature_cov_scale=cfg["feature_cov_scale"],
                              noise_var=cfg["noise_var"])
    ms, ns = (FULL_MS, FULL_NS) if cfg["full"] else (DEFAULT_MS, DEFAULT_NS)
    constants = compute_constants(RegularizedQuadratic(settings.reg), ConstraintSet(settings.radius),
                                  TaskFamily(settings.dim, "similar", settings.feature_cov_scale,
                                             settings.noise_var, settings.seed).reference_tasks())
    _warn_alpha(settings.alpha, constants)
    rows = sweep(settings, ms, ns, cfg["reps"], which)
    csv_path.write_text(rows_to_csv(rows))
    outputs = [csv_path] + _emit_figure_files(outdir, rows, which)
    _write_manifest(outdir, "reproduce-figures", cfg, outputs, started, grid={"m": list(ms), "n": list(ns)},
                    constants=constants.as_dict())
    print(csv_path)
    return EXIT_OK


def _parse_grid(text):
    try:
        grid = []
        for cell in text.split(","):
            m, n = cell.lower().split("x")
            grid.append((int(m), int(n)))
        return grid
    except ValueError:
        raise ConfigError(f"field 'grid': expected 'MxN,MxN,...', got {text!r}") from None


def cmd_stability(args) -> int:
    started = time.time()
    cfg = _resolve(args, required=("grid",), alpha=None, beta=None, k=2, b=5, r=5)
    outdir = _outdir(cfg)
    grid = _parse_grid(cfg["grid"])
    family = TaskFamily(cfg.get("d") or 10, cfg["mode"], cfg["feature_cov_scale"], cfg["noise_var"], cfg["seed"])
    loss = RegularizedQuadratic(cfg["lam"])
    constraint = ConstraintSet(cfg["radius"])
    if not math.isfinite(constraint.radius):
        raise ConfigError("field 'radius': stability needs a bounded feasible set")
    constants = family.constants(loss, constraint)
    # default inner stepsize sits safely inside the admissible range
    alpha = cfg["alpha"] if cfg["alpha"] is not None else 0.8 * admissible_alpha(constants)
    if alpha > admissible_alpha(constants):
        raise PremiseError(f"alpha={alpha} exceeds the admissible inner stepsize {admissible_alpha(constants):.6g}")
    beta = cfg["beta"] if cfg["beta"] is not None else 1.0 / constants.meta_smooth(alpha)
    check_stability_premise(beta, constants, alpha)
    if cfg["k"] > min(n for _, n in grid):
        raise ConfigError(f"field 'k': k={cfg['k']} exceeds the smallest n in the grid")
    # r is clipped to m at each grid point
    m_hi, n_hi = max(m for m, _ in grid), max(n for _, n in grid)
    tcfg = TrainerConfig(m=m_hi, n=n_hi, k=cfg["k"], b=cfg["b"], r=min(cfg["r"], m_hi), t_max=cfg["t_max"],
                         alpha=alpha, beta_cap=beta, seed=cfg["seed"], constraint=constraint, trace_loss=False)
    report = stability_grid(family, tcfg, grid, cfg["trials"], loss, constants, probes=cfg["probes"],
                            iterate=cfg["iterate"], seed=cfg["seed"])
    input_hash = hashlib.sha256(json.dumps(
        {"family": dataclasses.asdict(family), "grid": grid, "alpha": alpha, "beta": beta,
         "k": tcfg.k, "b": tcfg.b, "r": tcfg.r, "t_max": tcfg.t_max, "trials": cfg["trials"]},
        sort_keys=True).encode()).hexdigest()
    rows = ["m,n,gamma_hat,se,gamma_theory"]
    for m, n, g, se in report.grid:
        rows.append(f"{m},{n},{g:.17g},{se:.17g},{theoretical_gamma(constants, m, n, tcfg.k, alpha):.17g}")
    p1, p2 = outdir / "stability.csv", outdir / "stability_summary.csv"
    p1.write_text("\n".join(rows) + "\n")
    p2.write_text("fitted_slope,slope_se,trials,input_hash\n"
                  f"{report.fitted_slope:.17g},{report.slope_se:.17g},{cfg['trials']},{input_hash}\n")
    _write_manifest(outdir, "stability", cfg, [p1, p2], started, input_hash=input_hash,
                    constants=constants.as_dict(), alpha_used=alpha, beta_used=beta)
    print(p1)
    return EXIT_OK


def cmd_shift(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    outdir = _outdir(cfg)
    collection = _load_or_generate(cfg)
    loss = RegularizedQuadratic(cfg["lam"])
    constraint = ConstraintSet(cfg["radius"])
    if not math.isfinite(constraint.radius):
        raise ConfigError("field 'radius': shift bounds need a bounded feasible set")
    unseen_kind = cfg["unseen"]
    specs = collection.specs
    if unseen_kind == "clone":
        # the seen environment collapses to its first task, which the unseen task copies
        specs = specs[:1]
        unseen = specs[0]
    elif unseen_kind in ("similar", "dissimilar"):
        unseen = generate_task(cfg["seed"] + 1_000_003, collection.dim, unseen_kind, cfg["feature_cov_scale"],
                               cfg["noise_var"])
    else:
        raise ConfigError(f"field 'unseen': expected similar, dissimilar or clone, got {unseen_kind!r}")
    weights = None
    if cfg.get("weights"):
        try:
            weights = [float(v) for v in cfg["weights"].split(",")]
        except ValueError:
            raise ConfigError("field 'weights': expected comma-separated numbers") from None
    constants = compute_constants(loss, constraint, list(collection.specs) + [unseen])
    report = shift_bound(unseen, specs, constants, cfg["alpha"], weights, cfg["samples"], cfg["seed"],
                         m=len(specs), n=collection.n, k=cfg["k"])
    input_hash = _collection_hash(collection)
    p1, p2 = outdir / "shift.csv", outdir / "shift_summary.csv"
    p1.write_text("i,tv,se\n" + "".join(f"{i},{t:.17g},{s:.17g}\n" for i, (t, s) in
                                       enumerate(zip(report.tv_pairwise, report.tv_pairwise_se))))
    wd = "" if report.weighted_d_bound is None else format(report.weighted_d_bound, ".17g")
    p2.write_text("tv_to_mixture,tv_to_mixture_se,d_bound,weighted_d_bound,largek_gamma,input_hash\n"
                  f"{report.tv_to_mixture:.17g},{report.tv_to_mixture_se:.17g},{report.d_bound:.17g},{wd},"
                  f"{report.largek_gamma:.17g},{input_hash}\n")
    _write_manifest(outdir, "shift", cfg, [p1, p2], started, input_hash=input_hash,
                    constants=constants.as_dict(), notes=report.notes)
    print(p1)
    return EXIT_OK


def _add_common(p, keys):
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        conv = KEYS[key]
        if conv is _bool:
            p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        else:
            p.add_argument(flag, dest=key, type=conv, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metastab", description=__doc__)
    parser.add_argument("--schema", action="store_true", help="print file formats and exit codes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")
    family = ["d", "m", "n", "seed", "mode", "feature_cov_scale", "noise_var", "out"]
    train = family + ["tasks", "k", "b", "r", "t_max", "alpha", "beta", "lam", "radius", "backend", "decompose"]
    specs = {
        "gen-tasks": (cmd_gen_tasks, family + ["tasks"], "generate and save a task collection"),
        "train": (cmd_train, train, "projected stochastic MAML"),
        "fed-train": (cmd_fed_train, train + ["tau", "verbose_trace"], "distributed MAML with local steps"),
        "reproduce-figures": (cmd_reproduce_figures,
                              ["seed", "out", "which", "reps", "full", "plot_only", "t_max", "alpha", "beta",
                               "lam", "k", "b", "radius", "d", "feature_cov_scale", "noise_var"],
                              "test-error sweeps over (m, n) with CSV and SVG output"),
        "stability": (cmd_stability,
                      ["d", "seed", "mode", "feature_cov_scale", "noise_var", "out", "grid", "trials", "probes",
                       "iterate", "k", "b", "r", "t_max", "alpha", "beta", "lam", "radius"],
                      "empirical uniform stability over an (m, n) grid"),
        "shift": (cmd_shift, train + ["unseen", "samples", "weights"], "distribution-shift bound for a new task"),
    }
    for name, (fn, keys, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p, keys)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.schema:
        print(SCHEMA, end="")
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except PremiseError as exc:
        print(f"premise violation: {exc}", file=sys.stderr)
        return EXIT_PREMISE
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NonConvergenceError as exc:
        print(f"solver: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, ConfigurationError, TaskModelError, LossError, MetaObjectiveError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
