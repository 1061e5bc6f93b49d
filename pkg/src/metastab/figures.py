"""Test-error sweeps over (m, n) on the toy linear-regression family, and their trend statistics."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .losses import ConstraintSet, RegularizedQuadratic
from .meta_objective import MetaConfig, PopulationSample, solve_ball_qp
from .svg import line_chart
from .task_model import build_collection, generate_task, rng_stream
from .trainer import TrainerConfig, maml_train

WHICH = ("recurring", "new_similar", "new_dissimilar")
DEFAULT_MS = (1, 5, 10, 20)
DEFAULT_NS = (25, 50, 100, 200)
FULL_MS = (1, 2, 5, 10, 20, 40)
FULL_NS = (25, 50, 100, 200, 400)
CSV_COLUMNS = ("which", "m", "n", "rep", "test_error")


@dataclass(frozen=True)
class FigureSettings:
    dim: int = 10
    reg: float = 0.01
    k: int = 5
    alpha: float = 0.1
    b: int = 10
    r_max: int = 5
    beta: float = 0.02
    t_max: int = 20_000
    population: int = 20_000
    radius: float = 10.0
    feature_cov_scale: float = 0.2
    noise_var: float = 0.1
    seed: int = 0


class FormBank:
    """Per-task quadratic forms of the sample-average population objective.

    Any subset of tasks combines by averaging forms, so minima and excess
    losses for every grid cell share the same draws.
    """

    def __init__(self, specs, settings: FigureSettings, seed: int):
        loss = RegularizedQuadratic(settings.reg)
        self.constraint = ConstraintSet(settings.radius)
        self.forms = []
        for i, spec in enumerate(specs):
            s = PopulationSample.draw(spec, settings.k, settings.population, rng_stream(seed, "bank", i))
            self.forms.append(loss.meta_quadratic_form(s.xb, s.yb, s.x, s.y, settings.alpha, "zip"))
        self._minima = {}

    def _combined(self, idx):
        a = sum(self.forms[i][0] for i in idx) / len(idx)
        b = sum(self.forms[i][1] for i in idx) / len(idx)
        c = sum(self.forms[i][2] for i in idx) / len(idx)
        return a, b, c

    def value(self, w, idx):
        a, b, c = self._combined(idx)
        return float(w @ a @ w - 2 * b @ w + c)

    def minimum(self, idx):
        key = tuple(idx)
        if key not in self._minima:
            a, b, _ = self._combined(idx)
            w = solve_ball_qp(a, b, self.constraint)
            self._minima[key] = self.value(w, idx)
        return self._minima[key]

    def excess(self, w, idx):
        return max(self.value(w, idx) - self.minimum(idx), 0.0)


def _rep_rows(args):
    rep, settings, ms, ns, which = args
    base = settings.seed
    pool_size = max(ms)
    specs = [
        generate_task(int(rng_stream(base, "pool", rep, i).integers(2**62)), settings.dim, "similar",
                      settings.feature_cov_scale, settings.noise_var)
        for i in range(pool_size)
    ]
    new_similar = generate_task(int(rng_stream(base, "unseen", rep, "similar").integers(2**62)), settings.dim,
                                "similar", settings.feature_cov_scale, settings.noise_var)
    new_dissimilar = generate_task(int(rng_stream(base, "unseen", rep, "dissimilar").integers(2**62)),
                                   settings.dim, "dissimilar", settings.feature_cov_scale, settings.noise_var)
    rep_seed = int(rng_stream(base, "rep", rep).integers(2**62))
    full = build_collection(specs, max(ns), rep_seed)
    bank = FormBank(specs + [new_similar, new_dissimilar], settings, rep_seed)
    targets = {
        "recurring": None,
        "new_similar": [pool_size],
        "new_dissimilar": [pool_size + 1],
    }
    loss = RegularizedQuadratic(settings.reg)
    rows = []
    for m in ms:
        for n in ns:
            cfg = TrainerConfig(m=m, n=n, k=settings.k, b=settings.b, r=min(m, settings.r_max),
                                t_max=settings.t_max, alpha=settings.alpha, beta_cap=settings.beta, seed=rep_seed,
                                constraint=ConstraintSet(settings.radius), trace_loss=False)
            w = maml_train(full.subset(m, n), cfg, loss).averaged_iterate
            for wh in which:
                idx = list(range(m)) if targets[wh] is None else targets[wh]
                rows.append((wh, m, n, rep, bank.excess(w, idx)))
    return rows


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("METASTAB_THREADS", "1")))
    except ValueError:
        return 1


def sweep(settings: FigureSettings, ms=DEFAULT_MS, ns=DEFAULT_NS, reps: int = 5, which=WHICH,
          workers: int | None = None) -> list[tuple]:
    """Long-format rows ``(which, m, n, rep, test_error)`` in grid order.

    Each repetition draws its own task pool, unseen tasks, data and training
    randomness; within a repetition all grid cells share them.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    for w in which:
        if w not in WHICH:
            raise ValueError(f"unknown figure {w!r}")
    workers = worker_count() if workers is None else workers
    jobs = [(rep, settings, tuple(ms), tuple(ns), tuple(which)) for rep in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_rep_rows, jobs))
    else:
        parts = [_rep_rows(j) for j in jobs]
    rows = [r for part in parts for r in part]
    order = {w: i for i, w in enumerate(WHICH)}
    return sorted(rows, key=lambda r: (order[r[0]], r[1], r[2], r[3]))


def rows_to_csv(rows) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for wh, m, n, rep, err in rows:
        out.write(f"{wh},{m},{n},{rep},{err:.17g}\n")
    return out.getvalue()


def rows_from_csv(text: str) -> list[tuple]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    return [(r["which"], int(r["m"]), int(r["n"]), int(r["rep"]), float(r["test_error"])) for r in reader]


def cell_table(rows, which):
    """``{(m, n): array over reps}`` for one figure."""
    cells = {}
    for wh, m, n, rep, err in rows:
        if wh == which:
            cells.setdefault((m, n), {})[rep] = err
    return {k: np.array([v[r] for r in sorted(v)]) for k, v in cells.items()}


def summary(rows, which):
    """``{(m, n): (mean, se, reps)}``."""
    out = {}
    for key, vals in cell_table(rows, which).items():
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[key] = (float(vals.mean()), se, int(vals.size))
    return out


@dataclass
class TrendStats:
    m_slope: float
    m_slope_se: float
    n_slope: float
    n_slope_se: float

    @property
    def decreases_in_m(self) -> bool:
        return self.m_slope + 2 * self.m_slope_se < 0

    @property
    def decreases_in_n(self) -> bool:
        return self.n_slope + 2 * self.n_slope_se < 0

    @property
    def flat_in_n(self) -> bool:
        return abs(self.n_slope) < 2 * self.n_slope_se


def trend_stats(rows, which) -> TrendStats:
    """Log-log slopes of test error in ``m`` and in ``n``.

    Within each repetition, the slope along one axis is fitted separately for
    every value of the other axis and averaged; the reported slope and standard
    error are the mean and standard error over repetitions.
    """
    cells = cell_table(rows, which)
    ms = sorted({m for m, _ in cells})
    ns = sorted({n for _, n in cells})
    reps = min(v.size for v in cells.values())

    def slopes(axis_vals, fixed_vals, key):
        per_rep = []
        for r in range(reps):
            fits = []
            for f in fixed_vals:
                y = np.log([max(cells[key(a, f)][r], 1e-300) for a in axis_vals])
                fits.append(np.polyfit(np.log(axis_vals), y, 1)[0])
            per_rep.append(np.mean(fits))
        per_rep = np.array(per_rep)
        return float(per_rep.mean()), float(per_rep.std(ddof=1) / np.sqrt(reps))

    m_slope, m_se = slopes(ms, ns, lambda a, f: (a, f)) if len(ms) > 1 else (float("nan"),) * 2
    n_slope, n_se = slopes(ns, ms, lambda a, f: (f, a)) if len(ns) > 1 else (float("nan"),) * 2
    return TrendStats(m_slope, m_se, n_slope, n_se)


TITLES = {
    "recurring": "Test error over recurring tasks",
    "new_similar": "Test error over a new similar task",
    "new_dissimilar": "Test error over a new dissimilar task",
}


def charts(rows, which) -> dict[str, str]:
    """The two SVG charts of one figure, keyed by file suffix; a pure function of ``rows``."""
    table = summary(rows, which)
    ms = sorted({m for m, _ in table})
    ns = sorted({n for _, n in table})
    by_n = {f"m={m}": [(n, *table[(m, n)][:2]) for n in ns] for m in ms}
    by_m = {f"n={n}": [(m, *table[(m, n)][:2]) for m in ms] for n in ns}
    title = TITLES[which]
    return {
        "vs_n": line_chart(by_n, title, "n (samples per task)", "test error", logx=True, logy=True),
        "vs_m": line_chart(by_m, title, "m (training tasks)", "test error", logx=True, logy=True),
    }
