"""Population and empirical MAML objectives, their gradients, and the error decomposition."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .losses import ConstraintSet, LossModel, adapt, project
from .task_model import TaskCollection, TaskDataset, TaskSpec, rng_stream, sample_points


class MetaObjectiveError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, residual: float, tol: float):
        super().__init__(f"solver did not converge: gradient-mapping norm {residual:.3e} > {tol:.1e}")
        self.residual = residual
        self.tol = tol


@dataclass(frozen=True)
class MetaConfig:
    alpha: float
    k: int
    enumeration_cap: int = 100_000
    mc_subsets: int = 20_000
    mc_population: int = 20_000

    def __post_init__(self):
        if self.k < 1:
            raise MetaObjectiveError("k must be >= 1")
        if self.alpha < 0:
            raise MetaObjectiveError("alpha must be nonnegative")


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float = 0.0
    exact: bool = True

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class ErrorReport:
    test_error: float
    generalization_error: float
    training_error: float
    empirical_min_value: float
    population_min_value: float
    se_test: float = 0.0
    se_gen: float = 0.0

    @property
    def third_term(self) -> float:
        return self.empirical_min_value - self.population_min_value

    def csv_row(self) -> str:
        vals = (self.test_error, self.generalization_error, self.training_error,
                self.empirical_min_value, self.population_min_value, self.se_test, self.se_gen)
        return ",".join(format(v, ".17g") for v in vals)

    CSV_HEADER = "test,gen,train,emp_min,pop_min,se_test,se_gen"


# -- subset plans ------------------------------------------------------------

def enumeration_is_exact(n: int, cfg: MetaConfig) -> bool:
    return math.comb(n, cfg.k) <= cfg.enumeration_cap


def _check_k(n, cfg):
    if cfg.k > n:
        raise MetaObjectiveError(f"k={cfg.k} exceeds n={n}")


def sample_subsets(rng: np.random.Generator, n: int, k: int, shape) -> np.ndarray:
    """Uniform ``k``-subsets of ``range(n)`` without replacement, as ordered index rows.

    Sequential selection: the j-th draw is uniform over the ``n - j`` unused
    indices, located by stepping over the already-chosen ones in sorted order.
    """
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    out = np.empty(shape + (k,), dtype=np.int64)
    chosen_sorted = np.empty(shape + (0,), dtype=np.int64)
    for j in range(k):
        val = rng.integers(0, n - j, size=shape)
        for c in range(j):
            val = val + (val >= chosen_sorted[..., c])
        out[..., j] = val
        chosen_sorted = np.sort(np.concatenate([chosen_sorted, val[..., None]], axis=-1), axis=-1)
    return out


def subset_plan(n: int, cfg: MetaConfig, rng: np.random.Generator | None = None):
    """All ``k``-subsets when affordable, else ``mc_subsets`` uniform draws.

    Returns ``(subsets, exact)``.
    """
    _check_k(n, cfg)
    if enumeration_is_exact(n, cfg):
        return np.array(list(itertools.combinations(range(n), cfg.k)), dtype=np.int64).reshape(-1, cfg.k), True
    rng = rng if rng is not None else rng_stream(0, "subsets", n, cfg.k)
    return sample_subsets(rng, n, cfg.k, cfg.mc_subsets), False


_CHUNK = 2048


def _per_subset_values(w, ds: TaskDataset, subsets, alpha, loss):
    out = np.empty(subsets.shape[0])
    for lo in range(0, subsets.shape[0], _CHUNK):
        sub = subsets[lo:lo + _CHUNK]
        wa = adapt(w, (ds.x_in[sub], ds.y_in[sub]), alpha, loss)
        out[lo:lo + _CHUNK] = loss.value(wa[:, None, :], ds.x_out[None], ds.y_out[None]).mean(axis=1)
    return out


def meta_gradient_batch(w, xb, yb, xo, yo, alpha, loss):
    """``(I - a H(w, D_in)) grad L(adapt(w, D_in), D_out)``.

    ``xb`` is ``(..., K, d)`` and ``xo`` is ``(..., b, d)``; leading axes broadcast.
    """
    w = np.asarray(w, dtype=float)
    wa = adapt(w, (xb, yb), alpha, loss)
    g_out = loss.gradient(wa[..., None, :], xo, yo).mean(axis=-2)
    h = loss.hessian(w[..., None, :], xb, yb).mean(axis=-3)
    return g_out - alpha * np.einsum("...ij,...j->...i", h, g_out)


def _subset_gradient_sum(w, ds, subsets, alpha, loss):
    total = np.zeros(ds.dim)
    for lo in range(0, subsets.shape[0], _CHUNK):
        sub = subsets[lo:lo + _CHUNK]
        g = meta_gradient_batch(w, ds.x_in[sub], ds.y_in[sub], ds.x_out[None], ds.y_out[None], alpha, loss)
        total += g.sum(axis=0)
    return total


def empirical_meta_loss(w, dataset: TaskDataset, cfg: MetaConfig, loss: LossModel, rng=None) -> Estimate:
    """Average over ``k``-subsets of the inner split of the adapted outer-split loss."""
    subsets, exact = subset_plan(dataset.n, cfg, rng)
    vals = _per_subset_values(np.asarray(w, dtype=float), dataset, subsets, cfg.alpha, loss)
    se = 0.0 if exact else float(vals.std(ddof=1) / np.sqrt(vals.size))
    return Estimate(float(vals.mean()), se, exact)


def empirical_meta_gradient(w, dataset: TaskDataset, cfg: MetaConfig, loss: LossModel, rng=None) -> np.ndarray:
    subsets, _ = subset_plan(dataset.n, cfg, rng)
    return _subset_gradient_sum(np.asarray(w, dtype=float), dataset, subsets, cfg.alpha, loss) / subsets.shape[0]


def stochastic_meta_gradient(w, dataset: TaskDataset, cfg: MetaConfig, loss: LossModel, b: int, rng) -> np.ndarray:
    """Unbiased minibatch meta-gradient: ``k`` distinct inner points, ``b`` outer points with replacement."""
    _check_k(dataset.n, cfg)
    if b < 1:
        raise MetaObjectiveError("b must be >= 1")
    inner = sample_subsets(rng, dataset.n, cfg.k, ())
    outer = rng.integers(0, dataset.n, size=b)
    return meta_gradient_from_indices(w, dataset, inner, outer, cfg.alpha, loss)


def meta_gradient_from_indices(w, dataset: TaskDataset, inner, outer, alpha, loss) -> np.ndarray:
    return meta_gradient_batch(
        w, dataset.x_in[inner], dataset.y_in[inner], dataset.x_out[outer], dataset.y_out[outer], alpha, loss
    )


def average_objectives(values, weights=None):
    """Uniform (or ``weights``-weighted) average over the leading axis."""
    values = np.asarray(values, dtype=float)
    if weights is None:
        return values.mean(axis=0)
    q = np.asarray(weights, dtype=float)
    if q.shape != (values.shape[0],) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise MetaObjectiveError("weights must be a probability vector over tasks")
    return np.tensordot(q, values, axes=1)


# -- population objective ------------------------------------------------------

@dataclass
class PopulationSample:
    """Frozen Monte Carlo draws ``(K-batch, z)`` for one task's adapted loss."""

    xb: np.ndarray
    yb: np.ndarray
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def draw(cls, task: TaskSpec, k: int, size: int, rng) -> "PopulationSample":
        xb, yb = sample_points(task, rng, (size, k))
        x, y = sample_points(task, rng, size)
        return cls(xb, yb, x, y)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def values(self, w, alpha, loss) -> np.ndarray:
        out = np.empty(self.size)
        for lo in range(0, self.size, 8 * _CHUNK):
            sl = slice(lo, lo + 8 * _CHUNK)
            wa = adapt(w, (self.xb[sl], self.yb[sl]), alpha, loss)
            out[sl] = loss.value(wa, self.x[sl], self.y[sl])
        return out

    def gradient(self, w, alpha, loss) -> np.ndarray:
        total = np.zeros(self.x.shape[1])
        for lo in range(0, self.size, 8 * _CHUNK):
            sl = slice(lo, lo + 8 * _CHUNK)
            g = meta_gradient_batch(w, self.xb[sl], self.yb[sl], self.x[sl, None, :], self.y[sl, None], alpha, loss)
            total += g.sum(axis=0)
        return total / self.size


def population_meta_loss(w, task: TaskSpec, cfg: MetaConfig, loss: LossModel, rng) -> Estimate:
    """Monte Carlo estimate of the post-adaptation population loss of one task."""
    sample = PopulationSample.draw(task, cfg.k, cfg.mc_population, rng)
    vals = sample.values(np.asarray(w, dtype=float), cfg.alpha, loss)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return Estimate(float(vals.mean()), se, False)


# -- solvers ---------------------------------------------------------------------

def solve_ball_qp(a: np.ndarray, b: np.ndarray, constraint: ConstraintSet) -> np.ndarray:
    """Minimize ``w^T A w - 2 b^T w`` over the ball (``A`` symmetric positive definite)."""
    d = b.shape[0]
    c = constraint.center_for(d)
    rhs = b - a @ c
    lam, q = np.linalg.eigh(0.5 * (a + a.T))
    if lam[0] <= 0:
        raise MetaObjectiveError("quadratic form is not positive definite")
    beta = q.T @ rhs
    v = q @ (beta / lam)
    r = constraint.radius
    if np.linalg.norm(v) <= r:
        return c + v

    def excess(nu):
        return np.sum((beta / (lam + nu)) ** 2) - r * r

    hi = np.linalg.norm(rhs) / r
    nu = optimize.brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
    v = q @ (beta / (lam + nu))
    return project(c + v, constraint)


def gradient_mapping_norm(w, grad, constraint: ConstraintSet, step: float) -> float:
    return float(np.linalg.norm(w - project(w - step * grad, constraint)) / step)


def accelerated_projected_descent(grad, w0, constraint, tol=1e-9, max_iter=100_000, step0=1.0):
    """FISTA with backtracking and adaptive restart; stops on the gradient-mapping norm.

    Both the step test and the restart test use gradients only, so progress
    continues after objective values stop being distinguishable in floating point.
    """
    w = project(np.asarray(w0, dtype=float), constraint)
    v, t, step = w.copy(), 1.0, step0
    for _ in range(max_iter):
        gv = grad(v)
        while True:
            cand = project(v - step * gv, constraint)
            diff = cand - v
            gc = grad(cand)
            # local Lipschitz estimate along the step
            if step * np.linalg.norm(gc - gv) <= np.linalg.norm(diff) * (1 + 1e-12):
                break
            step *= 0.5
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if (v - cand) @ (cand - w) > 0:
            t_next = 1.0
            v = cand.copy()
        else:
            v = cand + ((t - 1) / t_next) * (cand - w)
        w, t = cand, t_next
        res = gradient_mapping_norm(w, gc, constraint, step)
        if res <= tol:
            return w, res
        step *= 1.25
    return w, gradient_mapping_norm(w, grad(w), constraint, step)


class _QuadraticObjective:
    """Shared machinery for objectives with an optional exact quadratic form."""

    forms: list | None
    weights: np.ndarray

    def _combine_form(self):
        a = sum(q * f[0] for q, f in zip(self.weights, self.forms))
        b = sum(q * f[1] for q, f in zip(self.weights, self.forms))
        c = sum(q * f[2] for q, f in zip(self.weights, self.forms))
        return a, b, c

    def minimize(self, constraint: ConstraintSet, tol: float = 1e-9, w0=None, max_iter: int = 100_000):
        """Return ``(w_star, value, residual)``; raises :class:`NonConvergenceError`."""
        d = self.dim
        if self.forms is not None:
            a, b, _ = self._combine_form()
            w = solve_ball_qp(a, b, constraint)
            step = 1.0 / max(np.linalg.eigvalsh(a)[-1] * 2.0, 1e-12)
            res = gradient_mapping_norm(w, self.gradient(w), constraint, step)
            if res > tol:
                w, res = accelerated_projected_descent(self.gradient, w, constraint, tol, max_iter)
        else:
            w0 = np.zeros(d) if w0 is None else w0
            w, res = accelerated_projected_descent(self.gradient, w0, constraint, tol, max_iter)
        if res > tol:
            raise NonConvergenceError(res, tol)
        return w, self.value(w), res


class EmpiricalObjective(_QuadraticObjective):
    """The empirical meta-objective of a task collection with frozen subset plans.

    Subsets are enumerated exactly when ``C(n, k) <= enumeration_cap``; otherwise
    a fixed Monte Carlo plan of ``mc_subsets`` subsets per task is drawn once, so
    the objective is a deterministic function of ``w``.
    """

    def __init__(self, collection: TaskCollection, cfg: MetaConfig, loss: LossModel, seed: int = 0,
                 weights=None, use_form: bool = True):
        self.collection = collection
        self.cfg = cfg
        self.loss = loss
        self.dim = collection.dim
        self.plans = []
        self.exact = True
        for i in range(collection.m):
            subsets, exact = subset_plan(collection.n, cfg, rng_stream(seed, "subset-plan", i))
            self.plans.append(subsets)
            self.exact &= exact
        m = collection.m
        self.weights = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
        average_objectives(np.zeros(m), self.weights)
        self.forms = None
        if use_form and loss.quadratic_meta:
            self.forms = [self._task_form(ds, sub) for ds, sub in zip(collection.datasets, self.plans)]

    def _task_form(self, ds, subsets):
        acc = None
        for lo in range(0, subsets.shape[0], _CHUNK):
            sub = subsets[lo:lo + _CHUNK]
            f = self.loss.meta_quadratic_form(ds.x_in[sub], ds.y_in[sub], ds.x_out, ds.y_out, self.cfg.alpha, "cross")
            f = tuple(np.asarray(v) * sub.shape[0] for v in f)
            acc = f if acc is None else tuple(x + y for x, y in zip(acc, f))
        return tuple(v / subsets.shape[0] for v in acc)

    def task_values(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.forms is not None:
            return np.array([w @ a @ w - 2 * b @ w + c for a, b, c in self.forms])
        return np.array([
            _per_subset_values(w, ds, sub, self.cfg.alpha, self.loss).mean()
            for ds, sub in zip(self.collection.datasets, self.plans)
        ])

    def value(self, w) -> float:
        return float(self.weights @ self.task_values(w))

    def task_gradients(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.forms is not None:
            return np.array([2.0 * (a @ w - b) for a, b, _ in self.forms])
        return np.array([
            _subset_gradient_sum(w, ds, sub, self.cfg.alpha, self.loss) / sub.shape[0]
            for ds, sub in zip(self.collection.datasets, self.plans)
        ])

    def gradient(self, w) -> np.ndarray:
        return self.weights @ self.task_gradients(w)


class PopulationObjective(_QuadraticObjective):
    """Sample-average surrogate of the population meta-objective.

    Each task gets ``size`` frozen ``(K-batch, z)`` draws; differences of the
    objective at two points therefore share randomness.
    """

    def __init__(self, specs: list[TaskSpec], cfg: MetaConfig, loss: LossModel, seed: int = 0,
                 size: int | None = None, weights=None, use_form: bool = True):
        self.specs = list(specs)
        self.cfg = cfg
        self.loss = loss
        self.dim = self.specs[0].dim
        size = cfg.mc_population if size is None else size
        self.samples = [
            PopulationSample.draw(t, cfg.k, size, rng_stream(seed, "population", i)) for i, t in enumerate(self.specs)
        ]
        m = len(self.specs)
        self.weights = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
        average_objectives(np.zeros(m), self.weights)
        self.forms = None
        if use_form and loss.quadratic_meta:
            self.forms = [loss.meta_quadratic_form(s.xb, s.yb, s.x, s.y, cfg.alpha, "zip") for s in self.samples]

    def pair_values(self, w) -> list[np.ndarray]:
        return [s.values(np.asarray(w, dtype=float), self.cfg.alpha, self.loss) for s in self.samples]

    def estimate(self, w) -> Estimate:
        return self.difference(w, None)

    def difference(self, w, w_ref=None) -> Estimate:
        """Weighted mean of ``F_i(w) - F_i(w_ref)`` with a paired standard error."""
        vals = self.pair_values(w)
        if w_ref is not None:
            vals = [v - r for v, r in zip(vals, self.pair_values(w_ref))]
        mean = float(sum(q * v.mean() for q, v in zip(self.weights, vals)))
        var = float(sum(q * q * v.var(ddof=1) / v.size for q, v in zip(self.weights, vals)))
        return Estimate(mean, np.sqrt(var), False)

    def value(self, w) -> float:
        if self.forms is not None:
            w = np.asarray(w, dtype=float)
            return float(sum(q * (w @ a @ w - 2 * b @ w + c) for q, (a, b, c) in zip(self.weights, self.forms)))
        return self.estimate(w).value

    def gradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.forms is not None:
            return sum(q * 2.0 * (a @ w - b) for q, (a, b, _) in zip(self.weights, self.forms))
        return sum(q * s.gradient(w, self.cfg.alpha, self.loss) for q, s in zip(self.weights, self.samples))


@dataclass
class Decomposition:
    """An :class:`ErrorReport` plus the minimizers used to build it."""

    report: ErrorReport
    empirical_minimizer: np.ndarray
    population_minimizer: np.ndarray
    extras: dict = field(default_factory=dict)


def error_decomposition(
    w,
    collection: TaskCollection,
    cfg: MetaConfig,
    loss: LossModel,
    constraint: ConstraintSet | None = None,
    seed: int = 0,
    tol: float = 1e-9,
    population: PopulationObjective | None = None,
    empirical: EmpiricalObjective | None = None,
) -> Decomposition:
    """Split the test error at ``w`` into generalization, training and min-gap terms.

    ``min_W F`` is taken at the minimizer of a sample-average surrogate of the
    population objective; the same draws evaluate ``F(w)``, so the test error
    is a paired difference.
    """
    constraint = constraint or ConstraintSet()
    w = np.asarray(w, dtype=float)
    if not constraint.contains(w):
        raise MetaObjectiveError("w must lie in the constraint set")
    emp = empirical or EmpiricalObjective(collection, cfg, loss, seed=seed)
    pop = population or PopulationObjective(collection.specs, cfg, loss, seed=seed)
    w_emp, emp_min, _ = emp.minimize(constraint, tol)
    w_pop, pop_min, _ = pop.minimize(constraint, tol)
    f_hat = emp.value(w)
    f_w = pop.estimate(w)
    test = pop.difference(w, w_pop)
    report = ErrorReport(
        test_error=test.value,
        generalization_error=f_w.value - f_hat,
        training_error=f_hat - emp_min,
        empirical_min_value=emp_min,
        population_min_value=f_w.value - test.value,
        se_test=test.se,
        se_gen=f_w.se,
    )
    return Decomposition(report, w_emp, w_pop, {"pop_min_surrogate": pop_min})
