"""Stability estimates, theoretical bound calculators, total-variation machinery and shift bounds."""
from __future__ import annotations

import dataclasses
import enum
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special, stats

from .losses import (
    ConstraintSet,
    LossConstants,
    LossModel,
    RegularizedQuadratic,
    adapt,
    compute_constants,
    envelope_points,
    envelope_radius,
)
from .meta_objective import EmpiricalObjective, Estimate, MetaConfig, PopulationObjective, PopulationSample
from .task_model import (
    TaskCollection,
    TaskSpec,
    generate_collection,
    generate_task,
    perturb_dataset,
    rng_stream,
    sample_points,
)
from .trainer import TrainerConfig, check_stability_premise, coupled_train, maml_train


class AnalysisError(ValueError):
    pass


# -- task families -------------------------------------------------------------

@dataclass(frozen=True)
class TaskFamily:
    """Recipe for random task collections (fresh task laws and data per seed)."""

    dim: int = 10
    mode: str = "similar"
    feature_cov_scale: float = 0.2
    noise_var: float = 0.1
    seed: int = 0

    def collection(self, m: int, n: int, seed: int) -> TaskCollection:
        return generate_collection(seed, self.dim, m, n, self.mode, self.feature_cov_scale, self.noise_var)

    def reference_tasks(self, count: int = 50) -> list[TaskSpec]:
        return [
            generate_task(int(rng_stream(self.seed, "reference", i).integers(2**62)), self.dim, self.mode,
                          self.feature_cov_scale, self.noise_var)
            for i in range(count)
        ]

    def constants(self, loss: LossModel, constraint: ConstraintSet, probes: int = 10_000) -> LossConstants:
        return compute_constants(loss, constraint, self.reference_tasks(), probes=probes, seed=self.seed)


# -- theory ----------------------------------------------------------------------

def theoretical_gamma(c: LossConstants, m: int, n: int, k: int, alpha: float, leading_const: float = 1.0) -> float:
    """``C G^2 (1 + alpha L K) / (m n mu)``."""
    if not leading_const > 0:
        raise AnalysisError("leading_const must be positive")
    return leading_const * c.grad_bound**2 * (1 + alpha * c.smooth * k) / (m * n * c.mu)


def largek_gamma(c: LossConstants, m: int, n: int, k: int, alpha: float, leading_const: float = 1.0) -> float:
    """``C G^2 (1/(m n mu) + alpha min(L K/(m n mu), 1/sqrt(K)))``."""
    if not leading_const > 0:
        raise AnalysisError("leading_const must be positive")
    mnmu = m * n * c.mu
    return leading_const * c.grad_bound**2 * (1 / mnmu + alpha * min(c.smooth * k / mnmu, 1 / np.sqrt(k)))


def largek_crossover(c: LossConstants, m: int, n: int) -> float:
    """The ``K`` where ``L K / (m n mu) = 1 / sqrt(K)``, found by root bracketing."""
    mnmu = m * n * c.mu

    def gap(k):
        return c.smooth * k / mnmu - 1 / np.sqrt(k)

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2
    return optimize.brentq(gap, 1e-12, hi, xtol=1e-14, rtol=1e-14)


def fitted_slope(x, y):
    """Least-squares slope of ``log y`` on ``log x`` and its standard error."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if lx.size < 3:
        raise AnalysisError("need at least 3 grid points")
    res = stats.linregress(lx, ly)
    return float(res.slope), float(res.stderr)


# -- stability ---------------------------------------------------------------------

@dataclass
class StabilityReport:
    gamma_hat: float
    gamma_theory: float
    grid: list = field(default_factory=list)  # (m, n, gamma_hat, se)
    fitted_slope: float = float("nan")
    slope_se: float = float("nan")
    trials: list = field(default_factory=list)  # per grid point: per-trial maxima
    divergences: list = field(default_factory=list)
    chain_ok: bool = True

    @property
    def gamma_se(self) -> float:
        return self.grid[0][3] if len(self.grid) == 1 else float("nan")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("m,n,gamma_hat,se\n")
        for m, n, g, se in self.grid:
            out.write(f"{m},{n},{g:.17g},{se:.17g}\n")
        out.write(f"# fitted_slope={self.fitted_slope:.17g} slope_se={self.slope_se:.17g} "
                  f"gamma_theory={self.gamma_theory:.17g}\n")
        return out.getvalue()


def _probe_pairs(specs, k, size, rng, x_max):
    """``(Z_K, z)`` probes from widened task laws, truncated to the envelope."""
    x, y = envelope_points(specs, size * (k + 1), rng, x_max, widen=4.0)
    x = x.reshape(size, k + 1, -1)
    y = y.reshape(size, k + 1)
    return x[:, :k], y[:, :k], x[:, k], y[:, k]


def adapted_loss_difference(w, w_tilde, probes, alpha, loss):
    xb, yb, xz, yz = probes
    a = loss.value(adapt(w, (xb, yb), alpha, loss), xz, yz)
    b = loss.value(adapt(w_tilde, (xb, yb), alpha, loss), xz, yz)
    return np.abs(a - b)


def estimate_stability(
    family: TaskFamily,
    cfg: TrainerConfig,
    trials: int,
    loss: LossModel | None = None,
    constants: LossConstants | None = None,
    probes: int = 256,
    iterate: str = "averaged",
    perturb_k: int | None = None,
    leading_const: float = 1.0,
    seed: int = 0,
) -> StabilityReport:
    """Empirical ``gamma`` for one ``(m, n)``: mean over trials of the max-over-probes loss gap.

    Each trial draws fresh task laws and data, replaces ``perturb_k`` inner
    points (default ``cfg.k``) and one outer point of a uniformly chosen task,
    runs the two coupled trainings and compares adapted losses of the two
    outputs. ``perturb_k = 0`` is the unperturbed control.
    """
    loss = loss or RegularizedQuadratic()
    constants = constants or family.constants(loss, cfg.constraint)
    check_stability_premise(cfg.beta_cap, constants, cfg.alpha)
    if trials < 1:
        raise AnalysisError("trials must be >= 1")
    if iterate not in ("averaged", "last"):
        raise AnalysisError("iterate must be 'averaged' or 'last'")
    perturb_k = cfg.k if perturb_k is None else perturb_k
    run_cfg = dataclasses.replace(cfg, trace_loss=False, record_path=False, record_overlap=False)
    values, divs = [], []
    chain_ok = True
    for trial in range(trials):
        trial_seed = int(rng_stream(seed, "stability-trial", cfg.m, cfg.n, trial).integers(2**62))
        rng = rng_stream(trial_seed, "perturb")
        coll = family.collection(cfg.m, cfg.n, trial_seed)
        if perturb_k == 0:
            other = coll.copy()
        else:
            other, _ = perturb_dataset(coll, int(rng.integers(cfg.m)), perturb_k, rng)
        out = coupled_train(coll, other, dataclasses.replace(run_cfg, seed=trial_seed), loss, keep_trace=False)
        if iterate == "averaged":
            w, wt = out.first.averaged_iterate, out.second.averaged_iterate
        else:
            w, wt = out.first.last_iterate, out.second.last_iterate
        x_max = envelope_radius(coll.specs)
        pr = _probe_pairs(coll.specs, cfg.k, probes, rng_stream(trial_seed, "probes"), x_max)
        gap = float(adapted_loss_difference(w, wt, pr, cfg.alpha, loss).max())
        dist = float(np.linalg.norm(w - wt))
        chain_ok &= gap <= 8 * constants.grad_bound * dist + 1e-12
        values.append(gap)
        divs.append(dist)
    values = np.array(values)
    se = float(values.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("nan")
    g_hat = float(values.mean())
    return StabilityReport(
        gamma_hat=g_hat,
        gamma_theory=theoretical_gamma(constants, cfg.m, cfg.n, cfg.k, cfg.alpha, leading_const),
        grid=[(cfg.m, cfg.n, g_hat, se)],
        trials=[values],
        divergences=[np.array(divs)],
        chain_ok=bool(chain_ok),
    )


def stability_grid(family: TaskFamily, cfg: TrainerConfig, grid, trials: int, loss=None, constants=None,
                   **kwargs) -> StabilityReport:
    """:func:`estimate_stability` over ``(m, n)`` pairs plus the log-log slope in ``m n``."""
    loss = loss or RegularizedQuadratic()
    constants = constants or family.constants(loss, cfg.constraint)
    reports = []
    for m, n in grid:
        sub = dataclasses.replace(cfg, m=m, n=n, r=min(cfg.r, m))
        reports.append(estimate_stability(family, sub, trials, loss, constants, **kwargs))
    rows = [r.grid[0] for r in reports]
    slope, slope_se = fitted_slope([m * n for m, n, _, _ in rows], [g for _, _, g, _ in rows]) \
        if len(rows) >= 3 else (float("nan"), float("nan"))
    return StabilityReport(
        gamma_hat=rows[0][2],
        gamma_theory=reports[0].gamma_theory,
        grid=rows,
        fitted_slope=slope,
        slope_se=slope_se,
        trials=[r.trials[0] for r in reports],
        divergences=[r.divergences[0] for r in reports],
        chain_ok=all(r.chain_ok for r in reports),
    )


@dataclass
class GeneralizationMeasurement:
    gap: float
    se: float
    per_trial: np.ndarray


def measure_generalization(family: TaskFamily, cfg: TrainerConfig, trials: int, loss=None,
                           population_size: int = 20_000, iterate: str = "averaged",
                           seed: int = 0) -> GeneralizationMeasurement:
    """Mean over fresh collections of ``F(w_S) - F_hat(w_S, S)`` at the MAML output."""
    loss = loss or RegularizedQuadratic()
    run_cfg = dataclasses.replace(cfg, trace_loss=False)
    meta = cfg.meta_config()
    gaps = []
    for trial in range(trials):
        trial_seed = int(rng_stream(seed, "generalization-trial", cfg.m, cfg.n, trial).integers(2**62))
        coll = family.collection(cfg.m, cfg.n, trial_seed)
        out = maml_train(coll, dataclasses.replace(run_cfg, seed=trial_seed), loss)
        w = out.averaged_iterate if iterate == "averaged" else out.last_iterate
        emp = EmpiricalObjective(coll, meta, loss, seed=trial_seed)
        pop = PopulationObjective(coll.specs, meta, loss, seed=trial_seed, size=population_size)
        gaps.append(pop.value(w) - emp.value(w))
    gaps = np.array(gaps)
    return GeneralizationMeasurement(float(gaps.mean()), float(gaps.std(ddof=1) / np.sqrt(trials)), gaps)


# -- total variation -------------------------------------------------------------

class TVMethod(str, enum.Enum):
    MONTE_CARLO = "MonteCarlo"
    NUMERIC_1D = "Numeric1D"


def _check_pair(p: TaskSpec, q: TaskSpec):
    if not isinstance(p, TaskSpec) or not isinstance(q, TaskSpec):
        raise AnalysisError("TV needs Gaussian TaskSpec laws")
    if p.dim != q.dim:
        raise AnalysisError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if p.degenerate or q.degenerate:
        raise AnalysisError("TV needs non-degenerate Gaussian laws")


def tv_to_mixture(p: TaskSpec, components: list[TaskSpec], weights=None, samples: int = 200_000,
                  rng=None) -> Estimate:
    """Monte Carlo ``E_p[max(0, 1 - q(z)/p(z))]`` with ``q`` an explicit Gaussian mixture."""
    for c in components:
        _check_pair(p, c)
    m = len(components)
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (m,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise AnalysisError("weights must be a probability vector")
    if all(c == p for c, wi in zip(components, w) if wi > 0):
        return Estimate(0.0, 0.0, True)
    rng = rng if rng is not None else rng_stream(0, "tv")
    x, y = sample_points(p, rng, samples)
    lp = p.logpdf(x, y)
    with np.errstate(divide="ignore"):
        lq = special.logsumexp(np.stack([c.logpdf(x, y) for c in components]), axis=0, b=w[:, None])
    vals = np.maximum(0.0, -np.expm1(lq - lp))
    return Estimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples)), False)


def _density_1d(spec: TaskSpec):
    def pdf(y, x):
        return float(np.exp(spec.logpdf(np.array([x]), np.array(y))))
    return pdf


def tv_numeric_1d(p: TaskSpec, q: TaskSpec) -> float:
    """``1/2 integral |p - q|`` by adaptive quadrature (``d = 1``).

    When the two laws share ``y | x`` the joint TV equals the TV of the feature
    marginals and a one-dimensional integral suffices.
    """
    _check_pair(p, q)
    if p.dim != 1:
        raise AnalysisError("Numeric1D needs d = 1")
    sx = [np.sqrt(p.feature_cov_scale), np.sqrt(q.feature_cov_scale)]
    lo = min(p.mean[0] - 12 * sx[0], q.mean[0] - 12 * sx[1])
    hi = max(p.mean[0] + 12 * sx[0], q.mean[0] + 12 * sx[1])
    if np.array_equal(p.coeff, q.coeff) and p.noise_var == q.noise_var:
        fp = stats.norm(p.mean[0], sx[0]).pdf
        fq = stats.norm(q.mean[0], sx[1]).pdf
        pts = sorted({p.mean[0], q.mean[0]})
        val, _ = integrate.quad(lambda x: abs(fp(x) - fq(x)), lo, hi, points=pts, limit=500,
                                epsabs=1e-12, epsrel=1e-10)
        return 0.5 * val
    fp, fq = _density_1d(p), _density_1d(q)
    sy = 12 * np.sqrt(max(p.noise_var, q.noise_var))

    def ylo(x):
        return min(p.coeff[0] * x, q.coeff[0] * x) - sy

    def yhi(x):
        return max(p.coeff[0] * x, q.coeff[0] * x) + sy

    val, _ = integrate.dblquad(lambda y, x: abs(fp(y, x) - fq(y, x)), lo, hi, ylo, yhi,
                               epsabs=1e-10, epsrel=1e-8)
    return 0.5 * val


def gaussian_tv_equal_variance(delta_mean: float, sigma: float) -> float:
    """``2 Phi(|delta| / (2 sigma)) - 1`` for two normals with a common variance."""
    return float(2 * stats.norm.cdf(abs(delta_mean) / (2 * sigma)) - 1)


def tv_distance(p: TaskSpec, q: TaskSpec, method: TVMethod | str = TVMethod.MONTE_CARLO,
                samples: int = 200_000, rng=None) -> Estimate:
    _check_pair(p, q)
    method = TVMethod(method)
    if p == q:
        return Estimate(0.0, 0.0, True)
    if method is TVMethod.NUMERIC_1D:
        return Estimate(tv_numeric_1d(p, q), 0.0, True)
    return tv_to_mixture(p, [q], None, samples, rng)


def coupling_disagreement(p: TaskSpec, q: TaskSpec, size: int, rng) -> Estimate:
    """Frequency with which maximal-coupling draws differ."""
    from .task_model import maximal_coupling_draws

    *_, coupled = maximal_coupling_draws(p, q, size, rng)
    f = 1.0 - coupled.mean()
    return Estimate(float(f), float(np.sqrt(f * (1 - f) / size)), False)


# -- shift bounds -------------------------------------------------------------------

@dataclass
class ShiftReport:
    tv_pairwise: list
    tv_to_mixture: float
    d_bound: float
    weighted_d_bound: float | None = None
    largek_gamma: float | None = None
    mixture_bound: float | None = None
    tv_pairwise_se: list = field(default_factory=list)
    tv_to_mixture_se: float = 0.0
    weighted_tv_to_mixture: float | None = None
    notes: dict = field(default_factory=lambda: {
        "pairwise_coefficient": "4*alpha*G^2/m in d_bound; 12*alpha*G^2*q_i in weighted_d_bound",
    })

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("i,tv,se\n")
        for i, (t, s) in enumerate(zip(self.tv_pairwise, self.tv_pairwise_se)):
            out.write(f"{i},{t:.17g},{s:.17g}\n")

        def fmt(v):
            return "" if v is None else format(v, ".17g")

        out.write(f"# tv_to_mixture={self.tv_to_mixture:.17g} d_bound={self.d_bound:.17g} "
                  f"weighted_d_bound={fmt(self.weighted_d_bound)} largek_gamma={fmt(self.largek_gamma)} "
                  f"mixture_bound={fmt(self.mixture_bound)}\n")
        return out.getvalue()


def d_bound_value(tv_pairwise, tv_mixture, c: LossConstants, alpha: float) -> float:
    """``(4 a G^2 / m) sum TV(p, p_i) + (M + 2 a G^2) TV(p, mixture)``."""
    tv_pairwise = np.asarray(tv_pairwise, dtype=float)
    g2 = c.grad_bound**2
    return float(4 * alpha * g2 * tv_pairwise.mean() + (c.value_bound + 2 * alpha * g2) * tv_mixture)


def weighted_d_bound_value(tv_pairwise, tv_weighted_mixture, weights, c: LossConstants, alpha: float) -> float:
    """``(M + 2 a G^2) TV(p, sum q_i p_i) + 12 a G^2 sum q_i TV(p, p_i)``."""
    g2 = c.grad_bound**2
    return float((c.value_bound + 2 * alpha * g2) * tv_weighted_mixture
                 + 12 * alpha * g2 * np.dot(weights, tv_pairwise))


def shift_bound(unseen: TaskSpec, seen: list[TaskSpec], c: LossConstants, alpha: float, weights=None,
                samples: int = 200_000, seed: int = 0, m: int | None = None, n: int | None = None,
                k: int | None = None) -> ShiftReport:
    """TV distances from ``unseen`` to each seen law and to their mixture, and the resulting bound.

    The same ``unseen`` draws are used for every TV estimate.
    """
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(seen),) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise AnalysisError("weights must be a probability vector over the seen tasks")
    tv = [tv_to_mixture(unseen, [s], None, samples, rng_stream(seed, "shift")) for s in seen]
    mix = tv_to_mixture(unseen, seen, None, samples, rng_stream(seed, "shift"))
    report = ShiftReport(
        tv_pairwise=[t.value for t in tv],
        tv_to_mixture=mix.value,
        d_bound=d_bound_value([t.value for t in tv], mix.value, c, alpha),
        tv_pairwise_se=[t.se for t in tv],
        tv_to_mixture_se=mix.se,
    )
    if weights is not None:
        wmix = tv_to_mixture(unseen, seen, weights, samples, rng_stream(seed, "shift"))
        report.weighted_tv_to_mixture = wmix.value
        report.weighted_d_bound = weighted_d_bound_value(report.tv_pairwise, wmix.value, weights, c, alpha)
    if None not in (m, n, k):
        report.largek_gamma = largek_gamma(c, m, n, k, alpha)
    return report


def mixture_generalization_bound(report: ShiftReport, per_seen_d, pi_unseen: float, pi_seen) -> float:
    """``pi_new D(p_new) + (1 - pi_new) sum_i |pi_i - 1/m| D(p_i)``."""
    pi_seen = np.asarray(pi_seen, dtype=float)
    per_seen_d = np.asarray(per_seen_d, dtype=float)
    m = pi_seen.size
    if per_seen_d.shape != (m,):
        raise AnalysisError("need one D value per seen task")
    if pi_unseen < 0 or np.any(pi_seen < 0) or abs(pi_unseen + pi_seen.sum() - 1) > 1e-9:
        raise AnalysisError("probabilities must lie on the simplex")
    value = pi_unseen * report.d_bound + (1 - pi_unseen) * float(np.sum(np.abs(pi_seen - 1.0 / m) * per_seen_d))
    report.mixture_bound = value
    return value


@dataclass
class ExcessReport:
    excess: float
    se: float
    bound: float
    composite: float | None
    f_new: float
    f_seen: float
    shift: ShiftReport


def excess_loss_new_task(w, unseen: TaskSpec, seen: TaskCollection | list[TaskSpec], cfg: MetaConfig,
                         loss: LossModel, constants: LossConstants, samples: int = 20_000, seed: int = 0,
                         epsilon: float | None = None, tv_samples: int = 200_000,
                         shift: ShiftReport | None = None) -> ExcessReport:
    """``|F_new(w) - F(w)|`` by Monte Carlo, with its shift bound ``D``.

    With a training excess ``epsilon`` the composite ``epsilon + 2 D`` is also returned.
    """
    specs = seen.specs if isinstance(seen, TaskCollection) else list(seen)
    w = np.asarray(w, dtype=float)
    new = PopulationSample.draw(unseen, cfg.k, samples, rng_stream(seed, "excess-new")).values(w, cfg.alpha, loss)
    olds = [
        PopulationSample.draw(s, cfg.k, samples, rng_stream(seed, "excess-seen", i)).values(w, cfg.alpha, loss)
        for i, s in enumerate(specs)
    ]
    f_new = new.mean()
    f_seen = float(np.mean([o.mean() for o in olds]))
    var = new.var(ddof=1) / samples + sum(o.var(ddof=1) / samples for o in olds) / len(olds) ** 2
    shift = shift or shift_bound(unseen, specs, constants, cfg.alpha, samples=tv_samples, seed=seed)
    composite = None if epsilon is None else epsilon + 2 * shift.d_bound
    return ExcessReport(float(abs(f_new - f_seen)), float(np.sqrt(var)), shift.d_bound, composite,
                        float(f_new), f_seen, shift)


# -- convergence rates -----------------------------------------------------------------

@dataclass
class ConvergenceReport:
    t_values: np.ndarray
    averaged_subopt: np.ndarray
    last_subopt: np.ndarray
    averaged_exponent: float
    last_exponent: float
    averaged_within_bound: np.ndarray
    last_within_bound: np.ndarray


def convergence_report(t_values, averaged_subopt, last_subopt, c: LossConstants, beta_cap: float,
                       alpha: float = 0.0) -> ConvergenceReport:
    """Log-log rate fits for both iterates and envelope checks calibrated at the first grid point.

    Envelopes: ``G^2 (log T + 1/(beta mu)) / (mu T)`` for the averaged iterate and
    ``(L + rho alpha G)/T + G/sqrt(T)`` for the last one.
    """
    t = np.asarray(t_values, dtype=float)
    avg = np.asarray(averaged_subopt, dtype=float)
    last = np.asarray(last_subopt, dtype=float)
    if t.size < 3:
        raise AnalysisError("need at least 3 grid points")
    if np.any(avg <= 0) or np.any(last <= 0):
        raise AnalysisError("suboptimality values must be positive")
    env_avg = c.grad_bound**2 * (np.log(t) + 1 / (beta_cap * c.mu)) / (c.mu * t)
    env_last = (c.smooth + c.hess_lip * alpha * c.grad_bound) / t + c.grad_bound / np.sqrt(t)
    ca = avg[0] / env_avg[0]
    cl = last[0] / env_last[0]
    return ConvergenceReport(
        t_values=t,
        averaged_subopt=avg,
        last_subopt=last,
        averaged_exponent=fitted_slope(t, avg)[0],
        last_exponent=fitted_slope(t, last)[0],
        averaged_within_bound=avg <= ca * env_avg * (1 + 1e-12),
        last_within_bound=last <= cl * env_last * (1 + 1e-12),
    )


def suboptimality_curve(collection: TaskCollection, cfg: TrainerConfig, loss: LossModel, t_values,
                        seeds, tol: float = 1e-9):
    """Mean over seeds of ``F_hat(w) - min F_hat`` for both iterates at each horizon.

    Returns ``(avg_mean, avg_se, last_mean, last_se)`` arrays over ``t_values``.
    """
    objective = EmpiricalObjective(collection, cfg.meta_config(), loss, seed=cfg.seed)
    _, f_star, _ = objective.minimize(cfg.constraint, tol)
    t_values = list(t_values)
    t_max = max(t_values)
    avg_vals = np.empty((len(seeds), len(t_values)))
    last_vals = np.empty_like(avg_vals)
    for si, s in enumerate(seeds):
        out = maml_train(collection, dataclasses.replace(cfg, seed=s, t_max=t_max, trace_loss=False,
                                                         record_path=True), loss)
        w0 = cfg.initial_point(collection.dim)
        csum = np.cumsum(out.path, axis=0)
        for j, t in enumerate(t_values):
            w_avg = (w0 + csum[t - 1]) / (t + 1)
            avg_vals[si, j] = objective.value(w_avg) - f_star
            last_vals[si, j] = objective.value(out.path[t - 1]) - f_star
    n = len(seeds)
    se = (lambda a: a.std(axis=0, ddof=1) / np.sqrt(n)) if n > 1 else (lambda a: np.zeros(a.shape[1]))
    return avg_vals.mean(axis=0), se(avg_vals), last_vals.mean(axis=0), se(last_vals)

