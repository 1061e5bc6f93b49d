"""Projected stochastic MAML training, coupled runs and batch-overlap instrumentation."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .losses import ConstraintSet, LossConstants, LossModel, RegularizedQuadratic, project
from .meta_objective import EmpiricalObjective, MetaConfig, meta_gradient_batch, sample_subsets
from .task_model import Perturbation, TaskCollection, rng_stream

CHUNK = 2048


class ConfigurationError(ValueError):
    pass


class PremiseError(ConfigurationError):
    """A stepsize or inner-stepsize premise of a guarantee is violated."""


class DivergenceError(RuntimeError):
    def __init__(self, round_index: int, user: int | None = None, local_step: int | None = None):
        where = f"round {round_index}"
        if user is not None:
            where += f", user {user}, local step {local_step}"
        super().__init__(f"non-finite iterate at {where}")
        self.round_index = round_index
        self.user = user
        self.local_step = local_step


@dataclass(frozen=True)
class TrainerConfig:
    m: int
    n: int
    k: int
    b: int
    r: int
    t_max: int
    alpha: float
    beta_cap: float
    seed: int = 0
    constraint: ConstraintSet = field(default_factory=ConstraintSet)
    record_overlap: bool = False
    mu: float | None = None
    trace_loss: bool = True
    record_path: bool = False
    w0: tuple | None = None
    backend: str | None = None

    def __post_init__(self):
        for name in ("m", "n", "k", "b", "r"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.t_max < 0:
            raise ConfigurationError("t_max must be >= 0")
        if self.r > self.m:
            raise ConfigurationError(f"r={self.r} exceeds m={self.m}")
        if self.k > self.n:
            raise ConfigurationError(f"k={self.k} exceeds n={self.n}")
        if not self.beta_cap > 0:
            raise ConfigurationError("beta_cap must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")

    @property
    def rounds(self) -> int:
        return self.t_max

    def meta_config(self) -> MetaConfig:
        return MetaConfig(alpha=self.alpha, k=self.k)

    def initial_point(self, dim: int) -> np.ndarray:
        if self.w0 is None:
            return self.constraint.center_for(dim).copy()
        w0 = np.array(self.w0, dtype=float)
        if w0.shape != (dim,):
            raise ConfigurationError("w0 has the wrong dimension")
        if not self.constraint.contains(w0):
            raise ConfigurationError("w0 must lie in the constraint set")
        return w0


@dataclass
class TrainerOutput:
    last_iterate: np.ndarray
    averaged_iterate: np.ndarray
    loss_trace: list = field(default_factory=list)
    betas: np.ndarray | None = None
    overlap_u: np.ndarray | None = None
    overlap_v: np.ndarray | None = None
    path: np.ndarray | None = None
    local_trace: list | None = None
    backend: str = ""

    @property
    def overlap_trace(self) -> list:
        if self.overlap_u is None:
            return []
        return [(t, int(u), int(v)) for t, (u, v) in enumerate(zip(self.overlap_u, self.overlap_v))]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.last_iterate, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.averaged_iterate, dtype=np.float64).tobytes())
        return h.hexdigest()

    def trace_csv(self) -> str:
        out = io.StringIO()
        out.write("t,beta_t,fhat,u_t,v_t\n")
        fhat = dict(self.loss_trace)
        n_rounds = 0 if self.betas is None else len(self.betas)
        for t in range(n_rounds + 1):
            beta = format(self.betas[t], ".17g") if t < n_rounds else ""
            f = format(fhat[t], ".17g") if t in fhat else ""
            has_overlap = self.overlap_u is not None and t < len(self.overlap_u)
            u = str(int(self.overlap_u[t])) if has_overlap else ""
            v = str(int(self.overlap_v[t])) if has_overlap else ""
            out.write(f"{t},{beta},{f},{u},{v}\n")
        return out.getvalue()

    def local_trace_csv(self) -> str:
        if self.local_trace is None:
            raise ConfigurationError("local steps were not traced")
        out = io.StringIO()
        d = self.last_iterate.shape[0]
        out.write("round,user,local_step," + ",".join(f"w_{j + 1}" for j in range(d)) + "\n")
        for t, u, s, w in self.local_trace:
            out.write(f"{t},{u},{s}," + ",".join(format(v, ".17g") for v in w) + "\n")
        return out.getvalue()


def stepsize(t: int, beta_cap: float, mu: float) -> float:
    """``min(beta_cap, 8 / (mu (t + 1)))``."""
    if t < 0:
        raise ConfigurationError("t must be >= 0")
    return min(beta_cap, 8.0 / (mu * (t + 1)))


def stepsizes(t_max: int, beta_cap: float, mu: float) -> np.ndarray:
    t = np.arange(t_max, dtype=float)
    return np.minimum(beta_cap, 8.0 / (mu * (t + 1.0)))


def check_stability_premise(beta_cap: float, constants: LossConstants, alpha: float):
    """Raise unless ``beta_cap <= 1 / (4L + 2 alpha rho G)``."""
    limit = 1.0 / constants.meta_smooth(alpha)
    if beta_cap > limit * (1 + 1e-12):
        raise PremiseError(f"beta_cap={beta_cap:.6g} exceeds the contraction limit {limit:.6g}")


def _resolve_mu(cfg: TrainerConfig, loss: LossModel) -> float:
    if cfg.mu is not None:
        mu = cfg.mu
    elif isinstance(loss, RegularizedQuadratic):
        mu = 2.0 * loss.reg
    else:
        raise ConfigurationError("mu must be given for this loss")
    if not mu > 0:
        raise ConfigurationError("mu must be positive")
    if cfg.beta_cap > 8.0 / mu * (1 + 1e-12):
        raise ConfigurationError(f"beta_cap={cfg.beta_cap} exceeds 8/mu={8.0 / mu}")
    return mu


def _check_collection(collection: TaskCollection, cfg: TrainerConfig):
    if collection.m != cfg.m or collection.n != cfg.n:
        raise ConfigurationError(
            f"collection has (m, n)=({collection.m}, {collection.n}), config says ({cfg.m}, {cfg.n})"
        )


@dataclass
class IndexPlan:
    """Task and position draws for a block of consecutive rounds."""

    start: int
    tasks: np.ndarray
    in_idx: np.ndarray
    out_idx: np.ndarray


def index_plans(seed: int, m: int, n: int, k: int, b: int, r: int, tau: int, t_max: int):
    """Yield :class:`IndexPlan` blocks covering rounds ``0..t_max-1``.

    Each block of :data:`CHUNK` rounds has its own stream, so a shorter run
    sees exactly the prefix of a longer one. The draws depend only on sizes
    and the seed, never on data, which is what couples two runs.
    """
    for block, start in enumerate(range(0, t_max, CHUNK)):
        c = min(CHUNK, t_max - start)
        rng = rng_stream(seed, "batches", block)
        tasks = sample_subsets(rng, m, r, CHUNK)[:c]
        in_idx = sample_subsets(rng, n, k, (CHUNK, r, tau))[:c]
        out_idx = rng.integers(0, n, size=(CHUNK, r, tau, b))[:c]
        yield IndexPlan(start, np.ascontiguousarray(tasks), np.ascontiguousarray(in_idx),
                        np.ascontiguousarray(out_idx))


def _generic_rounds(loss, x_in, y_in, x_out, y_out, tasks, in_idx, out_idx, betas, w, w_sum, path,
                    alpha, lam, radius, center, local_project, server_project, local_trace=None, start=0):
    """Round loop for any :class:`LossModel` (slow; uses autodiff-free batch formulas)."""
    constraint = ConstraintSet(radius=radius, center=center)
    n_rounds, r = tasks.shape
    tau = in_idx.shape[2]
    for t in range(n_rounds):
        beta = betas[t]
        acc = np.zeros_like(w)
        for u in range(r):
            i = tasks[t, u]
            loc = w.copy()
            for s in range(tau):
                inn, out = in_idx[t, u, s], out_idx[t, u, s]
                g = meta_gradient_batch(loc, x_in[i, inn], y_in[i, inn], x_out[i, out], y_out[i, out], alpha, loss)
                loc = loc - beta * g
                if not np.all(np.isfinite(loc)):
                    return (t, u, s)
                if local_project:
                    loc = project(loc, constraint)
                if local_trace is not None:
                    local_trace.append((start + t, int(i), s, loc.copy()))
            acc += loc
        w[:] = acc / r
        if server_project:
            w[:] = project(w, constraint)
        w_sum += w
        path[t] = w
    return None


def _trace_rounds(t_max: int) -> list[int]:
    rounds = [0]
    t = 1
    while t < t_max:
        rounds.append(t)
        t *= 2
    if t_max > 0:
        rounds.append(t_max)
    return rounds


def _count_overlap(plan: IndexPlan, target: Perturbation):
    hit = plan.tasks == target.task_index  # (c, r)
    inner = np.isin(plan.in_idx, np.asarray(target.inner_positions, dtype=np.int64))
    inner = inner.sum(axis=(2, 3))
    outer = (plan.out_idx == target.outer_position).sum(axis=(2, 3))
    return (outer * hit).sum(axis=1), (inner * hit).sum(axis=1)


def _train(
    collection: TaskCollection,
    cfg: TrainerConfig,
    loss: LossModel,
    tau: int,
    local_project: bool,
    server_project: bool,
    perturbation: Perturbation | None = None,
    trace_local: bool = False,
    keep_path: bool | None = None,
) -> TrainerOutput:
    _check_collection(collection, cfg)
    mu = _resolve_mu(cfg, loss)
    d = collection.dim
    x_in, y_in, x_out, y_out = collection.stacked()
    w = cfg.initial_point(d)
    w_sum = w.copy()
    betas = stepsizes(cfg.t_max, cfg.beta_cap, mu)
    radius = float(cfg.constraint.radius)
    center = np.ascontiguousarray(cfg.constraint.center_for(d), dtype=float)
    fast = isinstance(loss, RegularizedQuadratic) and not trace_local
    kernel = kernels.get_backend(cfg.backend) if fast else None
    backend = (cfg.backend or kernels.BACKEND) if fast else "generic"
    lam = loss.reg if isinstance(loss, RegularizedQuadratic) else 0.0
    keep_path = cfg.record_path if keep_path is None else keep_path

    wanted = _trace_rounds(cfg.t_max) if cfg.trace_loss else []
    snapshots = {0: w.copy()} if cfg.trace_loss else {}
    paths = [] if keep_path else None
    local_trace = [] if trace_local else None
    record = cfg.record_overlap and perturbation is not None
    us, vs = [], []
    for plan in index_plans(cfg.seed, cfg.m, cfg.n, cfg.k, cfg.b, cfg.r, tau, cfg.t_max):
        c = plan.tasks.shape[0]
        path = np.empty((c, d))
        chunk_betas = np.ascontiguousarray(betas[plan.start:plan.start + c])
        args = (x_in, y_in, x_out, y_out, plan.tasks, plan.in_idx, plan.out_idx, chunk_betas, w, w_sum, path,
                float(cfg.alpha), float(lam), radius, center, bool(local_project), bool(server_project))
        if fast:
            status = kernel(*args)
        else:
            status = _generic_rounds(loss, *args, local_trace=local_trace, start=plan.start)
        if status is not None:
            t, u, s = status
            raise DivergenceError(plan.start + int(t), int(u) if tau > 1 else None, int(s) if tau > 1 else None)
        for t in wanted:
            if plan.start < t <= plan.start + c:
                snapshots[t] = path[t - plan.start - 1].copy()
        if paths is not None:
            paths.append(path)
        if record:
            u, v = _count_overlap(plan, perturbation)
            us.append(u)
            vs.append(v)

    trace = []
    if cfg.trace_loss:
        objective = EmpiricalObjective(collection, cfg.meta_config(), loss, seed=cfg.seed)
        trace = [(t, objective.value(snapshots[t])) for t in wanted]
    return TrainerOutput(
        last_iterate=w,
        averaged_iterate=w_sum / (cfg.t_max + 1),
        loss_trace=trace,
        betas=betas,
        overlap_u=np.concatenate(us) if record and us else (np.zeros(0, dtype=np.int64) if record else None),
        overlap_v=np.concatenate(vs) if record and vs else (np.zeros(0, dtype=np.int64) if record else None),
        path=np.concatenate(paths) if paths else (np.zeros((0, d)) if keep_path else None),
        local_trace=local_trace,
        backend=backend,
    )


def maml_train(collection: TaskCollection, cfg: TrainerConfig, loss: LossModel,
               perturbation: Perturbation | None = None) -> TrainerOutput:
    """Projected stochastic MAML: ``r`` tasks per round, one meta-gradient step each, project the average.

    ``perturbation`` registers the marked task and positions for overlap
    counting when ``cfg.record_overlap`` is set.
    """
    return _train(collection, cfg, loss, tau=1, local_project=False, server_project=True,
                  perturbation=perturbation)


def infer_perturbation(original: TaskCollection, perturbed: TaskCollection) -> Perturbation | None:
    """The differing task and positions, or ``None`` for identical collections."""
    if (original.m, original.n, original.dim) != (perturbed.m, perturbed.n, perturbed.dim):
        raise ConfigurationError("collections differ in shape")
    differing = [i for i, (a, b) in enumerate(zip(original.datasets, perturbed.datasets)) if not a.equals(b)]
    if not differing:
        return None
    if len(differing) > 1:
        raise ConfigurationError(f"collections differ in more than one task: {differing}")
    i = differing[0]
    a, b = original.datasets[i], perturbed.datasets[i]
    inner = np.flatnonzero(np.any(a.x_in != b.x_in, axis=1) | (a.y_in != b.y_in))
    outer = np.flatnonzero(np.any(a.x_out != b.x_out, axis=1) | (a.y_out != b.y_out))
    if len(outer) > 1:
        raise ConfigurationError("more than one outer point differs")
    return Perturbation(i, tuple(int(p) for p in inner), int(outer[0]) if len(outer) else -1)


@dataclass
class CoupledOutput:
    first: TrainerOutput
    second: TrainerOutput
    divergence: float
    averaged_divergence: float
    divergence_trace: np.ndarray
    perturbation: Perturbation | None

    def __iter__(self):
        yield self.first.last_iterate
        yield self.second.last_iterate
        yield self.divergence
        yield self.divergence_trace


def coupled_train(original: TaskCollection, perturbed: TaskCollection, cfg: TrainerConfig, loss: LossModel,
                  perturbation: Perturbation | None = None, keep_trace: bool = True) -> CoupledOutput:
    """Two runs with identical index-level randomness on neighbouring collections.

    ``divergence_trace[t] = ||w^t - w~^t||`` for ``t = 0..T``.
    """
    inferred = infer_perturbation(original, perturbed)
    if perturbation is None:
        perturbation = inferred
    elif inferred is not None and inferred.task_index != perturbation.task_index:
        raise ConfigurationError("perturbation does not match the differing task")
    a = _train(original, cfg, loss, 1, False, True, perturbation, keep_path=keep_trace)
    b = _train(perturbed, cfg, loss, 1, False, True, perturbation, keep_path=keep_trace)
    if keep_trace:
        trace = np.concatenate([[0.0], np.linalg.norm(a.path - b.path, axis=1)])
    else:
        trace = np.zeros(0)
    return CoupledOutput(
        first=a,
        second=b,
        divergence=float(np.linalg.norm(a.last_iterate - b.last_iterate)),
        averaged_divergence=float(np.linalg.norm(a.averaged_iterate - b.averaged_iterate)),
        divergence_trace=trace,
        perturbation=perturbation,
    )


def overlap_statistics(output: TrainerOutput, cfg: TrainerConfig | None = None):
    """Time averages of ``u_t`` and ``v_t`` with standard errors."""
    if output.overlap_u is None:
        raise ConfigurationError("overlap was not recorded (set record_overlap and pass a perturbation)")
    u = output.overlap_u.astype(float)
    v = output.overlap_v.astype(float)
    if u.size < 2:
        raise ConfigurationError("need at least two rounds")
    return u.mean(), v.mean(), u.std(ddof=1) / np.sqrt(u.size), v.std(ddof=1) / np.sqrt(v.size)


def recursion_bound_holds(trace, betas, u, v, constants: LossConstants, alpha, r, b, k, slack=1e-9):
    """Per-round check of the coupled-divergence recursion; returns a boolean array."""
    lam_p = constants.stability_contraction(alpha)
    g, ell = constants.grad_bound, constants.smooth
    d = np.asarray(trace)
    bound = (1 - betas * lam_p) * d[:-1] + 8 * betas * g * (u / (r * b) + alpha * ell * v / (r * k))
    return d[1:] <= bound + slack * (1 + np.abs(bound))
