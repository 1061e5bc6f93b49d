"""Synthetic linear-Gaussian regression tasks.

A task draws features ``x ~ N(mean, s * I_d)`` and labels ``y = coeff . x + eps``
with ``eps ~ N(0, noise_var)``. The pair ``z = (x, y)`` is jointly Gaussian,
which is what the TV-distance and coupling machinery relies on.
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

import numpy as np


class TaskModelError(ValueError):
    pass


class Mode(str, enum.Enum):
    SIMILAR = "similar"
    DISSIMILAR = "dissimilar"


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    String keys are folded to integers with CRC32 so streams are stable across
    interpreter runs. Distinct key tuples give independent streams.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TaskSpec:
    mean: np.ndarray
    coeff: np.ndarray
    feature_cov_scale: float = 0.2
    noise_var: float = 0.1

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        coeff = np.asarray(self.coeff, dtype=float).reshape(-1)
        if mean.size == 0:
            raise TaskModelError("invalid dimension: 0")
        if mean.shape != coeff.shape:
            raise TaskModelError(f"mean/coeff length mismatch: {mean.size} vs {coeff.size}")
        if abs(np.linalg.norm(coeff) - 1.0) > 1e-12:
            raise TaskModelError("coeff must have unit norm")
        if self.feature_cov_scale < 0 or self.noise_var < 0:
            raise TaskModelError("variances must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "coeff", coeff)
        object.__setattr__(self, "feature_cov_scale", float(self.feature_cov_scale))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def degenerate(self) -> bool:
        return self.feature_cov_scale == 0.0 or self.noise_var == 0.0

    def joint_mean(self) -> np.ndarray:
        return np.append(self.mean, self.coeff @ self.mean)

    def joint_cov(self) -> np.ndarray:
        d = self.dim
        s = self.feature_cov_scale
        cov = np.empty((d + 1, d + 1))
        cov[:d, :d] = s * np.eye(d)
        cov[:d, d] = s * self.coeff
        cov[d, :d] = s * self.coeff
        cov[d, d] = s * (self.coeff @ self.coeff) + self.noise_var
        return cov

    def logpdf(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Joint log-density of ``(x, y)``, factored as ``p(x) p(y | x)``."""
        if self.degenerate:
            raise TaskModelError("degenerate task has no joint density")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = self.dim
        s = self.feature_cov_scale
        r2 = np.sum((x - self.mean) ** 2, axis=-1)
        lx = -0.5 * r2 / s - 0.5 * d * np.log(2 * np.pi * s)
        resid = y - x @ self.coeff
        ly = -0.5 * resid**2 / self.noise_var - 0.5 * np.log(2 * np.pi * self.noise_var)
        return lx + ly

    def widened(self, factor: float) -> "TaskSpec":
        return TaskSpec(self.mean, self.coeff, self.feature_cov_scale * factor, self.noise_var * factor)

    def __eq__(self, other):
        if not isinstance(other, TaskSpec):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.coeff, other.coeff)
            and self.feature_cov_scale == other.feature_cov_scale
            and self.noise_var == other.noise_var
        )

    def __hash__(self):
        return hash((self.mean.tobytes(), self.coeff.tobytes(), self.feature_cov_scale, self.noise_var))


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float


@dataclass
class TaskDataset:
    """One task's split sample: ``n`` inner and ``n`` outer points."""

    x_in: np.ndarray
    y_in: np.ndarray
    x_out: np.ndarray
    y_out: np.ndarray

    def __post_init__(self):
        if self.x_in.shape != self.x_out.shape or self.y_in.shape != self.y_out.shape:
            raise TaskModelError("inner and outer splits must have the same size")
        if self.x_in.shape[0] != self.y_in.shape[0]:
            raise TaskModelError("feature/label count mismatch")

    @property
    def n(self) -> int:
        return self.x_in.shape[0]

    @property
    def dim(self) -> int:
        return self.x_in.shape[1]

    @property
    def inner(self) -> list[Sample]:
        return [Sample(x, float(y)) for x, y in zip(self.x_in, self.y_in)]

    @property
    def outer(self) -> list[Sample]:
        return [Sample(x, float(y)) for x, y in zip(self.x_out, self.y_out)]

    def copy(self) -> "TaskDataset":
        return TaskDataset(self.x_in.copy(), self.y_in.copy(), self.x_out.copy(), self.y_out.copy())

    def equals(self, other: "TaskDataset") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.x_in, self.y_in, self.x_out, self.y_out),
                (other.x_in, other.y_in, other.x_out, other.y_out),
            )
        )


@dataclass
class TaskCollection:
    specs: list[TaskSpec]
    datasets: list[TaskDataset]

    def __post_init__(self):
        if len(self.specs) != len(self.datasets):
            raise TaskModelError("one dataset per task spec required")
        if not self.datasets:
            raise TaskModelError("empty collection")
        n, d = self.datasets[0].n, self.datasets[0].dim
        for spec, ds in zip(self.specs, self.datasets):
            if ds.n != n or ds.dim != d or spec.dim != d:
                raise TaskModelError("all datasets must share n and d")

    @property
    def m(self) -> int:
        return len(self.specs)

    @property
    def n(self) -> int:
        return self.datasets[0].n

    @property
    def dim(self) -> int:
        return self.datasets[0].dim

    @property
    def tasks(self) -> list[tuple[TaskSpec, TaskDataset]]:
        return list(zip(self.specs, self.datasets))

    def stacked(self):
        """Return ``(x_in, y_in, x_out, y_out)`` as contiguous ``(m, n, ...)`` arrays."""
        x_in = np.ascontiguousarray(np.stack([ds.x_in for ds in self.datasets]))
        y_in = np.ascontiguousarray(np.stack([ds.y_in for ds in self.datasets]))
        x_out = np.ascontiguousarray(np.stack([ds.x_out for ds in self.datasets]))
        y_out = np.ascontiguousarray(np.stack([ds.y_out for ds in self.datasets]))
        return x_in, y_in, x_out, y_out

    def subset(self, m: int, n: int | None = None) -> "TaskCollection":
        """First ``m`` tasks, each truncated to its first ``n`` inner/outer points."""
        n = self.n if n is None else n
        if not (1 <= m <= self.m and 1 <= n <= self.n):
            raise TaskModelError(f"subset ({m}, {n}) out of range ({self.m}, {self.n})")
        return TaskCollection(
            list(self.specs[:m]),
            [TaskDataset(ds.x_in[:n].copy(), ds.y_in[:n].copy(), ds.x_out[:n].copy(), ds.y_out[:n].copy())
             for ds in self.datasets[:m]],
        )

    def copy(self) -> "TaskCollection":
        return TaskCollection(list(self.specs), [ds.copy() for ds in self.datasets])


@dataclass(frozen=True)
class Perturbation:
    """Positions replaced by :func:`perturb_dataset`."""

    task_index: int
    inner_positions: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    outer_position: int = -1


def coefficient_from_draw(u: np.ndarray, mode: Mode | str) -> np.ndarray:
    mode = Mode(mode)
    shifted = u + 1.0 if mode is Mode.SIMILAR else u - 1.0
    norm = np.linalg.norm(shifted)
    if norm == 0.0:
        raise TaskModelError("zero-norm coefficient draw")
    return shifted / norm


def generate_task(
    seed: int,
    dim: int,
    mode: Mode | str = Mode.SIMILAR,
    feature_cov_scale: float = 0.2,
    noise_var: float = 0.1,
) -> TaskSpec:
    """Draw a task: mean uniform on ``[0, 1]^d``, coefficient ``(u +/- 1)/||u +/- 1||``."""
    if dim < 1:
        raise TaskModelError(f"invalid dimension: {dim}")
    mode = Mode(mode)
    rng = rng_stream(seed, "task", dim)
    mean = rng.random(dim)
    while True:
        u = rng.random(dim)
        shifted = u + 1.0 if mode is Mode.SIMILAR else u - 1.0
        if np.linalg.norm(shifted) > 0.0:
            break
    return TaskSpec(mean, coefficient_from_draw(u, mode), feature_cov_scale, noise_var)


def sample_points(task: TaskSpec, rng: np.random.Generator, size: int | tuple = ()):
    """Vectorized draws: returns ``x`` of shape ``size + (d,)`` and ``y`` of shape ``size``."""
    size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    d = task.dim
    x = task.mean + np.sqrt(task.feature_cov_scale) * rng.standard_normal(size + (d,))
    eps = np.sqrt(task.noise_var) * rng.standard_normal(size)
    y = x @ task.coeff + eps
    return x, y


def sample_point(task: TaskSpec, rng: np.random.Generator) -> Sample:
    x, y = sample_points(task, rng)
    return Sample(x, float(y))


def _assert_distinct(x: np.ndarray, y: np.ndarray):
    rows = np.concatenate([x, y[:, None]], axis=1)
    if np.unique(rows, axis=0).shape[0] != rows.shape[0]:
        raise TaskModelError("dataset contains bit-identical samples")


def build_dataset(task: TaskSpec, n: int, rng: np.random.Generator) -> TaskDataset:
    if n < 1:
        raise TaskModelError(f"invalid size: {n}")
    x_in, y_in = sample_points(task, rng, n)
    x_out, y_out = sample_points(task, rng, n)
    if not task.degenerate:
        _assert_distinct(np.concatenate([x_in, x_out]), np.concatenate([y_in, y_out]))
    return TaskDataset(x_in, y_in, x_out, y_out)


def build_collection(specs: list[TaskSpec], n: int, seed: int) -> TaskCollection:
    """One dataset per spec, each from its own stream so tasks never share draws."""
    datasets = [build_dataset(spec, n, rng_stream(seed, "data", i)) for i, spec in enumerate(specs)]
    return TaskCollection(list(specs), datasets)


def generate_collection(
    seed: int,
    dim: int,
    m: int,
    n: int,
    mode: Mode | str = Mode.SIMILAR,
    feature_cov_scale: float = 0.2,
    noise_var: float = 0.1,
) -> TaskCollection:
    specs = [
        generate_task(int(rng_stream(seed, "task-seed", i).integers(2**62)), dim, mode, feature_cov_scale, noise_var)
        for i in range(m)
    ]
    return build_collection(specs, n, seed)


def perturb_dataset(
    collection: TaskCollection, task_index: int, k: int, rng: np.random.Generator
) -> tuple[TaskCollection, Perturbation]:
    """Replace ``k`` inner points and one outer point of one task with fresh draws."""
    if not 0 <= task_index < collection.m:
        raise TaskModelError(f"task index {task_index} out of range")
    n = collection.n
    if not 1 <= k <= n:
        raise TaskModelError(f"invalid perturbation size k={k} for n={n}")
    spec = collection.specs[task_index]
    out = collection.copy()
    ds = out.datasets[task_index]
    inner_pos = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    outer_pos = int(rng.integers(n))
    x_new, y_new = sample_points(spec, rng, k)
    ds.x_in[inner_pos] = x_new
    ds.y_in[inner_pos] = y_new
    x_new, y_new = sample_points(spec, rng)
    ds.x_out[outer_pos] = x_new
    ds.y_out[outer_pos] = y_new
    return out, Perturbation(task_index, inner_pos, outer_pos)


def maximal_coupling_sample(p: TaskSpec, q: TaskSpec, rng: np.random.Generator) -> tuple[Sample, Sample, bool]:
    """One draw from the maximal coupling of two task laws.

    Draw ``Z ~ p``; keep ``(Z, Z)`` with probability ``min(1, q(Z)/p(Z))``. Otherwise
    draw ``W ~ q`` until ``U q(W) > p(W)`` and return ``(Z, W)``. The pair disagrees
    with probability exactly ``TV(p, q)``.
    """
    if p.dim != q.dim:
        raise TaskModelError(f"dimension mismatch: {p.dim} vs {q.dim}")
    x, y = sample_points(p, rng)
    if p == q:
        s = Sample(x, float(y))
        return s, s, True
    lp, lq = p.logpdf(x, y), q.logpdf(x, y)
    if np.log(rng.random()) + lp <= lq:
        s = Sample(x, float(y))
        return s, s, True
    while True:
        x2, y2 = sample_points(q, rng)
        if np.log(rng.random()) + q.logpdf(x2, y2) > p.logpdf(x2, y2):
            return Sample(x, float(y)), Sample(x2, float(y2)), False


def maximal_coupling_draws(p: TaskSpec, q: TaskSpec, size: int, rng: np.random.Generator):
    """Vectorized :func:`maximal_coupling_sample`.

    Returns ``(x1, y1, x2, y2, coupled)`` with leading dimension ``size``.
    """
    if p.dim != q.dim:
        raise TaskModelError(f"dimension mismatch: {p.dim} vs {q.dim}")
    x1, y1 = sample_points(p, rng, size)
    x2, y2 = x1.copy(), y1.copy()
    if p == q:
        return x1, y1, x2, y2, np.ones(size, dtype=bool)
    coupled = np.log(rng.random(size)) + p.logpdf(x1, y1) <= q.logpdf(x1, y1)
    todo = np.flatnonzero(~coupled)
    while todo.size:
        xc, yc = sample_points(q, rng, todo.size)
        ok = np.log(rng.random(todo.size)) + q.logpdf(xc, yc) > p.logpdf(xc, yc)
        x2[todo[ok]] = xc[ok]
        y2[todo[ok]] = yc[ok]
        todo = todo[~ok]
    return x1, y1, x2, y2, coupled


# -- serialization ---------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps_collection(collection: TaskCollection) -> str:
    """Text form: header ``d n m`` then ``task split x_1 .. x_d y`` per sample.

    Task laws are carried on ``#spec`` comment lines so a reloaded collection
    keeps its generative parameters.
    """
    d, n, m = collection.dim, collection.n, collection.m
    lines = [f"{d} {n} {m}"]
    for i, spec in enumerate(collection.specs):
        vals = " ".join(_fmt(v) for v in (*spec.mean, *spec.coeff, spec.feature_cov_scale, spec.noise_var))
        lines.append(f"#spec {i} {vals}")
    for i, ds in enumerate(collection.datasets):
        for split, xs, ys in (("in", ds.x_in, ds.y_in), ("out", ds.x_out, ds.y_out)):
            for x, y in zip(xs, ys):
                lines.append(f"{i} {split} " + " ".join(_fmt(v) for v in x) + " " + _fmt(y))
    return "\n".join(lines) + "\n"


def loads_collection(text: str) -> TaskCollection:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        d, n, m = (int(t) for t in lines[0].split())
    except (IndexError, ValueError) as exc:
        raise TaskModelError("line 1: expected header 'd n m'") from exc
    specs: dict[int, TaskSpec] = {}
    rows: dict[tuple[int, str], list[list[float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if tok[0] == "#spec":
            vals = [float(t) for t in tok[2:]]
            if len(vals) != 2 * d + 2:
                raise TaskModelError(f"line {lineno}: malformed spec")
            specs[int(tok[1])] = TaskSpec(np.array(vals[:d]), np.array(vals[d:2 * d]), vals[2 * d], vals[2 * d + 1])
            continue
        if len(tok) != d + 3 or tok[1] not in ("in", "out"):
            raise TaskModelError(f"line {lineno}: expected 'task split x_1..x_{d} y'")
        rows.setdefault((int(tok[0]), tok[1]), []).append([float(t) for t in tok[2:]])
    datasets = []
    for i in range(m):
        a_in = np.array(rows.get((i, "in"), []), dtype=float).reshape(-1, d + 1)
        a_out = np.array(rows.get((i, "out"), []), dtype=float).reshape(-1, d + 1)
        if a_in.shape[0] != n or a_out.shape[0] != n:
            raise TaskModelError(f"task {i}: expected {n} samples per split")
        datasets.append(TaskDataset(a_in[:, :d].copy(), a_in[:, d].copy(), a_out[:, :d].copy(), a_out[:, d].copy()))
    if set(specs) != set(range(m)):
        raise TaskModelError("missing #spec lines")
    return TaskCollection([specs[i] for i in range(m)], datasets)


def save_collection(collection: TaskCollection, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_collection(collection))


def load_collection(path) -> TaskCollection:
    with open(path) as fh:
        return loads_collection(fh.read())
