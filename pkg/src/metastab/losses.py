"""Loss models, the one-step adaptation operator, the feasible ball, and curvature constants."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .task_model import TaskSpec, rng_stream, sample_points


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConstants:
    mu: float
    smooth: float
    grad_bound: float
    hess_lip: float
    value_bound: float

    def __post_init__(self):
        if not self.mu > 0:
            raise LossError("mu must be positive")
        if self.mu > self.smooth:
            raise LossError("mu must not exceed the smoothness constant")
        if min(self.grad_bound, self.hess_lip, self.value_bound) < 0:
            raise LossError("constants must be nonnegative")

    def meta_smooth(self, alpha: float) -> float:
        """Smoothness of the adapted loss, ``4L + 2 alpha rho G``."""
        return 4 * self.smooth + 2 * alpha * self.hess_lip * self.grad_bound

    def stability_contraction(self, alpha: float) -> float:
        """Per-step contraction rate ``2 mu (2L + a rho G) / (16 (2L + a rho G) + mu)``."""
        s = 2 * self.smooth + alpha * self.hess_lip * self.grad_bound
        return 2 * self.mu * s / (16 * s + self.mu)

    def as_dict(self) -> dict:
        return {
            "mu": self.mu,
            "smooth": self.smooth,
            "grad_bound": self.grad_bound,
            "hess_lip": self.hess_lip,
            "value_bound": self.value_bound,
        }


@dataclass(frozen=True)
class ConstraintSet:
    """Closed Euclidean ball; ``radius = inf`` disables the constraint."""

    radius: float = 10.0
    center: np.ndarray | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise LossError("radius must be positive")

    def center_for(self, dim: int) -> np.ndarray:
        return np.zeros(dim) if self.center is None else np.asarray(self.center, dtype=float)

    def contains(self, w: np.ndarray, tol: float = 1e-9) -> bool:
        return np.linalg.norm(w - self.center_for(w.shape[-1])) <= self.radius + tol

    def uniform(self, rng: np.random.Generator, size: int, dim: int) -> np.ndarray:
        """Uniform draws from the ball (finite radius only)."""
        if not np.isfinite(self.radius):
            raise LossError("cannot sample an unbounded set")
        g = rng.standard_normal((size, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.random(size) ** (1.0 / dim)
        return self.center_for(dim) + g * r[:, None]


def project(w: np.ndarray, constraint: ConstraintSet) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    c = constraint.center_for(w.shape[-1])
    diff = w - c
    norm = np.linalg.norm(diff)
    if norm <= constraint.radius:
        return w
    return c + constraint.radius * diff / norm


class LossModel:
    """Per-sample loss ``l(w, z)``.

    All methods broadcast over leading axes: ``w`` is ``(..., d)``, ``x`` is
    ``(..., d)``, ``y`` is ``(...)``. Subclasses whose adapted loss is an exact
    quadratic in ``w`` may set ``quadratic_meta = True`` and implement
    :meth:`meta_quadratic_form`.
    """

    quadratic_meta = False

    def value(self, w, x, y):
        raise NotImplementedError

    def gradient(self, w, x, y):
        raise NotImplementedError

    def hessian(self, w, x, y):
        raise NotImplementedError

    def meta_quadratic_form(self, xb, yb, x, y, alpha, pairing="cross"):
        raise NotImplementedError


@dataclass(frozen=True)
class RegularizedQuadratic(LossModel):
    """``(w.x - y)^2 + reg * ||w||^2``."""

    reg: float = 0.01

    quadratic_meta = True

    def __post_init__(self):
        if self.reg < 0:
            raise LossError("reg must be nonnegative")

    @staticmethod
    def _check(w, x):
        if np.shape(w)[-1] != np.shape(x)[-1]:
            raise LossError(f"dimension mismatch: w has {np.shape(w)[-1]}, x has {np.shape(x)[-1]}")

    def value(self, w, x, y):
        self._check(w, x)
        w = np.asarray(w, dtype=float)
        r = np.sum(w * x, axis=-1) - y
        return r * r + self.reg * np.sum(w * w, axis=-1)

    def gradient(self, w, x, y):
        self._check(w, x)
        w = np.asarray(w, dtype=float)
        r = np.sum(w * x, axis=-1) - y
        return 2.0 * r[..., None] * x + 2.0 * self.reg * w

    def hessian(self, w, x, y):
        self._check(w, x)
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        shape = np.broadcast_shapes(np.shape(w)[:-1], x.shape[:-1])
        return 2.0 * np.broadcast_to(x[..., :, None] * x[..., None, :], shape + (d, d)) + 2.0 * self.reg * np.eye(d)

    def meta_quadratic_form(self, xb, yb, x, y, alpha, pairing="cross"):
        """Average adapted loss as ``w^T A w - 2 b^T w + c``.

        ``xb``/``yb`` hold ``S`` adaptation batches of size ``K``. With
        ``pairing='cross'`` every batch is paired with every point of ``(x, y)``
        (the empirical objective); with ``'zip'`` batch ``s`` is paired with
        point ``s`` only (a Monte Carlo sample of the population objective).
        """
        lam = self.reg
        s, k, d = xb.shape
        eye = np.eye(d)
        xbt = np.swapaxes(xb, 1, 2)
        p = (-2.0 * alpha / k) * np.matmul(xbt, xb)
        p += (1.0 - 2.0 * alpha * lam) * eye
        q = (2.0 * alpha / k) * np.matmul(xbt, yb[:, :, None])[:, :, 0]
        if pairing == "cross":
            n = x.shape[0]
            m_mat = x.T @ x / n + lam * eye
            e = x.T @ y / n
            f = np.mean(y * y)
            a = np.matmul(np.matmul(p, m_mat), p).sum(axis=0) / s
            mq = q @ m_mat
            b = np.matmul(p, (e - mq)[:, :, None]).sum(axis=0)[:, 0] / s
            c = np.mean(np.sum(q * mq, axis=1) - 2.0 * q @ e) + f
        elif pairing == "zip":
            px = np.matmul(p, x[:, :, None])[:, :, 0]
            xq = np.sum(x * q, axis=1)
            a = (px.T @ px + lam * np.matmul(p, p).sum(axis=0)) / s
            inner = x * (y - xq)[:, None] - lam * q
            b = np.matmul(p, inner[:, :, None]).sum(axis=0)[:, 0] / s
            c = np.mean((xq - y) ** 2 + lam * np.sum(q * q, axis=1))
        else:
            raise LossError(f"unknown pairing {pairing!r}")
        return a, b, c


def _as_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2:
        x, y = batch
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    batch = list(batch)
    if not batch:
        raise LossError("empty batch")
    return np.stack([s.x for s in batch]), np.array([s.y for s in batch], dtype=float)


def adapt(w: np.ndarray, batch, alpha: float, loss: LossModel) -> np.ndarray:
    """One gradient step on the batch mean loss; the result is not projected.

    ``batch`` is a list of :class:`Sample` or an ``(x, y)`` pair of arrays with
    the batch on the second-to-last / last axis (stacked batches broadcast).
    """
    if alpha < 0:
        raise LossError("alpha must be nonnegative")
    x, y = _as_arrays(batch)
    if x.shape[-2] == 0:
        raise LossError("empty batch")
    w = np.asarray(w, dtype=float)
    g = loss.gradient(w[..., None, :], x, y).mean(axis=-2)
    return w - alpha * g


def adapted_loss(w, batch, x, y, alpha, loss):
    """``l(adapt(w, batch), (x, y))``."""
    return loss.value(adapt(w, batch, alpha, loss), x, y)


def adapted_loss_gradient(w, batch, x, y, alpha, loss):
    """Gradient in ``w`` of :func:`adapted_loss`: ``(I - a H_batch) grad l(w', z)``."""
    xb, yb = _as_arrays(batch)
    w = np.asarray(w, dtype=float)
    wa = adapt(w, (xb, yb), alpha, loss)
    g = loss.gradient(wa, x, y)
    h = loss.hessian(w[..., None, :], xb, yb).mean(axis=-3)
    return g - alpha * np.einsum("...ij,...j->...i", h, g)


def envelope_radius(tasks: list[TaskSpec], quantile: float = 0.99999) -> float:
    """``quantile`` of ``||x||`` under the worst task (noncentral chi-square law)."""
    best = 0.0
    for t in tasks:
        s = t.feature_cov_scale
        if s == 0.0:
            best = max(best, float(np.linalg.norm(t.mean)))
            continue
        nc = float(t.mean @ t.mean) / s
        best = max(best, float(np.sqrt(s * stats.ncx2.ppf(quantile, t.dim, nc))))
    return best


def envelope_points(tasks, size, rng, x_max=None, widen=1.0):
    """Draws from the uniform task mixture, truncated to ``||x|| <= x_max``."""
    if x_max is None:
        x_max = envelope_radius(tasks)
    xs, ys = [], []
    got = 0
    while got < size:
        idx = rng.integers(len(tasks), size=size)
        x = np.empty((size, tasks[0].dim))
        y = np.empty(size)
        for i in np.unique(idx):
            sel = idx == i
            t = tasks[i] if widen == 1.0 else tasks[i].widened(widen)
            x[sel], y[sel] = sample_points(t, rng, int(sel.sum()))
        keep = np.linalg.norm(x, axis=1) <= x_max
        xs.append(x[keep])
        ys.append(y[keep])
        got += int(keep.sum())
    return np.concatenate(xs)[:size], np.concatenate(ys)[:size]


def compute_constants(
    loss: LossModel,
    constraint: ConstraintSet,
    tasks: list[TaskSpec],
    probes: int = 10_000,
    seed: int = 0,
    safety: float = 1.2,
) -> LossConstants:
    """Curvature and boundedness constants for ``loss`` over ``constraint``.

    For the regularized quadratic, ``mu``, ``smooth`` and ``hess_lip`` are exact
    on the envelope ``||x|| <= x_max``; ``grad_bound`` and ``value_bound`` are
    probe suprema times ``safety``. Each probe pairs ``z`` with a uniform
    ``w`` in the ball and with the two boundary points aligned with ``x``.
    """
    if probes < 1:
        raise LossError("probes must be >= 1")
    if not isinstance(loss, RegularizedQuadratic):
        raise LossError("analytic constants are only available for RegularizedQuadratic")
    if not np.isfinite(constraint.radius):
        raise LossError("bounded constants need a finite radius")
    d = tasks[0].dim
    x_max = envelope_radius(tasks)
    rng = rng_stream(seed, "constants")
    x, y = envelope_points(tasks, probes, rng, x_max)
    c = constraint.center_for(d)
    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
    candidates = [
        constraint.uniform(rng, probes, d),
        c + constraint.radius * unit,
        c - constraint.radius * unit,
    ]
    g_sup = max(float(np.max(np.linalg.norm(loss.gradient(w, x, y), axis=1))) for w in candidates)
    v_sup = max(float(np.max(np.abs(loss.value(w, x, y)))) for w in candidates)
    return LossConstants(
        mu=2.0 * loss.reg,
        smooth=2.0 * (x_max**2 + loss.reg),
        grad_bound=safety * g_sup,
        hess_lip=0.0,
        value_bound=safety * v_sup,
    )


def admissible_alpha(c: LossConstants) -> float:
    """Largest inner stepsize keeping the adapted loss strongly convex."""
    first = 1.0 / (2.0 * c.smooth)
    if c.hess_lip == 0.0:
        return first
    return min(first, c.mu / (8.0 * c.hess_lip * c.grad_bound))
