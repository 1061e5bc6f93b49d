import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metastab.analysis import TaskFamily
from metastab.losses import (
    ConstraintSet,
    LossConstants,
    LossError,
    RegularizedQuadratic,
    adapt,
    adapted_loss,
    adapted_loss_gradient,
    admissible_alpha,
    compute_constants,
    envelope_points,
    envelope_radius,
    project,
)
from metastab.meta_objective import solve_ball_qp
from metastab.task_model import Sample, generate_task, rng_stream, sample_points

LOSS = RegularizedQuadratic(0.01)
BALL = ConstraintSet(10.0)
TASKS = TaskFamily().reference_tasks(20)


@pytest.fixture(scope="module")
def constants():
    return compute_constants(LOSS, BALL, TASKS)


def _fd(f, w, h=1e-5):
    out = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        out[j] = (f(w + e) - f(w - e)) / (2 * h)
    return out


def test_value_against_compensated_sum():
    rng = rng_stream(0, "fsum")
    for _ in range(20):
        w, x = rng.normal(size=10), rng.normal(size=10)
        y = float(rng.normal())
        resid = math.fsum(a * b for a, b in zip(w, x)) - y
        ref = resid * resid + 0.01 * math.fsum(a * a for a in w)
        assert abs(LOSS.value(w, x, y) - ref) <= 1e-12 * max(1.0, abs(ref))


def test_gradient_and_hessian_finite_differences():
    rng = rng_stream(1, "fd")
    worst = 0.0
    for _ in range(100):
        w, x = rng.normal(size=6), rng.normal(size=6)
        y = float(rng.normal())
        g = LOSS.gradient(w, x, y)
        worst = max(worst, np.linalg.norm(g - _fd(lambda v: LOSS.value(v, x, y), w)) / np.linalg.norm(g))
        h = LOSS.hessian(w, x, y)
        assert np.allclose(h, 2 * np.outer(x, x) + 0.02 * np.eye(6))
    assert worst < 1e-6


def test_adapt_two_point_batch_by_hand():
    rng = rng_stream(2, "adapt")
    w = rng.normal(size=4)
    pts = [Sample(rng.normal(size=4), float(rng.normal())) for _ in range(2)]
    g1 = 2 * (w @ pts[0].x - pts[0].y) * pts[0].x + 0.02 * w
    g2 = 2 * (w @ pts[1].x - pts[1].y) * pts[1].x + 0.02 * w
    expected = w - 0.1 * (g1 + g2) / 2
    assert np.allclose(adapt(w, pts, 0.1, LOSS), expected, rtol=0, atol=1e-14)
    with pytest.raises(LossError):
        adapt(w, [], 0.1, LOSS)
    with pytest.raises(LossError):
        adapt(w, pts, -0.1, LOSS)


def test_adapted_gradient_finite_differences():
    rng = rng_stream(3, "ag")
    for _ in range(20):
        w = rng.normal(size=5)
        xb, yb = rng.normal(size=(3, 5)), rng.normal(size=3)
        x, y = rng.normal(size=5), float(rng.normal())
        g = adapted_loss_gradient(w, (xb, yb), x, y, 0.05, LOSS)
        fd = _fd(lambda v: adapted_loss(v, (xb, yb), x, y, 0.05, LOSS), w)
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


@pytest.mark.parametrize("pairing", ["cross", "zip"])
def test_meta_quadratic_form_matches_direct(pairing):
    rng = rng_stream(4, pairing)
    s, k, d = 6, 3, 4
    xb, yb = rng.normal(size=(s, k, d)), rng.normal(size=(s, k))
    npts = s if pairing == "zip" else 7
    x, y = rng.normal(size=(npts, d)), rng.normal(size=npts)
    a, b, c = LOSS.meta_quadratic_form(xb, yb, x, y, 0.05, pairing)
    for _ in range(5):
        w = rng.normal(size=d)
        wa = adapt(w, (xb, yb), 0.05, LOSS)
        if pairing == "zip":
            direct = LOSS.value(wa, x, y).mean()
        else:
            direct = LOSS.value(wa[:, None, :], x[None], y[None]).mean()
        assert abs(w @ a @ w - 2 * b @ w + c - direct) <= 1e-10 * max(1.0, abs(direct))


@settings(max_examples=200)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), st.floats(0.1, 50))
def test_projection_properties(w, radius):
    ball = ConstraintSet(radius)
    p = project(w, ball)
    assert np.linalg.norm(p) <= radius * (1 + 1e-12)
    assert np.allclose(project(p, ball), p)
    if np.linalg.norm(w) <= radius:
        assert np.array_equal(p, w)


@settings(max_examples=100)
@given(arrays(np.float64, 4, elements=st.floats(-100, 100)), arrays(np.float64, 4, elements=st.floats(-100, 100)))
def test_projection_nonexpansive(u, v):
    ball = ConstraintSet(3.0, center=np.array([1.0, 0.0, -1.0, 0.5]))
    assert np.linalg.norm(project(u, ball) - project(v, ball)) <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12


def test_unbounded_set_is_identity():
    w = np.full(3, 1e8)
    assert np.array_equal(project(w, ConstraintSet(float("inf"))), w)
    with pytest.raises(LossError):
        ConstraintSet(0.0)


def test_constants_structure(constants):
    assert constants.mu == pytest.approx(0.02)
    assert constants.hess_lip == 0.0
    x_max = envelope_radius(TASKS)
    assert constants.smooth == pytest.approx(2 * (x_max**2 + 0.01))
    assert admissible_alpha(constants) == pytest.approx(1 / (2 * constants.smooth))
    assert set(constants.as_dict()) == {"mu", "smooth", "grad_bound", "hess_lip", "value_bound"}
    with pytest.raises(LossError):
        LossConstants(0.0, 1.0, 1.0, 0.0, 1.0)


def test_grad_bound_dominates_independent_probe_run(constants):
    x_max = envelope_radius(TASKS)
    rng = rng_stream(99, "independent")
    x, y = envelope_points(TASKS, 100_000, rng, x_max)
    w = BALL.uniform(rng, 100_000, 10)
    assert np.linalg.norm(LOSS.gradient(w, x, y), axis=1).max() <= constants.grad_bound
    assert np.abs(LOSS.value(w, x, y)).max() <= constants.value_bound


def _probe(rng, alpha, k=5):
    task = TASKS[int(rng.integers(len(TASKS)))]
    x_max = envelope_radius(TASKS)
    xb, yb = envelope_points([task], k, rng, x_max)
    x, y = envelope_points([task], 1, rng, x_max)
    return xb, yb, x[0], float(y[0])


def test_adapted_loss_curvature_envelope(constants):
    alpha = 0.9 * admissible_alpha(constants)
    hi = constants.meta_smooth(alpha)
    lo = constants.mu / 8
    tol = 1e-3 * hi
    rng = rng_stream(5, "curv")
    for _ in range(100):
        xb, yb, x, y = _probe(rng, alpha)
        w = BALL.uniform(rng, 1, 10)[0] * 0.99
        hess = np.array([_fd(lambda v: adapted_loss_gradient(v, (xb, yb), x, y, alpha, LOSS)[j], w, 1e-4)
                         for j in range(10)])
        eig = np.linalg.eigvalsh(0.5 * (hess + hess.T))
        assert lo - tol <= eig[0] and eig[-1] <= hi + tol


def test_adapted_gradient_and_value_bounds(constants):
    alpha = admissible_alpha(constants)
    g, m = constants.grad_bound, constants.value_bound
    rng = rng_stream(6, "bounds")
    for _ in range(2000):
        xb, yb, x, y = _probe(rng, alpha)
        w = BALL.uniform(rng, 1, 10)[0]
        assert np.linalg.norm(adapted_loss_gradient(w, (xb, yb), x, y, alpha, LOSS)) <= 2 * g
        assert abs(adapted_loss(w, (xb, yb), x, y, alpha, LOSS)) <= m + 2 * alpha * g * g


def test_strong_convexity_sandwich(constants):
    alpha = admissible_alpha(constants)
    rng = rng_stream(7, "sandwich")
    task = generate_task(3, 10)
    xb, yb = sample_points(task, rng, (400, 5))
    x, y = sample_points(task, rng, 400)
    a, b, c = LOSS.meta_quadratic_form(xb, yb, x, y, alpha, "zip")
    w_star = solve_ball_qp(a, b, BALL)
    phi = lambda v: v @ a @ v - 2 * b @ v + c  # noqa: E731
    lam = constants.mu / 8
    for w in BALL.uniform(rng, 100, 10):
        assert lam / 2 * np.sum((w - w_star) ** 2) <= phi(w) - phi(w_star) + 1e-9
