from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from metastab.federated import FedConfig, fed_personalization_eval, fed_train
from metastab.losses import ConstraintSet, RegularizedQuadratic, project
from metastab.meta_objective import meta_gradient_batch
from metastab.task_model import build_collection, generate_collection, generate_task
from metastab.trainer import ConfigurationError, TrainerConfig, index_plans, maml_train, stepsize

LOSS = RegularizedQuadratic(0.01)


def _fed(**kw):
    base = dict(m=4, n=15, k=3, b=5, r=3, t_max=400, alpha=0.05, beta_cap=0.02, seed=2,
                constraint=ConstraintSet(10.0), trace_loss=False)
    base.update(kw)
    return FedConfig(**base)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_local_step_unconstrained_matches_maml(seed):
    coll = generate_collection(seed, 5, 4, 15)
    inf = ConstraintSet(float("inf"))
    fed = fed_train(coll, _fed(seed=seed, constraint=inf, tau=1), LOSS)
    plain = maml_train(coll, TrainerConfig(m=4, n=15, k=3, b=5, r=3, t_max=400, alpha=0.05, beta_cap=0.02,
                                           seed=seed, constraint=inf, trace_loss=False), LOSS)
    assert np.max(np.abs(fed.last_iterate - plain.last_iterate)) <= 1e-12
    assert fed.digest() == plain.digest()


def test_local_steps_replay_single_user():
    coll = generate_collection(3, 4, 1, 10)
    ball = ConstraintSet(0.5)
    cfg = _fed(m=1, n=10, r=1, tau=3, t_max=40, constraint=ball, record_path=True)
    out = fed_train(coll, cfg, LOSS)
    x_in, y_in, x_out, y_out = coll.stacked()
    w = np.zeros(4)
    for plan in index_plans(cfg.seed, 1, 10, 3, 5, 1, 3, cfg.t_max):
        for j in range(plan.tasks.shape[0]):
            beta = stepsize(plan.start + j, cfg.beta_cap, 0.02)
            for s in range(3):
                inn, o = plan.in_idx[j, 0, s], plan.out_idx[j, 0, s]
                g = meta_gradient_batch(w, x_in[0, inn], y_in[0, inn], x_out[0, o], y_out[0, o], cfg.alpha, LOSS)
                w = project(w - beta * g, ball)
            assert np.allclose(out.path[plan.start + j], w, rtol=0, atol=1e-12)


def test_every_local_and_server_iterate_is_feasible():
    coll = generate_collection(4, 4, 4, 15)
    cfg = _fed(tau=4, beta_cap=0.3, constraint=ConstraintSet(0.2), verbose_trace=True, record_path=True)
    out = fed_train(coll, cfg, LOSS)
    local = np.array([w for *_, w in out.local_trace])
    assert local.shape[0] == cfg.t_max * cfg.r * cfg.tau
    assert np.all(np.linalg.norm(local, axis=1) <= 0.2 + 1e-9)
    assert np.all(np.linalg.norm(out.path, axis=1) <= 0.2 + 1e-9)
    header = out.local_trace_csv().splitlines()[0]
    assert header == "round,user,local_step,w_1,w_2,w_3,w_4"


def test_verbose_trace_does_not_change_result():
    coll = generate_collection(5, 4, 4, 15)
    a = fed_train(coll, _fed(tau=2), LOSS)
    b = fed_train(coll, _fed(tau=2, verbose_trace=True), LOSS)
    assert np.allclose(a.last_iterate, b.last_iterate, rtol=0, atol=1e-12)


def test_deterministic_across_threads():
    coll = generate_collection(6, 4, 4, 15)
    cfg = _fed(tau=3)
    ref = fed_train(coll, cfg, LOSS).digest()
    with ThreadPoolExecutor(4) as ex:
        assert set(ex.map(lambda _: fed_train(coll, cfg, LOSS).digest(), range(6))) == {ref}


def test_invalid_tau():
    with pytest.raises(ConfigurationError):
        _fed(tau=0)


def test_homogeneous_users_are_exchangeable():
    spec = generate_task(1, 5)
    coll = build_collection([spec] * 4, 20, 9)
    cfg = _fed(m=4, n=20, tau=2, t_max=1000)
    out = fed_train(coll, cfg, LOSS)
    rep = fed_personalization_eval(out, coll, cfg, LOSS, samples=20_000)
    vals = np.array([e.value for e in rep.per_user])
    ses = np.array([e.se for e in rep.per_user])
    for i in range(4):
        for j in range(i + 1, 4):
            assert abs(vals[i] - vals[j]) <= 2 * np.hypot(ses[i], ses[j])


def test_adaptation_helps_heterogeneous_users():
    coll = generate_collection(7, 10, 6, 30, "dissimilar")
    cfg = _fed(m=6, n=30, k=5, b=10, r=3, tau=2, t_max=3000, alpha=0.01)
    out = fed_train(coll, cfg, LOSS)
    rep = fed_personalization_eval(out, coll, cfg, LOSS, samples=20_000)
    assert rep.average <= rep.average_unadapted
    assert rep.average_se > 0
