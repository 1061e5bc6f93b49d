import numpy as np
import pytest

from metastab.analysis import (
    AnalysisError,
    ShiftReport,
    TaskFamily,
    TVMethod,
    convergence_report,
    d_bound_value,
    estimate_stability,
    excess_loss_new_task,
    fitted_slope,
    gaussian_tv_equal_variance,
    largek_crossover,
    largek_gamma,
    mixture_generalization_bound,
    shift_bound,
    stability_grid,
    suboptimality_curve,
    theoretical_gamma,
    tv_distance,
    tv_numeric_1d,
    tv_to_mixture,
    weighted_d_bound_value,
)
from metastab.losses import ConstraintSet, LossConstants, RegularizedQuadratic, admissible_alpha
from metastab.meta_objective import MetaConfig
from metastab.task_model import TaskSpec, generate_collection, generate_task, rng_stream
from metastab.trainer import PremiseError, TrainerConfig, maml_train

LOSS = RegularizedQuadratic(0.01)
BALL = ConstraintSet(10.0)
FAMILY = TaskFamily()


@pytest.fixture(scope="module")
def constants():
    return FAMILY.constants(LOSS, BALL)


def _stab_cfg(c, m=5, n=20, t_max=4000):
    alpha = 0.8 * admissible_alpha(c)
    return TrainerConfig(m=m, n=n, k=2, b=5, r=min(5, m), t_max=t_max, alpha=alpha,
                         beta_cap=1 / c.meta_smooth(alpha), constraint=BALL)


def test_numeric_tv_matches_closed_form():
    p = TaskSpec([0.0], [1.0], 1.0, 0.1)
    q = TaskSpec([1.0], [1.0], 1.0, 0.1)
    assert tv_numeric_1d(p, q) == pytest.approx(gaussian_tv_equal_variance(1.0, 1.0), abs=1e-8)
    assert tv_distance(p, q, TVMethod.NUMERIC_1D).exact


def test_numeric_tv_saturates_and_vanishes():
    p = TaskSpec([0.0], [1.0], 0.2, 0.1)
    assert tv_numeric_1d(p, TaskSpec([50.0], [1.0], 0.2, 0.1)) >= 0.999
    assert tv_distance(p, p).value == 0.0
    with pytest.raises(AnalysisError):
        tv_numeric_1d(generate_task(0, 2), generate_task(1, 2))
    with pytest.raises(AnalysisError):
        tv_distance(generate_task(0, 2), generate_task(1, 3))


def test_tv_symmetry_and_triangle():
    a, b, c = (generate_task(s, 3, feature_cov_scale=0.5) for s in range(3))
    ab = tv_distance(a, b, rng=rng_stream(0, "ab"))
    ba = tv_distance(b, a, rng=rng_stream(0, "ba"))
    bc = tv_distance(b, c, rng=rng_stream(0, "bc"))
    ac = tv_distance(a, c, rng=rng_stream(0, "ac"))
    assert abs(ab.value - ba.value) <= 3 * np.hypot(ab.se, ba.se)
    assert ac.value <= ab.value + bc.value + 3 * np.sqrt(ab.se**2 + bc.se**2 + ac.se**2)


def test_mixture_of_identical_components():
    p = generate_task(0, 4)
    assert tv_to_mixture(p, [p, p, p]).value == 0.0
    q = generate_task(1, 4)
    assert tv_to_mixture(p, [p, q], [1.0, 0.0]).value == 0.0
    with pytest.raises(AnalysisError):
        tv_to_mixture(p, [p, q], [0.7, 0.7])
    # the mixture contains p, so it is closer to p than q alone is
    assert tv_to_mixture(p, [p, q]).value < tv_to_mixture(p, [q]).value


def test_d_bound_formula(constants):
    c = LossConstants(mu=0.02, smooth=2.0, grad_bound=3.0, hess_lip=0.0, value_bound=5.0)
    d = d_bound_value([0.1, 0.3], 0.2, c, 0.1)
    assert d == pytest.approx(4 * 0.1 * 9 * 0.2 + (5 + 2 * 0.1 * 9) * 0.2)
    assert d_bound_value([0.1, 0.4], 0.2, c, 0.1) > d
    assert d_bound_value([0.1, 0.3], 0.25, c, 0.1) > d
    w = weighted_d_bound_value([0.1, 0.3], 0.2, [0.25, 0.75], c, 0.1)
    assert w == pytest.approx((5 + 1.8) * 0.2 + 12 * 0.9 * (0.025 + 0.225))


def test_shift_bound_dissimilar_exceeds_similar(constants):
    alpha = 0.8 * admissible_alpha(constants)
    for seed in range(5):
        seen = [generate_task(100 * seed + i, 10) for i in range(3)]
        near = shift_bound(generate_task(100 * seed + 50, 10), seen, constants, alpha, samples=20_000)
        far = shift_bound(generate_task(100 * seed + 50, 10, "dissimilar"), seen, constants, alpha,
                          samples=20_000)
        assert far.d_bound > near.d_bound
    clone = shift_bound(seen[0], seen[:1], constants, alpha, weights=[1.0], m=5, n=20, k=2)
    assert clone.d_bound == 0.0 and clone.weighted_d_bound == 0.0
    assert clone.largek_gamma == pytest.approx(largek_gamma(constants, 5, 20, 2, alpha))
    assert clone.to_csv().startswith("i,tv,se\n0,0,0\n")


def test_mixture_generalization_bound_by_hand():
    report = ShiftReport(tv_pairwise=[0.1, 0.2, 0.3], tv_to_mixture=0.1, d_bound=2.0)
    value = mixture_generalization_bound(report, [1.0, 2.0, 4.0], 0.4, [0.2, 0.2, 0.2])
    expected = 0.4 * 2.0 + 0.6 * (abs(0.2 - 1 / 3) * 1 + abs(0.2 - 1 / 3) * 2 + abs(0.2 - 1 / 3) * 4)
    assert value == pytest.approx(expected, abs=1e-12)
    assert report.mixture_bound == value
    with pytest.raises(AnalysisError):
        mixture_generalization_bound(report, [1.0, 2.0, 4.0], 0.5, [0.2, 0.2, 0.2])


def test_fitted_slope_exact_on_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    slope, se = fitted_slope(x, 3.0 * x**-1.5)
    assert slope == pytest.approx(-1.5, abs=1e-12) and se < 1e-10
    with pytest.raises(AnalysisError):
        fitted_slope([1, 2], [1, 2])


def test_theoretical_gamma_scaling(constants):
    alpha = 0.01
    g = theoretical_gamma(constants, 5, 20, 2, alpha)
    assert theoretical_gamma(constants, 10, 20, 2, alpha) == pytest.approx(g / 2)
    assert theoretical_gamma(constants, 5, 40, 2, alpha) == pytest.approx(g / 2)
    assert theoretical_gamma(constants, 5, 20, 2, alpha, 3.0) == pytest.approx(3 * g)
    with pytest.raises(AnalysisError):
        theoretical_gamma(constants, 5, 20, 2, alpha, 0.0)


def test_largek_crossover_branches(constants):
    k_star = largek_crossover(constants, 5, 20)
    mnmu = 100 * constants.mu
    assert constants.smooth * k_star / mnmu == pytest.approx(1 / np.sqrt(k_star), rel=1e-9)
    g2 = constants.grad_bound**2
    small, big = k_star / 4, k_star * 4
    assert largek_gamma(constants, 5, 20, small, 0.01) == pytest.approx(
        g2 * (1 / mnmu + 0.01 * constants.smooth * small / mnmu))
    assert largek_gamma(constants, 5, 20, big, 0.01) == pytest.approx(g2 * (1 / mnmu + 0.01 / np.sqrt(big)))


def test_unperturbed_control_is_zero(constants):
    rep = estimate_stability(FAMILY, _stab_cfg(constants, t_max=500), 3, LOSS, constants, probes=64,
                             perturb_k=0)
    assert rep.gamma_hat == 0.0
    assert all(np.all(d == 0) for d in rep.divergences)


def test_stability_premise_enforced(constants):
    cfg = _stab_cfg(constants)
    bad = TrainerConfig(**{**cfg.__dict__, "beta_cap": 2 * cfg.beta_cap})
    with pytest.raises(PremiseError):
        estimate_stability(FAMILY, bad, 2, LOSS, constants)


def test_stability_shrinks_with_sample_size(constants):
    rep = stability_grid(FAMILY, _stab_cfg(constants), [(5, 20), (10, 40), (20, 80)], 4, LOSS, constants,
                         probes=64)
    gammas = [g for *_, g, _ in rep.grid]
    assert rep.chain_ok
    assert gammas[0] > gammas[1] > gammas[2] > 0
    assert rep.fitted_slope < -0.5
    assert rep.to_csv().splitlines()[0] == "m,n,gamma_hat,se"


def test_convergence_report_fits():
    c = LossConstants(mu=0.02, smooth=40.0, grad_bound=400.0, hess_lip=0.0, value_bound=2000.0)
    t = np.array([100.0, 400.0, 1600.0])
    rep = convergence_report(t, 5 / t, 2 * t**-0.6, c, 0.02)
    assert rep.averaged_exponent == pytest.approx(-1.0)
    assert rep.last_exponent == pytest.approx(-0.6)
    assert rep.averaged_within_bound.all() and rep.last_within_bound.all()
    with pytest.raises(AnalysisError):
        convergence_report(t, -t, t, c, 0.02)


def test_suboptimality_last_iterate_rate():
    coll = generate_collection(3, 5, 5, 20)
    cfg = TrainerConfig(m=5, n=20, k=2, b=1, r=1, t_max=1, alpha=0.01, beta_cap=0.05, constraint=BALL)
    t = [1000, 4000, 16000]
    avg, _, last, _ = suboptimality_curve(coll, cfg, LOSS, t, seeds=range(12))
    assert fitted_slope(t, last)[0] <= -0.4
    assert avg[-1] < avg[0]


def test_dissimilar_excess_does_not_vanish(constants):
    alpha = 0.8 * admissible_alpha(constants)
    seen = [generate_task(i, 10) for i in range(5)]
    unseen = generate_task(99, 10, "dissimilar")
    cfg = MetaConfig(alpha=alpha, k=5)
    excess = []
    for n in (25, 50, 100):
        coll = generate_collection(7, 10, 5, n)
        tcfg = TrainerConfig(m=5, n=n, k=5, b=5, r=5, t_max=3000, alpha=alpha, beta_cap=0.02, constraint=BALL)
        w = maml_train(coll, tcfg, LOSS).averaged_iterate
        rep = excess_loss_new_task(w, unseen, coll, cfg, LOSS, constants, samples=5000, tv_samples=20_000)
        assert rep.excess <= rep.bound
        excess.append(rep.excess)
    assert excess[-1] > 0.5 * excess[0]
    eps = excess_loss_new_task(np.zeros(10), unseen, seen, cfg, LOSS, constants, samples=2000,
                               tv_samples=10_000, epsilon=0.1)
    assert eps.composite == pytest.approx(0.1 + 2 * eps.bound)
