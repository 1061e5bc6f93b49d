import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from metastab.analysis import tv_numeric_1d
from metastab.task_model import (
    Mode,
    TaskModelError,
    TaskSpec,
    build_collection,
    coefficient_from_draw,
    dumps_collection,
    generate_collection,
    generate_task,
    load_collection,
    loads_collection,
    maximal_coupling_draws,
    maximal_coupling_sample,
    perturb_dataset,
    rng_stream,
    sample_points,
    save_collection,
)


def test_generate_task_is_pure():
    a = generate_task(3, 10, "similar", 0.2, 0.1)
    b = generate_task(3, 10, "similar", 0.2, 0.1)
    assert a == b
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.coeff, b.coeff)
    assert generate_task(4, 10) != a


def test_generated_coefficients():
    for seed in range(50):
        sim = generate_task(seed, 10, "similar")
        dis = generate_task(seed, 10, "dissimilar")
        assert abs(np.linalg.norm(sim.coeff) - 1) < 1e-12
        assert abs(np.linalg.norm(dis.coeff) - 1) < 1e-12
        assert np.all(sim.coeff > 0)
        assert np.all(dis.coeff <= 0)
        assert np.all((sim.mean >= 0) & (sim.mean <= 1))


@given(st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=12), st.sampled_from(list(Mode)))
def test_coefficient_unit_norm(u, mode):
    u = np.array(u)
    if mode is Mode.DISSIMILAR and np.all(u == 1.0):
        return
    c = coefficient_from_draw(u, mode)
    assert abs(np.linalg.norm(c) - 1) < 1e-12


def test_invalid_inputs():
    with pytest.raises(TaskModelError):
        generate_task(0, 0)
    with pytest.raises(ValueError):
        generate_task(0, 3, "other")
    with pytest.raises(TaskModelError):
        TaskSpec([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(TaskModelError):
        TaskSpec([0.0], [1.0], -1.0, 0.1)


def test_sample_moments_match_law():
    spec = TaskSpec(np.zeros(3), np.eye(3)[0], 0.2, 0.1)
    x, y = sample_points(spec, rng_stream(0, "moments"), 1_000_000)
    sd_y = np.sqrt(0.2 + 0.1)
    assert abs(y.mean()) <= 4 * sd_y / 1000
    assert np.all(np.abs(x.var(axis=0) / 0.2 - 1) < 0.02)


def test_distinct_seeds_share_no_sample():
    for trial in range(100):
        a = generate_collection(trial, 3, 1, 50)
        b = generate_collection(trial + 1000, 3, 1, 50)
        xa = np.concatenate([a.datasets[0].x_in, a.datasets[0].x_out])
        xb = np.concatenate([b.datasets[0].x_in, b.datasets[0].x_out])
        assert not (set(map(bytes, xa)) & set(map(bytes, xb)))


def test_subset_is_prefix():
    coll = generate_collection(1, 4, 6, 30)
    sub = coll.subset(3, 10)
    assert sub.m == 3 and sub.n == 10
    assert np.array_equal(sub.datasets[2].x_in, coll.datasets[2].x_in[:10])
    with pytest.raises(TaskModelError):
        coll.subset(7, 10)


def test_perturbation_hamming_distance():
    coll = generate_collection(2, 10, 4, 50)
    pert, info = perturb_dataset(coll, 2, 5, rng_stream(0, "p"))
    for i, (a, b) in enumerate(zip(coll.datasets, pert.datasets)):
        inner = np.any(a.x_in != b.x_in, axis=1) | (a.y_in != b.y_in)
        outer = np.any(a.x_out != b.x_out, axis=1) | (a.y_out != b.y_out)
        if i == 2:
            assert inner.sum() == 5 and outer.sum() == 1
            assert set(np.flatnonzero(inner)) == set(info.inner_positions.tolist())
            assert np.flatnonzero(outer)[0] == info.outer_position
        else:
            assert not inner.any() and not outer.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(1, 20), st.integers(0, 10_000))
def test_perturbation_changes_exactly_k_plus_one(task, k, seed):
    coll = generate_collection(seed, 3, 4, 20)
    pert, _ = perturb_dataset(coll, task, k, rng_stream(seed, "h"))
    changed = 0
    for a, b in zip(coll.datasets, pert.datasets):
        changed += int((np.any(a.x_in != b.x_in, axis=1) | (a.y_in != b.y_in)).sum())
        changed += int((np.any(a.x_out != b.x_out, axis=1) | (a.y_out != b.y_out)).sum())
    assert changed == k + 1


def test_roundtrip_bit_exact(tmp_path):
    coll = generate_collection(7, 10, 5, 50)
    path = tmp_path / "tasks.txt"
    save_collection(coll, path)
    again = load_collection(path)
    assert dumps_collection(again) == path.read_text()
    for a, b in zip(coll.datasets, again.datasets):
        assert a.equals(b)
    assert again.specs == coll.specs


def test_loader_reports_line():
    text = dumps_collection(generate_collection(0, 2, 1, 3)).splitlines()
    text[3] = "0 in 1.0"
    with pytest.raises(TaskModelError, match="line 4"):
        loads_collection("\n".join(text))


def test_build_collection_is_deterministic():
    specs = [generate_task(i, 3) for i in range(3)]
    a, b = build_collection(specs, 10, 5), build_collection(specs, 10, 5)
    assert dumps_collection(a) == dumps_collection(b)


def test_coupling_far_apart_never_couples():
    p = TaskSpec([0.0], [1.0], 1.0, 0.1)
    q = TaskSpec([1e6], [1.0], 1.0, 0.1)
    *_, coupled = maximal_coupling_draws(p, q, 10_000, rng_stream(0, "far"))
    assert (~coupled).mean() >= 0.999


def test_coupling_disagreement_matches_quadrature_oracle():
    p = TaskSpec([0.0], [1.0], 1.0, 0.1)
    q = TaskSpec([1.0], [1.0], 1.0, 0.1)
    *_, coupled = maximal_coupling_draws(p, q, 100_000, rng_stream(1, "tv"))
    assert abs((~coupled).mean() - tv_numeric_1d(p, q)) < 0.01


def test_coupling_marginals_ks():
    p = TaskSpec([0.0, 0.3], [0.6, 0.8], 0.5, 0.1)
    q = TaskSpec([0.4, 0.0], [0.8, 0.6], 0.3, 0.2)
    x1, y1, x2, y2, _ = maximal_coupling_draws(p, q, 10_000, rng_stream(2, "ks"))
    xp, yp = sample_points(p, rng_stream(3, "ks"), 10_000)
    xq, yq = sample_points(q, rng_stream(4, "ks"), 10_000)
    assert stats.ks_2samp(x1[:, 0], xp[:, 0]).pvalue > 0.001
    assert stats.ks_2samp(y1, yp).pvalue > 0.001
    assert stats.ks_2samp(x2[:, 0], xq[:, 0]).pvalue > 0.001
    assert stats.ks_2samp(y2, yq).pvalue > 0.001


def test_scalar_coupling_sample():
    p = TaskSpec([0.0], [1.0], 1.0, 0.1)
    rng = rng_stream(0, "one")
    a, b, same = maximal_coupling_sample(p, p, rng)
    assert same and a is b
    q = TaskSpec([0.5], [1.0], 1.0, 0.1)
    flags = [maximal_coupling_sample(p, q, rng)[2] for _ in range(4000)]
    assert abs(1 - np.mean(flags) - tv_numeric_1d(p, q)) < 0.03


def test_logpdf_matches_joint_gaussian():
    spec = generate_task(0, 3)
    x, y = sample_points(spec, rng_stream(0, "lp"), 50)
    z = np.column_stack([x, y])
    ref = stats.multivariate_normal(spec.joint_mean(), spec.joint_cov()).logpdf(z)
    assert np.allclose(spec.logpdf(x, y), ref, atol=1e-9)


def test_widened_scales_variances():
    spec = generate_task(0, 3)
    w = spec.widened(4.0)
    assert w.feature_cov_scale == 4 * spec.feature_cov_scale and w.noise_var == 4 * spec.noise_var
    assert np.array_equal(w.coeff, spec.coeff)
