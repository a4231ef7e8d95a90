import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from paleosmc.data import ProxyDataset
from paleosmc.filter import (GuidedStepPlan, ParticleFilter, _substep_kernel, blind_substep, ess, ess_from_log,
                             guided_moments, guided_plan, guided_step, guided_substep, pf_loglik, resample,
                             resample_from_uniforms, write_diagnostics)
from paleosmc.models import ModelState, get_model
from paleosmc.oracles import euler_bridge_joint, gaussian_condition_oracle
from paleosmc.validation import OU_THETA, ou_dataset, random_guided_case


def test_ess_examples():
    assert ess(np.full(10, 0.1)) == pytest.approx(10.0, abs=1e-12)
    assert ess([1.0, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-12)
    assert ess([0.5, 0.5, 0.0, 0.0]) == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(ess_from_log(np.log([[0.5, 0.5, 1e-300, 1e-300]])), [2.0], atol=1e-12)
    assert ess_from_log(np.full((1, 3), -np.inf))[0] == 0.0
    with pytest.raises(ValueError):
        ess([0.0, 0.0])


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=50))
def test_ess_bounds(w):
    if sum(w) <= 0:
        return
    e = ess(w)
    assert 1.0 - 1e-9 <= e <= len(w) + 1e-9


@pytest.mark.parametrize("scheme", ["stratified", "multinomial"])
def test_point_mass_resamples_to_one_index(scheme):
    idx = resample([1.0, 0.0, 0.0], scheme, np.random.default_rng(0))
    np.testing.assert_array_equal(idx, [0, 0, 0])


@given(st.integers(1, 300), st.integers(0, 2 ** 32 - 1))
def test_stratified_uniform_weights_pick_each_index_once(n, seed):
    idx = resample(np.ones(n), "stratified", np.random.default_rng(seed))
    np.testing.assert_array_equal(np.sort(idx), np.arange(n))


def test_multinomial_counts():
    n = 10 ** 5
    idx = resample([0.7, 0.3], "multinomial", np.random.default_rng(1), n)
    frac = np.mean(idx == 0)
    assert abs(frac - 0.7) < 0.005
    assert abs(frac - 0.7) < 5 * math.sqrt(0.21 / n)


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=20), st.integers(0, 1000))
def test_stratified_counts_within_one(w, seed):
    w = np.array(w)
    n = w.size
    idx = resample_from_uniforms(w, np.random.default_rng(seed).random(n), "stratified")
    counts = np.bincount(idx, minlength=n)
    expected = n * w / w.sum()
    assert np.all(np.abs(counts - expected) < 2.0)


def test_unknown_scheme():
    with pytest.raises(ValueError):
        resample_from_uniforms([1.0], [0.5], "systematicish")


# -- guided proposal ----------------------------------------------------------

def test_guided_moments_match_conditioning_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        x, mu, sigma, h, D, sy, y, dt, dt_rem = random_guided_case(rng)
        M, S, A, _ = guided_moments(x, mu, sigma, h, D, sy, y, dt, dt_rem)
        jm, jc = euler_bridge_joint(x, mu, sigma, h, D, sy, dt, dt_rem)
        cm, cc = gaussian_condition_oracle(jm, jc, x.size, y)
        assert np.max(np.abs(M - cm)) < 1e-10
        assert np.max(np.abs(S - cc)) < 1e-10
        assert A > 0
        assert np.linalg.eigvalsh(S).min() > -1e-12


def test_large_observation_noise_recovers_euler_step():
    rng = np.random.default_rng(3)
    x, mu, sigma, h, D, _, y, dt, dt_rem = random_guided_case(rng)
    M, S, _, _ = guided_moments(x, mu, sigma, h, D, 1e6, y, dt, dt_rem)
    np.testing.assert_allclose(M, x + mu * dt, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(S, np.diag(sigma * dt), rtol=1e-6, atol=1e-12)


def test_guided_substep_ratio_against_dense_densities():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x, mu, sigma, h, D, sy, y, dt, dt_rem = random_guided_case(rng)
        d = x.size
        eps, eta = rng.normal(size=(1, d)), rng.normal(size=1)
        x_new, log_ratio = guided_substep(x[None], mu[None], sigma, h, D, sy, y, dt, dt_rem, eps, eta)
        M, S, _, _ = guided_moments(x, mu, sigma, h, D, sy, y, dt, dt_rem)
        log_p = stats.multivariate_normal(x + mu * dt, np.diag(sigma * dt)).logpdf(x_new[0])
        log_q = stats.multivariate_normal(M, S).logpdf(x_new[0])
        assert log_ratio[0] == pytest.approx(log_p - log_q, abs=1e-7)


def test_guided_draws_have_proposal_moments():
    rng = np.random.default_rng(8)
    x, mu, sigma, h, D, sy, y, dt, dt_rem = random_guided_case(rng)
    d, n = x.size, 200_000
    xs, _ = guided_substep(np.tile(x, (n, 1)), np.tile(mu, (n, 1)), sigma, h, D, sy, y, dt, dt_rem,
                           rng.normal(size=(n, d)), rng.normal(size=n))
    M, S, _, _ = guided_moments(x, mu, sigma, h, D, sy, y, dt, dt_rem)
    se = np.sqrt(np.diag(S) / n)
    assert np.all(np.abs(xs.mean(0) - M) < 5 * se + 1e-15)
    np.testing.assert_allclose(np.cov(xs.T).reshape(d, d), S, atol=5 * np.sqrt(2 / n) * np.abs(S).max())


def test_kernel_matches_reference_implementation():
    rng = np.random.default_rng(9)
    B, N, d = 3, 17, 3
    x = rng.normal(size=(B, N, d))
    mu = rng.normal(size=(B, N, d))
    sigma = rng.exponential(size=(B, d))
    h = np.zeros((B, d))
    h[:, 0] = rng.uniform(0.5, 1.5, B)
    D, sy = rng.normal(size=B), rng.uniform(0.05, 1.0, B)
    noise = rng.normal(size=(B, N, d + 1))
    y, dt, dt_rem = 0.7, 0.5, 2.0
    ref_x, ref_lr = guided_substep(x, mu, sigma[:, None, :], h[:, None, :], D[:, None], sy[:, None], y, dt,
                                   dt_rem, noise[..., :d], noise[..., d])
    kx, kw = x.copy(), np.zeros((B, N))
    _substep_kernel(kx, mu, sigma, h, D, sy, y, dt, dt_rem, noise, kw, True)
    np.testing.assert_allclose(kx, ref_x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(kw, ref_lr, rtol=1e-10, atol=1e-10)
    bx, bw = x.copy(), np.zeros((B, N))
    _substep_kernel(bx, mu, sigma, h, D, sy, y, dt, dt_rem, noise, bw, False)
    np.testing.assert_allclose(bx, blind_substep(x, mu, sigma[:, None, :], dt, noise[..., :d]), rtol=1e-12)
    assert np.all(bw == 0.0)


def test_kernel_parks_nonfinite_particles():
    x = np.array([[[1e308], [0.0]]])
    mu = np.array([[[1e308], [0.0]]])
    logw = np.zeros((1, 2))
    _substep_kernel(x, mu, np.ones((1, 1)), np.ones((1, 1)), np.zeros(1), np.ones(1), 0.0, 1.0, 1.0,
                    np.zeros((1, 2, 2)), logw, False)
    assert logw[0, 0] == -np.inf and x[0, 0, 0] == 0.0
    assert logw[0, 1] == 0.0


def test_guided_plan_and_step(sm91_forced, sm91_truth):
    plan = guided_plan(np.zeros(3), 4.0, sm91_truth, sm91_forced, 0.5, 3.0, 600.0)
    assert isinstance(plan, GuidedStepPlan)
    assert plan.A > 0 and plan.min_eigenvalue > -1e-12
    state, log_q = guided_step(ModelState(np.zeros(3)), 4.0, sm91_truth, None, 0.5, 3.0, sm91_forced,
                               np.random.default_rng(0), 600.0)
    assert np.isfinite(log_q) and state.x.shape == (3,)
    with pytest.raises(ValueError):
        guided_step(ModelState(np.zeros(3)), 4.0, sm91_truth, None, 2.0, 1.0, sm91_forced,
                    np.random.default_rng(0))


def test_guided_step_density_is_gaussian_logpdf(sm91_forced, sm91_truth):
    rng = np.random.default_rng(1)
    state, log_q = guided_step(ModelState(np.array([0.2, 0.1, 0.0])), 3.9, sm91_truth, None, 0.5, 1.5,
                               sm91_forced, rng, 600.0)
    plan = guided_plan(np.array([0.2, 0.1, 0.0]), 3.9, sm91_truth, sm91_forced, 0.5, 1.5, 600.0)
    assert log_q == pytest.approx(stats.multivariate_normal(plan.M, plan.S).logpdf(state.x), abs=1e-9)


def test_guided_plan_rejects_bad_time():
    with pytest.raises(ValueError):
        GuidedStepPlan(np.zeros(1), np.ones(1), 2.0, 1.0, 1.0, np.zeros(1), np.zeros(1), np.eye(1))


# -- particle filter ----------------------------------------------------------

def test_empty_dataset_loglik_is_zero():
    model = get_model("ou")
    ds = ProxyDataset(np.zeros(0), np.zeros(0))
    ll, _ = pf_loglik(OU_THETA, model, ds, n_particles=16)
    assert ll == 0.0


def test_blind_filter_with_huge_observation_noise():
    """Blind increments are just averaged observation densities; with a
    flat observation they all coincide."""
    model = get_model("ou")
    _, ds = ou_dataset(10)
    theta = OU_THETA.copy()
    theta[-1] = 1e6
    ll_b, sys_b = pf_loglik(theta, model, ds, 64, "blind")
    ll_g, sys_g = pf_loglik(theta, model, ds, 64, "guided")
    expected = -0.5 * math.log(2 * math.pi * 1e12)
    np.testing.assert_allclose(sys_b.increment_matrix[0], expected, atol=1e-6)
    np.testing.assert_allclose(sys_g.increment_matrix[0], expected, atol=1e-6)


def test_filter_variance_shrinks_with_particles():
    model, ds = ou_dataset(30)
    sds = []
    for n in (32, 128, 512):
        pf = ParticleFilter(model, n, "blind", seed=3)
        sds.append(pf.run(np.tile(OU_THETA, (100, 1)), ds).cum_loglik.std())
    assert sds[0] > sds[1] > sds[2]


def test_rows_are_exchangeable():
    """Per-row streams: a row's estimate depends on its id, not its position."""
    model, ds = ou_dataset(10)
    pf = ParticleFilter(model, 64, seed=4)
    theta = np.tile(OU_THETA, (5, 1))
    theta[:, 0] = np.linspace(0.05, 0.3, 5)
    full = pf.run(theta, ds).cum_loglik
    perm = np.array([3, 0, 4, 1, 2])
    permuted = pf.run(theta[perm], ds, row_ids=perm).cum_loglik
    np.testing.assert_array_equal(permuted, full[perm])


def test_thread_count_does_not_change_results(sm91_forced, sm91_truth):
    from paleosmc.simulate import generate_synthetic
    ds, _ = generate_synthetic(sm91_truth, sm91_forced, 60, 0, 3, np.random.default_rng(2))
    theta = np.tile(sm91_truth, (300, 1))
    a = ParticleFilter(sm91_forced, 128, seed=7, threads=1).run(theta, ds)
    b = ParticleFilter(sm91_forced, 128, seed=7, threads=4).run(theta, ds)
    np.testing.assert_array_equal(a.cum_loglik, b.cum_loglik)
    np.testing.assert_array_equal(a.x, b.x)


def test_hybrid_model_filters(orbital):
    model = get_model("t06", True, orbital)
    theta = model.registry.sample(np.random.default_rng(0), 4)
    from paleosmc.simulate import generate_synthetic
    ds, _ = generate_synthetic(theta[0], model, 30, 0, 3, np.random.default_rng(1))
    system = ParticleFilter(model, 32).run(theta, ds)
    assert system.regime.dtype == np.int8
    assert set(np.unique(system.regime)) <= {0, 1}
    assert np.isfinite(system.cum_loglik[0])


def test_history_trajectories_and_moments():
    model, ds = ou_dataset(8)
    pf = ParticleFilter(model, 32, keep_history=True)
    system = pf.run(np.tile(OU_THETA, (2, 1)), ds)
    paths = system.trajectories(1, np.random.default_rng(0), 10)
    assert paths.shape == (10, 8, 1)
    means, variances = system.filtering_moments(0)
    assert means.shape == (2, 8) and np.all(variances >= 0)
    w = system.weights
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_diagnostics_output():
    model, ds = ou_dataset(5)
    _, system = pf_loglik(OU_THETA, model, ds, 16)
    buf = io.StringIO()
    write_diagnostics(buf, system, ds)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "index,age_kyr,ess,increment,collapsed"
    assert len(lines) == 6
    assert len(system.increments) == len(ds)


def test_guided_requires_observation_noise():
    model, ds = ou_dataset(3)
    theta = OU_THETA.copy()
    theta[-1] = 0.0
    with pytest.raises(ValueError, match="sigma_y"):
        pf_loglik(theta, model, ds, 8, "guided")


@pytest.mark.parametrize("scheme", ["stratified", "multinomial"])
def test_batched_resampling_matches_reference(scheme):
    from paleosmc.filter import _resample_rows
    rng = np.random.default_rng(12)
    logw = 3 * rng.normal(size=(20, 64))
    logw[2] = -np.inf
    logw[5, :40] = -np.inf
    u = rng.random((20, 64))
    anc = _resample_rows(logw, u, scheme == "stratified")
    np.testing.assert_array_equal(anc[2], np.arange(64))
    for i in (0, 1, 5, 19):
        w = np.exp(logw[i] - logw[i].max())
        np.testing.assert_array_equal(anc[i], resample_from_uniforms(w, u[i], scheme))
