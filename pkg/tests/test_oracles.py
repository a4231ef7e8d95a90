import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from paleosmc.models import get_model
from paleosmc.oracles import (LinearGaussianSSM, conjugate_evidence, conjugate_ssm, euler_bridge_joint,
                              gaussian_condition_oracle, kalman_loglik, ou_ssm)
from paleosmc.validation import OU_THETA, ou_dataset


def scalar_ssm(**kw):
    args = dict(F=np.eye(1), Q=np.zeros((1, 1)), H=np.ones(1), D=0.0, R=1.0, m0=np.zeros(1), P0=np.eye(1))
    args.update(kw)
    return LinearGaussianSSM(**args)


def test_single_observation_predictive():
    assert kalman_loglik(scalar_ssm(), [0.0]) == pytest.approx(stats.norm(0, math.sqrt(2)).logpdf(0.0), abs=1e-14)


def test_tiny_observation_noise_stays_finite():
    ll = kalman_loglik(scalar_ssm(R=1e-24), [0.0])
    assert ll == pytest.approx(stats.norm(0, 1).logpdf(0.0), abs=1e-12)


def test_empty_data():
    assert kalman_loglik(scalar_ssm(), []) == 0.0
    assert conjugate_evidence(0.0, 1.0, 1.0, []) == 0.0


def test_conjugate_evidence_example():
    assert conjugate_evidence(0.0, 1.0, 1.0, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-14)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(-2, 2), st.floats(0.1, 3),
       st.floats(0.1, 3))
def test_conjugate_evidence_matches_kalman_and_dense_gaussian(y, m0, s0, sd):
    y = np.array(y)
    closed = conjugate_evidence(m0, s0 ** 2, sd ** 2, y)
    ssm = scalar_ssm(m0=np.array([m0]), P0=np.array([[s0 ** 2]]), R=sd ** 2)
    assert closed == pytest.approx(kalman_loglik(ssm, y), abs=1e-9)
    cov = s0 ** 2 * np.ones((y.size, y.size)) + sd ** 2 * np.eye(y.size)
    dense = stats.multivariate_normal(np.full(y.size, m0), cov).logpdf(y)
    assert closed == pytest.approx(dense, abs=1e-9)


@given(st.permutations(list(range(6))))
def test_conjugate_evidence_order_free(perm):
    y = np.array([0.3, -1.2, 2.0, 0.7, 0.1, -0.4])
    assert conjugate_evidence(0.5, 2.0, 0.7, y[list(perm)]) == pytest.approx(conjugate_evidence(0.5, 2.0, 0.7, y),
                                                                           abs=1e-12)


def test_conjugate_ssm_matches_closed_form():
    model = get_model("conjugate")
    y = np.array([0.2, 1.1, -0.3])
    assert kalman_loglik(conjugate_ssm(model), y) == pytest.approx(conjugate_evidence(0.0, 1.0, 1.0, y), abs=1e-12)


def test_kalman_against_dense_joint():
    model, ds = ou_dataset(12)
    ssm = ou_ssm(model, OU_THETA, ds)
    # dense covariance of the observations built by propagating the state covariance
    n = len(ds)
    lam, sig, D, C, sy = OU_THETA
    F = [float(ssm.transition(k)[0][0, 0]) for k in range(n - 1)]
    Q = [float(ssm.transition(k)[1][0, 0]) for k in range(n - 1)]
    var = np.empty(n)
    var[0] = ssm.P0[0, 0]
    for k in range(n - 1):
        var[k + 1] = F[k] ** 2 * var[k] + Q[k]
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            cov[i, j] = cov[j, i] = var[i] * np.prod(F[i:j])
    ycov = C * C * cov + sy * sy * np.eye(n)
    dense = stats.multivariate_normal(D + C * ssm.m0[0] * np.ones(n), ycov).logpdf(ds.values)
    assert kalman_loglik(ssm, ds.values) == pytest.approx(dense, abs=1e-9)


def test_kalman_invariant_under_similarity_transform():
    rng = np.random.default_rng(0)
    F = np.array([[0.9, 0.1], [-0.2, 0.8]])
    Q = np.array([[0.3, 0.05], [0.05, 0.2]])
    ssm = LinearGaussianSSM(F, Q, np.array([1.0, 0.5]), 0.2, 0.4, np.array([0.1, -0.3]), np.eye(2))
    y = rng.normal(size=25)
    T = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    assert kalman_loglik(ssm.transformed(T), y) == pytest.approx(kalman_loglik(ssm, y), abs=1e-8)


def test_condition_oracle_examples():
    cov = np.diag([2.0, 3.0])
    m, c = gaussian_condition_oracle(np.array([1.0, 5.0]), cov, 1, 0.0)
    assert m[0] == 1.0 and c[0, 0] == 2.0
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    m, c = gaussian_condition_oracle(np.zeros(2), cov, 1, 2.0)
    assert m[0] == pytest.approx(1.0) and c[0, 0] == pytest.approx(0.75)


def test_bridge_joint_is_psd():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        h = np.zeros(d)
        h[0] = 1.0
        _, cov = euler_bridge_joint(rng.normal(size=d), rng.normal(size=d), rng.exponential(size=d), h, 0.0,
                                    0.2, 0.5, 2.0)
        assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov).min() > -1e-12
