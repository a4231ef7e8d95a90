"""Exact reference computations used to validate the Monte Carlo code.

These routines deliberately avoid sharing code with the filters: the
Kalman recursion, the closed-form conjugate evidence and the block-inversion
Gaussian conditioning are independent paths to the same quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ProxyDataset
from .models import ConjugateGaussianModel, LinearGaussianModel
from .simulate import DEFAULT_MAX_DT, substeps_for

__all__ = [
    "LinearGaussianSSM",
    "kalman_loglik",
    "conjugate_evidence",
    "gaussian_condition_oracle",
    "euler_bridge_joint",
    "ou_ssm",
    "conjugate_ssm",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LinearGaussianSSM:
    """``x_1 ~ N(m0, P0)``, ``x_{k+1} = F_k x_k + N(0, Q_k)``, ``y_k = H.x_k + D + N(0, R)``.

    ``F`` and ``Q`` are either single matrices or sequences with one entry
    per transition.
    """

    F: object
    Q: object
    H: np.ndarray
    D: float
    R: float
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_1d(np.asarray(self.H, dtype=float))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        d = self.H.size
        if self.m0.shape != (d,) or self.P0.shape != (d, d):
            raise ValueError("inconsistent state dimensions")
        if np.linalg.eigvalsh(0.5 * (self.P0 + self.P0.T)).min() < -1e-12:
            raise ValueError("initial covariance is not PSD")
        if self.R < 0:
            raise ValueError("observation variance must be >= 0")

    @property
    def dim(self) -> int:
        return self.H.size

    def transition(self, k: int):
        F = self.F[k] if isinstance(self.F, (list, tuple)) else self.F
        Q = self.Q[k] if isinstance(self.Q, (list, tuple)) else self.Q
        return np.atleast_2d(np.asarray(F, dtype=float)), np.atleast_2d(np.asarray(Q, dtype=float))

    def transformed(self, T) -> "LinearGaussianSSM":
        """Equivalent model in coordinates ``z = T x``."""
        T = np.atleast_2d(np.asarray(T, dtype=float))
        Ti = np.linalg.inv(T)

        def mapF(F):
            return T @ np.atleast_2d(F) @ Ti

        def mapQ(Q):
            return T @ np.atleast_2d(Q) @ T.T

        if isinstance(self.F, (list, tuple)):
            F = [mapF(f) for f in self.F]
            Q = [mapQ(q) for q in self.Q]
        else:
            F, Q = mapF(self.F), mapQ(self.Q)
        return LinearGaussianSSM(F, Q, self.H @ Ti, self.D, self.R, T @ self.m0, T @ self.P0 @ T.T)


def kalman_loglik(ssm: LinearGaussianSSM, data) -> float:
    """Exact log likelihood: sum of one-step predictive log densities."""
    y = np.asarray(data.values if isinstance(data, ProxyDataset) else data, dtype=float)
    m, P = ssm.m0.copy(), ssm.P0.copy()
    H = ssm.H
    total = 0.0
    for k, yk in enumerate(y):
        if k > 0:
            F, Q = ssm.transition(k - 1)
            m = F @ m
            P = F @ P @ F.T + Q
        s = float(H @ P @ H + ssm.R)
        if not s > 0:
            raise ZeroDivisionError(f"singular innovation variance at observation {k}")
        e = yk - float(H @ m) - ssm.D
        total += -0.5 * (LOG_2PI + math.log(s) + e * e / s)
        gain = P @ H / s
        m = m + gain * e
        P = P - np.outer(gain, H @ P)
        P = 0.5 * (P + P.T)
    return total


def conjugate_evidence(prior_mean: float, prior_var: float, obs_var: float, data) -> float:
    """``log p(y_1..y_M)`` for iid ``N(theta, obs_var)`` with ``theta ~ N(prior_mean, prior_var)``.

    Closed form via the matrix determinant lemma on ``obs_var*I + prior_var*11^T``.
    """
    if prior_var <= 0 or obs_var <= 0:
        raise ValueError("variances must be positive")
    y = np.asarray(data.values if isinstance(data, ProxyDataset) else data, dtype=float)
    n = y.size
    if n == 0:
        return 0.0
    r = y - prior_mean
    big = obs_var + n * prior_var
    logdet = (n - 1) * math.log(obs_var) + math.log(big)
    quad = (np.dot(r, r) - prior_var * r.sum() ** 2 / big) / obs_var
    return float(-0.5 * (n * LOG_2PI + logdet + quad))


def gaussian_condition_oracle(mean, cov, observed_index, observed_value):
    """Conditional mean and covariance of the unobserved block.

    Parameters
    ----------
    mean, cov : array_like
        Joint Gaussian moments.
    observed_index : int or sequence of int
    observed_value : float or array_like

    Returns
    -------
    (cond_mean, cond_cov) of the remaining components, in their original order.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    obs = np.atleast_1d(np.asarray(observed_index, dtype=int))
    val = np.atleast_1d(np.asarray(observed_value, dtype=float))
    rest = np.setdiff1d(np.arange(mean.size), obs)
    S_bb = cov[np.ix_(obs, obs)]
    if abs(np.linalg.det(S_bb)) < 1e-300:
        raise np.linalg.LinAlgError("observed block has singular covariance")
    S_ab = cov[np.ix_(rest, obs)]
    S_aa = cov[np.ix_(rest, rest)]
    K = np.linalg.solve(S_bb, S_ab.T).T
    cond_mean = mean[rest] + K @ (val - mean[obs])
    cond_cov = S_aa - K @ S_ab.T
    return cond_mean, cond_cov


def euler_bridge_joint(x, mu, sigma, h, d_offset, sigma_y, dt, dt_rem):
    """Joint moments of (next sub-step state, observation) under the Euler prior.

    The state after ``dt`` is ``x + mu dt + e1`` and the observation at the
    end of ``dt_rem`` is ``h.(state + mu (dt_rem - dt) + e2) + D + sigma_y e3``
    with independent Gaussian pieces; the joint covariance is assembled as
    ``L L^T`` from that linear map.
    """
    x, mu, sigma, h = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (x, mu, sigma, h))
    d = x.size
    L = np.zeros((d + 1, 2 * d + 1))
    L[:d, :d] = np.diag(np.sqrt(sigma * dt))
    L[d, :d] = h * np.sqrt(sigma * dt)
    L[d, d:2 * d] = h * np.sqrt(sigma * (dt_rem - dt))
    L[d, 2 * d] = sigma_y
    mean = np.append(x + mu * dt, h @ (x + mu * dt_rem) + d_offset)
    return mean, L @ L.T


def ou_ssm(model: LinearGaussianModel, theta, dataset: ProxyDataset, substeps: int | None = None,
           max_dt: float = DEFAULT_MAX_DT) -> LinearGaussianSSM:
    """Exact linear-Gaussian form of the Euler-discretised OU model on ``dataset``'s grid."""
    params, obs = model.unpack(np.asarray(theta, dtype=float))
    F, Q = [], []
    for a, b in zip(dataset.ages[:-1], dataset.ages[1:]):
        J = substeps_for(a - b, substeps, max_dt)
        dt = (a - b) / J
        phi = 1.0 - params.lam * dt
        F.append(np.array([[phi ** J]]))
        Q.append(np.array([[params.sigma ** 2 * dt * sum(phi ** (2 * i) for i in range(J))]]))
    mean, sd = model.init_moments(params)
    return LinearGaussianSSM(F, Q, np.array([obs.c_scale]), obs.d_offset, obs.sigma_y ** 2,
                             mean, np.diag(sd ** 2))


def conjugate_ssm(model: ConjugateGaussianModel) -> LinearGaussianSSM:
    """Static-state encoding: the state is ``mu`` itself and never moves."""
    return LinearGaussianSSM(np.eye(1), np.zeros((1, 1)), np.ones(1), 0.0, model.obs_sd ** 2,
                             np.array([model.prior_mean]), np.array([[model.prior_sd ** 2]]))
