"""scikit-learn style front end to the nested sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ProxyDataset
from .filter import ParticleFilter
from .models import get_model
from .smc2 import SMC2Config, posterior_summary, smc2_run
from .streams import stream

__all__ = ["SMC2Estimator", "check_record"]


def check_record(X, y=None):
    """Validate ages ``X`` (shape (n,) or (n, 1)) and optional values ``y``.

    Returns 1-d float arrays; ages must be finite and strictly monotone.
    """
    ages = np.asarray(X, dtype=float)
    if ages.ndim == 2:
        if ages.shape[1] != 1:
            raise ValueError(f"X must hold a single age column, got shape {ages.shape}")
        ages = ages[:, 0]
    if ages.ndim != 1 or ages.size == 0:
        raise ValueError("X must be a non-empty column of ages")
    if not np.all(np.isfinite(ages)):
        raise ValueError("X contains non-finite ages")
    steps = np.diff(ages)
    if steps.size and not (np.all(steps < 0) or np.all(steps > 0)):
        raise ValueError("ages must be strictly monotone")
    if y is None:
        return ages, None
    values = np.asarray(y, dtype=float).ravel()
    if values.shape != ages.shape:
        raise ValueError(f"X and y have inconsistent lengths {ages.size} and {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("y contains non-finite values")
    return ages, values


class SMC2Estimator(BaseEstimator):
    """Bayesian fit of a glacial-cycle model to one proxy record.

    Parameters
    ----------
    model : str
        ``sm91``, ``t06``, ``pp12``, ``ou`` or ``conjugate``.
    forced : bool
    orbital : OrbitalSolution or None
        Required by forced models.
    n_theta, n_x : int
        Parameter and state particles.
    proposal : {"guided", "blind"}
    chain_length : int
        PMMH steps per rejuvenation.
    ess_fraction, nx_threshold, nx_cap
        Outer resampling trigger and N_x adaptation.
    substeps : int or None
        Euler sub-steps per interval (default: at most 0.5 kyr each).
    prior_overrides : dict or None
        ``{name: (family, params)}``.
    seed, threads : int

    Attributes
    ----------
    log_evidence_ : float
    report_ : EvidenceReport
    theta_ : ndarray of shape (n_theta, n_params)
    weights_ : ndarray of shape (n_theta,)
    param_names_ : list of str
    """

    def __init__(self, model="sm91", forced=True, orbital=None, n_theta=1000, n_x=1000, proposal="guided",
                 chain_length=10, ess_fraction=0.5, nx_threshold=0.15, nx_cap=2 ** 14, substeps=None,
                 prior_overrides=None, seed=0, threads=1):
        self.model = model
        self.forced = forced
        self.orbital = orbital
        self.n_theta = n_theta
        self.n_x = n_x
        self.proposal = proposal
        self.chain_length = chain_length
        self.ess_fraction = ess_fraction
        self.nx_threshold = nx_threshold
        self.nx_cap = nx_cap
        self.substeps = substeps
        self.prior_overrides = prior_overrides
        self.seed = seed
        self.threads = threads

    def _build_model(self):
        return get_model(self.model, self.forced, self.orbital, self.prior_overrides)

    def _config(self):
        return SMC2Config(n_theta=self.n_theta, n_x=self.n_x, proposal=self.proposal,
                          chain_length=self.chain_length, ess_fraction=self.ess_fraction,
                          nx_threshold=self.nx_threshold, nx_cap=max(self.nx_cap, self.n_x),
                          substeps=self.substeps, seed=self.seed, threads=self.threads)

    def fit(self, X, y):
        """Run the sampler on ages ``X`` (kyr before present) and values ``y``."""
        ages, values = check_record(X, y)
        self.model_ = self._build_model()
        self.dataset_ = ProxyDataset.from_arrays(ages, values)
        result = smc2_run(self.model_, self.dataset_, self._config())
        self.result_ = result
        self.report_ = result.report
        self.log_evidence_ = result.log_evidence
        self.theta_ = result.theta
        self.weights_ = result.weights
        self.param_names_ = list(result.param_names)
        return self

    def summary(self) -> dict:
        check_is_fitted(self, "theta_")
        return posterior_summary(self.theta_, self.weights_, self.param_names_, self.model)

    def hindcast(self, n_draws: int = 50, n_x: int | None = None):
        """Filtering means of the first state at the training ages.

        Parameter draws are taken from the weighted posterior sample and one
        filter is run per draw. Returns ``(draws, means)`` with ``draws`` of
        shape ``(n_draws, n_params)`` and ``means`` of shape
        ``(n_draws, n_obs)``.
        """
        check_is_fitted(self, "theta_")
        g = stream(self.seed, "hindcast")
        draws = self.theta_[g.choice(self.theta_.shape[0], size=n_draws, p=self.weights_)]
        pf = ParticleFilter(self.model_, n_x or self.n_x, self.proposal, substeps=self.substeps,
                            seed=self.seed, purpose="hindcast", threads=self.threads, keep_history=True)
        means, _ = pf.run(draws, self.dataset_).filtering_moments(0)
        return draws, means

    def predict(self, X, n_draws: int = 50):
        """Posterior mean of the observation ``D + C x[0]`` at ages ``X``.

        Values between training ages are linearly interpolated; ages outside
        the record are rejected.
        """
        check_is_fitted(self, "theta_")
        ages, _ = check_record(X)
        lo, hi = self.dataset_.ages.min(), self.dataset_.ages.max()
        if ages.min() < lo - 1e-9 or ages.max() > hi + 1e-9:
            raise ValueError(f"ages must lie within the fitted record [{lo}, {hi}] kyr")
        draws, means = self.hindcast(n_draws)
        _, obs = self.model_.unpack(draws)
        pred = np.mean(obs.d_offset + obs.c_scale * means, axis=0)
        order = np.argsort(self.dataset_.ages)
        return np.interp(ages, self.dataset_.ages[order], pred[order])
