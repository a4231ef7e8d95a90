"""Stochastic glacial-cycle models: SM91, T06, PP12 and two linear test models.

Every model works on batched arrays. A continuous state has shape
``(..., d)`` and the discrete regime shape ``(...)``; parameters coming from
:meth:`Model.unpack` are either floats (single theta) or arrays of shape
``(B, 1)`` that broadcast against ``(B, N)`` particle batches.

Drift is expressed per kyr of forward time. ``diffusion_diag`` returns the
noise scales in the model's own time unit; :meth:`Model.variance_rate`
converts them to variance per kyr.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .distributions import DistributionSpec, PriorRegistry, prior_registry
from .orbital import ForcingWeights, OrbitalSolution, orbital_at, transformed_precession

__all__ = [
    "ModelState",
    "ObsParams",
    "Sm91Params",
    "T06Params",
    "Pp12Params",
    "LinearParams",
    "ConjugateParams",
    "Model",
    "SM91",
    "T06",
    "PP12",
    "LinearGaussianModel",
    "ConjugateGaussianModel",
    "ConfigurationError",
    "get_model",
    "obs_logpdf",
]

LOG_2PI = math.log(2.0 * math.pi)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelState:
    x: np.ndarray
    regime: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite state {x}")
        if self.regime not in (0, 1):
            raise ValueError("regime must be 0 or 1")


@dataclass(frozen=True)
class ObsParams:
    d_offset: float
    c_scale: float
    sigma_y: float

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma_y) >= 0):
            raise ValueError("sigma_y must be >= 0")


@dataclass(frozen=True)
class Sm91Params:
    p: float
    q: float
    r: float
    s: float
    v: float
    sigma1: float
    sigma2: float
    sigma3: float
    forcing: ForcingWeights = ForcingWeights()


@dataclass(frozen=True)
class T06Params:
    p0: float
    K: float
    s: float
    alpha: float
    t_lower: float
    t_upper: float
    sigma1: float
    forcing: ForcingWeights = ForcingWeights()


@dataclass(frozen=True)
class Pp12Params:
    forcing: ForcingWeights
    switch_weights: ForcingWeights
    a_g: float
    a_d: float
    tau_relax: float
    v_lower: float
    v_upper: float
    trunc_a: float
    sigma1: float


@dataclass(frozen=True)
class LinearParams:
    lam: float
    sigma: float


@dataclass(frozen=True)
class ConjugateParams:
    mu: float


def obs_logpdf(y, x, obs: ObsParams):
    """Gaussian log density of ``y`` given mean ``D + C*x[..., 0]``."""
    mean = obs.d_offset + obs.c_scale * np.asarray(x)[..., 0]
    var = np.asarray(obs.sigma_y) ** 2
    z = y - mean
    return -0.5 * (LOG_2PI + np.log(var) + z * z / var)


class Model:
    """Base class: a diffusion with diagonal noise, optional binary regime and
    a scalar linear-Gaussian observation of the first state component."""

    name = "model"
    dim = 1
    hybrid = False
    time_scale = 1.0  # kyr per model time unit
    has_forcing = False

    def __init__(self, forced: bool = False, orbital: OrbitalSolution | None = None,
                 registry: PriorRegistry | None = None):
        self.forced = bool(forced)
        if self.forced and self.has_forcing and orbital is None:
            raise ConfigurationError(f"forced {self.name} needs an orbital table")
        self.orbital = orbital
        self._registry = registry
        self._triple = lru_cache(maxsize=65536)(self._orbital_triple)

    # -- parameters ---------------------------------------------------------

    def default_registry(self) -> PriorRegistry:
        return prior_registry(self.name, self.forced)

    @property
    def registry(self) -> PriorRegistry:
        if self._registry is None:
            self._registry = self.default_registry()
        return self._registry

    @property
    def param_names(self) -> list:
        return self.registry.names

    def theta_from_dict(self, values: dict) -> np.ndarray:
        missing = [n for n in self.param_names if n not in values]
        if missing:
            raise KeyError(f"missing parameter(s) {missing} for {self.label}")
        return np.array([float(values[n]) for n in self.param_names])

    def _columns(self, theta) -> dict:
        theta = np.asarray(theta, dtype=float)
        names = self.param_names
        if theta.shape[-1] != len(names):
            raise ValueError(f"{self.label} expects {len(names)} parameters, got {theta.shape[-1]}")
        if theta.ndim == 1:
            return {n: float(theta[j]) for j, n in enumerate(names)}
        return {n: theta[:, j:j + 1] for j, n in enumerate(names)}

    def _forcing_weights(self, cols, prefix="gamma") -> ForcingWeights:
        if not self.forced:
            return ForcingWeights()
        return ForcingWeights(cols[f"{prefix}_p"], cols[f"{prefix}_c"], cols[f"{prefix}_e"])

    def unpack(self, theta):
        """Split a theta vector (or (B, p) matrix) into dynamics and observation parameters."""
        cols = self._columns(theta)
        return self._dynamics(cols), ObsParams(cols["D"], cols["S"], cols["sigma_y"])

    def _dynamics(self, cols):
        raise NotImplementedError

    @property
    def label(self) -> str:
        return f"{self.name}-{'f' if self.forced else 'u'}"

    # -- forcing ------------------------------------------------------------

    def _orbital_triple(self, t: float):
        p, c, e = orbital_at(self.orbital, t)
        return float(p), float(c), float(e)

    def orbital_triple(self, t: float):
        if self.orbital is None:
            return 0.0, 0.0, 0.0
        return self._triple(float(t))

    def forcing_value(self, t, w: ForcingWeights):
        if not self.forced:
            return 0.0
        p, c, e = self.orbital_triple(t)
        return w.gamma_p * p + w.gamma_c * c + w.gamma_e * e

    # -- dynamics -----------------------------------------------------------

    def drift(self, x, regime, t, params):
        raise NotImplementedError

    def diffusion_diag(self, params):
        raise NotImplementedError

    def variance_rate(self, params):
        """Diagonal noise variance per kyr, broadcastable to ``(..., d)``."""
        sd = self.diffusion_diag(params)
        return sd * sd / self.time_scale

    def update_regime(self, x, regime, t, params):
        return regime

    def init_moments(self, params):
        """Mean and s.d. (each shape (d,)) of the Gaussian initial-state law."""
        return np.zeros(self.dim), np.ones(self.dim)

    def observation_row(self, obs: ObsParams):
        h = np.zeros(self.dim)
        h[0] = 1.0
        return h

    def obs_logpdf(self, y, x, obs: ObsParams):
        return obs_logpdf(y, x, obs)

    def describe(self) -> dict:
        return {
            "model": self.name,
            "forced": self.forced,
            "state_dim": self.dim,
            "hybrid": self.hybrid,
            "time_scale_kyr": self.time_scale,
            "parameters": self.param_names,
        }


def _stack_last(*cols):
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


class SM91(Model):
    """Three-variable carbon-cycle oscillator; nondimensional time with 10 kyr unit."""

    name = "sm91"
    dim = 3
    time_scale = 10.0
    has_forcing = True

    def _dynamics(self, cols):
        return Sm91Params(
            cols["p"], cols["q"], cols["r"], cols["s"], cols["v"],
            cols["sigma1"], cols["sigma2"], cols["sigma3"],
            self._forcing_weights(cols),
        )

    def drift(self, x, regime, t, params: Sm91Params):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        f = self.forcing_value(t, params.forcing)
        d1 = -(x1 + x2 + params.v * x3 + f)
        d2 = params.r * x2 - params.p * x3 - params.s * x2 * x2 - x2 * x2 * x2
        d3 = -params.q * (x1 + x3)
        return _stack_last(d1, d2, d3) / self.time_scale

    def diffusion_diag(self, params: Sm91Params):
        return _stack_last(params.sigma1, params.sigma2, params.sigma3)


class T06(Model):
    """Ice volume coupled to a sea-ice switch with hysteresis thresholds."""

    name = "t06"
    dim = 1
    hybrid = True
    has_forcing = True

    def __init__(self, forced=True, orbital=None, registry=None, init_mean=20.0, init_sd=10.0):
        super().__init__(forced, orbital, registry)
        self.init_mean = float(init_mean)
        self.init_sd = float(init_sd)

    def _dynamics(self, cols):
        return T06Params(
            cols["p0"], cols["K"], cols["s"], cols["alpha"], cols["t_lower"],
            cols["t_upper"], cols["sigma1"], self._forcing_weights(cols),
        )

    def drift(self, x, regime, t, params: T06Params):
        x1 = x[..., 0]
        f = self.forcing_value(t, params.forcing)
        d1 = (params.p0 - params.K * x1) * (1.0 - params.alpha * regime) - (params.s + f)
        return _stack_last(d1)

    def diffusion_diag(self, params: T06Params):
        return _stack_last(params.sigma1)

    def update_regime(self, x, regime, t, params: T06Params):
        x1 = x[..., 0]
        up = x1 > params.t_upper
        down = x1 < params.t_lower
        return np.where(regime == 0, up, ~down).astype(np.int8)

    def init_moments(self, params):
        return np.array([self.init_mean]), np.array([self.init_sd])

    def describe(self):
        d = super().describe()
        d["init_law"] = {"x1_mean": self.init_mean, "x1_sd": self.init_sd, "regime": 0}
        return d


class PP12(Model):
    """Glaciation/deglaciation hybrid driven by truncated insolation."""

    name = "pp12"
    dim = 1
    hybrid = True
    has_forcing = True

    def __init__(self, forced=True, orbital=None, registry=None, init_mean=40.0, init_sd=20.0,
                 swap_switches: bool = False):
        if not forced:
            raise ConfigurationError("pp12 has no unforced variant")
        super().__init__(True, orbital, registry)
        self.init_mean = float(init_mean)
        self.init_sd = float(init_sd)
        self.swap_switches = bool(swap_switches)

    def _dynamics(self, cols):
        return Pp12Params(
            forcing=self._forcing_weights(cols),
            switch_weights=self._forcing_weights(cols, "kappa"),
            a_g=cols["a_g"], a_d=cols["a_d"], tau_relax=cols["tau_relax"],
            v_lower=cols["v_lower"], v_upper=cols["v_upper"],
            trunc_a=cols["trunc_a"], sigma1=cols["sigma1"],
        )

    def drift(self, x, regime, t, params: Pp12Params):
        x1 = x[..., 0]
        p, c, e = self.orbital_triple(t)
        w = params.forcing
        with np.errstate(invalid="ignore"):
            a = np.where(np.asarray(params.trunc_a) > 0, params.trunc_a, np.nan)
            drive = (w.gamma_p * transformed_precession(p, a)
                     + w.gamma_c * transformed_precession(c, a)
                     + w.gamma_e * e)
        d1 = -(drive - params.a_g + (params.a_g + params.a_d + x1 / params.tau_relax) * regime)
        return _stack_last(d1)

    def diffusion_diag(self, params: Pp12Params):
        return _stack_last(params.sigma1)

    def update_regime(self, x, regime, t, params: Pp12Params):
        x1 = x[..., 0]
        fk = self.forcing_value(t, params.switch_weights)
        low = fk < params.v_lower
        high = fk + x1 > params.v_upper
        if self.swap_switches:
            return np.where(regime == 0, high, ~low).astype(np.int8)
        return np.where(regime == 0, low, ~high).astype(np.int8)

    def init_moments(self, params):
        return np.array([self.init_mean]), np.array([self.init_sd])

    def describe(self):
        d = super().describe()
        d["init_law"] = {"x1_mean": self.init_mean, "x1_sd": self.init_sd, "regime": 0}
        d["pp12_swap_switches"] = self.swap_switches
        return d


class LinearGaussianModel(Model):
    """Ornstein-Uhlenbeck test model ``dX = -lam X dt + sigma dW``.

    Its Euler discretisation is exactly linear-Gaussian, so Kalman filtering
    gives the likelihood the particle filter estimates.
    """

    name = "ou"
    dim = 1

    def __init__(self, forced=False, orbital=None, registry=None, init_mean=0.0, init_sd=1.0):
        super().__init__(False, None, registry)
        self.init_mean = float(init_mean)
        self.init_sd = float(init_sd)

    def default_registry(self):
        return PriorRegistry("ou", False, [
            ("lam", DistributionSpec("exponential", (1.0,))),
            ("sigma", DistributionSpec("exponential", (2.0,))),
            ("D", DistributionSpec("gaussian", (0.0, 1.0))),
            ("S", DistributionSpec("uniform", (0.5, 1.5))),
            ("sigma_y", DistributionSpec("exponential", (2.0,))),
        ])

    def _dynamics(self, cols):
        return LinearParams(cols["lam"], cols["sigma"])

    def drift(self, x, regime, t, params: LinearParams):
        return _stack_last(-params.lam * x[..., 0])

    def diffusion_diag(self, params: LinearParams):
        return _stack_last(params.sigma)

    def init_moments(self, params):
        return np.array([self.init_mean]), np.array([self.init_sd])


class ConjugateGaussianModel(Model):
    """iid ``Y ~ N(mu, obs_sd^2)`` with ``mu ~ N(prior_mean, prior_sd^2)``.

    Encoded as a state-space model whose state is pinned at zero and whose
    observation offset is ``mu``; its evidence has a closed form.
    """

    name = "conjugate"
    dim = 1

    def __init__(self, forced=False, orbital=None, registry=None, prior_mean=0.0, prior_sd=1.0,
                 obs_sd=1.0):
        super().__init__(False, None, registry)
        self.prior_mean = float(prior_mean)
        self.prior_sd = float(prior_sd)
        self.obs_sd = float(obs_sd)

    def default_registry(self):
        return PriorRegistry("conjugate", False, [
            ("mu", DistributionSpec("gaussian", (self.prior_mean, self.prior_sd))),
        ])

    def unpack(self, theta):
        cols = self._columns(theta)
        mu = cols["mu"]
        return ConjugateParams(mu), ObsParams(mu, 1.0, self.obs_sd)

    def drift(self, x, regime, t, params):
        return np.zeros_like(x)

    def diffusion_diag(self, params):
        return np.zeros(1)

    def init_moments(self, params):
        return np.zeros(1), np.zeros(1)


MODELS = {
    "sm91": SM91,
    "t06": T06,
    "pp12": PP12,
    "ou": LinearGaussianModel,
    "conjugate": ConjugateGaussianModel,
}


def get_model(name: str, forced: bool = True, orbital: OrbitalSolution | None = None,
              prior_overrides: dict | None = None, **options) -> Model:
    """Instantiate a model by name (``sm91``, ``t06``, ``pp12``, ``ou``, ``conjugate``)."""
    key = name.lower()
    if key not in MODELS:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    model = MODELS[key](forced=forced, orbital=orbital, **options)
    if prior_overrides:
        model._registry = model.registry.with_overrides(prior_overrides)
    return model
