"""Univariate prior families and the per-model prior registries.

Parameterisation conventions (recorded in every run manifest):

* ``exponential(rate)`` -- mean ``1/rate``;
* ``gaussian(mean, sd)`` -- second argument is the standard deviation;
* ``gamma(shape, scale)`` -- mean ``shape*scale``;
* ``beta(a, b)`` and ``uniform(lower, upper)`` as usual.

Sampling is done by inversion of the CDF so that a block of uniforms maps
deterministically onto a block of prior draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

__all__ = [
    "DistributionSpec",
    "PriorRegistry",
    "sample",
    "logpdf",
    "prior_registry",
    "CONVENTIONS",
]

CONVENTIONS = {
    "exponential": "rate (mean = 1/rate)",
    "gaussian": "mean, standard deviation",
    "gamma": "shape, scale (mean = shape*scale)",
    "beta": "alpha, beta",
    "uniform": "lower, upper",
}

_ARITY = {"exponential": 1, "gaussian": 2, "gamma": 2, "beta": 2, "uniform": 2}


@dataclass(frozen=True)
class DistributionSpec:
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in _ARITY:
            raise ValueError(f"unknown family {self.family!r}")
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if len(params) != _ARITY[self.family]:
            raise ValueError(f"{self.family} takes {_ARITY[self.family]} parameter(s), got {len(params)}")
        if not all(math.isfinite(p) for p in params):
            raise ValueError(f"non-finite parameters for {self.family}: {params}")
        ok = {
            "exponential": lambda r: r > 0,
            "gaussian": lambda m, s: s > 0,
            "gamma": lambda k, th: k > 0 and th > 0,
            "beta": lambda a, b: a > 0 and b > 0,
            "uniform": lambda lo, hi: lo < hi,
        }[self.family](*params)
        if not ok:
            raise ValueError(f"invalid parameters for {self.family}: {params}")

    def __str__(self):
        return f"{self.family}({', '.join(f'{p:g}' for p in self.params)})"

    @property
    def frozen(self):
        f, p = self.family, self.params
        if f == "exponential":
            return stats.expon(scale=1.0 / p[0])
        if f == "gaussian":
            return stats.norm(loc=p[0], scale=p[1])
        if f == "gamma":
            return stats.gamma(p[0], scale=p[1])
        if f == "beta":
            return stats.beta(p[0], p[1])
        return stats.uniform(loc=p[0], scale=p[1] - p[0])

    def mean(self) -> float:
        return float(self.frozen.mean())

    def var(self) -> float:
        return float(self.frozen.var())

    def ppf(self, u):
        """Inverse CDF, vectorised over ``u`` in (0, 1)."""
        u = np.asarray(u, dtype=float)
        f, p = self.family, self.params
        if f == "exponential":
            return -np.log1p(-u) / p[0]
        if f == "gaussian":
            return p[0] + p[1] * special.ndtri(u)
        if f == "uniform":
            return p[0] + (p[1] - p[0]) * u
        if f == "gamma":
            return p[1] * special.gammaincinv(p[0], u)
        return special.betaincinv(p[0], p[1], u)


def sample(dist: DistributionSpec, rng: np.random.Generator, size=None):
    """Draw from ``dist`` by inversion of an open-interval uniform."""
    u = rng.random(size)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return dist.ppf(u)


def logpdf(dist: DistributionSpec, x):
    """Log density, ``-inf`` off the support.

    Boundary points take the limiting density: the gamma and beta
    densities are 0 at 0 when their shape exceeds 1, the exponential density
    at 0 is its rate, and uniform endpoints are inside the support.
    """
    x = np.asarray(x, dtype=float)
    f, p = dist.family, dist.params
    with np.errstate(divide="ignore", invalid="ignore"):
        if f == "exponential":
            out = np.where(x >= 0, math.log(p[0]) - p[0] * x, -np.inf)
        elif f == "gaussian":
            z = (x - p[0]) / p[1]
            out = -0.5 * z * z - math.log(p[1]) - 0.5 * math.log(2 * math.pi)
        elif f == "uniform":
            out = np.where((x >= p[0]) & (x <= p[1]), -math.log(p[1] - p[0]), -np.inf)
        elif f == "gamma":
            k, th = p
            body = (k - 1) * np.log(x) - x / th - special.gammaln(k) - k * math.log(th)
            out = np.where(x > 0, body, -np.inf)
            if k == 1:
                out = np.where(x == 0, -math.log(th), out)
            elif k < 1:
                out = np.where(x == 0, np.inf, out)
        else:
            a, b = p
            body = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - special.betaln(a, b)
            out = np.where((x > 0) & (x < 1), body, -np.inf)
    out = np.where(np.isnan(x), -np.inf, out)
    return out[()] if out.ndim == 0 else out


@dataclass
class PriorRegistry:
    """Ordered, fully factorised prior; the order defines the theta layout."""

    model: str
    forced: bool
    entries: list = field(default_factory=list)  # [(name, DistributionSpec)]

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in registry: {names}")

    @property
    def names(self) -> list:
        return [n for n, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name) -> DistributionSpec:
        for n, d in self.entries:
            if n == name:
                return d
        raise KeyError(name)

    def index(self, name) -> int:
        return self.names.index(name)

    def sample_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms of shape (n, p) onto prior draws of the same shape."""
        u = np.atleast_2d(u)
        return np.column_stack([d.ppf(u[:, j]) for j, (_, d) in enumerate(self.entries)])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([sample(d, rng, n) for _, d in self.entries])

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        """Joint prior log density for rows of ``theta``."""
        theta = np.atleast_2d(theta)
        total = np.zeros(theta.shape[0])
        for j, (_, d) in enumerate(self.entries):
            total = total + logpdf(d, theta[:, j])
        return total

    def with_overrides(self, overrides: dict) -> "PriorRegistry":
        """Replace families/parameters, e.g. ``{"q": ("gamma", (7, 0.33))}``."""
        unknown = set(overrides) - set(self.names)
        if unknown:
            raise KeyError(f"cannot override unknown parameter(s): {sorted(unknown)}")
        entries = []
        for name, dist in self.entries:
            if name in overrides:
                spec = overrides[name]
                if not isinstance(spec, DistributionSpec):
                    family, params = spec
                    spec = DistributionSpec(family, tuple(params))
                dist = spec
            entries.append((name, dist))
        return PriorRegistry(self.model, self.forced, entries)

    def describe(self) -> list:
        return [{"name": n, "family": d.family, "params": list(d.params)} for n, d in self.entries]


def _exp_mean(mean):
    return DistributionSpec("exponential", (1.0 / mean,))


def _norm(sd):
    return DistributionSpec("gaussian", (0.0, sd))


def _gamma(k, th):
    return DistributionSpec("gamma", (k, th))


def _unif(lo, hi):
    return DistributionSpec("uniform", (lo, hi))


def _forcing_entries(mean):
    return [
        ("gamma_p", _exp_mean(mean)),
        ("gamma_c", _norm(mean)),
        ("gamma_e", _exp_mean(mean)),
    ]


def _obs_entries(s_lo, s_hi):
    return [
        ("D", _unif(2.5, 4.5)),
        ("S", _unif(s_lo, s_hi)),
        ("sigma_y", _exp_mean(0.1)),
    ]


def prior_registry(model: str, forced: bool = True) -> PriorRegistry:
    """Table of priors for ``sm91``, ``t06`` and ``pp12``.

    Unforced variants drop the forcing coefficients, which are then pinned
    to zero by the model. PP12 exists only in its forced form.
    """
    name = model.lower()
    if name == "sm91":
        dyn = [
            ("p", _gamma(2, 1.2)),
            ("q", _gamma(7, 3)),
            ("r", _gamma(2, 1.2)),
            ("s", _gamma(2, 1.2)),
            ("v", _exp_mean(0.3)),
            ("sigma1", _exp_mean(0.3)),
            ("sigma2", _exp_mean(0.3)),
            ("sigma3", _exp_mean(0.3)),
        ]
        entries = (_forcing_entries(0.3) if forced else []) + dyn + _obs_entries(0.25, 1.25)
    elif name == "t06":
        dyn = [
            ("p0", _exp_mean(0.3)),
            ("K", _exp_mean(0.1)),
            ("s", _exp_mean(0.3)),
            ("alpha", DistributionSpec("beta", (40, 30))),
            ("t_lower", _exp_mean(3)),
            ("t_upper", _gamma(90, 0.5)),
            ("sigma1", _exp_mean(2)),
        ]
        entries = (_forcing_entries(0.6) if forced else []) + dyn + _obs_entries(0.02, 0.05)
    elif name == "pp12":
        if not forced:
            raise ValueError("pp12 has no unforced variant")
        dyn = [
            ("trunc_a", _gamma(8, 0.1)),
            ("a_d", _exp_mean(1.0)),
            ("a_g", _exp_mean(1.0)),
            ("kappa_p", _exp_mean(20)),
            ("kappa_c", _norm(20)),
            ("kappa_e", _exp_mean(20)),
            ("tau_relax", _exp_mean(10)),
            ("v_upper", _gamma(220, 0.5)),  # printed as v0
            ("v_lower", _exp_mean(5)),  # printed as v1
            ("sigma1", _exp_mean(5)),
        ]
        entries = _forcing_entries(1.5) + dyn + _obs_entries(0.01, 0.03)
    else:
        raise ValueError(f"unknown model {model!r} (expected sm91, t06 or pp12)")
    return PriorRegistry(name, bool(forced), entries)


# Printed prior names that differ from the parameter names used here.
PRINTED_ALIASES = {
    "t06": {"x_l": "t_lower", "x_u": "t_upper"},
    "pp12": {"a": "trunc_a", "tau": "tau_relax", "v_0": "v_upper", "v_1": "v_lower"},
    "all": {"S": "S (observation scale C)"},
}
