"""Euler-Maruyama integration of the hybrid SDE models and synthetic records.

Integration runs forward in physical time, i.e. from the oldest age toward
the present; a step of length ``dt`` takes age ``t`` to ``t - dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ProxyDataset
from .models import Model, ModelState, ObsParams

__all__ = [
    "IntegrationGrid",
    "Trajectory",
    "SimulationError",
    "substeps_for",
    "euler_moments",
    "euler_step",
    "simulate_trajectory",
    "generate_synthetic",
    "PRESETS",
]

DEFAULT_MAX_DT = 0.5  # kyr

# Parameter values of the simulation study (SM91, forced and unforced data).
PRESETS = {
    "sm91-f": {
        "model": "sm91", "forced": True,
        "theta": {
            "gamma_p": 0.3, "gamma_c": 0.1, "gamma_e": 0.4,
            "p": 0.8, "q": 1.6, "r": 0.6, "s": 1.4, "v": 0.3,
            "sigma1": 0.2, "sigma2": 0.3, "sigma3": 0.3,
            "D": 3.8, "S": 0.8, "sigma_y": 0.1,
        },
    },
    "sm91-u": {
        "model": "sm91", "forced": False,
        "theta": {
            "p": 0.8, "q": 1.6, "r": 0.6, "s": 1.4, "v": 0.3,
            "sigma1": 0.2, "sigma2": 0.3, "sigma3": 0.3,
            "D": 3.8, "S": 0.8, "sigma_y": 0.1,
        },
    },
}


class SimulationError(RuntimeError):
    pass


def substeps_for(interval: float, substeps: int | None = None, max_dt: float = DEFAULT_MAX_DT) -> int:
    """Number of Euler sub-steps for an observation interval."""
    if substeps is not None:
        if int(substeps) < 1:
            raise ValueError("substeps must be >= 1")
        return int(substeps)
    return max(1, int(math.ceil(interval / max_dt - 1e-9)))


@dataclass(frozen=True)
class IntegrationGrid:
    """Observation ages (strictly decreasing) and the sub-step policy."""

    obs_ages: np.ndarray
    substeps: int | None = None
    max_dt: float = DEFAULT_MAX_DT

    def __post_init__(self):
        ages = np.asarray(self.obs_ages, dtype=float)
        object.__setattr__(self, "obs_ages", ages)
        if ages.ndim != 1 or ages.size < 1:
            raise ValueError("need at least one observation age")
        if np.any(np.diff(ages) >= 0):
            raise ValueError("observation ages must be strictly decreasing")
        if self.substeps is not None and self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def intervals(self):
        """Yield ``(age_from, age_to, J)`` for each observation interval."""
        for a, b in zip(self.obs_ages[:-1], self.obs_ages[1:]):
            yield float(a), float(b), substeps_for(a - b, self.substeps, self.max_dt)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # ages, kyr
    x: np.ndarray  # (T, d)
    regime: np.ndarray  # (T,)

    def __post_init__(self):
        if not (len(self.times) == len(self.x) == len(self.regime)):
            raise ValueError("trajectory arrays must have equal lengths")

    @property
    def states(self) -> list:
        return [ModelState(x, int(r)) for x, r in zip(self.x, self.regime)]


def euler_moments(model: Model, x, regime, t, dt, params, var=None):
    """Mean and diagonal variance of one Euler-Maruyama transition.

    Returns ``(drift, mean, variance)``; the variance is the diagonal of the
    step covariance. Shared by the simulator and the particle filter.
    """
    mu = model.drift(x, regime, t, params)
    if var is None:
        var = model.variance_rate(params)
    return mu, x + mu * dt, np.broadcast_to(var * dt, mu.shape)


def euler_step(x, regime, t, dt, params, model: Model, rng: np.random.Generator | None = None,
               noise=None):
    """Advance ``(x, regime)`` from age ``t`` by ``dt`` kyr.

    ``noise`` may carry the standard-normal draws explicitly; otherwise they
    come from ``rng``, which is not touched when the diffusion vanishes.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    x = np.asarray(x, dtype=float)
    _, mean, var = euler_moments(model, x, regime, t, dt, params)
    if noise is None:
        if np.any(var > 0):
            noise = rng.standard_normal(mean.shape)
        else:
            noise = 0.0
    new = mean + np.sqrt(var) * noise
    if not np.all(np.isfinite(new)):
        raise SimulationError(f"non-finite state at age {t} kyr (params={params})")
    return new, model.update_regime(new, regime, t - dt, params)


def simulate_trajectory(theta, model: Model, grid: IntegrationGrid, init: ModelState | None = None,
                        rng: np.random.Generator | None = None, all_substeps: bool = False) -> Trajectory:
    """Integrate one path through the grid, recording states at observation ages."""
    rng = rng if rng is not None else np.random.default_rng()
    params, _ = model.unpack(theta)
    if init is None:
        init = initial_state(model, params, rng, float(grid.obs_ages[0]))
    x, regime = init.x.copy(), np.int8(init.regime)
    times, xs, regimes = [float(grid.obs_ages[0])], [x.copy()], [int(regime)]
    for age_from, age_to, J in grid.intervals():
        dt = (age_from - age_to) / J
        for j in range(J):
            t = age_from - j * dt
            x, regime = euler_step(x, regime, t, dt, params, model, rng)
            if all_substeps or j == J - 1:
                times.append(age_to if j == J - 1 else t - dt)
                xs.append(x.copy())
                regimes.append(int(regime))
    return Trajectory(np.array(times), np.array(xs), np.array(regimes, dtype=np.int8))


def initial_state(model: Model, params, rng: np.random.Generator, age: float) -> ModelState:
    mean, sd = model.init_moments(params)
    x = mean + sd * rng.standard_normal(model.dim)
    regime = int(model.update_regime(x, np.int8(0), age, params))
    return ModelState(x, regime)


def generate_synthetic(theta, model: Model, start_kyr: float, end_kyr: float, spacing_kyr: float,
                       rng: np.random.Generator, obs: ObsParams | None = None, substeps: int | None = None,
                       max_dt: float = DEFAULT_MAX_DT, init: ModelState | None = None):
    """Simulate a trajectory and noisy observations every ``spacing_kyr``.

    Returns ``(dataset, trajectory)``; the latent trajectory is kept for
    posterior-recovery checks.
    """
    if spacing_kyr <= 0:
        raise ValueError("spacing must be > 0")
    start, end = max(start_kyr, end_kyr), min(start_kyr, end_kyr)
    n = int(math.floor((start - end) / spacing_kyr + 1e-9)) + 1
    ages = start - spacing_kyr * np.arange(n)
    if obs is None:
        _, obs = model.unpack(theta)
    grid = IntegrationGrid(ages, substeps, max_dt)
    traj = simulate_trajectory(theta, model, grid, init, rng)
    mean = obs.d_offset + obs.c_scale * traj.x[:, 0]
    y = mean + obs.sigma_y * rng.standard_normal(n) if obs.sigma_y > 0 else mean.copy()
    label = f"synthetic {model.label}"
    return ProxyDataset(ages, y, label), traj
