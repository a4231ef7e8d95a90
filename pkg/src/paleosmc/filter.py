"""Particle filtering with blind (Euler) and guided (bridge) proposals.

The engine is batched: a :class:`ParticleSystem` holds ``B`` independent
filters of ``N`` particles each, one per parameter row, so that the outer
SMC loop advances its whole population with array operations. A single
filter is simply ``B = 1``.

Randomness for row ``b`` at observation ``m`` comes from its own
keyed stream, so results do not depend on how rows are grouped or on
the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import logsumexp

from .data import ProxyDataset, fmt
from .models import Model, ModelState, ObsParams
from .simulate import DEFAULT_MAX_DT, euler_moments, substeps_for
from .streams import stream

__all__ = [
    "ess",
    "ess_from_log",
    "resample",
    "resample_from_uniforms",
    "GuidedStepPlan",
    "guided_moments",
    "guided_plan",
    "guided_step",
    "guided_substep",
    "blind_substep",
    "ParticleSystem",
    "ParticleFilter",
    "FilterCollapse",
    "pf_assimilate",
    "pf_loglik",
    "write_diagnostics",
]

LOG_2PI = math.log(2.0 * math.pi)
SCHEMES = ("stratified", "multinomial")
PROPOSALS = ("guided", "blind")
BLOCK_ELEMENTS = 1 << 14  # particles per work block; fixed so blocking never depends on threads
PSD_TOL = 1e-10


class FilterCollapse(RuntimeError):
    """All particle weights vanished."""


# -- weights and resampling -----------------------------------------------------

def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights are zero")
    return w / total


def ess(weights) -> float:
    """Effective sample size ``1 / sum(w^2)`` of normalised weights."""
    w = _check_weights(weights)
    return float(1.0 / np.dot(w, w))


def ess_from_log(logw, axis=-1):
    """ESS from unnormalised log weights; rows with no mass give 0."""
    logw = np.asarray(logw, dtype=float)
    with np.errstate(invalid="ignore"):
        top = np.max(logw, axis=axis, keepdims=True)
        w = np.exp(logw - np.where(np.isfinite(top), top, 0.0))
        s1 = w.sum(axis=axis)
        s2 = (w * w).sum(axis=axis)
        out = np.where(s2 > 0, s1 * s1 / np.where(s2 > 0, s2, 1.0), 0.0)
    return out


def resample_from_uniforms(weights, u, scheme: str = "stratified") -> np.ndarray:
    """Ancestor indices for given uniforms (one per output index).

    ``stratified`` places the k-th uniform in ``[k/N, (k+1)/N)``;
    ``multinomial`` uses the uniforms as they are.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    w = _check_weights(weights)
    u = np.asarray(u, dtype=float)
    n = u.size
    if scheme == "stratified":
        u = (np.arange(n) + u) / n
    cum = np.cumsum(w)
    cum /= cum[-1]
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, w.size - 1)


def resample(weights, scheme: str = "stratified", rng: np.random.Generator | None = None,
             n: int | None = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    n = len(weights) if n is None else int(n)
    return resample_from_uniforms(weights, rng.random(n), scheme)


# -- guided bridge proposal -----------------------------------------------------

@dataclass(frozen=True)
class GuidedStepPlan:
    """Moments of the bridge proposal for one Euler sub-step.

    ``sigma`` is the diagonal of the diffusion covariance per unit time;
    ``A`` the innovation variance of the next observation, ``B`` its
    cross-covariance with the sub-step state.
    """

    mu: np.ndarray
    sigma: np.ndarray
    dt: float
    dt_rem: float
    A: float
    B: np.ndarray
    M: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("innovation variance must be positive")
        if self.dt_rem < self.dt * (1 - 1e-12):
            raise ValueError("remaining time must be at least one sub-step")

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.S + self.S.T)).min())


def guided_moments(x, mu, sigma, h, d_offset, sigma_y, y, dt, dt_rem):
    """Proposal mean and covariance for a single particle.

    ``sigma`` is the diagonal diffusion covariance per unit time and ``h``
    the observation row (the observation is ``h.x + D + sigma_y * noise``).
    Returns ``(M, S, A, B)``.
    """
    x, mu, sigma, h = (np.asarray(a, dtype=float) for a in (x, mu, sigma, h))
    lam = sigma * dt
    A = float(np.dot(h * h, sigma) * dt_rem + sigma_y ** 2)
    B = h * lam
    innov = y - np.dot(h, x + mu * dt_rem) - d_offset
    M = x + mu * dt + B * innov / A
    S = np.diag(lam) - np.outer(B, B) / A
    return M, S, A, B


def guided_plan(x, y_next, theta, model: Model, dt, dt_rem, t, regime=0) -> GuidedStepPlan:
    """Build the bridge-proposal moments for ``model`` at one particle."""
    params, obs = model.unpack(theta)
    _check_sigma_y(obs)
    x = np.asarray(x, dtype=float)
    mu = model.drift(x, np.int8(regime), t, params)
    sigma = np.broadcast_to(model.variance_rate(params), x.shape).astype(float)
    h = obs.c_scale * model.observation_row(obs)
    M, S, A, B = guided_moments(x, mu, sigma, h, obs.d_offset, obs.sigma_y, y_next, dt, dt_rem)
    plan = GuidedStepPlan(mu, sigma, float(dt), float(dt_rem), A, B, M, S)
    if plan.min_eigenvalue < -PSD_TOL:
        raise ValueError(f"proposal covariance not PSD (min eigenvalue {plan.min_eigenvalue:.3g})")
    return plan


def _check_sigma_y(obs: ObsParams):
    if not np.all(np.asarray(obs.sigma_y) > 0):
        raise ValueError("the guided proposal needs sigma_y > 0")


def guided_substep(x, mu, sigma, h, d_offset, sigma_y, y, dt, dt_rem, eps, eta):
    """Draw one bridge sub-step for a batch of particles.

    Shapes: ``x, mu, eps`` are ``(..., N, d)``, ``eta`` is ``(..., N)``;
    ``sigma`` and ``h`` broadcast as ``(..., 1, d)``, ``d_offset`` and
    ``sigma_y`` as ``(..., 1)``. Returns the new states and the log of
    transition density over proposal density.

    The draw uses the conditioning-by-kriging identity: an unconditional
    joint draw of (state, observation) is corrected by ``B/A`` times the
    gap to the observed value. The proposal density is evaluated with the
    Sherman-Morrison inverse of ``diag(lam) - B B^T / A``.
    """
    lam = sigma * dt
    hs = np.sum(h * h * sigma, axis=-1)
    A = hs * dt_rem + sigma_y * sigma_y
    rest = hs * (dt_rem - dt) + sigma_y * sigma_y  # A - h.lam.h, bounded below by sigma_y^2
    b = h * lam
    innov = y - np.sum(h * (x + mu * dt_rem), axis=-1) - d_offset
    z = np.sqrt(lam) * eps
    ydev = np.sum(h * z, axis=-1) + np.sqrt(rest) * eta
    r = z - b * (ydev / A)[..., None]  # deviation from the proposal mean
    shift = b * (innov / A)[..., None]
    x_new = x + mu * dt + shift + r
    pos = lam > 0
    inv = np.where(pos, 1.0 / np.where(pos, lam, 1.0), 0.0)
    hr = np.sum(h * r, axis=-1)
    dev = r + shift  # deviation from the Euler mean
    log_ratio = -0.5 * (np.sum((dev * dev - r * r) * inv, axis=-1) - hr * hr / rest - np.log(rest / A))
    return x_new, log_ratio


def blind_substep(x, mu, sigma, dt, eps):
    return x + mu * dt + np.sqrt(sigma * dt) * eps


@numba.njit(cache=True)
def _substep_kernel(x, mu, sigma, h, d_offset, sigma_y, y, dt, dt_rem, noise, logw, guided):
    """Compiled in-place form of :func:`guided_substep` / :func:`blind_substep`.

    ``x, mu`` are (B, N, d), ``sigma, h`` (B, d), ``d_offset, sigma_y`` (B,),
    ``noise`` (B, N, d+1) (d columns suffice when blind), ``logw`` (B, N). Particles that leave the finite
    range are parked at 0 with weight ``-inf``.
    """
    B, N, d = x.shape
    lam = np.empty(d)
    b = np.empty(d)
    r = np.empty(d)
    for i in range(B):
        hs = 0.0
        for k in range(d):
            lam[k] = sigma[i, k] * dt
            hs += h[i, k] * h[i, k] * sigma[i, k]
            b[k] = h[i, k] * lam[k]
        s2 = sigma_y[i] * sigma_y[i]
        A = hs * dt_rem + s2
        rest = hs * (dt_rem - dt) + s2
        log_det = np.log(rest / A)
        sq_rest = np.sqrt(rest)
        for n in range(N):
            if guided:
                innov = y - d_offset[i]
                ydev = sq_rest * noise[i, n, d]
                for k in range(d):
                    z = np.sqrt(lam[k]) * noise[i, n, k]
                    r[k] = z
                    innov -= h[i, k] * (x[i, n, k] + mu[i, n, k] * dt_rem)
                    ydev += h[i, k] * z
                hr = 0.0
                quad = 0.0
                ok = True
                for k in range(d):
                    r[k] -= b[k] * ydev / A
                    hr += h[i, k] * r[k]
                    shift = b[k] * innov / A
                    dev = r[k] + shift
                    if lam[k] > 0:
                        quad += (dev * dev - r[k] * r[k]) / lam[k]
                    v = x[i, n, k] + mu[i, n, k] * dt + shift + r[k]
                    if not np.isfinite(v):
                        ok = False
                    x[i, n, k] = v
                lr = -0.5 * (quad - hr * hr / rest - log_det)
                if ok and np.isfinite(lr):
                    logw[i, n] += lr
                else:
                    logw[i, n] = -np.inf
            else:
                ok = True
                for k in range(d):
                    v = x[i, n, k] + mu[i, n, k] * dt + np.sqrt(lam[k]) * noise[i, n, k]
                    if not np.isfinite(v):
                        ok = False
                    x[i, n, k] = v
                if not ok:
                    logw[i, n] = -np.inf
            if not ok:
                for k in range(d):
                    x[i, n, k] = 0.0


@numba.njit(cache=True)
def _resample_rows(logw, u, stratified):
    """Row-wise :func:`resample_from_uniforms`; rows without mass keep their particles."""
    B, N = logw.shape
    anc = np.empty((B, N), dtype=np.int64)
    cum = np.empty(N)
    for i in range(B):
        top = -np.inf
        for n in range(N):
            if logw[i, n] > top:
                top = logw[i, n]
        if not np.isfinite(top):
            for n in range(N):
                anc[i, n] = n
            continue
        total = 0.0
        for n in range(N):
            total += np.exp(logw[i, n] - top)
            cum[n] = total
        for n in range(N):
            cum[n] /= total
        j = 0
        for k in range(N):
            v = (k + u[i, k]) / N if stratified else u[i, k]
            if not stratified:
                j = 0
                lo, hi = 0, N
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cum[mid] <= v:
                        lo = mid + 1
                    else:
                        hi = mid
                j = lo
            else:
                while j < N and cum[j] <= v:
                    j += 1
            anc[i, k] = min(j, N - 1)
    return anc


def _rows(value, nb, d=None):
    """Broadcast a per-row parameter to (nb,) or (nb, d) contiguous floats."""
    a = np.asarray(value, dtype=float)
    if d is None:
        return np.ascontiguousarray(np.broadcast_to(a.reshape(-1) if a.ndim > 1 else a, (nb,)))
    if a.ndim == 3:
        a = a[:, 0, :]
    return np.ascontiguousarray(np.broadcast_to(a, (nb, d)))


def guided_step(x: ModelState, y_next: float, theta, obs: ObsParams | None, dt: float, dt_rem: float,
                model: Model, rng: np.random.Generator, t: float = 0.0):
    """One guided sub-step for a single particle.

    Returns ``(new_state, log_q)`` where ``log_q`` is the proposal log
    density of the drawn continuous state (over components with positive
    diffusion).
    """
    if dt <= 0 or dt > dt_rem * (1 + 1e-12):
        raise ValueError("need 0 < dt <= dt_rem")
    params, obs_theta = model.unpack(theta)
    obs = obs if obs is not None else obs_theta
    _check_sigma_y(obs)
    xs = np.asarray(x.x, dtype=float)
    d = xs.size
    mu = model.drift(xs, np.int8(x.regime), t, params)
    sigma = np.broadcast_to(model.variance_rate(params), xs.shape).astype(float)
    h = obs.c_scale * model.observation_row(obs)
    noise = rng.standard_normal(d + 1)
    x_new, _ = guided_substep(xs[None], mu[None], sigma, h, obs.d_offset, obs.sigma_y, y_next, dt,
                              dt_rem, noise[None, :d], noise[None, d])
    x_new = x_new[0]
    M, S, A, B = guided_moments(xs, mu, sigma, h, obs.d_offset, obs.sigma_y, y_next, dt, dt_rem)
    pos = sigma * dt > 0
    Sp = S[np.ix_(pos, pos)]
    if Sp.size and np.linalg.eigvalsh(Sp).min() < -PSD_TOL:
        raise ValueError("proposal covariance not PSD")
    r = (x_new - M)[pos]
    if r.size:
        sign, logdet = np.linalg.slogdet(Sp)
        quad = float(r @ np.linalg.solve(Sp, r))
        log_q = -0.5 * (r.size * LOG_2PI + logdet + quad)
    else:
        log_q = 0.0
    regime = int(model.update_regime(x_new, np.int8(x.regime), t - dt, params))
    return ModelState(x_new, regime), float(log_q)


# -- particle system ------------------------------------------------------------

@dataclass
class ParticleSystem:
    """State of ``B`` independent filters with ``N`` particles each.

    ``logw`` holds the unnormalised log weights of the last assimilation;
    ``increments`` one ``(B,)`` array per assimilated observation.
    """

    theta: np.ndarray  # (B, p)
    x: np.ndarray  # (B, N, d)
    regime: np.ndarray  # (B, N) int8
    logw: np.ndarray  # (B, N)
    row_ids: np.ndarray  # (B,) stream identities
    increments: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    ancestors: np.ndarray | None = None
    n_obs: int = 0
    age: float | None = None
    history: list | None = None  # [(x, regime, ancestors, logw)] per observation

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_particles(self) -> int:
        return self.x.shape[1]

    @property
    def cum_loglik(self) -> np.ndarray:
        if not self.increments:
            return np.zeros(self.n_rows)
        total = np.zeros(self.n_rows)
        for inc in self.increments:
            total = total + inc
        return total

    @property
    def increment_matrix(self) -> np.ndarray:
        """Increments as ``(B, M)``."""
        if not self.increments:
            return np.zeros((self.n_rows, 0))
        return np.stack(self.increments, axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Normalised weights; uniform for rows that have collapsed or not started."""
        return _normalised_rows(self.logw)

    @property
    def collapsed(self) -> np.ndarray:
        return ~np.isfinite(self.cum_loglik)

    def take(self, rows) -> "ParticleSystem":
        """Copy of the filters in ``rows`` (used for ancestor copies)."""
        rows = np.asarray(rows)
        hist = None
        if self.history is not None:
            hist = [(hx[rows], hr[rows], None if ha is None else ha[rows], hw[rows])
                    for hx, hr, ha, hw in self.history]
        return ParticleSystem(
            theta=self.theta[rows].copy(), x=self.x[rows].copy(), regime=self.regime[rows].copy(),
            logw=self.logw[rows].copy(), row_ids=self.row_ids[rows].copy(),
            increments=[inc[rows].copy() for inc in self.increments],
            ess=[e[rows].copy() for e in self.ess],
            ancestors=None if self.ancestors is None else self.ancestors[rows].copy(),
            n_obs=self.n_obs, age=self.age, history=hist,
        )

    @staticmethod
    def concat(parts: list, row_ids=None) -> "ParticleSystem":
        first = parts[0]
        hist = None
        if first.history is not None:
            hist = []
            for k in range(len(first.history)):
                anc = [p.history[k][2] for p in parts]
                hist.append((np.concatenate([p.history[k][0] for p in parts]),
                             np.concatenate([p.history[k][1] for p in parts]),
                             None if anc[0] is None else np.concatenate(anc),
                             np.concatenate([p.history[k][3] for p in parts])))
        return ParticleSystem(
            theta=np.concatenate([p.theta for p in parts]),
            x=np.concatenate([p.x for p in parts]),
            regime=np.concatenate([p.regime for p in parts]),
            logw=np.concatenate([p.logw for p in parts]),
            row_ids=np.concatenate([p.row_ids for p in parts]) if row_ids is None else np.asarray(row_ids),
            increments=[np.concatenate([p.increments[k] for p in parts]) for k in range(len(first.increments))],
            ess=[np.concatenate([p.ess[k] for p in parts]) for k in range(len(first.ess))],
            ancestors=None if first.ancestors is None else np.concatenate([p.ancestors for p in parts]),
            n_obs=first.n_obs, age=first.age, history=hist,
        )

    def trajectories(self, row: int = 0, rng: np.random.Generator | None = None, n: int | None = None):
        """Trace ancestral lines back from final particles of one row.

        Returns ``(n, M, d)`` states at the observation ages. Needs
        ``keep_history``.
        """
        if self.history is None:
            raise ValueError("trajectories need a filter run with keep_history=True")
        M = len(self.history)
        N = self.n_particles
        if rng is None:
            idx = np.arange(N)
        else:
            idx = resample(self.weights[row], "multinomial", rng, n or N)
        out = np.empty((idx.size, M, self.x.shape[2]))
        for k in range(M - 1, -1, -1):
            hx, _, anc, _ = self.history[k]
            out[:, k] = hx[row, idx]
            if anc is not None and k > 0:
                idx = anc[row, idx]
        return out

    def filtering_moments(self, component: int = 0):
        """Weighted mean and variance of one state component at each observation.

        Returns two ``(B, M)`` arrays; needs ``keep_history``.
        """
        if self.history is None:
            raise ValueError("filtering moments need a filter run with keep_history=True")
        means, variances = [], []
        for hx, _, _, hw in self.history:
            w = _normalised_rows(hw)
            v = hx[:, :, component]
            mean = np.sum(w * v, axis=1)
            means.append(mean)
            variances.append(np.sum(w * (v - mean[:, None]) ** 2, axis=1))
        return np.stack(means, axis=1), np.stack(variances, axis=1)


def _normalised_rows(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw, axis=1, keepdims=True)
    ok = np.isfinite(top)
    w = np.exp(logw - np.where(ok, top, 0.0))
    s = w.sum(axis=1, keepdims=True)
    uniform = np.full_like(w, 1.0 / w.shape[1])
    return np.where(ok & (s > 0), w / np.where(s > 0, s, 1.0), uniform)


# -- filter ---------------------------------------------------------------------

def _logmeanexp_rows(logw: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = logsumexp(logw, axis=1) - math.log(logw.shape[1])
    return np.where(np.isnan(out), -np.inf, out)


class ParticleFilter:
    """Bootstrap or guided particle filter for a :class:`Model`.

    Parameters
    ----------
    model : Model
    n_particles : int
        Particles per filter.
    proposal : {"guided", "blind"}
    resampling : {"stratified", "multinomial"}
        Applied to the state particles before every observation after the
        first.
    substeps, max_dt : int or None, float
        Euler sub-steps per interval; by default ``ceil(interval / max_dt)``.
    seed : int
    purpose, counters
        Stream key prefix; each row additionally uses the observation index
        and its row id.
    threads : int
        Worker threads. Results are identical for any value.
    keep_history : bool
        Retain particles and ancestors at every observation (for hindcasts).
    """

    def __init__(self, model: Model, n_particles: int = 1000, proposal: str = "guided",
                 resampling: str = "stratified", substeps: int | None = None,
                 max_dt: float = DEFAULT_MAX_DT, seed: int = 0, purpose: str = "fwd",
                 counters: tuple = (), threads: int = 1, keep_history: bool = False):
        if int(n_particles) < 1:
            raise ValueError("n_particles must be >= 1")
        if proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")
        if resampling not in SCHEMES:
            raise ValueError(f"resampling must be one of {SCHEMES}")
        self.model = model
        self.n_particles = int(n_particles)
        self.proposal = proposal
        self.resampling = resampling
        self.substeps = substeps
        self.max_dt = float(max_dt)
        self.seed = int(seed)
        self.purpose = purpose
        self.counters = tuple(int(c) for c in counters)
        self.threads = max(1, int(threads))
        self.keep_history = bool(keep_history)

    # -- public -----------------------------------------------------------------

    def start(self, theta, row_ids=None) -> ParticleSystem:
        """Empty system for parameter rows ``theta`` (shape (B, p) or (p,))."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        B, N, d = theta.shape[0], self.n_particles, self.model.dim
        row_ids = np.arange(B) if row_ids is None else np.asarray(row_ids, dtype=np.int64)
        if row_ids.shape != (B,):
            raise ValueError("row_ids must have one entry per theta row")
        return ParticleSystem(
            theta=theta, x=np.zeros((B, N, d)), regime=np.zeros((B, N), dtype=np.int8),
            logw=np.zeros((B, N)), row_ids=row_ids,
            history=[] if self.keep_history else None,
        )

    def advance(self, system: ParticleSystem, dataset: ProxyDataset) -> ParticleSystem:
        """Assimilate the next observation of ``dataset`` (in place)."""
        m = system.n_obs
        if m >= len(dataset):
            raise ValueError("dataset exhausted")
        y = float(dataset.values[m])
        age = float(dataset.ages[m])
        if m == 0:
            J, age_from = 0, age
        else:
            age_from = float(dataset.ages[m - 1])
            if system.age is not None and abs(system.age - age_from) > 1e-9:
                raise ValueError("system age does not match the dataset")
            J = substeps_for(age_from - age, self.substeps, self.max_dt)
        B = system.n_rows
        rows_per_block = max(1, BLOCK_ELEMENTS // self.n_particles)
        blocks = [(s, min(B, s + rows_per_block)) for s in range(0, B, rows_per_block)]

        def work(block):
            s, e = block
            return self._advance_rows(system, s, e, m, y, age_from, age, J)

        if self.threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(work, blocks))
        else:
            results = [work(b) for b in blocks]
        x = np.concatenate([r[0] for r in results])
        regime = np.concatenate([r[1] for r in results])
        logw = np.concatenate([r[2] for r in results])
        anc = None if m == 0 else np.concatenate([r[3] for r in results])
        system.x, system.regime, system.logw, system.ancestors = x, regime, logw, anc
        system.increments.append(_logmeanexp_rows(logw))
        system.ess.append(ess_from_log(logw, axis=1))
        system.n_obs = m + 1
        system.age = age
        if system.history is not None:
            system.history.append((x.copy(), regime.copy(), anc, logw.copy()))
        return system

    def run(self, theta, dataset: ProxyDataset, upto: int | None = None, row_ids=None) -> ParticleSystem:
        """Filter the first ``upto`` observations (all by default)."""
        system = self.start(theta, row_ids)
        upto = len(dataset) if upto is None else int(upto)
        for _ in range(upto):
            self.advance(system, dataset)
        return system

    # -- engine -----------------------------------------------------------------

    def _noise(self, row_id: int, m: int, J: int, u_out, z_out):
        """Fill one row's uniforms (when resampling) and normals in place."""
        g = stream(self.seed, self.purpose, *self.counters, m, int(row_id))
        if u_out is not None:
            g.random(out=u_out)
        g.standard_normal(out=z_out)

    def _advance_rows(self, system: ParticleSystem, s: int, e: int, m: int, y: float,
                      age_from: float, age: float, J: int):
        model = self.model
        N, d = self.n_particles, model.dim
        theta = system.theta[s:e]
        params, obs = model.unpack(theta)
        guided = self.proposal == "guided"
        if guided:
            _check_sigma_y(obs)
        nb = e - s
        us = np.empty((nb, N)) if m > 0 else None
        noise = np.empty((nb, max(J, 1), N, d + guided))
        for i in range(nb):
            self._noise(system.row_ids[s + i], m, J, None if us is None else us[i], noise[i])
        h = _rows(np.asarray(obs.c_scale)[..., None] * model.observation_row(obs), nb, d)
        D = _rows(obs.d_offset, nb)
        sy = _rows(obs.sigma_y, nb)
        logw = np.zeros((nb, N))
        anc = None
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if m == 0:
                mean, sd = model.init_moments(params)
                x = np.ascontiguousarray(np.broadcast_to(np.asarray(mean, dtype=float), (nb, N, d)))
                var = _rows(np.asarray(sd, dtype=float) ** 2, nb, d)
                _substep_kernel(x, np.zeros_like(x), var, h, D, sy, y, 1.0, 1.0, noise[:, 0], logw, guided)
                regime = np.asarray(model.update_regime(x, np.zeros((nb, N), dtype=np.int8), age, params),
                                    dtype=np.int8)
            else:
                x = system.x[s:e]
                regime = system.regime[s:e]
                prev = system.logw[s:e]
                anc = _resample_rows(prev, us, self.resampling == "stratified")
                rows = np.arange(nb)[:, None]
                x = x[rows, anc]
                regime = regime[rows, anc]
                dead = ~np.isfinite(prev[rows, anc])
                logw = np.where(dead, -np.inf, 0.0)
                dt = (age_from - age) / J
                var = _rows(model.variance_rate(params), nb, d)
                x = np.ascontiguousarray(x)
                for j in range(J):
                    t = age_from - j * dt
                    mu = np.ascontiguousarray(np.broadcast_to(model.drift(x, regime, t, params), x.shape))
                    _substep_kernel(x, mu, var, h, D, sy, y, dt, (J - j) * dt, noise[:, j], logw, guided)
                    regime = np.asarray(model.update_regime(x, regime, t - dt, params), dtype=np.int8)
            logw = logw + model.obs_logpdf(y, x, obs)
            logw = np.where(np.isnan(logw), -np.inf, logw)
        return np.ascontiguousarray(x, dtype=float), regime, logw, anc


def pf_assimilate(system: ParticleSystem, dataset: ProxyDataset, pf: ParticleFilter) -> ParticleSystem:
    """Advance ``system`` by one observation of ``dataset``."""
    return pf.advance(system, dataset)


def pf_loglik(theta, model: Model, dataset: ProxyDataset, n_particles: int = 1000, proposal: str = "guided",
              resampling: str = "stratified", substeps: int | None = None, max_dt: float = DEFAULT_MAX_DT,
              seed: int = 0, purpose: str = "fwd", counters: tuple = (), threads: int = 1,
              keep_history: bool = False, raise_on_collapse: bool = False):
    """Log of the particle estimate of ``p(Y_{1:M} | theta)``.

    Returns ``(loglik, system)``; a collapsed filter yields ``-inf`` (or
    raises :class:`FilterCollapse` when asked to).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("pf_loglik takes a single parameter vector")
    pf = ParticleFilter(model, n_particles, proposal, resampling, substeps, max_dt, seed, purpose,
                        counters, threads, keep_history)
    system = pf.run(theta, dataset)
    ll = float(system.cum_loglik[0])
    if raise_on_collapse and not np.isfinite(ll):
        k = next(i for i, inc in enumerate(system.increments) if not np.isfinite(inc[0]))
        raise FilterCollapse(f"all particle weights vanished at observation {k} (age {dataset.ages[k]} kyr)")
    return ll, system


def write_diagnostics(path_or_stream, system: ParticleSystem, dataset: ProxyDataset, row: int = 0) -> None:
    """Per-observation ESS, increment and collapse flag as comma-separated text."""
    lines = ["index,age_kyr,ess,increment,collapsed"]
    for k, (inc, e) in enumerate(zip(system.increments, system.ess)):
        lines.append(f"{k},{fmt(dataset.ages[k])},{fmt(e[row])},{fmt(inc[row])},{int(not np.isfinite(inc[row]))}")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_stream, "write"):
        path_or_stream.write(text)
    else:
        with open(path_or_stream, "w") as fh:
            fh.write(text)
