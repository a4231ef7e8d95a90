"""Nested SMC over parameters with particle-MCMC rejuvenation.

An outer population of ``N_theta`` parameter particles each carries a
particle filter over the latent states. Weights are updated with the
filters' likelihood increments; when the outer ESS falls below a fraction of
``N_theta`` the population is resampled and moved with an independent
Gaussian particle-marginal Metropolis-Hastings kernel. The average of the
increments under the current weights estimates each evidence factor
``p(Y_m | Y_{1:m-1})``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .data import ProxyDataset, dumps_json, fmt
from .filter import ParticleFilter, ParticleSystem, resample_from_uniforms
from .models import Model
from .simulate import DEFAULT_MAX_DT
from .streams import stream

__all__ = [
    "SMC2Config",
    "EvidenceReport",
    "SMC2Result",
    "SMC2Collapse",
    "smc2_run",
    "pmmh_kernel",
    "adapt_nx",
    "proposal_moments",
    "log10_bayes_factor",
    "compare_reports",
    "weighted_quantile",
    "posterior_summary",
    "forcing_ratio_phase",
    "write_theta_csv",
    "read_theta_csv",
]

log = logging.getLogger(__name__)
LN10 = math.log(10.0)


@dataclass
class SMC2Config:
    """Tuning of the nested sampler; defaults follow the reference setup."""

    n_theta: int = 1000
    n_x: int = 1000
    proposal: str = "guided"
    resampling: str = "stratified"
    ess_fraction: float = 0.5
    chain_length: int = 10
    nx_threshold: float = 0.15
    nx_cap: int = 2 ** 14
    adapt_nx: bool = True
    substeps: int | None = None
    max_dt: float = DEFAULT_MAX_DT
    seed: int = 0
    threads: int = 1
    keep_history: bool = False
    jitter: float = 1e-8

    def __post_init__(self):
        if self.n_theta < 1 or self.n_x < 1:
            raise ValueError("particle counts must be positive")
        if not 0 < self.ess_fraction <= 1:
            raise ValueError("ess_fraction must be in (0, 1]")
        if self.chain_length < 0:
            raise ValueError("chain_length must be >= 0")
        if self.nx_cap < self.n_x:
            raise ValueError("nx_cap must be at least n_x")

    def filter(self, model: Model, n_x: int, purpose: str, counters=()) -> ParticleFilter:
        return ParticleFilter(model, n_x, self.proposal, self.resampling, self.substeps, self.max_dt,
                              self.seed, purpose, counters, self.threads, self.keep_history)


class SMC2Collapse(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class EvidenceReport:
    """Per-observation evidence increments and run diagnostics."""

    model: str
    dataset_hash: str
    increments: list
    diagnostics: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    @property
    def log_evidence(self) -> float:
        return math.fsum(self.increments)

    @property
    def log10_evidence(self) -> float:
        return self.log_evidence / LN10

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset_hash": self.dataset_hash,
            "n_observations": len(self.increments),
            "log_evidence": self.log_evidence,
            "log10_evidence": self.log10_evidence,
            "increments": [float(v) for v in self.increments],
            "settings": self.settings,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceReport":
        inc = [float(v) for v in d["increments"]]
        return cls(d["model"], d["dataset_hash"], inc, d.get("diagnostics", {}), d.get("settings", {}))

    @classmethod
    def read(cls, path) -> "EvidenceReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SMC2Result:
    report: EvidenceReport
    theta: np.ndarray  # (N_theta, p)
    logw: np.ndarray  # (N_theta,) unnormalised
    param_names: list
    system: ParticleSystem

    @property
    def weights(self) -> np.ndarray:
        return _normalise(self.logw)

    @property
    def log_evidence(self) -> float:
        return self.report.log_evidence


def _normalise(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    top = np.max(logw)
    if not np.isfinite(top):
        raise ValueError("no finite weights")
    w = np.exp(logw - top)
    return w / w.sum()


def _outer_ess(logw) -> float:
    w = _normalise(logw)
    return float(1.0 / np.dot(w, w))


def proposal_moments(theta, weights, jitter: float = 1e-8, max_tries: int = 60):
    """Weighted mean and a Cholesky-factorisable covariance of the population.

    Adds ``jitter * I``; if the matrix is still not positive definite the
    diagonal is inflated by 10% until the factorisation succeeds.
    """
    theta = np.atleast_2d(theta)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ theta
    dev = theta - mean
    cov = (dev * w[:, None]).T @ dev + jitter * np.eye(theta.shape[1])
    for _ in range(max_tries):
        try:
            chol = linalg.cholesky(cov, lower=True)
            return mean, cov, chol
        except linalg.LinAlgError:
            cov = cov.copy()
            cov[np.diag_indices_from(cov)] *= 1.1
    raise linalg.LinAlgError("proposal covariance could not be made positive definite")


def _gauss_logpdf(theta, mean, chol):
    z = linalg.solve_triangular(chol, (np.atleast_2d(theta) - mean).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + chol.shape[0] * math.log(2 * math.pi))


def _assign_rows(target: ParticleSystem, mask, source: ParticleSystem) -> ParticleSystem:
    """Replace the filters in rows ``mask`` by those of ``source``."""
    if not np.any(mask):
        return target
    if target.n_particles != source.n_particles:
        raise ValueError("cannot mix filters with different particle counts")
    target.theta = np.where(mask[:, None], source.theta, target.theta)
    target.x = np.where(mask[:, None, None], source.x, target.x)
    target.regime = np.where(mask[:, None], source.regime, target.regime)
    target.logw = np.where(mask[:, None], source.logw, target.logw)
    target.increments = [np.where(mask, a, b) for a, b in zip(source.increments, target.increments)]
    target.ess = [np.where(mask, a, b) for a, b in zip(source.ess, target.ess)]
    if target.ancestors is not None:
        target.ancestors = np.where(mask[:, None], source.ancestors, target.ancestors)
    if target.history is not None:
        target.history = [
            (np.where(mask[:, None, None], sx, tx), np.where(mask[:, None], sr, tr),
             None if ta is None else np.where(mask[:, None], sa, ta), np.where(mask[:, None], sw, tw))
            for (sx, sr, sa, sw), (tx, tr, ta, tw) in zip(source.history, target.history)
        ]
    return target


def pmmh_kernel(theta, system: ParticleSystem, dataset: ProxyDataset, model: Model, mean, cov,
                chain_length: int, config: SMC2Config, epoch: int = 0, n_x: int | None = None):
    """Independent-proposal PMMH moves for every row of ``theta``.

    Each of ``chain_length`` steps proposes ``theta* ~ N(mean, cov)``, runs a
    fresh filter on the observations already assimilated by ``system`` and
    accepts with the usual pseudo-marginal ratio. Proposals outside the prior
    support are rejected without affecting the filters of other rows.

    Returns ``(theta, system, accepts)`` with per-row acceptance counts.
    """
    theta = np.array(np.atleast_2d(theta), dtype=float)
    B = theta.shape[0]
    n_x = system.n_particles if n_x is None else n_x
    upto = system.n_obs
    registry = model.registry
    mean = np.asarray(mean, dtype=float)
    chol = linalg.cholesky(np.atleast_2d(np.asarray(cov, dtype=float)), lower=True)
    ll = system.cum_loglik.copy()
    lp = registry.logpdf(theta)
    lq = _gauss_logpdf(theta, mean, chol)
    accepts = np.zeros(B, dtype=np.int64)
    for step in range(chain_length):
        g = stream(config.seed, "pmmh-draw", epoch, step)
        prop = mean + g.standard_normal((B, theta.shape[1])) @ chol.T
        log_u = np.log(g.random(B))
        lp_new = registry.logpdf(prop)
        valid = np.isfinite(lp_new)
        runnable = np.where(valid[:, None], prop, theta)
        pf = config.filter(model, n_x, "pmmh", (epoch, step))
        fresh = pf.run(runnable, dataset, upto, row_ids=system.row_ids)
        ll_new = np.where(valid, fresh.cum_loglik, -np.inf)
        lq_new = _gauss_logpdf(prop, mean, chol)
        with np.errstate(invalid="ignore"):
            log_ratio = (ll_new + lp_new + lq) - (ll + lp + lq_new)
        accept = valid & np.isfinite(ll_new) & (log_u < np.where(np.isnan(log_ratio), -np.inf, log_ratio))
        theta = np.where(accept[:, None], prop, theta)
        ll = np.where(accept, ll_new, ll)
        lp = np.where(accept, lp_new, lp)
        lq = np.where(accept, lq_new, lq)
        system = _assign_rows(system, accept, fresh)
        accepts += accept
    return theta, system, accepts


def adapt_nx(system: ParticleSystem, logw, acceptance: float, dataset: ProxyDataset, model: Model,
             config: SMC2Config, epoch: int):
    """Double the number of state particles when acceptance is low.

    Every filter is re-run from scratch with twice as many particles and
    the parameter weights are multiplied by new/old likelihood estimates.
    Returns ``(system, logw, doubled)``.
    """
    n_x = system.n_particles
    if not config.adapt_nx or acceptance >= config.nx_threshold:
        return system, logw, False
    if 2 * n_x > config.nx_cap:
        log.warning("acceptance %.3f below threshold but N_x=%d already at cap %d", acceptance, n_x,
                    config.nx_cap)
        return system, logw, False
    pf = config.filter(model, 2 * n_x, "nx", (epoch,))
    fresh = pf.run(system.theta, dataset, system.n_obs, row_ids=system.row_ids)
    with np.errstate(invalid="ignore"):
        ratio = fresh.cum_loglik - system.cum_loglik
    ratio = np.where(np.isnan(ratio), -np.inf, ratio)
    return fresh, np.asarray(logw) + ratio, True


def smc2_run(model: Model, dataset: ProxyDataset, config: SMC2Config | None = None,
             progress=None) -> SMC2Result:
    """Run the nested sampler over ``dataset`` and estimate the evidence.

    Parameters
    ----------
    model : Model
    dataset : ProxyDataset
    config : SMC2Config
    progress : callable, optional
        Called as ``progress(m, info_dict)`` after each observation.

    Returns
    -------
    SMC2Result
        Evidence report, final weighted parameter sample and the attached
        filters (with trajectories if ``keep_history``).
    """
    config = config or SMC2Config()
    registry = model.registry
    n_theta = config.n_theta
    u = stream(config.seed, "prior").random((n_theta, len(registry)))
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    theta = registry.sample_from_uniforms(u)
    logw = np.zeros(n_theta)
    n_x = config.n_x
    system = config.filter(model, n_x, "fwd").start(theta)
    increments, ess_trace, epochs, acceptance, nx_history = [], [], [], [], [[0, n_x]]
    epoch = 0

    def report():
        return EvidenceReport(model.label, dataset.content_hash, list(increments), {
            "ess": ess_trace, "resample_at": epochs, "acceptance": acceptance, "n_x": nx_history,
        }, _settings(config, model))

    for m in range(len(dataset)):
        if m > 0 and _outer_ess(logw) < config.ess_fraction * n_theta:
            w = _normalise(logw)
            mean, cov, chol = proposal_moments(theta, w, config.jitter)
            epoch += 1
            anc = resample_from_uniforms(w, stream(config.seed, "outer", epoch).random(n_theta),
                                         config.resampling)
            theta = theta[anc]
            system = system.take(anc)
            system.row_ids = np.arange(n_theta)
            logw = np.zeros(n_theta)
            rate = float("nan")
            if config.chain_length > 0:
                theta, system, acc = pmmh_kernel(theta, system, dataset, model, mean, cov,
                                                 config.chain_length, config, epoch)
                rate = float(acc.sum()) / (n_theta * config.chain_length)
                system, logw, doubled = adapt_nx(system, logw, rate, dataset, model, config, epoch)
                if doubled:
                    n_x = system.n_particles
                    nx_history.append([m, n_x])
            epochs.append(m)
            acceptance.append(rate)
        pf = config.filter(model, n_x, "fwd")
        pf.advance(system, dataset)
        inc = system.increments[-1]
        prev = np.log(_normalise(logw))
        with np.errstate(invalid="ignore"):
            terms = prev + inc
        terms = np.where(np.isnan(terms), -np.inf, terms)
        top = np.max(terms)
        if not np.isfinite(top):
            increments.append(-math.inf)
            raise SMC2Collapse(f"all parameter particles have zero weight at observation {m}", report())
        increments.append(float(top + math.log(math.fsum(np.exp(terms - top)))))
        logw = np.where(np.isnan(logw + inc), -np.inf, logw + inc)
        ess_trace.append(_outer_ess(logw))
        if progress is not None:
            progress(m, {"log_evidence": math.fsum(increments), "ess": ess_trace[-1], "n_x": n_x,
                         "epochs": len(epochs)})
    return SMC2Result(report(), theta, logw, registry.names, system)


def _settings(config: SMC2Config, model: Model) -> dict:
    s = asdict(config)
    s.pop("threads")  # never affects results
    s["model"] = model.describe()
    s["priors"] = model.registry.describe()
    return s


def log10_bayes_factor(report_1: EvidenceReport, report_2: EvidenceReport) -> float:
    """``log10 B_12`` from two evidence reports on the same dataset."""
    if report_1.dataset_hash != report_2.dataset_hash:
        raise ValueError("evidence reports refer to different datasets")
    return (report_1.log_evidence - report_2.log_evidence) / LN10


def compare_reports(reports: list, labels: list | None = None) -> list:
    """Table of ``(label, log10 evidence, log10 BF vs best)``; the best row is 0."""
    if not reports:
        raise ValueError("nothing to compare")
    labels = labels or [r.model for r in reports]
    ref = reports[0].dataset_hash
    for lab, r in zip(labels, reports):
        if r.dataset_hash != ref:
            raise ValueError(f"report {lab!r} refers to a different dataset")
    best = max(range(len(reports)), key=lambda i: reports[i].log_evidence)
    return [(lab, r.log10_evidence, log10_bayes_factor(r, reports[best])) for lab, r in zip(labels, reports)]


# -- posterior summaries --------------------------------------------------------

def weighted_quantile(values, weights, q):
    """Smallest atom whose cumulative weight exceeds ``q``."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    v, cw = values[order], np.cumsum(w[order])
    cw = cw / cw[-1]
    idx = np.searchsorted(cw, np.asarray(q, dtype=float), side="right")
    return v[np.minimum(idx, v.size - 1)]


def forcing_ratio_phase(gamma_p, gamma_c, gamma_e):
    """Relative strength of precession to obliquity and the precession phase.

    Returns ``(ratio, phase, keep)``; draws with ``gamma_e == 0`` get a NaN
    ratio and ``keep = False``.
    """
    gp, gc, ge = (np.asarray(a, dtype=float) for a in (gamma_p, gamma_c, gamma_e))
    keep = ge != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(keep, np.hypot(gp, gc) / np.where(keep, ge, 1.0), np.nan)
    return ratio, np.arctan2(gc, gp), keep


def posterior_summary(theta, weights, names, model_name: str | None = None,
                      quantiles=(0.025, 0.25, 0.5, 0.75, 0.975)) -> dict:
    """Weighted marginal summaries plus the forcing ratio and phase.

    The derived quantities are produced only when the sample has the three
    forcing coefficients and the model is not ``pp12`` (whose truncated
    forcing makes the coefficients incomparable).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    w = np.asarray(weights, dtype=float)
    if theta.shape[0] == 0:
        raise ValueError("empty sample")
    w = w / w.sum()
    out = {"parameters": {}, "derived": {}}
    for j, name in enumerate(names):
        col = theta[:, j]
        mean = float(w @ col)
        qs = weighted_quantile(col, w, quantiles)
        out["parameters"][name] = {
            "mean": mean,
            "sd": float(math.sqrt(max(w @ (col - mean) ** 2, 0.0))),
            "quantiles": {f"{q:g}": float(v) for q, v in zip(quantiles, qs)},
        }
    has_forcing = all(n in names for n in ("gamma_p", "gamma_c", "gamma_e"))
    if has_forcing and (model_name or "").lower() != "pp12":
        gp, gc, ge = (theta[:, names.index(n)] for n in ("gamma_p", "gamma_c", "gamma_e"))
        ratio, phase, keep = forcing_ratio_phase(gp, gc, ge)
        wk = w[keep] / w[keep].sum() if keep.any() else w[keep]
        out["derived"]["ratio"] = {
            "values": ratio[keep], "weights": wk, "excluded_zero_obliquity": int((~keep).sum()),
        }
        out["derived"]["phase"] = {"values": phase, "weights": w}
        if keep.any():
            out["derived"]["ratio"]["median"] = float(weighted_quantile(ratio[keep], wk, 0.5))
        out["derived"]["phase"]["median"] = float(weighted_quantile(phase, w, 0.5))
    return out


def write_theta_csv(path, theta, weights, names) -> None:
    """Weighted sample, one row per particle; header follows the registry order."""
    with open(path, "w") as fh:
        fh.write(",".join(list(names) + ["weight"]) + "\n")
        for row, w in zip(np.atleast_2d(theta), weights):
            fh.write(",".join(fmt(v) for v in row) + "," + fmt(w) + "\n")


def read_theta_csv(path):
    """Inverse of :func:`write_theta_csv`: returns ``(theta, weights, names)``."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.startswith("#")]
    header = [h.strip() for h in lines[0].split(",")]
    data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]], dtype=float).reshape(-1, len(header))
    if header[-1] == "weight":
        return data[:, :-1], data[:, -1], header[:-1]
    return data, np.full(data.shape[0], 1.0 / max(data.shape[0], 1)), header
