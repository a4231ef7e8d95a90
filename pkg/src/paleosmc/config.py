"""Run configuration: a flat key/value view shared by config files and ``--set``.

Keys mirror :class:`RunConfig` attributes. Nested tables in a config file
are flattened with dots, so ``{"prior": {"q": "gamma(7, 0.33)"}}`` and
``prior.q = gamma(7, 0.33)`` are the same setting.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .distributions import CONVENTIONS, DistributionSpec
from .models import ConfigurationError
from .simulate import DEFAULT_MAX_DT
from .smc2 import SMC2Config

__all__ = ["RunConfig", "load_config_file", "parse_set", "parse_prior", "resolve_threads", "flatten"]

THREADS_ENV = "PALEO_THREADS"


@dataclass
class RunConfig:
    """Everything needed to reproduce a run."""

    model: str = "sm91"
    forced: bool = True
    n_theta: int = 1000
    n_x: int = 1000
    substeps: int | None = None
    max_dt: float = DEFAULT_MAX_DT
    seed: int = 0
    proposal: str = "guided"
    resampling: str = "stratified"
    ess_fraction: float = 0.5
    chain_length: int = 10
    nx_threshold: float = 0.15
    nx_cap: int = 2 ** 14
    adapt_nx: bool = True
    prior: dict = field(default_factory=dict)  # name -> "family(p1, p2)"
    init_mean: float | None = None
    init_sd: float | None = None
    swap_switches: bool = False
    orbital: str | None = None  # path, or "builtin" for the approximate table
    dataset: str | None = None
    output: str = "run"
    # simulation
    preset: str | None = None
    theta: dict = field(default_factory=dict)  # generating values
    start_kyr: float = 780.0
    end_kyr: float = 0.0
    spacing_kyr: float = 3.0
    # post-processing and hindcasts
    run: str | None = None
    draws: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_theta < 1 or self.n_x < 1:
            raise ConfigurationError("n_theta and n_x must be positive")
        if self.substeps is not None and self.substeps < 1:
            raise ConfigurationError("substeps must be positive")
        if not 0 < self.ess_fraction <= 1:
            raise ConfigurationError("ess_fraction must be in (0, 1]")
        if self.chain_length < 0:
            raise ConfigurationError("chain_length must be >= 0")
        if self.nx_cap < self.n_x:
            raise ConfigurationError("nx_cap must be >= n_x")
        if self.proposal not in ("guided", "blind"):
            raise ConfigurationError("proposal must be 'guided' or 'blind'")
        if self.resampling not in ("stratified", "multinomial"):
            raise ConfigurationError("resampling must be 'stratified' or 'multinomial'")
        if self.spacing_kyr <= 0:
            raise ConfigurationError("spacing_kyr must be positive")
        for name, spec in self.prior.items():
            parse_prior(spec, name)

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs: dict = {}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if head not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            if rest:
                if head not in ("prior", "theta"):
                    raise ConfigurationError(f"key {key!r} has no sub-keys")
                kwargs.setdefault(head, {})[rest] = value
            elif head in ("prior", "theta"):
                if not isinstance(value, dict):
                    raise ConfigurationError(f"{head} must be a table")
                kwargs.setdefault(head, {}).update(value)
            else:
                kwargs[head] = _coerce(known[head], value, key)
        return cls(**kwargs)

    def flat(self) -> dict:
        return flatten(asdict(self))

    def smc2_config(self, threads: int = 1) -> SMC2Config:
        return SMC2Config(
            n_theta=self.n_theta, n_x=self.n_x, proposal=self.proposal, resampling=self.resampling,
            ess_fraction=self.ess_fraction, chain_length=self.chain_length,
            nx_threshold=self.nx_threshold, nx_cap=self.nx_cap, adapt_nx=self.adapt_nx,
            substeps=self.substeps, max_dt=self.max_dt, seed=self.seed, threads=threads,
        )

    def prior_overrides(self) -> dict:
        return {name: parse_prior(spec, name) for name, spec in self.prior.items()}

    def model_options(self) -> dict:
        opts = {}
        if self.init_mean is not None:
            opts["init_mean"] = self.init_mean
        if self.init_sd is not None:
            opts["init_sd"] = self.init_sd
        if self.model.lower() == "pp12":
            opts["swap_switches"] = self.swap_switches
        return opts

    def describe(self) -> dict:
        d = asdict(self)
        d["prior_conventions"] = CONVENTIONS
        return d


def _coerce(f, value, key):
    if value is None:
        return None
    kind = str(f.type)
    try:
        if kind.startswith("bool"):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
        if kind.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad value {value!r} for {key!r} (expected {kind})") from None
    return value


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


_PRIOR_RE = re.compile(r"^\s*([a-z]+)\s*\(([^)]*)\)\s*$")


def parse_prior(spec, name: str = "") -> DistributionSpec:
    """Parse ``"gamma(7, 0.33)"`` (or ``["gamma", [7, 0.33]]``) into a distribution."""
    if isinstance(spec, DistributionSpec):
        return spec
    try:
        if isinstance(spec, str):
            m = _PRIOR_RE.match(spec)
            if not m:
                raise ValueError(spec)
            family = m.group(1)
            params = tuple(float(p) for p in m.group(2).split(",") if p.strip())
        else:
            family, params = spec[0], tuple(float(p) for p in spec[1])
        return DistributionSpec(family, params)
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigurationError(f"bad prior for {name!r}: {spec!r} ({exc})") from None


def load_config_file(path) -> dict:
    """Read a JSON or YAML config file into flat keys."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return flatten(data)


def parse_set(items) -> dict:
    """``["key=value", ...]`` to a flat dict; values are parsed as YAML scalars."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key = key.strip()
        if key.startswith("prior."):
            out[key] = value.strip()
        else:
            try:
                out[key] = yaml.safe_load(value) if value.strip() else None
            except yaml.YAMLError:
                out[key] = value
    return out


def resolve_threads(flag: int | None) -> int:
    """``--threads`` value, else ``$PALEO_THREADS``, else 1."""
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV, "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigurationError("thread count must be >= 1")
    return n
