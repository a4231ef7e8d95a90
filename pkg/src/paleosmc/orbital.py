"""Astronomical forcing: orbital tables, normalisation and the truncation operator.

Times are handled internally as nonnegative ages in kyr before present.
Tables whose time column is negative into the past are converted on load.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

__all__ = [
    "OrbitalError",
    "OrbitalSolution",
    "ForcingWeights",
    "load_orbital_table",
    "normalize_series",
    "orbital_at",
    "forcing",
    "truncate",
    "transformed_precession",
    "synthetic_orbital_table",
]

REQUIRED_COLUMNS = ("t_kyr", "esinw", "ecosw", "obliquity")

# Fixed affine constants applied after truncation of the precession terms (PP12).
PP12_SHIFT = 0.148
PP12_SCALE = 0.808


class OrbitalError(ValueError):
    """Raised for malformed orbital tables or out-of-range evaluations."""


@dataclass(frozen=True)
class ForcingWeights:
    """Coefficients of the linear combination of normalised astronomical series."""

    gamma_p: float = 0.0
    gamma_c: float = 0.0
    gamma_e: float = 0.0

    def __post_init__(self):
        for name in ("gamma_p", "gamma_c", "gamma_e"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")

    def __add__(self, other: "ForcingWeights") -> "ForcingWeights":
        return ForcingWeights(
            self.gamma_p + other.gamma_p,
            self.gamma_c + other.gamma_c,
            self.gamma_e + other.gamma_e,
        )


@dataclass(frozen=True)
class OrbitalSolution:
    """Tabulated orbital solution on an ascending age grid (kyr before present).

    ``precession``, ``coprecession`` and ``obliquity`` hold the normalised
    series; the raw inputs are kept in ``raw`` and the (mean, scale) used for
    each series in ``normalization``.
    """

    ages: np.ndarray
    precession: np.ndarray
    coprecession: np.ndarray
    obliquity: np.ndarray
    raw: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ages)
        if n < 2:
            raise OrbitalError("an orbital table needs at least two rows")
        for name in ("precession", "coprecession", "obliquity"):
            if len(getattr(self, name)) != n:
                raise OrbitalError(f"series {name!r} has length {len(getattr(self, name))}, expected {n}")
        if np.any(np.diff(self.ages) <= 0):
            raise OrbitalError("ages must be strictly increasing")
        for arr in (self.ages, self.precession, self.coprecession, self.obliquity):
            arr.setflags(write=False)

    @property
    def age_range(self) -> tuple[float, float]:
        return float(self.ages[0]), float(self.ages[-1])

    def metadata(self) -> dict:
        """Normalisation record for run manifests."""
        return {
            "age_range_kyr": list(self.age_range),
            "n_rows": int(len(self.ages)),
            "normalization": {
                k: {"mean": float(m), "scale": float(s)} for k, (m, s) in self.normalization.items()
            },
            "normalization_window": "full table",
            "std_convention": "population",
        }

    @classmethod
    def from_series(cls, times, esinw, ecosw, obliquity) -> "OrbitalSolution":
        """Build a solution from raw series; times may be ages or negative times."""
        times = np.asarray(times, dtype=float)
        raw = {
            "esinw": np.asarray(esinw, dtype=float),
            "ecosw": np.asarray(ecosw, dtype=float),
            "obliquity": np.asarray(obliquity, dtype=float),
        }
        ages = -times if np.all(times <= 0) and np.any(times < 0) else times.copy()
        if np.any(ages < 0):
            raise OrbitalError("time column mixes past and future epochs")
        order = np.argsort(ages, kind="stable")
        ages = ages[order]
        raw = {k: v[order] for k, v in raw.items()}
        normalized = {}
        norm = {}
        for key, values in raw.items():
            try:
                normalized[key], mean, scale = normalize_series(values)
            except ValueError as exc:
                raise OrbitalError(f"column {key!r}: {exc}") from None
            norm[key] = (mean, scale)
        return cls(
            ages=ages,
            precession=normalized["esinw"],
            coprecession=normalized["ecosw"],
            obliquity=normalized["obliquity"],
            raw=raw,
            normalization=norm,
        )


def normalize_series(values: Iterable[float]) -> tuple[np.ndarray, float, float]:
    """Centre and scale a series to zero mean and unit population s.d.

    Returns the normalised array together with the mean and scale, so that
    ``normalized * scale + mean`` recovers the input.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need a 1-d series of length >= 2")
    mean = float(np.mean(x))
    scale = float(np.std(x))
    if not scale > 0.0 or scale <= 1e-14 * max(1.0, abs(mean)):
        raise ValueError("zero variance series")
    return (x - mean) / scale, mean, scale


def load_orbital_table(source) -> OrbitalSolution:
    """Parse a delimited orbital table.

    ``source`` is a path or an open text stream. The header must name
    ``t_kyr,esinw,ecosw,obliquity`` (any column order, extra columns
    ignored); lines starting with ``#`` are comments.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return _parse_orbital(fh)
    return _parse_orbital(source)


def _parse_orbital(fh: TextIO) -> OrbitalSolution:
    rows = [(i, line) for i, line in enumerate(fh, start=1) if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise OrbitalError("empty orbital table")
    header_line, header = rows[0][0], next(csv.reader([rows[0][1]]))
    header = [h.strip() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise OrbitalError(f"line {header_line}: missing column(s) {', '.join(missing)}")
    idx = [header.index(c) for c in REQUIRED_COLUMNS]
    data = []
    for lineno, line in rows[1:]:
        cells = next(csv.reader([line]))
        if len(cells) < len(header):
            raise OrbitalError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            data.append([float(cells[j]) for j in idx])
        except ValueError:
            bad = next(cells[j] for j in idx if not _is_float(cells[j]))
            raise OrbitalError(f"line {lineno}: non-numeric cell {bad.strip()!r}") from None
    if len(data) < 2:
        raise OrbitalError("an orbital table needs at least two data rows")
    arr = np.array(data)
    t = arr[:, 0]
    steps = np.diff(t)
    direction = np.sign(steps[0]) if steps[0] != 0 else 0.0
    for k, step in enumerate(steps):
        if direction == 0 or np.sign(step) != direction:
            raise OrbitalError(
                f"line {rows[k + 2][0]}: time {t[k + 1]!r} breaks strict monotonicity"
            )
    return OrbitalSolution.from_series(t, arr[:, 1], arr[:, 2], arr[:, 3])


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def orbital_at(solution: OrbitalSolution, t) -> tuple:
    """Normalised (precession, coprecession, obliquity) at age ``t`` by linear interpolation."""
    lo, hi = solution.age_range
    ta = np.asarray(t, dtype=float)
    if np.any(ta < lo) or np.any(ta > hi) or np.any(np.isnan(ta)):
        raise OrbitalError(f"age {t} kyr outside orbital table range [{lo}, {hi}]")
    ages = solution.ages
    return (
        np.interp(ta, ages, solution.precession),
        np.interp(ta, ages, solution.coprecession),
        np.interp(ta, ages, solution.obliquity),
    )


def forcing(solution: OrbitalSolution, t, w: ForcingWeights):
    """Linear forcing ``gamma_p*P + gamma_c*C + gamma_e*E`` at age ``t``."""
    p, c, e = orbital_at(solution, t)
    return w.gamma_p * p + w.gamma_c * c + w.gamma_e * e


def truncate(x, a):
    """Smooth truncation of negative anomalies.

    Identity for ``x > 0``; ``x + sqrt(4a^2 + x^2) - 2a`` otherwise, which
    tends to ``-2a`` as ``x`` goes to minus infinity.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("truncation parameter a must be > 0")
    x = np.asarray(x, dtype=float)
    # x + sqrt(4a^2 + x^2) rewritten as 4a^2 / (sqrt(4a^2 + x^2) - x) to avoid cancellation
    a2 = 4.0 * a * a
    neg = a2 / (np.sqrt(a2 + x * x) - np.minimum(x, 0.0)) - 2.0 * a
    out = np.where(x >= 0, x, neg)
    return out[()] if out.ndim == 0 else out


def transformed_precession(value, a):
    """Truncated precession term rescaled by the fixed PP12 constants."""
    return (truncate(value, a) - PP12_SHIFT) / PP12_SCALE


# Leading quasi-periodic terms (amplitude, period in kyr, phase in degrees).
# These reproduce the familiar ~19/23 kyr precession and ~41 kyr obliquity
# bands and are intended for tests and demos only; production runs should load
# a published solution with load_orbital_table.
_PRECESSION_TERMS = (
    (0.0186, 23.7, 28.6),
    (0.0163, 22.4, 193.8),
    (-0.0130, 18.95, 308.3),
    (0.0099, 19.1, 320.2),
    (-0.0034, 19.2, 279.4),
)
_OBLIQUITY_TERMS = (  # degrees
    (-0.684, 41.0, 251.9),
    (-0.238, 39.7, 280.8),
    (-0.175, 53.6, 128.3),
)
_OBLIQUITY_MEAN = 23.32


def synthetic_orbital_table(max_age: float = 1000.0, step: float = 1.0) -> str:
    """Render an approximate orbital table as CSV text (ages 0..max_age).

    The series are a handful of leading sinusoids, not a full astronomical
    solution.
    """
    if step <= 0 or max_age <= 0:
        raise ValueError("max_age and step must be positive")
    ages = np.arange(0.0, max_age + 0.5 * step, step)
    t = -ages
    esinw = np.zeros_like(t)
    ecosw = np.zeros_like(t)
    for amp, period, phase in _PRECESSION_TERMS:
        arg = 2.0 * math.pi * t / period + math.radians(phase)
        esinw += amp * np.sin(arg)
        ecosw += amp * np.cos(arg)
    obl = np.full_like(t, _OBLIQUITY_MEAN)
    for amp, period, phase in _OBLIQUITY_TERMS:
        obl += amp * np.cos(2.0 * math.pi * t / period + math.radians(phase))
    buf = io.StringIO()
    buf.write("# approximate quasi-periodic orbital series (tests/demos only)\n")
    buf.write(",".join(REQUIRED_COLUMNS) + "\n")
    for row in zip(ages, esinw, ecosw, np.radians(obl)):
        buf.write("%.6f,%.17g,%.17g,%.17g\n" % row)
    return buf.getvalue()
