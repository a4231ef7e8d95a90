"""Proxy records ``{age, d18O}`` and plain-text serialisation helpers."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["ProxyDataset", "DatasetError", "load_dataset", "fmt", "dumps_json", "write_json"]


class DatasetError(ValueError):
    pass


def fmt(x) -> str:
    """17 significant digits, enough to round-trip any double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


@dataclass(frozen=True)
class ProxyDataset:
    """Observations ordered from the oldest age to the youngest."""

    ages: np.ndarray
    values: np.ndarray
    provenance: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "values", values)
        if ages.shape != values.shape or ages.ndim != 1:
            raise DatasetError("ages and values must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(ages)) and np.all(np.isfinite(values))):
            raise DatasetError("dataset contains non-finite entries")
        if np.any(np.diff(ages) >= 0):
            raise DatasetError("ages must be strictly decreasing toward the present")

    def __len__(self):
        return len(self.ages)

    def head(self, m: int) -> "ProxyDataset":
        return ProxyDataset(self.ages[:m], self.values[:m], self.provenance)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a, v in zip(self.ages, self.values):
            h.update(f"{fmt(a)},{fmt(v)}\n".encode())
        return h.hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.provenance:
            buf.write(f"# {self.provenance}\n")
        buf.write("age_kyr,d18O\n")
        for a, v in zip(self.ages, self.values):
            buf.write(f"{fmt(a)},{fmt(v)}\n")
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_arrays(cls, ages, values, provenance="") -> "ProxyDataset":
        """Accept either ordering; rows are returned oldest first."""
        ages = np.asarray(ages, dtype=float).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if ages.size > 1 and ages[0] < ages[-1]:
            ages, values = ages[::-1], values[::-1]
        return cls(ages.copy(), values.copy(), provenance)


def load_dataset(source, provenance: str | None = None) -> ProxyDataset:
    """Read ``age_kyr,d18O`` text (``#`` comments). Rows may be listed in either
    time direction but must be strictly monotone."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text()
        label = provenance if provenance is not None else path.stem
    else:
        text = source.read()
        label = provenance or ""
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DatasetError("empty dataset")
    header = [h.strip() for h in next(csv.reader([lines[0][1]]))]
    if "age_kyr" not in header or "d18O" not in header:
        raise DatasetError(f"line {lines[0][0]}: header must contain age_kyr,d18O")
    ia, iv = header.index("age_kyr"), header.index("d18O")
    ages, values = [], []
    for lineno, ln in lines[1:]:
        cells = next(csv.reader([ln]))
        try:
            ages.append(float(cells[ia]))
            values.append(float(cells[iv]))
        except (ValueError, IndexError):
            raise DatasetError(f"line {lineno}: could not parse {ln.strip()!r}") from None
    ages = np.array(ages)
    steps = np.diff(ages)
    if steps.size and not (np.all(steps < 0) or np.all(steps > 0)):
        bad = int(np.nonzero((steps >= 0) if steps[0] < 0 else (steps <= 0))[0][0])
        raise DatasetError(f"line {lines[bad + 2][0]}: ages are not strictly monotone")
    try:
        return ProxyDataset.from_arrays(ages, values, label)
    except DatasetError as exc:
        raise DatasetError(f"{label or 'dataset'}: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if math.isfinite(obj):
            return fmt(obj)
        return json.dumps(fmt(obj))  # non-finite values as strings
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_json(obj, indent: int = 2) -> str:
    """JSON text with floats written to 17 significant digits."""
    return _encode(_jsonable(obj), indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))
