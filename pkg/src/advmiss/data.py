"""Datasets, masked datasets and their CSV persistence.

In memory a masked dataset keeps an explicit boolean ``patterns`` array
(``True`` = observed); masked payload entries are stored as ``0.0`` so that
forgetting the mask gives wrong numbers loudly rather than NaN silently.
On disk masked cells are empty fields; ``NaN`` text is accepted on read.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import check_data

logger = logging.getLogger(__name__)

SACHS_COLUMN_MAP = {
    "praf": "raf", "pmek": "mek", "plcg": "plc", "PIP2": "pip2", "PIP3": "pip3",
    "p44/42": "erk", "pakts473": "akt", "PKA": "pka", "PKC": "pkc", "P38": "p38",
    "pjnk": "jnk",
}


class DataFormatError(ValueError):
    """Malformed CSV input."""


class ImputationError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Fully observed data with named columns."""

    columns: tuple[str, ...]
    values: np.ndarray
    centered: bool = False

    def __post_init__(self):
        values = check_data(self.values)
        if len(self.columns) != values.shape[1]:
            raise ValueError("column count does not match the data")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def index_of(self, names) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.columns)}
        try:
            return [lookup[n] for n in names]
        except KeyError as exc:
            raise KeyError(f"unknown column {exc.args[0]!r}; have {list(self.columns)}") from None

    def centered_copy(self) -> "Dataset":
        return Dataset(self.columns, self.values - self.values.mean(axis=0), True)


@dataclass(frozen=True)
class MaskedDataset:
    """Partially observed data: values plus a boolean observation mask."""

    columns: tuple[str, ...]
    values: np.ndarray
    patterns: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        patterns = np.asarray(self.patterns, dtype=bool).copy()
        if values.ndim != 2 or patterns.shape != values.shape:
            raise ValueError("values and patterns must be matching 2-D arrays")
        if len(self.columns) != values.shape[1]:
            raise ValueError("column count does not match the data")
        if not np.all(np.isfinite(values[patterns])):
            raise ValueError("observed entries must be finite")
        values[~patterns] = 0.0
        values.setflags(write=False)
        patterns.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "patterns", patterns)
        object.__setattr__(self, "columns", tuple(self.columns))

    @classmethod
    def from_nan(cls, columns, X) -> "MaskedDataset":
        X = np.asarray(X, dtype=float)
        return cls(columns, np.nan_to_num(X), ~np.isnan(X))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def to_nan(self) -> np.ndarray:
        X = np.array(self.values)
        X[~self.patterns] = np.nan
        return X

    def missing_rate(self) -> float:
        return float(1.0 - self.patterns.mean()) if self.n else 0.0

    def column_missing_rates(self) -> np.ndarray:
        return 1.0 - self.patterns.mean(axis=0)

    def pattern_groups(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(pattern, row_indices)`` for every distinct pattern, in a fixed order."""
        uniq, inverse = np.unique(self.patterns, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        return [(uniq[k], np.flatnonzero(inverse == k)) for k in range(uniq.shape[0])]


# --------------------------------------------------------------------------
# CSV I/O

def _parse_rows(text: str, path, allow_missing: bool):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(f"{path}: empty file, header row required") from None
    header = [h.strip() for h in header]
    if not header or any(h == "" for h in header):
        raise DataFormatError(f"{path}: blank column name in header")
    rows, mask = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            if len(header) > 1 or not allow_missing:
                continue
            row = [""]  # a one-column row whose only cell is masked
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        vals, obs = [], []
        for col, cell in zip(header, row):
            cell = cell.strip()
            if cell == "" or cell.lower() == "nan":
                if not allow_missing:
                    raise DataFormatError(f"{path}:{lineno}: missing value in column {col!r}")
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-numeric cell {cell!r} in column {col!r}") from None
            if not np.isfinite(v):
                raise DataFormatError(f"{path}:{lineno}: non-finite cell in column {col!r}")
            vals.append(v)
            obs.append(True)
        rows.append(vals)
        mask.append(obs)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return header, np.array(rows), np.array(mask, dtype=bool)


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc


def load_dataset(path, center: bool = False, column_map: dict | None = None) -> Dataset:
    """Read a fully observed numeric CSV with a header row."""
    header, values, _ = _parse_rows(_read_text(path), path, allow_missing=False)
    if column_map:
        header = [column_map.get(h, h) for h in header]
    ds = Dataset(tuple(header), values)
    return ds.centered_copy() if center else ds


def load_sachs(center: bool = True, column_map: dict | None = None) -> Dataset:
    """Bundled 853-row anti-CD3/CD28 Sachs flow-cytometry condition."""
    column_map = SACHS_COLUMN_MAP if column_map is None else column_map
    ref = resources.files("advmiss").joinpath("data/sachs_cd3cd28.csv")
    with resources.as_file(ref) as p:
        return load_dataset(p, center=center, column_map=column_map)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path) -> None:
    lines = [",".join(ds.columns)]
    lines += [",".join(_fmt(v) for v in row) for row in ds.values]
    _write(path, "\n".join(lines) + "\n")


def save_masked(mds: MaskedDataset, path) -> None:
    """Write ``mds`` as CSV with empty fields for masked entries."""
    lines = [",".join(mds.columns)]
    for row, obs in zip(mds.values, mds.patterns):
        lines.append(",".join(_fmt(v) if o else "" for v, o in zip(row, obs)))
    _write(path, "\n".join(lines) + "\n")


def load_masked(path) -> MaskedDataset:
    header, values, mask = _parse_rows(_read_text(path), path, allow_missing=True)
    return MaskedDataset(tuple(header), values, mask)


def _write(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# --------------------------------------------------------------------------
# masking and imputation

def apply_mechanism(ds: Dataset | np.ndarray, mech, seed=None, columns=None) -> MaskedDataset:
    """Draw one observation pattern per row from ``mech``.

    ``info`` on the result carries the realized overall and per-column
    missingness rates, the chosen support indices and, for rejection
    samplers, the number of clipped density ratios.
    """
    if isinstance(ds, Dataset):
        X, columns = ds.values, ds.columns
    else:
        X = check_data(ds)
        columns = tuple(columns or (f"X{j + 1}" for j in range(X.shape[1])))
    if mech.support.shape[1] != X.shape[1]:
        raise ValueError(f"mechanism has d={mech.support.shape[1]}, data has d={X.shape[1]}")
    idx = mech.sample_pattern_index(X, seed)
    patterns = mech.support[idx]
    info = {
        "pattern_index": idx,
        "missing_rate": float(1.0 - patterns.mean()),
        "column_missing_rates": 1.0 - patterns.mean(axis=0),
    }
    if hasattr(mech, "clip_count"):
        info["clip_count"] = mech.clip_count(X)
        if info["clip_count"]:
            logger.info("%d rows had density ratios above lambda and were clipped",
                        info["clip_count"])
    return MaskedDataset(columns, X, patterns, info)


def column_means(mds: MaskedDataset) -> np.ndarray:
    counts = mds.patterns.sum(axis=0)
    if np.any(counts == 0):
        bad = [mds.columns[j] for j in np.flatnonzero(counts == 0)]
        raise ImputationError(f"fully masked columns: {bad}")
    return mds.values.sum(axis=0) / counts


def mean_impute(mds: MaskedDataset) -> Dataset:
    """Replace every masked entry by its column's observed mean."""
    means = column_means(mds)
    X = np.where(mds.patterns, mds.values, means)
    return Dataset(mds.columns, X)
