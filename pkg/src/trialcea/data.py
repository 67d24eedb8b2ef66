"""Trial dataset container, CSV ingestion and missingness-pattern accounting.

A dataset holds one row per randomised participant: assignment ``z``,
treatment receipt ``d``, total cost ``y1``, total QALYs ``y2`` and named
baseline covariates (the baseline utility score is conventionally named
``eq5d0``).  Missing values are stored as NaN; the observation indicators
``r0`` (baseline utility), ``r1`` (cost) and ``r2`` (QALYs) are derived from
the data so they can never disagree with it.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SchemaError, ValidationError

CORE_FIELDS = ("z", "d", "y1", "y2")
BASELINE_UTILITY = "eq5d0"
DEFAULT_NA = ("", "NA")


def _as_float(values, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    return arr


def _as_binary(values, name):
    arr = _as_float(values, name)
    if np.isnan(arr).any():
        row = int(np.flatnonzero(np.isnan(arr))[0])
        raise ValidationError(f"{name} must be fully observed; missing at row {row}")
    bad = ~np.isin(arr, (0.0, 1.0))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{name} must be 0/1; found {arr[row]!r} at row {row}")
    return arr.astype(np.int8)


@dataclass(frozen=True)
class TrialDataset:
    """Immutable per-participant trial data.

    Arrays are copied on construction and marked read-only, so datasets can
    be shared freely across concurrent estimator runs.
    """

    z: np.ndarray
    d: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        z = _as_binary(self.z, "z")
        d = _as_binary(self.d, "d")
        y1 = _as_float(self.y1, "y1")
        y2 = _as_float(self.y2, "y2")
        n = z.shape[0]
        covs = {}
        for name, values in self.covariates.items():
            if name in CORE_FIELDS:
                raise ValidationError(f"covariate name {name!r} clashes with a core field")
            arr = _as_float(values, name)
            if arr.shape[0] != n:
                raise ValidationError(f"covariate {name!r} has length {arr.shape[0]}, expected {n}")
            arr.flags.writeable = False
            covs[name] = arr
        for name, arr in (("z", z), ("d", d), ("y1", y1), ("y2", y2)):
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
            arr.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y2", y2)
        object.__setattr__(self, "covariates", covs)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def r0(self) -> np.ndarray:
        """Observation indicator for baseline utility (all ones if absent)."""
        if BASELINE_UTILITY in self.covariates:
            return (~np.isnan(self.covariates[BASELINE_UTILITY])).astype(np.int8)
        return np.ones(self.n, dtype=np.int8)

    @property
    def r1(self) -> np.ndarray:
        return (~np.isnan(self.y1)).astype(np.int8)

    @property
    def r2(self) -> np.ndarray:
        return (~np.isnan(self.y2)).astype(np.int8)

    def column(self, name: str) -> np.ndarray:
        """Return a column by logical name (core field or covariate)."""
        if name == "z":
            return self.z.astype(float)
        if name == "d":
            return self.d.astype(float)
        if name == "y1":
            return self.y1
        if name == "y2":
            return self.y2
        try:
            return self.covariates[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def complete_mask(self, columns) -> np.ndarray:
        """Boolean mask of rows fully observed on the given logical columns."""
        mask = np.ones(self.n, dtype=bool)
        for name in columns:
            mask &= ~np.isnan(self.column(name))
        return mask

    def subset(self, mask) -> "TrialDataset":
        mask = np.asarray(mask, dtype=bool)
        return TrialDataset(
            z=self.z[mask],
            d=self.d[mask],
            y1=self.y1[mask],
            y2=self.y2[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
        )

    def with_values(self, y1=None, y2=None, covariates=None) -> "TrialDataset":
        """Copy of the dataset with replaced outcome/covariate columns."""
        covs = dict(self.covariates)
        if covariates:
            covs.update(covariates)
        return TrialDataset(
            z=self.z,
            d=self.d,
            y1=self.y1 if y1 is None else y1,
            y2=self.y2 if y2 is None else y2,
            covariates=covs,
        )


@dataclass(frozen=True)
class MissingPatternSummary:
    """Counts of observation patterns (r0, r1, r2) and their monotonicity.

    A pattern set is monotone when no subject is missing baseline utility
    while having an observed cost, or missing cost while having an observed
    QALY (observation order r0 >= r1 >= r2).
    """

    counts: dict[tuple[int, int, int], int]
    monotone: bool
    n: int


def summarize_patterns(ds: TrialDataset) -> MissingPatternSummary:
    r = np.stack([ds.r0, ds.r1, ds.r2], axis=1)
    patterns, counts = np.unique(r, axis=0, return_counts=True)
    table = {tuple(int(v) for v in p): int(c) for p, c in zip(patterns, counts)}
    violation = ((ds.r0 == 0) & (ds.r1 == 1)) | ((ds.r1 == 0) & (ds.r2 == 1))
    return MissingPatternSummary(counts=table, monotone=not bool(violation.any()), n=ds.n)


def enforce_monotone(ds: TrialDataset) -> tuple[TrialDataset, int]:
    """Drop subjects whose observation pattern breaks the r0 >= r1 >= r2 order.

    Returns the (possibly smaller) dataset and the number of subjects dropped.
    Idempotent: a monotone dataset is returned unchanged with 0 dropped.
    """
    violation = ((ds.r0 == 0) & (ds.r1 == 1)) | ((ds.r1 == 0) & (ds.r2 == 1))
    dropped = int(violation.sum())
    if dropped == 0:
        return ds, 0
    if dropped == ds.n:
        warnings.warn("all subjects violate the monotone observation order; dataset is empty")
    return ds.subset(~violation), dropped


def parse_schema(text: str | None) -> dict[str, str]:
    """Parse a 'logical=column,logical=column' mapping string."""
    if not text:
        return {}
    mapping = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise SchemaError(f"schema entry {item!r} is not of the form logical=column")
        logical, column = item.split("=", 1)
        logical = logical.strip()
        column = column.strip()
        if logical in mapping:
            raise SchemaError(f"duplicate logical name {logical!r} in schema")
        mapping[logical] = column
    return mapping


def load_csv(path, schema: dict[str, str] | None = None, na_values=DEFAULT_NA) -> TrialDataset:
    """Load a trial dataset from a comma-separated file with a header row.

    Parameters
    ----------
    path : str or Path
        UTF-8, comma-separated file with '.' decimal point.
    schema : dict, optional
        Mapping from logical names (z, d, y1, y2, eq5d0, ...) to column
        names in the file.  Logical names beyond the core four become named
        covariates.  Without a schema, columns named z/d/y1/y2 are required
        and every other column is carried as a covariate.
    na_values : tuple of str
        Cell contents treated as missing (empty cell and "NA" by default).
    """
    na_set = set(na_values)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        rows = [row for row in reader if row]

    header = [h.strip() for h in header]
    col_index = {name: i for i, name in enumerate(header)}
    if schema:
        mapping = dict(schema)
        for logical in CORE_FIELDS:
            if logical not in mapping:
                mapping[logical] = logical
    else:
        mapping = {name: name for name in header}
        for logical in CORE_FIELDS:
            mapping.setdefault(logical, logical)

    for logical, column in mapping.items():
        if column not in col_index:
            raise SchemaError(f"column {column!r} (logical {logical!r}) not found in {path}")

    def cell(row, column, row_number):
        i = col_index[column]
        if i >= len(row):
            raise ValidationError(f"row {row_number}: too few fields")
        return row[i].strip()

    def parse_column(logical, binary):
        column = mapping[logical]
        out = np.empty(len(rows))
        for r, row in enumerate(rows):
            raw = cell(row, column, r)
            if raw in na_set:
                if binary:
                    raise ValidationError(f"{logical} is missing at row {r}; it must be fully observed")
                out[r] = np.nan
                continue
            try:
                value = float(raw)
            except ValueError:
                raise ValidationError(f"row {r}: cannot parse {logical}={raw!r} as a number") from None
            if binary and value not in (0.0, 1.0):
                raise ValidationError(f"row {r}: {logical} must be 0 or 1, found {raw!r}")
            out[r] = value
        return out

    if not rows:
        raise ValidationError(f"{path}: no data rows")

    z = parse_column("z", binary=True)
    d = parse_column("d", binary=True)
    y1 = parse_column("y1", binary=False)
    y2 = parse_column("y2", binary=False)
    covariates = {}
    for logical in mapping:
        if logical in CORE_FIELDS:
            continue
        covariates[logical] = parse_column(logical, binary=False)
    return TrialDataset(z=z, d=d, y1=y1, y2=y2, covariates=covariates)


def _format_value(value) -> str:
    if np.isnan(value):
        return ""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def write_csv(ds: TrialDataset, path, na: str = "") -> None:
    """Write a dataset with logical column names; round-trips bit-identically."""
    names = list(CORE_FIELDS) + list(ds.covariates)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        columns = [ds.z, ds.d, ds.y1, ds.y2] + list(ds.covariates.values())
        for i in range(ds.n):
            row = []
            for col in columns:
                v = float(col[i])
                row.append(na if np.isnan(v) else _format_value(v))
            writer.writerow(row)
