"""Domain types shared across the package, plus CSV ingestion and export.

All sample types are immutable after construction (arrays are locked) and
safe to read from multiple threads.
"""

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np


class DataValidationError(Exception):
    """Malformed input data; carries the offending row/column when known.

    ``row`` is 1-based over data rows (the header is row 0).
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class Provenance(enum.Enum):
    TRUE_DESIGN = "true"
    KW = "kw"
    KWNR = "kwnr"
    UNIT = "unit"


def _locked(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def fmt17(value):
    """Render a float with 17 significant digits (bit-exact round trip)."""
    return format(float(value), ".17g")


@dataclass(frozen=True)
class ReferenceSample:
    """Probability-sample records: covariates and positive design weights."""

    x: np.ndarray  # (n_s, k_x)
    d: np.ndarray  # (n_s,)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        d = np.asarray(self.d, dtype=float).ravel()
        if x.shape[0] != d.shape[0]:
            raise ValueError(
                f"covariates have {x.shape[0]} rows but {d.shape[0]} weights"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("reference covariates must be finite")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("design weights must be positive and finite")
        object.__setattr__(self, "x", _locked(x))
        object.__setattr__(self, "d", _locked(d))

    @property
    def n_s(self):
        return self.d.shape[0]


@dataclass(frozen=True)
class CohortSample:
    """Nonprobability baseline records with follow-up response status.

    ``y`` may be None when no outcome column exists (weighting-only runs);
    when present, it must be non-missing for every respondent.  Nonrespondent
    outcomes are retained when supplied (simulation truth) and NaN otherwise.
    """

    x: np.ndarray  # (n_c, k_x)
    z: np.ndarray  # (n_c, k_z)
    respond: np.ndarray  # (n_c,) of {0, 1}
    y: np.ndarray | None = None  # (n_c,); NaN allowed where respond == 0
    subgroup: np.ndarray | None = None  # (n_c,) labels

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        respond = np.asarray(self.respond).ravel()
        n = x.shape[0]
        if z.shape[0] != n or respond.shape[0] != n:
            raise ValueError("x, z and respond must have the same length")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            raise ValueError("cohort covariates must be finite")
        if not np.isin(respond, (0, 1)).all():
            raise ValueError("respond indicator must be 0 or 1")
        respond = respond.astype(np.int8)
        y = self.y
        if y is not None:
            y = np.asarray(y, dtype=float).ravel()
            if y.shape[0] != n:
                raise ValueError("outcome vector length mismatch")
            missing = ~np.isfinite(y)
            if np.any(missing & (respond == 1)):
                bad = int(np.nonzero(missing & (respond == 1))[0][0])
                raise ValueError(f"respondent at index {bad} has no outcome")
            object.__setattr__(self, "y", _locked(y))
        sub = self.subgroup
        if sub is not None:
            sub = np.asarray(sub)
            if sub.shape[0] != n:
                raise ValueError("subgroup vector length mismatch")
            sub = sub.astype(str)
            sub.setflags(write=False)
            object.__setattr__(self, "subgroup", sub)
        object.__setattr__(self, "x", _locked(x))
        object.__setattr__(self, "z", _locked(z))
        object.__setattr__(self, "respond", _locked(respond, dtype=np.int8))

    @property
    def n_c(self):
        return self.respond.shape[0]

    @property
    def n_r(self):
        return int(self.respond.sum())

    @property
    def respond_mask(self):
        return self.respond.astype(bool)


@dataclass(frozen=True)
class WeightSet:
    """Nonnegative weights aligned to cohort records, tagged with provenance.

    KWNR entries for nonrespondents are stored as 0.
    """

    values: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("weights must be nonnegative and finite")
        object.__setattr__(self, "values", _locked(values))

    @classmethod
    def unit(cls, n):
        return cls(np.ones(n), Provenance.UNIT)

    @property
    def cv(self):
        """Standard deviation / mean over the nonzero entries."""
        nz = self.values[self.values > 0]
        if nz.size < 2:
            return 0.0
        return float(np.std(nz, ddof=1) / np.mean(nz))

    def sum(self):
        return float(self.values.sum())


@dataclass(frozen=True)
class ReferenceSchema:
    weight: str
    covariates: tuple

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise ValueError("reference schema needs at least one covariate column")


@dataclass(frozen=True)
class CohortSchema:
    respond: str
    x: tuple
    z: tuple = None  # defaults to the x columns
    outcome: str = None
    subgroup: str = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "z", tuple(self.z) if self.z else self.x)
        if not self.x:
            raise ValueError("cohort schema needs at least one x column")


def _read_rows(path):
    """Read a CSV file, skipping leading '#' comment lines; returns header + rows."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataValidationError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            if row and row[0].lstrip().startswith("#"):
                continue
            header = row
            break
        if header is None:
            raise DataValidationError(f"{path}: empty file, header row required")
        rows = [row for row in reader]
    return [h.strip() for h in header], rows


def _column_index(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise DataValidationError(
            f"{path}: column '{name}' not found in header", column=name
        ) from None


def _parse_cell(row, idx, row_no, column, problems):
    cell = row[idx].strip() if idx < len(row) else ""
    if cell == "":
        problems.append((row_no, column, "empty cell"))
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        problems.append((row_no, column, f"nonnumeric value '{cell}'"))
        return math.nan
    if not math.isfinite(value):
        problems.append((row_no, column, f"non-finite value '{cell}'"))
    return value


def _raise_problems(path, problems):
    if not problems:
        return
    shown = "; ".join(
        f"row {r}, column '{c}': {msg}" for r, c, msg in problems[:20]
    )
    more = "" if len(problems) <= 20 else f" (+{len(problems) - 20} more)"
    raise DataValidationError(
        f"{path}: {shown}{more}", row=problems[0][0], column=problems[0][1]
    )


def load_reference_csv(path, schema):
    """Load a reference probability sample; rejects the whole file on any bad row."""
    header, rows = _read_rows(path)
    w_idx = _column_index(header, schema.weight, path)
    x_idx = [_column_index(header, c, path) for c in schema.covariates]

    problems = []
    d = np.empty(len(rows))
    x = np.empty((len(rows), len(x_idx)))
    for i, row in enumerate(rows):
        row_no = i + 1
        d[i] = _parse_cell(row, w_idx, row_no, schema.weight, problems)
        if math.isfinite(d[i]) and d[i] <= 0:
            problems.append((row_no, schema.weight, f"nonpositive weight {d[i]:g}"))
        for j, idx in enumerate(x_idx):
            x[i, j] = _parse_cell(row, idx, row_no, schema.covariates[j], problems)
    _raise_problems(path, problems)
    if len(rows) == 0:
        raise DataValidationError(f"{path}: no data rows")
    return ReferenceSample(x=x, d=d)


def load_cohort_csv(path, schema):
    """Load a cohort sample; respondents must carry an outcome when one is mapped."""
    header, rows = _read_rows(path)
    r_idx = _column_index(header, schema.respond, path)
    x_idx = [_column_index(header, c, path) for c in schema.x]
    z_idx = [_column_index(header, c, path) for c in schema.z]
    y_idx = _column_index(header, schema.outcome, path) if schema.outcome else None
    s_idx = _column_index(header, schema.subgroup, path) if schema.subgroup else None

    problems = []
    n = len(rows)
    respond = np.empty(n)
    x = np.empty((n, len(x_idx)))
    z = np.empty((n, len(z_idx)))
    y = np.full(n, math.nan) if y_idx is not None else None
    sub = [""] * n if s_idx is not None else None
    for i, row in enumerate(rows):
        row_no = i + 1
        respond[i] = _parse_cell(row, r_idx, row_no, schema.respond, problems)
        if respond[i] not in (0.0, 1.0) and math.isfinite(respond[i]):
            problems.append(
                (row_no, schema.respond, f"respond must be 0 or 1, got {respond[i]:g}")
            )
        for j, idx in enumerate(x_idx):
            x[i, j] = _parse_cell(row, idx, row_no, schema.x[j], problems)
        for j, idx in enumerate(z_idx):
            z[i, j] = _parse_cell(row, idx, row_no, schema.z[j], problems)
        if y_idx is not None:
            cell = row[y_idx].strip() if y_idx < len(row) else ""
            if cell == "":
                if respond[i] == 1.0:
                    problems.append((row_no, schema.outcome, "respondent missing outcome"))
            else:
                y[i] = _parse_cell(row, y_idx, row_no, schema.outcome, problems)
        if s_idx is not None:
            sub[i] = row[s_idx].strip() if s_idx < len(row) else ""
    _raise_problems(path, problems)
    if n == 0:
        raise DataValidationError(f"{path}: no data rows")
    if schema.outcome is None and respond.sum() > 0:
        # weighting-only extracts are fine; estimation requires outcomes
        pass
    return CohortSample(
        x=x,
        z=z,
        respond=respond.astype(int),
        y=y,
        subgroup=np.asarray(sub) if sub is not None else None,
    )


def write_reference_csv(sample, path, schema, comment=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow([schema.weight, *schema.covariates])
        for i in range(sample.n_s):
            writer.writerow(
                [fmt17(sample.d[i]), *(fmt17(v) for v in sample.x[i])]
            )


def write_cohort_csv(sample, path, schema, comment=None):
    """Write a cohort sample; nonrespondent outcomes render as blank when NaN."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        cols = [schema.respond, *schema.x]
        extra_z = [c for c in schema.z if c not in schema.x]
        z_pos = {c: j for j, c in enumerate(schema.z)}
        cols += extra_z
        if schema.outcome:
            cols.append(schema.outcome)
        if schema.subgroup:
            cols.append(schema.subgroup)
        writer.writerow(cols)
        for i in range(sample.n_c):
            row = [str(int(sample.respond[i]))]
            row += [fmt17(v) for v in sample.x[i]]
            row += [fmt17(sample.z[i, z_pos[c]]) for c in extra_z]
            if schema.outcome:
                v = sample.y[i] if sample.y is not None else math.nan
                row.append("" if not math.isfinite(v) else fmt17(v))
            if schema.subgroup:
                row.append(sample.subgroup[i] if sample.subgroup is not None else "")
            writer.writerow(row)
