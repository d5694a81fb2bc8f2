"""Case-level data: schema, loading, validation and CSV round-tripping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataParseError, EmptyDataError, SchemaError

MISSING_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan", "NULL", "null", "."})


@dataclass(frozen=True)
class Schema:
    """Column roles. ``fe`` holds one tuple per fixed-effect set; a tuple with
    several columns is their interaction (``unit:year``)."""

    outcome: str
    treatment: str
    examiner: str
    fe: tuple[tuple[str, ...], ...]
    covariates: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.fe:
            raise SchemaError("schema needs at least one fixed-effect column")

    @property
    def fe_names(self) -> tuple[str, ...]:
        return tuple(":".join(cols) for cols in self.fe)

    @classmethod
    def from_strings(cls, outcome, treatment, examiner, fe, covariates=None):
        """Build from CLI-style strings: ``fe="unit:year,court"``."""
        if not fe:
            raise SchemaError("schema needs at least one fixed-effect column (--fe)")
        fe_sets = tuple(tuple(c.strip() for c in part.split(":")) for part in fe.split(",") if part.strip())
        covs = None
        if covariates:
            covs = tuple(c.strip() for c in covariates.split(",") if c.strip())
        return cls(outcome, treatment, examiner, fe_sets, covs)

    @classmethod
    def from_config(cls, path):
        values = read_key_value_file(path)
        missing = [k for k in ("outcome", "treatment", "examiner", "fe") if k not in values]
        if missing:
            raise SchemaError(f"schema file {path} is missing keys: {', '.join(missing)}")
        return cls.from_strings(values["outcome"], values["treatment"], values["examiner"],
                                values["fe"], values.get("covariates"))

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "treatment": self.treatment,
            "examiner": self.examiner,
            "fe": list(self.fe_names),
            "covariates": list(self.covariates) if self.covariates is not None else None,
        }


def read_key_value_file(path) -> dict[str, str]:
    """Parse a plain ``key=value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _intern(labels: Sequence[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    levels, codes = np.unique(np.asarray(labels, dtype=str), return_inverse=True)
    return codes.astype(np.int64), tuple(str(v) for v in levels)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable case-level observations with interned categorical codes.

    ``row_ids`` are the 0-based data-row positions in the originating file
    (or generator) and survive subsetting, so dropped cases can be named.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    examiner: np.ndarray
    examiner_levels: tuple[str, ...]
    fe: np.ndarray
    fe_levels: tuple[tuple[str, ...], ...]
    fe_names: tuple[str, ...]
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)
    row_ids: np.ndarray | None = None
    names: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.outcome)
        if self.row_ids is None:
            object.__setattr__(self, "row_ids", np.arange(n))
        for name in ("outcome", "treatment", "examiner", "row_ids"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise SchemaError(f"{name} has {len(arr)} entries, expected {n}")
            object.__setattr__(self, name, _frozen(arr))
        fe = np.asarray(self.fe)
        if fe.ndim == 1:
            fe = fe[:, None]
        if fe.shape[0] != n or fe.shape[1] < 1:
            raise SchemaError("fixed-effect codes must be an (n, >=1) array")
        object.__setattr__(self, "fe", _frozen(fe.astype(np.int64)))
        extra = {}
        for k, v in self.extra.items():
            v = np.asarray(v, dtype=float)
            if len(v) != n:
                raise SchemaError(f"covariate {k!r} has {len(v)} entries, expected {n}")
            extra[k] = _frozen(v)
        object.__setattr__(self, "extra", extra)
        defaults = {"outcome": "y", "treatment": "x", "examiner": "examiner"}
        defaults.update(self.names)
        object.__setattr__(self, "names", defaults)
        if not (np.all(np.isfinite(self.outcome)) and np.all(np.isfinite(self.treatment))):
            raise DataParseError("outcome and treatment must be finite for every observation")

    @property
    def n(self) -> int:
        return len(self.outcome)

    @classmethod
    def from_arrays(cls, outcome, treatment, examiner, fe, extra=None, fe_names=None, names=None):
        """Build from raw label arrays; ``fe`` is one array or a list of arrays."""
        outcome = np.asarray(outcome, dtype=float)
        treatment = np.asarray(treatment, dtype=float)
        ex_codes, ex_levels = _intern([str(e) for e in examiner])
        if isinstance(fe, np.ndarray) and fe.ndim == 2:
            fe_cols = [fe[:, j] for j in range(fe.shape[1])]
        elif isinstance(fe, (list, tuple)) and len(fe) and np.ndim(fe[0]) == 1:
            fe_cols = list(fe)
        else:
            fe_cols = [fe]
        codes, levels = [], []
        for col in fe_cols:
            c, lv = _intern([str(v) for v in col])
            codes.append(c)
            levels.append(lv)
        if fe_names is None:
            fe_names = tuple("cell" if len(fe_cols) == 1 else f"fe{j}" for j in range(len(fe_cols)))
        return cls(outcome, treatment, ex_codes, ex_levels, np.column_stack(codes), tuple(levels),
                   tuple(fe_names), dict(extra or {}), None, dict(names or {}))

    def subset(self, mask) -> "Dataset":
        """Rows where ``mask`` is true (or the given integer positions), with
        categorical levels re-interned so unused levels disappear."""
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
        ex_used, ex_codes = np.unique(self.examiner[idx], return_inverse=True)
        fe_codes, fe_levels = [], []
        for j in range(self.fe.shape[1]):
            used, c = np.unique(self.fe[idx, j], return_inverse=True)
            fe_codes.append(c)
            fe_levels.append(tuple(self.fe_levels[j][u] for u in used))
        fe = np.column_stack(fe_codes) if idx.size else np.zeros((0, self.fe.shape[1]), dtype=np.int64)
        return Dataset(
            self.outcome[idx], self.treatment[idx], ex_codes.reshape(-1),
            tuple(self.examiner_levels[u] for u in ex_used), fe, tuple(fe_levels), self.fe_names,
            {k: v[idx] for k, v in self.extra.items()}, self.row_ids[idx], dict(self.names),
        )

    def positions_of(self, other: "Dataset") -> np.ndarray:
        """Positions in ``self`` of the rows of ``other`` (a subset of self)."""
        pos = np.searchsorted(self.row_ids, other.row_ids)
        if np.any(pos >= self.n) or np.any(self.row_ids[np.minimum(pos, self.n - 1)] != other.row_ids):
            raise ValueError("dataset is not a subset of this dataset")
        return pos

    def cell_codes(self, j: int = 0) -> np.ndarray:
        return self.fe[:, j]


def load_dataset(path, schema: Schema) -> Dataset:
    """Read an RFC 4180 CSV with a header row and validate it against ``schema``."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.EmptyDataError:
        raise EmptyDataError(f"{path} is empty") from None
    if len(frame) == 0:
        raise EmptyDataError(f"{path} has a header but no data rows")

    fe_cols = [c for cols in schema.fe for c in cols]
    required = [schema.outcome, schema.treatment, schema.examiner, *fe_cols]
    absent = [c for c in dict.fromkeys(required) if c not in frame.columns]
    if absent:
        raise SchemaError(f"missing column(s) in {path}: {', '.join(absent)}")

    for col in dict.fromkeys(required):
        values = frame[col].str.strip()
        bad = values.isin(MISSING_TOKENS).to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataParseError(f"row {row + 1} (line {row + 2}): missing value in required column {col!r}",
                                 row=row, column=col)

    numeric = {}
    for col in (schema.outcome, schema.treatment):
        parsed = _to_float(frame[col].str.strip())
        bad = ~np.isfinite(parsed)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataParseError(
                f"row {row + 1} (line {row + 2}): column {col!r} is not numeric: {frame[col].iloc[row]!r}",
                row=row, column=col)
        numeric[col] = parsed

    fe_arrays = []
    for cols in schema.fe:
        if len(cols) == 1:
            fe_arrays.append(frame[cols[0]].str.strip().to_numpy())
        else:
            fe_arrays.append(frame[list(cols)].apply(lambda r: ":".join(s.strip() for s in r), axis=1).to_numpy())

    if schema.covariates is None:
        cov_names = [c for c in frame.columns if c not in set(required)]
    else:
        cov_names = list(schema.covariates)
        absent = [c for c in cov_names if c not in frame.columns]
        if absent:
            raise SchemaError(f"missing covariate column(s) in {path}: {', '.join(absent)}")
    extra = {name: _parse_covariate(frame[name]) for name in cov_names}

    return Dataset.from_arrays(
        numeric[schema.outcome], numeric[schema.treatment], frame[schema.examiner].str.strip().to_numpy(),
        fe_arrays, extra=extra, fe_names=schema.fe_names,
        names={"outcome": schema.outcome, "treatment": schema.treatment, "examiner": schema.examiner},
    )


def _to_float(s: pd.Series) -> np.ndarray:
    # Python's float() is correctly rounded, so written reprs read back exactly;
    # unparseable entries become NaN
    try:
        return s.astype(float).to_numpy()
    except ValueError:
        def conv(v):
            try:
                return float(v)
            except ValueError:
                return np.nan
        return np.array([conv(v) for v in s], dtype=float)


def _parse_covariate(col: pd.Series) -> np.ndarray:
    # numeric if every non-missing entry parses; otherwise categorical codes
    s = col.str.strip()
    missing = s.isin(MISSING_TOKENS).to_numpy()
    parsed = _to_float(s.where(~missing, "nan"))
    if np.all(np.isfinite(parsed[~missing])):
        parsed[missing] = np.nan
        return parsed
    levels = sorted(set(s[~missing]))
    lookup = {v: float(i) for i, v in enumerate(levels)}
    return np.array([np.nan if m else lookup[v] for v, m in zip(s, missing)])


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_csv(ds: Dataset, path) -> None:
    """Write ``ds`` so that :func:`load_dataset` reads back identical values."""
    names = ds.names
    header = [names["outcome"], names["treatment"], names["examiner"], *ds.fe_names, *ds.extra.keys()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        extras = list(ds.extra.values())
        for i in range(ds.n):
            row = [_fmt(ds.outcome[i]), _fmt(ds.treatment[i]), ds.examiner_levels[ds.examiner[i]]]
            row += [ds.fe_levels[j][ds.fe[i, j]] for j in range(ds.fe.shape[1])]
            row += [_fmt(e[i]) for e in extras]
            w.writerow(row)


def schema_for(ds: Dataset) -> Schema:
    """Schema that reads back a file written by :func:`write_csv`."""
    return Schema(ds.names["outcome"], ds.names["treatment"], ds.names["examiner"],
                  tuple((name,) for name in ds.fe_names), tuple(ds.extra.keys()))
