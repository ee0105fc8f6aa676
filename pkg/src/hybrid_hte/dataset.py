"""Trial data containers, delimited-table I/O, ACTG 175 preprocessing and folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    DomainError,
    InfeasibleError,
    LeakageError,
    ParseError,
    SchemaError,
    ValidationError,
)

CONTINUOUS = "continuous"
BINARY = "binary"

_MISSING_TOKENS = {"", "na", "nan", "null", "."}


def _frozen(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _infer_kind(col: np.ndarray) -> str:
    return BINARY if np.all((col == 0) | (col == 1)) else CONTINUOUS


@dataclass(frozen=True)
class ColumnSchema:
    covariate_names: tuple
    treatment_column: str = "a"
    outcome_column: str = "y"

    def __post_init__(self):
        names = tuple(self.covariate_names)
        object.__setattr__(self, "covariate_names", names)
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate covariate names in {names}")
        for role in (self.treatment_column, self.outcome_column):
            if role in names:
                raise SchemaError(f"column {role!r} cannot be both a covariate and treatment/outcome")
        if self.treatment_column == self.outcome_column:
            raise SchemaError("treatment and outcome columns must differ")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ColumnSchema":
        try:
            return cls(
                covariate_names=tuple(mapping["covariates"]),
                treatment_column=mapping.get("treatment", "a"),
                outcome_column=mapping.get("outcome", "y"),
            )
        except KeyError as exc:
            raise SchemaError(f"schema is missing key {exc}") from None


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Covariates ``X`` (n x p), binary treatment ``A`` and binary outcome ``Y``.

    ``known_propensity`` is set for randomized designs where P(A=1) is fixed
    by protocol. Arrays are stored read-only.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple = ()
    column_kinds: tuple = ()
    known_propensity: Optional[float] = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(len(self.treatment), 0)
        if x.ndim != 2:
            raise ValidationError("covariates must be a 2-d matrix")
        n, p = x.shape
        a = np.asarray(self.treatment)
        y = np.asarray(self.outcome)
        if a.shape != (n,) or y.shape != (n,):
            raise ValidationError(
                f"length mismatch: covariates {n}, treatment {a.shape}, outcome {y.shape}"
            )
        if n < 2:
            raise ValidationError("need at least 2 subjects")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a.astype(float))) and np.all(np.isfinite(y.astype(float)))):
            raise ValidationError("missing or non-finite values are not allowed")
        for name, v in (("treatment", a), ("outcome", y)):
            if not np.all((v == 0) | (v == 1)):
                raise DomainError(f"{name} must be coded 0/1")
        a = a.astype(np.int8)
        y = y.astype(np.int8)
        if a.min() == a.max():
            raise DomainError("treatment needs at least one treated and one control subject")

        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise SchemaError(f"{len(names)} covariate names for {p} columns")
        if len(set(names)) != p:
            raise SchemaError("covariate names must be unique")
        kinds = tuple(self.column_kinds) or tuple(_infer_kind(x[:, j]) for j in range(p))
        if len(kinds) != p:
            raise SchemaError("one kind per covariate column is required")
        for j, kind in enumerate(kinds):
            if kind not in (CONTINUOUS, BINARY):
                raise SchemaError(f"unknown column kind {kind!r}")
            if kind == BINARY and not np.all((x[:, j] == 0) | (x[:, j] == 1)):
                raise DomainError(f"binary column {names[j]!r} holds values outside {{0,1}}")
        e = self.known_propensity
        if e is not None and not 0.0 < e < 1.0:
            raise DomainError("known_propensity must lie in (0, 1)")

        object.__setattr__(self, "covariates", _frozen(x, float))
        object.__setattr__(self, "treatment", _frozen(a))
        object.__setattr__(self, "outcome", _frozen(y))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "column_kinds", kinds)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    def kind(self, name: str) -> str:
        if name not in self.covariate_names:
            raise SchemaError(f"unknown covariate {name!r}")
        return self.column_kinds[self.covariate_names.index(name)]

    def subset(self, index) -> "TrialDataset":
        return TrialDataset(
            self.covariates[index],
            self.treatment[index],
            self.outcome[index],
            self.covariate_names,
            self.column_kinds,
            self.known_propensity,
        )

    def with_outcome(self, y) -> "TrialDataset":
        return TrialDataset(
            self.covariates, self.treatment, y, self.covariate_names, self.column_kinds, self.known_propensity
        )


# ---------------------------------------------------------------------------
# delimited text I/O


def _parse_cell(text: str, line: int, column: str) -> float:
    token = text.strip()
    if token.lower() in _MISSING_TOKENS:
        raise ParseError(f"missing value at line {line}, column {column!r}", row=line, column=column)
    try:
        value = float(token)
    except ValueError:
        raise ParseError(
            f"non-numeric value {token!r} at line {line}, column {column!r}", row=line, column=column
        ) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value at line {line}, column {column!r}", row=line, column=column)
    return value


def _read_rows(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def read_header(path) -> list[str]:
    return _read_rows(path)[0]


def load_table(path, schema: ColumnSchema, known_propensity: Optional[float] = None) -> TrialDataset:
    """Read a comma-separated table with a header row into a validated dataset.

    Line numbers in parse errors count the header as line 1.
    """
    header, rows = _read_rows(path)
    wanted = list(schema.covariate_names) + [schema.treatment_column, schema.outcome_column]
    for name in wanted:
        if name not in header:
            raise SchemaError(f"column {name!r} not found in header of {path}")
    pos = [header.index(name) for name in wanted]
    values = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"line {line} has {len(row)} fields, header has {len(header)}", row=line)
        for j, (name, k) in enumerate(zip(wanted, pos)):
            values[i, j] = _parse_cell(row[k], line, name)
    p = len(schema.covariate_names)
    for j, name in ((p, schema.treatment_column), (p + 1, schema.outcome_column)):
        bad = np.flatnonzero((values[:, j] != 0) & (values[:, j] != 1))
        if bad.size:
            raise DomainError(f"{name!r} must be 0/1; line {bad[0] + 2} holds {values[bad[0], j]!r}")
    return TrialDataset(
        values[:, :p],
        values[:, p],
        values[:, p + 1],
        schema.covariate_names,
        known_propensity=known_propensity,
    )


def format_number(v: float) -> str:
    """Shortest decimal text that parses back to exactly ``v``."""
    v = float(v)
    negative_zero = v == 0 and math.copysign(1.0, v) < 0
    if v.is_integer() and abs(v) < 1e15 and not negative_zero:
        return str(int(v))
    return repr(v)


def write_table(data: TrialDataset, path, schema: Optional[ColumnSchema] = None) -> Path:
    schema = schema or ColumnSchema(data.covariate_names)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(schema.covariate_names) + [schema.treatment_column, schema.outcome_column])
        for i in range(data.n):
            w.writerow(
                [format_number(v) for v in data.covariates[i]]
                + [int(data.treatment[i]), int(data.outcome[i])]
            )
    return path


# ---------------------------------------------------------------------------
# ACTG 175


@dataclass(frozen=True)
class RawTable:
    """Column-oriented numeric table; missing cells are NaN."""

    columns: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __getitem__(self, name) -> np.ndarray:
        return self.columns[name]


def load_raw_table(path) -> RawTable:
    header, rows = _read_rows(path)
    header = [h.strip('"') for h in header]
    out = np.full((len(rows), len(header)), np.nan)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"line {i + 2} has {len(row)} fields, header has {len(header)}", row=i + 2)
        for j, cell in enumerate(row):
            token = cell.strip().strip('"')
            if token.lower() in _MISSING_TOKENS:
                continue
            try:
                out[i, j] = float(token)
            except ValueError:
                raise ParseError(
                    f"non-numeric value {token!r} at line {i + 2}, column {header[j]!r}",
                    row=i + 2,
                    column=header[j],
                ) from None
    return RawTable({name: out[:, j] for j, name in enumerate(header)})


# Arm codes of the public distribution: 0 ZDV, 1 ZDV+ddI, 2 ZDV+ddC, 3 ddI.
ACTG_ARM_ZDV = 0
ACTG_ARM_DDI = 3
ACTG_HORIZON_DAYS = 96 * 7

# Aliases between the R (speff2trial) and UCI exports.
ACTG_ARM_COLUMNS = ("arms", "trt")
ACTG_EVENT_COLUMNS = ("cens", "cid")
ACTG_DAYS_COLUMNS = ("days", "time")

ACTG_DEFAULT_COVARIATES = (
    "age",
    "wtkg",
    "hemo",
    "homo",
    "drugs",
    "karnof",
    "oprior",
    "z30",
    "preanti",
    "race",
    "gender",
    "str2",
    "strat",
    "symptom",
    "cd40",
    "cd80",
)

# Measured after randomization or derived from follow-up.
ACTG_POST_RANDOMIZATION = frozenset(
    {"cd420", "cd496", "cd820", "r", "offtrt", "treat", "cens", "cid", "days", "time", "arms", "trt"}
)


def _pick(raw: RawTable, aliases: Sequence[str]) -> str:
    for name in aliases:
        if name in raw:
            return name
    raise SchemaError(f"raw ACTG table lacks any of the columns {aliases}")


def preprocess_actg175(raw: RawTable, covariate_list: Sequence[str] = ACTG_DEFAULT_COVARIATES) -> TrialDataset:
    """Binary AZT-vs-combination contrast with a 96-week event-free outcome.

    Drops the ddI monotherapy arm, sets A=1 for either combination arm and
    Y=0 iff an event was recorded on or before day 672. Rows with a missing
    value in any used column are removed.
    """
    covariate_list = tuple(covariate_list)
    leaked = [c for c in covariate_list if c in ACTG_POST_RANDOMIZATION]
    if leaked:
        raise LeakageError(f"post-randomization columns requested as covariates: {leaked}")
    for c in covariate_list:
        if c not in raw:
            raise SchemaError(f"unknown ACTG covariate {c!r}")
    arm = raw[_pick(raw, ACTG_ARM_COLUMNS)]
    event = raw[_pick(raw, ACTG_EVENT_COLUMNS)]
    days = raw[_pick(raw, ACTG_DAYS_COLUMNS)]
    x = np.column_stack([raw[c] for c in covariate_list]) if covariate_list else np.empty((raw.n_rows, 0))

    keep = np.isfinite(arm) & (arm != ACTG_ARM_DDI)
    keep &= np.isfinite(event) & np.isfinite(days) & np.all(np.isfinite(x), axis=1)
    unknown_arm = keep & ~np.isin(arm, (0, 1, 2))
    if unknown_arm.any():
        raise DomainError(f"unexpected arm code {arm[unknown_arm][0]!r}")
    a = (arm[keep] != ACTG_ARM_ZDV).astype(np.int8)
    y = (~((event[keep] == 1) & (days[keep] <= ACTG_HORIZON_DAYS))).astype(np.int8)
    return TrialDataset(x[keep], a, y, covariate_list)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_id: np.ndarray
    K: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "fold_id", _frozen(self.fold_id, np.int64))

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_id == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_id != k)

    def __iter__(self) -> Iterator[tuple]:
        """Yield ``(k, train_index, test_index)`` for k = 1..K."""
        for k in range(1, self.K + 1):
            yield k, self.train_index(k), self.test_index(k)


def make_folds(data: TrialDataset, K: int = 5, seed: int = 0) -> FoldAssignment:
    """Treatment-stratified folds: shuffle each arm, then deal round-robin.

    Dealing for the control arm continues where the treated arm stopped so
    total fold sizes also differ by at most one.
    """
    if K < 2:
        raise ValidationError("K must be at least 2")
    a = data.treatment
    arms = [np.flatnonzero(a == 1), np.flatnonzero(a == 0)]
    for label, idx in zip(("treated", "control"), arms):
        if idx.size < K:
            raise InfeasibleError(f"{label} arm has {idx.size} subjects, fewer than K={K}")
    rng = np.random.default_rng(seed)
    fold_id = np.zeros(data.n, dtype=np.int64)
    offset = 0
    for idx in arms:
        perm = rng.permutation(idx)
        fold_id[perm] = (offset + np.arange(perm.size)) % K + 1
        offset = (offset + perm.size) % K
    return FoldAssignment(fold_id, K, seed)
