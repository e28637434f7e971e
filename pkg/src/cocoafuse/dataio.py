"""Dataset ingestion, feature engineering, and train/test splitting.

A :class:`Dataset` is a named-column table plus (after feature fitting)
the derived design matrices for the expert, gate, and behavior inputs.
Feature maps are declarative: a list of transforms, each resolved to one
or more output columns. Normalization constants are always fitted on
training rows only and recorded so the same transform can be replayed
on new data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "Dataset",
    "FeatureTransform",
    "FeatureMapSpec",
    "RandomFraction",
    "HeadTail",
    "ByIndex",
    "HeadRandomTailEquispaced",
    "load_csv",
    "save_csv",
    "split",
    "fit_apply_features",
    "apply_features",
    "quadratic_decorrelated",
]

TRANSFORM_KINDS = (
    "constant_one",
    "identity",
    "standardize",
    "max_abs_scale",
    "sin_cos",
    "quadratic_decorrelated",
)


def quadratic_decorrelated(t):
    """Quadratic feature (64/9) * t * (3/4 - t).

    Vanishes at t = 0 and t = 3/4 and has zero correlation with t when
    t is uniform on [0, 1].
    """
    t = np.asarray(t, dtype=float)
    return (64.0 / 9.0) * t * (0.75 - t)


@dataclass(frozen=True)
class FeatureTransform:
    """One entry of a feature map: a transform kind plus its arguments."""

    kind: str
    column: str | None = None
    period: float | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown feature transform kind {self.kind!r}")
        if self.kind != "constant_one" and self.column is None:
            raise ConfigError(f"transform {self.kind!r} needs a column")
        if self.kind == "sin_cos":
            if self.period is None or not self.period > 0:
                raise ConfigError("sin_cos needs a positive period")

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.column is not None:
            out["column"] = self.column
        if self.period is not None:
            out["period"] = self.period
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureTransform":
        return cls(
            kind=obj["kind"], column=obj.get("column"), period=obj.get("period")
        )


FeatureMapSpec = tuple[FeatureTransform, ...]


def feature_map(entries: Iterable[FeatureTransform | dict]) -> FeatureMapSpec:
    """Normalize a list of transforms (or their JSON forms) into a spec."""
    out = []
    for e in entries:
        out.append(e if isinstance(e, FeatureTransform) else FeatureTransform.from_json(e))
    return tuple(out)


def _with_leading_constant(spec: FeatureMapSpec) -> FeatureMapSpec:
    """Gate/behavior maps always start with a constant-one entry."""
    if spec and spec[0].kind == "constant_one":
        return spec
    return (FeatureTransform(kind="constant_one"),) + tuple(spec)


@dataclass
class Dataset:
    """A table of named numeric columns plus derived model inputs.

    ``expert_design`` carries a leading intercept column; ``gate_design``
    and ``behavior_design`` carry a leading constant-one column. The
    designs and ``feature_records`` are attached by
    :func:`fit_apply_features` / :func:`apply_features`.
    """

    columns: dict[str, np.ndarray]
    response: str
    expert_design: np.ndarray | None = None
    gate_design: np.ndarray | None = None
    behavior_design: np.ndarray | None = None
    expert_names: list[str] = field(default_factory=list)
    gate_names: list[str] = field(default_factory=list)
    behavior_names: list[str] = field(default_factory=list)
    feature_records: dict | None = None

    def __post_init__(self):
        if self.response not in self.columns:
            raise DataError(f"response column {self.response!r} not in table")
        lengths = {k: len(v) for k, v in self.columns.items()}
        if len(set(lengths.values())) > 1:
            raise DataError(f"ragged columns: {lengths}")

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.response])

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.response]

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            columns={k: v[idx] for k, v in self.columns.items()},
            response=self.response,
            expert_design=None if self.expert_design is None else self.expert_design[idx],
            gate_design=None if self.gate_design is None else self.gate_design[idx],
            behavior_design=None
            if self.behavior_design is None
            else self.behavior_design[idx],
            expert_names=list(self.expert_names),
            gate_names=list(self.gate_names),
            behavior_names=list(self.behavior_names),
            feature_records=self.feature_records,
        )


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def load_csv(path: str | Path, response: str) -> Dataset:
    """Read a comma-separated, dot-decimal, UTF-8 table with a header row.

    Every cell must parse as a float; offending rows are reported with
    their 1-based line numbers.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        rows: list[list[float]] = []
        bad_lines: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                bad_lines.append(line_no)
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad_lines.append(line_no)
        if bad_lines:
            shown = ", ".join(str(b) for b in bad_lines[:10])
            raise DataError(f"{path}: unparseable rows at lines {shown}")
    if response not in header:
        raise DataError(f"{path}: missing response column {response!r}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    columns = {name: data[:, j].copy() for j, name in enumerate(header)}
    return Dataset(columns=columns, response=response)


def save_csv(ds: Dataset, path: str | Path):
    """Write the raw columns; floats use shortest-repr formatting so a
    read-back reproduces them bit-exactly."""
    path = Path(path)
    names = list(ds.columns)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        cols = [ds.columns[n] for n in names]
        for i in range(ds.n_rows):
            writer.writerow([repr(float(c[i])) for c in cols])


# ---------------------------------------------------------------------------
# Feature fitting and application
# ---------------------------------------------------------------------------


def _fit_one(t: FeatureTransform, columns: dict, train_idx: np.ndarray) -> dict:
    rec = t.to_json()
    if t.kind == "constant_one":
        return rec
    if t.column not in columns:
        raise ConfigError(f"feature transform references unknown column {t.column!r}")
    train_vals = columns[t.column][train_idx]
    if t.kind == "standardize":
        sd = float(train_vals.std())
        if sd == 0.0:
            raise DataError(f"cannot standardize constant column {t.column!r}")
        rec["mean"] = float(train_vals.mean())
        rec["sd"] = sd
    elif t.kind == "max_abs_scale":
        m = float(np.abs(train_vals).max())
        if m == 0.0:
            raise DataError(f"cannot max-abs scale all-zero column {t.column!r}")
        rec["max_abs"] = m
    return rec


def _apply_one(rec: dict, columns: dict) -> tuple[list[str], list[np.ndarray]]:
    kind = rec["kind"]
    col = rec.get("column")
    if kind == "constant_one":
        n = len(next(iter(columns.values())))
        return ["bias"], [np.ones(n)]
    if col not in columns:
        raise ConfigError(f"feature transform references unknown column {col!r}")
    x = columns[col]
    if kind == "identity":
        return [col], [x.astype(float)]
    if kind == "standardize":
        return [col], [(x - rec["mean"]) / rec["sd"]]
    if kind == "max_abs_scale":
        return [col], [x / rec["max_abs"]]
    if kind == "sin_cos":
        omega = 2.0 * math.pi / rec["period"]
        return [f"sin_{col}", f"cos_{col}"], [np.sin(omega * x), np.cos(omega * x)]
    if kind == "quadratic_decorrelated":
        return [f"{col}_quad"], [quadratic_decorrelated(x)]
    raise ConfigError(f"unknown feature transform kind {kind!r}")


def _build_design(
    records: list[dict], columns: dict, leading_intercept: bool
) -> tuple[np.ndarray, list[str]]:
    names: list[str] = []
    cols: list[np.ndarray] = []
    if leading_intercept:
        n = len(next(iter(columns.values())))
        names.append("bias")
        cols.append(np.ones(n))
    for rec in records:
        rec_names, rec_cols = _apply_one(rec, columns)
        names.extend(rec_names)
        cols.append(np.column_stack(rec_cols) if len(rec_cols) > 1 else rec_cols[0])
    design = np.column_stack(cols)
    if not np.all(np.isfinite(design)):
        raise DataError("derived feature matrix contains NaN or inf")
    return design, names


def fit_apply_features(
    ds: Dataset,
    expert: Iterable[FeatureTransform | dict],
    gate: Iterable[FeatureTransform | dict],
    behavior: Iterable[FeatureTransform | dict],
    train_rows: np.ndarray | Sequence[int] | None = None,
) -> Dataset:
    """Fit normalization constants on ``train_rows`` and derive all designs.

    Constants are fitted on the training rows only but applied to every
    row. A dataset that already carries derived features is rejected;
    use :func:`apply_features` to replay fitted records on new data.
    """
    if ds.feature_records is not None:
        raise DataError("dataset already carries derived features")
    train_idx = (
        np.arange(ds.n_rows) if train_rows is None else np.asarray(train_rows, dtype=int)
    )
    if train_idx.size == 0:
        raise DataError("empty training split for feature fitting")
    records = {
        "version": 1,
        "expert": [_fit_one(t, ds.columns, train_idx) for t in feature_map(expert)],
        "gate": [
            _fit_one(t, ds.columns, train_idx)
            for t in _with_leading_constant(feature_map(gate))
        ],
        "behavior": [
            _fit_one(t, ds.columns, train_idx)
            for t in _with_leading_constant(feature_map(behavior))
        ],
    }
    return apply_features(ds, records)


def apply_features(ds: Dataset, records: dict) -> Dataset:
    """Attach design matrices to ``ds`` using previously fitted records."""
    if ds.feature_records is not None:
        raise DataError("dataset already carries derived features")
    if records.get("version") != 1:
        raise ConfigError("unsupported feature record version")
    # gate/behavior records include their own constant-one entry
    expert_design, expert_names = _build_design(
        records["expert"], ds.columns, leading_intercept=True
    )
    gate_design, gate_names = _build_design(
        records["gate"], ds.columns, leading_intercept=False
    )
    behavior_design, behavior_names = _build_design(
        records["behavior"], ds.columns, leading_intercept=False
    )
    return replace(
        ds,
        columns=dict(ds.columns),
        expert_design=expert_design,
        gate_design=gate_design,
        behavior_design=behavior_design,
        expert_names=expert_names,
        gate_names=gate_names,
        behavior_names=behavior_names,
        feature_records=records,
    )


def save_feature_records(records: dict, path: str | Path):
    Path(path).write_text(json.dumps(records, indent=2), encoding="utf-8")


def load_feature_records(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Train/test splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomFraction:
    """Uniformly random split: round(p * n) training rows."""

    p: float
    seed: int

    def train_indices(self, n: int) -> np.ndarray:
        _check_fraction(self.p)
        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(n)
        return np.sort(perm[: int(round(self.p * n))])


@dataclass(frozen=True)
class HeadTail:
    """First round(p * n) rows train, rest test; order preserved."""

    p: float

    def train_indices(self, n: int) -> np.ndarray:
        _check_fraction(self.p)
        return np.arange(int(round(self.p * n)))


@dataclass(frozen=True)
class ByIndex:
    """Explicit training indices; everything else is test."""

    train: tuple[int, ...]

    def train_indices(self, n: int) -> np.ndarray:
        idx = np.unique(np.asarray(self.train, dtype=int))
        if idx.size and (idx[0] < 0 or idx[-1] >= n):
            raise ConfigError(f"split indices out of range for {n} rows")
        return idx


@dataclass(frozen=True)
class HeadRandomTailEquispaced:
    """Random training rows from the head, equispaced test rows from the tail.

    ``n_train`` rows are drawn uniformly from the first
    ``head_fraction`` of the table; ``n_test`` equispaced rows are taken
    from the remaining tail.
    """

    head_fraction: float
    n_train: int
    n_test: int
    seed: int

    def train_indices(self, n: int) -> np.ndarray:
        _check_fraction(self.head_fraction)
        head = int(round(self.head_fraction * n))
        if self.n_train > head:
            raise ConfigError(f"cannot draw {self.n_train} rows from a head of {head}")
        rng = np.random.default_rng(self.seed)
        return np.sort(rng.permutation(head)[: self.n_train])

    def test_indices(self, n: int) -> np.ndarray:
        head = int(round(self.head_fraction * n))
        tail = n - head
        if self.n_test > tail:
            raise ConfigError(f"cannot take {self.n_test} rows from a tail of {tail}")
        pos = np.round(np.linspace(0, tail - 1, self.n_test)).astype(int)
        return head + np.unique(pos)


def split(ds: Dataset, policy) -> tuple[Dataset, Dataset]:
    """Split into disjoint (train, test) datasets per the policy."""
    if ds.n_rows == 0:
        raise DataError("cannot split an empty dataset")
    n = ds.n_rows
    train_idx = policy.train_indices(n)
    if hasattr(policy, "test_indices"):
        test_idx = policy.test_indices(n)
    else:
        mask = np.ones(n, dtype=bool)
        mask[train_idx] = False
        test_idx = np.nonzero(mask)[0]
    return ds.subset(train_idx), ds.subset(test_idx)


def _check_fraction(p: float):
    if not 0.0 < p < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {p}")
