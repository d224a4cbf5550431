"""Core domain types: task datasets, fold plans, and CSV I/O.

A task dataset is one node's private sample. Fold plans drive the
cross-fitting pipeline: outer folds plus an inner bipartition of each
fold's complement. All types are immutable after construction.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataFormatError


class ModelKind(enum.Enum):
    """Which semiparametric model a dataset is fit under."""

    PLM = "plm"
    SIM = "sim"
    CATE_SIM = "cate-sim"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        norm = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == norm:
                return kind
        raise ConfigurationError(f"unknown model kind: {text!r}")

    @property
    def uses_treatment(self) -> bool:
        return self is not ModelKind.SIM

    def param_dim(self, p: int) -> int:
        """Number of free parameter coordinates for covariate dimension p."""
        return 1 if self is ModelKind.PLM else p - 1


@dataclass(frozen=True)
class TaskDataset:
    """One task's raw sample: covariates X, optional treatment T, outcome Y."""

    task_id: int
    X: np.ndarray
    Y: np.ndarray
    T: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataFormatError("X must be a 2-D matrix with at least one row")
        if Y.shape != (X.shape[0],):
            raise DataFormatError("Y length must match the number of rows of X")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.T is not None:
            T = np.asarray(self.T, dtype=float)
            if T.shape != (X.shape[0],):
                raise DataFormatError("T length must match the number of rows of X")
            if not np.all(np.isfinite(T)):
                raise DataFormatError("T contains non-finite values")
            object.__setattr__(self, "T", T)
        if not np.all(np.isfinite(X)):
            raise DataFormatError("X contains non-finite values")
        if not np.all(np.isfinite(Y)):
            raise DataFormatError("Y contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def validate_for_kind(self, kind: ModelKind) -> None:
        if kind.uses_treatment and self.T is None:
            raise ConfigurationError(
                f"task {self.task_id}: model kind {kind.value} requires a treatment column"
            )
        if kind is ModelKind.CATE_SIM:
            if not np.all(np.isin(self.T, (-1.0, 1.0))):
                raise ConfigurationError(
                    f"task {self.task_id}: treatment values must lie in {{-1, +1}}"
                )
        if kind is not ModelKind.PLM and self.p < 2:
            raise ConfigurationError("single-index models need at least 2 covariates")


@dataclass(frozen=True)
class FoldPlan:
    """Outer fold assignment plus an inner half split of each fold's complement.

    ``assignments`` holds 1-based fold labels; ``inner_halves[j]`` is the
    bipartition (first, second) of the indices outside fold j+1.
    """

    J: int
    assignments: np.ndarray
    inner_halves: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def fold_indices(self, j: int) -> np.ndarray:
        """Indices of fold j (1-based)."""
        return np.flatnonzero(self.assignments == j)

    def complement_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != j)

    def halves(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """The two halves of fold j's complement (1-based fold label)."""
        return self.inner_halves[j - 1]


def make_fold_plan(n: int, J: int, seed: int) -> FoldPlan:
    """Build a deterministic fold plan: seeded shuffle, round-robin folds,
    alternating positions of the shuffled complement for the inner halves.
    """
    if n < 2 * J:
        raise ConfigurationError(f"need n >= 2*J to form folds (n={n}, J={J})")
    if J < 1:
        raise ConfigurationError(f"fold count must be positive (J={J})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=int)
    for pos, idx in enumerate(order):
        assignments[idx] = pos % J + 1
    halves = []
    for j in range(1, J + 1):
        comp = order[assignments[order] != j]
        halves.append((comp[0::2].copy(), comp[1::2].copy()))
    return FoldPlan(J=J, assignments=assignments, inner_halves=tuple(halves))


@dataclass(frozen=True)
class ParamEstimate:
    """A parameter vector; single-index estimates pin coordinate 1 to exactly 1."""

    theta: np.ndarray
    kind: ModelKind

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ConfigurationError("parameter estimate contains non-finite values")
        if self.kind is ModelKind.PLM:
            if theta.shape != (1,):
                raise ConfigurationError("partial-linear estimate must be a length-1 vector")
        else:
            if theta.ndim != 1 or theta.shape[0] < 2:
                raise ConfigurationError("single-index estimate must have length >= 2")
            if theta[0] != 1.0:
                raise ConfigurationError("single-index estimate must have first coordinate 1")
        object.__setattr__(self, "theta", theta)

    @property
    def free(self) -> np.ndarray:
        """The free coordinates (everything after the pinned first one)."""
        if self.kind is ModelKind.PLM:
            return self.theta
        return self.theta[1:]


def pin_first_coordinate(theta: np.ndarray) -> np.ndarray:
    """Rescale a vector so its first coordinate equals exactly 1."""
    theta = np.asarray(theta, dtype=float)
    if abs(theta[0]) < 1e-12:
        raise ConfigurationError("cannot pin: first coordinate is numerically zero")
    out = theta / theta[0]
    out[0] = 1.0
    return out


@dataclass(frozen=True)
class SimilarityConfig:
    """Similarity knobs describing a simulated multi-task instance."""

    eps_task: float
    delta_task: float
    eps_nuis: float
    delta_nuis: float

    def __post_init__(self):
        for name in ("eps_task", "eps_nuis"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("delta_task", "delta_nuis"):
            v = getattr(self, name)
            if v < 0.0:
                raise ConfigurationError(f"{name} must be nonnegative, got {v}")


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataFormatError(f"row {row}: non-numeric value {cell!r} in column {col!r}") from None
    if not np.isfinite(value):
        raise DataFormatError(f"row {row}: non-finite value {cell!r} in column {col!r}")
    return value


def read_dataset_csv(path, task_id: int = 0) -> TaskDataset:
    """Read a task dataset from CSV with columns x1..xp, optional t, and y."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file: missing header row") from None
        header = [h.strip() for h in header]
        x_cols = [h for h in header if h.startswith("x")]
        expected = [f"x{i}" for i in range(1, len(x_cols) + 1)]
        if x_cols != expected or not x_cols:
            raise DataFormatError(f"covariate columns must be named x1..xp in order, got {x_cols}")
        has_t = "t" in header
        if "y" not in header:
            raise DataFormatError("missing required column 'y'")
        allowed = set(expected) | {"y"} | ({"t"} if has_t else set())
        extra = [h for h in header if h not in allowed]
        if extra:
            raise DataFormatError(f"unrecognized columns: {extra}")
        col_pos = {name: header.index(name) for name in header}

        xs, ts, ys = [], [], []
        for row_idx, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataFormatError(
                    f"row {row_idx}: expected {len(header)} cells, got {len(row)}"
                )
            xs.append([_parse_float(row[col_pos[c]], row_idx, c) for c in expected])
            if has_t:
                ts.append(_parse_float(row[col_pos["t"]], row_idx, "t"))
            ys.append(_parse_float(row[col_pos["y"]], row_idx, "y"))
    if not ys:
        raise DataFormatError("no data rows")
    return TaskDataset(
        task_id=task_id,
        X=np.asarray(xs, dtype=float),
        Y=np.asarray(ys, dtype=float),
        T=np.asarray(ts, dtype=float) if has_t else None,
    )


def write_dataset_csv(dataset: TaskDataset, path) -> None:
    """Write a task dataset as CSV; floats use shortest round-trip formatting."""
    header = [f"x{i}" for i in range(1, dataset.p + 1)]
    if dataset.T is not None:
        header.append("t")
    header.append("y")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(v) for v in dataset.X[i]]
            if dataset.T is not None:
                row.append(repr(dataset.T[i]))
            row.append(repr(dataset.Y[i]))
            writer.writerow(row)
