"""Finite-population data model for completely randomized experiments.

Potential outcomes and covariates are fixed constants; the only source of
randomness is the treatment assignment vector.  This module holds the data
containers, the finite-population moment calculators (mean with divisor N,
variance/covariance with divisor N-1, per-arm moments with divisor n_z-1),
the exact assignment enumerator used as a small-N oracle, and the seeded
assignment sampler.

Reproducibility: all random draws go through a ``numpy.random.Generator``
backed by the Philox 4x64 counter-based bit generator.  Philox output is
fully specified by its 128-bit key, so results are bit-identical across
platforms and process invocations; floating-point uniforms use numpy's
standard 53-bit doubles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    EnumerationTooLargeError,
)

ENUMERATION_CAP = 10**6


def _frozen_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _frozen_matrix(values, n_rows: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d covariate matrix, got shape {arr.shape}")
    if arr.shape[0] != n_rows:
        raise DimensionError(
            f"covariate matrix has {arr.shape[0]} rows, expected {n_rows}"
        )
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PotentialTable:
    """Both potential outcomes plus covariates for every unit.

    Only simulations and oracle computations can hold this table; observed
    experiments never see both outcome columns.
    """

    y1: np.ndarray
    y0: np.ndarray
    x: np.ndarray

    def __init__(self, y1, y0, x=None):
        y1 = _frozen_vector(y1)
        y0 = _frozen_vector(y0)
        if len(y1) != len(y0):
            raise DimensionError(
                f"y1 has length {len(y1)} but y0 has length {len(y0)}"
            )
        if len(y1) < 2:
            raise DegenerateInputError("a finite population needs at least 2 units")
        if x is None:
            x = np.empty((len(y1), 0))
        x = _frozen_matrix(x, len(y1))
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return len(self.y1)

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True, eq=False)
class Assignment:
    """Binary treatment vector from a completely randomized design."""

    z: np.ndarray

    def __init__(self, z):
        arr = np.array(z, dtype=np.int64)
        if arr.ndim != 1:
            raise DimensionError(f"assignment must be a vector, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise DimensionError("assignment entries must be 0 or 1")
        n1 = int(arr.sum())
        if not 1 <= n1 <= len(arr) - 1:
            raise DimensionError(
                f"need at least one unit per arm, got n1={n1} of N={len(arr)}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "z", arr)

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1


@dataclass(frozen=True, eq=False)
class Dataset:
    """One observed experiment: assignment, observed outcomes, covariates."""

    assignment: Assignment
    y: np.ndarray
    x: np.ndarray

    def __init__(self, assignment: Assignment, y, x=None):
        y = _frozen_vector(y)
        if len(y) != assignment.n:
            raise DimensionError(
                f"outcome has length {len(y)} but assignment has {assignment.n}"
            )
        if x is None:
            x = np.empty((len(y), 0))
        x = _frozen_matrix(x, len(y))
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def z(self) -> np.ndarray:
        return self.assignment.z

    @property
    def n(self) -> int:
        return self.assignment.n

    @property
    def n1(self) -> int:
        return self.assignment.n1

    @property
    def n0(self) -> int:
        return self.assignment.n0

    @property
    def r1(self) -> float:
        return self.n1 / self.n

    @property
    def r0(self) -> float:
        return self.n0 / self.n

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.z == arm


def observe(pot: PotentialTable, a: Assignment) -> Dataset:
    """Reveal one potential outcome per unit: Y = Z*Y(1) + (1-Z)*Y(0)."""
    if a.n != pot.n:
        raise DimensionError(
            f"assignment has {a.n} units but population has {pot.n}"
        )
    y = np.where(a.z == 1, pot.y1, pot.y0)
    return Dataset(a, y, pot.x)


# ---------------------------------------------------------------------------
# Finite-population moments
# ---------------------------------------------------------------------------

def fp_mean(values) -> float:
    """Population average with divisor N."""
    return float(np.mean(np.asarray(values, dtype=float)))


def fp_var(values) -> float:
    """Finite-population variance with divisor N-1."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise DegenerateInputError("variance needs at least 2 values")
    return float(np.var(arr, ddof=1))


def fp_cov(u, v) -> float:
    """Finite-population covariance of two vectors with divisor N-1."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionError(f"shapes differ: {u.shape} vs {v.shape}")
    if u.size < 2:
        raise DegenerateInputError("covariance needs at least 2 values")
    return float(np.dot(u - u.mean(), v - v.mean()) / (u.size - 1))


def fp_cov_matrix(rows: np.ndarray) -> np.ndarray:
    """Covariance matrix of the rows of an (n, k) array, divisor n-1."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise DimensionError(f"expected (n, k) rows, got shape {rows.shape}")
    if rows.shape[0] < 2:
        raise DegenerateInputError("covariance needs at least 2 rows")
    centered = rows - rows.mean(axis=0)
    return centered.T @ centered / (rows.shape[0] - 1)


def group_mean(d: Dataset, arm: int, values=None) -> float:
    """Sample average over the units assigned to ``arm``."""
    values = d.y if values is None else np.asarray(values, dtype=float)
    picked = values[d.arm_mask(arm)]
    if picked.size == 0:
        raise DegenerateInputError(f"no units in arm {arm}")
    return float(picked.mean())


def group_moments(d: Dataset, arm: int, values=None) -> tuple[float, float]:
    """Sample mean and variance (divisor n_z - 1) within one arm."""
    values = d.y if values is None else np.asarray(values, dtype=float)
    picked = values[d.arm_mask(arm)]
    if picked.size < 2:
        raise DegenerateInputError(
            f"arm {arm} has {picked.size} unit(s); variance needs at least 2"
        )
    return float(picked.mean()), float(np.var(picked, ddof=1))


# ---------------------------------------------------------------------------
# Assignment machinery
# ---------------------------------------------------------------------------

def n_assignments(n: int, n1: int) -> int:
    return math.comb(n, n1)


def enumerate_assignments(
    n: int, n1: int, cap: int = ENUMERATION_CAP
) -> Iterator[Assignment]:
    """Yield all C(N, n1) assignments, in lexicographic order of z.

    This is the exact-randomization oracle; it refuses to run past ``cap``
    assignments because it is meant for desk-scale checks only.
    """
    if not 1 <= n1 <= n - 1:
        raise DimensionError(f"need 1 <= n1 <= N-1, got n1={n1}, N={n}")
    total = n_assignments(n, n1)
    if total > cap:
        raise EnumerationTooLargeError(
            f"C({n}, {n1}) = {total} assignments exceeds the cap of {cap}"
        )
    # Choosing the control positions in combinations order walks the z
    # vectors in ascending lexicographic order.
    for control_positions in combinations(range(n), n - n1):
        z = np.ones(n, dtype=np.int64)
        z[list(control_positions)] = 0
        yield Assignment(z)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded Philox generator; (seed, stream) pairs give disjoint streams.

    Philox is counter-based, so generators with distinct 128-bit keys never
    share output.  ``stream`` keys per-replication generators in simulation
    studies.
    """
    key = np.array([np.uint64(seed % (1 << 64)), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_assignment(rng: np.random.Generator, n: int, n1: int) -> Assignment:
    """One uniform draw from the completely randomized design.

    Implemented as a Fisher-Yates shuffle of the fixed vector with n1 ones,
    so every arrangement has probability 1 / C(N, n1).
    """
    if not 1 <= n1 <= n - 1:
        raise DimensionError(f"need 1 <= n1 <= N-1, got n1={n1}, N={n}")
    base = np.concatenate([np.ones(n1, dtype=np.int64), np.zeros(n - n1, dtype=np.int64)])
    return Assignment(rng.permutation(base))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_float(token: str, row_num: int, col: str) -> float:
    token = token.strip()
    if token == "":
        raise DataError(f"missing value in column '{col}' on data row {row_num}")
    try:
        return float(token)
    except ValueError:
        raise DataError(
            f"cannot parse '{token}' in column '{col}' on data row {row_num}"
        ) from None


def _check_header(header: Sequence[str], required: list[str], path: str) -> int:
    """Validate ``required`` prefix followed by x1..xd; return d."""
    header = [h.strip() for h in header]
    for pos, name in enumerate(required):
        if pos >= len(header) or header[pos] != name:
            raise DataError(
                f"{path}: expected column '{name}' at position {pos + 1}, "
                f"got {header[pos] if pos < len(header) else 'nothing'}"
            )
    x_names = header[len(required):]
    for k, name in enumerate(x_names, start=1):
        if name != f"x{k}":
            raise DataError(
                f"{path}: expected covariate column 'x{k}', got '{name}'"
            )
    return len(x_names)


def read_dataset_csv(path: str) -> Dataset:
    """Read an observed experiment from ``z,y,x1,...,xd`` CSV (UTF-8).

    Missing values are a hard error; z must be 0 or 1 on every row.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = _check_header(header, ["z", "y"], path)
        z_rows, y_rows, x_rows = [], [], []
        for row_num, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2 + d:
                raise DataError(
                    f"{path}: data row {row_num} has {len(row)} fields, expected {2 + d}"
                )
            z_val = row[0].strip()
            if z_val not in ("0", "1"):
                raise DataError(
                    f"{path}: column 'z' must be 0 or 1, got '{z_val}' on data row {row_num}"
                )
            z_rows.append(int(z_val))
            y_rows.append(_parse_float(row[1], row_num, "y"))
            x_rows.append(
                [_parse_float(tok, row_num, f"x{k + 1}") for k, tok in enumerate(row[2:])]
            )
    if len(y_rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows")
    x = np.array(x_rows, dtype=float) if d else None
    return Dataset(Assignment(z_rows), y_rows, x)


def read_potential_csv(path: str) -> PotentialTable:
    """Read an oracle population from ``y1,y0,x1,...,xd`` CSV (UTF-8)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = _check_header(header, ["y1", "y0"], path)
        y1_rows, y0_rows, x_rows = [], [], []
        for row_num, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2 + d:
                raise DataError(
                    f"{path}: data row {row_num} has {len(row)} fields, expected {2 + d}"
                )
            y1_rows.append(_parse_float(row[0], row_num, "y1"))
            y0_rows.append(_parse_float(row[1], row_num, "y0"))
            x_rows.append(
                [_parse_float(tok, row_num, f"x{k + 1}") for k, tok in enumerate(row[2:])]
            )
    if len(y1_rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows")
    x = np.array(x_rows, dtype=float) if d else None
    return PotentialTable(y1_rows, y0_rows, x)
