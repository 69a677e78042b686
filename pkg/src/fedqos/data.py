"""QoS matrix ingestion and reproducible train/valid/test splitting.

Input matrices are dense whitespace-delimited text, one user per row, one
item per column, matching the published WSDREAM distribution.  Entries
below zero (failed invocations) or equal to the configured missing mark
are treated as unobserved.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyInputError,
    ShapeError,
    TokenParseError,
)

# WSDREAM-scale constants used by the named splits below.
WSDREAM_USERS = 339
WSDREAM_ITEMS = 5825

# Named split fractions: train, valid, test.
TABLE_SPLITS: dict[str, tuple[float, float, float]] = {
    "RT1": (0.01, 0.04, 0.95),
    "RT2": (0.02, 0.08, 0.90),
    "RT3": (0.03, 0.12, 0.85),
    "RT4": (0.04, 0.16, 0.80),
    "TP1": (0.01, 0.04, 0.95),
    "TP2": (0.02, 0.08, 0.90),
    "TP3": (0.03, 0.12, 0.85),
    "TP4": (0.04, 0.16, 0.80),
}


@dataclass(frozen=True)
class QosMatrix:
    """Dense user x item observation matrix with an explicit observed mask."""

    values: np.ndarray    # (n_users, n_items) float64
    observed: np.ndarray  # (n_users, n_items) bool
    missing_mark: float = -1.0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"matrix must be 2-D, got ndim={self.values.ndim}")
        if self.values.shape != self.observed.shape:
            raise ShapeError("values and observed mask shapes differ")
        if self.n_users == 0 or self.n_items == 0:
            raise EmptyInputError("matrix has no rows or no columns")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("matrix contains non-finite values")

    @property
    def n_users(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    @property
    def observed_count(self) -> int:
        """Number of observed entries (E)."""
        return int(self.observed.sum())

    def observed_triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Observed entries as (users, items, values) in user-major order."""
        users, items = np.nonzero(self.observed)
        return users.astype(np.int64), items.astype(np.int64), self.values[users, items]


@dataclass(frozen=True)
class SplitSpec:
    """Named split with fractions summing to one and a shuffle seed."""

    name: str
    train_frac: float
    valid_frac: float
    test_frac: float
    seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.valid_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total!r}, expected 1")
        if min(self.train_frac, self.valid_frac, self.test_frac) < 0:
            raise ConfigError("split fractions must be non-negative")


def named_split(name: str, seed: int = 0) -> SplitSpec:
    """Look up one of the standard RT1..RT4 / TP1..TP4 splits."""
    try:
        tr, va, te = TABLE_SPLITS[name]
    except KeyError:
        raise ConfigError(f"unknown split name {name!r}; expected one of {sorted(TABLE_SPLITS)}")
    return SplitSpec(name=name, train_frac=tr, valid_frac=va, test_frac=te, seed=seed)


@dataclass(frozen=True)
class InteractionSet:
    """Flat (user, item, value) triples for one role, with a per-user index."""

    users: np.ndarray   # (n,) int64
    items: np.ndarray   # (n,) int64
    values: np.ndarray  # (n,) float64
    role: str
    n_users: int
    n_items: int
    _user_index: dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise ShapeError("triple arrays must have equal length")
        # CSR-style index: positions of each user's triples, built once.
        index: dict[int, np.ndarray] = {}
        if len(self.users):
            order = np.argsort(self.users, kind="stable")
            sorted_users = self.users[order]
            boundaries = np.nonzero(np.diff(sorted_users))[0] + 1
            starts = np.concatenate(([0], boundaries))
            ends = np.concatenate((boundaries, [len(sorted_users)]))
            for s, e in zip(starts, ends):
                index[int(sorted_users[s])] = order[s:e]
        object.__setattr__(self, "_user_index", index)

    def __len__(self) -> int:
        return len(self.users)

    def for_user(self, user_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Item ids and values held by one user (empty arrays if none)."""
        pos = self._user_index.get(int(user_id))
        if pos is None:
            return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
        return self.items[pos], self.values[pos]

    def pair_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))


def load_matrix(path, missing_mark: float = -1.0,
                treat_negative_as_missing: bool = True) -> QosMatrix:
    """Load a dense whitespace-delimited matrix file.

    Raises :class:`DataFormatError` for ragged rows, :class:`TokenParseError`
    for non-numeric tokens (both with positions), and
    :class:`EmptyInputError` for an empty file.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise EmptyInputError(f"matrix file {os.fspath(path)!r} is empty")

    try:
        values = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError:
        values = _parse_with_diagnostics(lines)

    observed = np.ones(values.shape, dtype=bool)
    observed &= values != missing_mark
    if treat_negative_as_missing:
        observed &= values >= 0
    return QosMatrix(values=values, observed=observed, missing_mark=missing_mark)


def _parse_with_diagnostics(lines: list[str]) -> np.ndarray:
    """Slow-path parser that reports exactly where a file is malformed."""
    rows = []
    width = None
    for r, line in enumerate(lines):
        tokens = line.split()
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise DataFormatError(
                f"ragged matrix: expected {width} columns, found {len(tokens)}", row=r)
        parsed = []
        for c, tok in enumerate(tokens):
            try:
                parsed.append(float(tok))
            except ValueError:
                raise TokenParseError(f"non-numeric token {tok!r}", row=r, col=c)
        rows.append(parsed)
    return np.asarray(rows, dtype=np.float64)


def write_matrix(matrix: QosMatrix, path) -> None:
    """Write a matrix back to dense text; unobserved entries get the missing mark."""
    out = np.where(matrix.observed, matrix.values, matrix.missing_mark)
    with open(path, "w", encoding="ascii") as fh:
        for row in out:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def split(matrix: QosMatrix, spec: SplitSpec,
          stratified: bool = False) -> tuple[InteractionSet, InteractionSet, InteractionSet]:
    """Shuffle observed entries with the spec seed and assign roles by fraction.

    Counts are exact: train gets floor(E * train_frac), valid gets
    floor(E * valid_frac), test gets the remainder.  With ``stratified``
    the same rule is applied within each user's entries instead.
    """
    users, items, values = matrix.observed_triples()
    total = len(users)
    if total < 3:
        raise EmptyInputError(f"need at least 3 observed entries to split, have {total}")

    rng = seeding.stream(spec.seed, seeding.SPLIT)
    roles = np.empty(total, dtype=np.int8)  # 0 train, 1 valid, 2 test
    if stratified:
        perm = np.arange(total)
        for u in range(matrix.n_users):
            pos = np.nonzero(users == u)[0]
            if len(pos) == 0:
                continue
            local = pos[rng.permutation(len(pos))]
            n_tr = int(len(local) * spec.train_frac)
            n_va = int(len(local) * spec.valid_frac)
            roles[local[:n_tr]] = 0
            roles[local[n_tr:n_tr + n_va]] = 1
            roles[local[n_tr + n_va:]] = 2
        order = perm
    else:
        order = rng.permutation(total)
        n_tr = int(total * spec.train_frac)
        n_va = int(total * spec.valid_frac)
        roles[order[:n_tr]] = 0
        roles[order[n_tr:n_tr + n_va]] = 1
        roles[order[n_tr + n_va:]] = 2

    def take(role_code: int, role_name: str) -> InteractionSet:
        mask = roles == role_code
        return InteractionSet(
            users=users[mask], items=items[mask], values=values[mask],
            role=role_name, n_users=matrix.n_users, n_items=matrix.n_items)

    return take(0, "train"), take(1, "valid"), take(2, "test")


@dataclass(frozen=True)
class ClientData:
    """One user's private slice of an interaction set."""

    user_id: int
    item_ids: np.ndarray
    values: np.ndarray

    @property
    def num_interactions(self) -> int:
        """The contribution weight of this client in global aggregation."""
        return len(self.item_ids)


def partition_by_user(interactions: InteractionSet) -> list[ClientData]:
    """Group triples per user; users with no triples get empty slices."""
    out = []
    for u in range(interactions.n_users):
        item_ids, values = interactions.for_user(u)
        out.append(ClientData(user_id=u, item_ids=item_ids, values=values))
    return out


def write_manifest(path, *sets: InteractionSet) -> None:
    """Audit manifest: one "user item value role" line per triple.

    Ordering is deterministic: user-major, then item, with roles interleaved
    wherever their entries fall in that order.
    """
    records = []
    for iset in sets:
        for u, i, v in zip(iset.users, iset.items, iset.values):
            records.append((int(u), int(i), float(v), iset.role))
    records.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="ascii") as fh:
        for u, i, v, role in records:
            fh.write(f"{u} {i} {repr(v)} {role}\n")


def read_manifest(path, n_users: int, n_items: int) -> dict[str, InteractionSet]:
    """Read a manifest back into one InteractionSet per role."""
    by_role: dict[str, list[tuple[int, int, float]]] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            u, i, v, role = line.split()
            by_role.setdefault(role, []).append((int(u), int(i), float(v)))
    out = {}
    for role, triples in by_role.items():
        out[role] = InteractionSet(
            users=np.asarray([t[0] for t in triples], dtype=np.int64),
            items=np.asarray([t[1] for t in triples], dtype=np.int64),
            values=np.asarray([t[2] for t in triples], dtype=np.float64),
            role=role, n_users=n_users, n_items=n_items)
    return out
