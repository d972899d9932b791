"""Ingestion, validation, and persistence of ultra-sparse observation matrices.

The central type is :class:`ObservedMatrix`, a triplet store with explicit
mask semantics: an entry is observed if and only if it appears in the
triplet list, so a stored value of 0.0 is a real observation, distinct
from a missing cell.

Three on-disk formats are supported:

* ``coo-text``: whitespace-separated ``row col value`` lines, 0-based
  indices, one triplet per line, ``#`` starts a comment.  ``save_triplets``
  writes a ``# n=<n> d=<d>`` header so dimensions round-trip.
* ``movielens-csv``: header ``userId,movieId,rating,timestamp``; 1-based
  external ids are compacted to dense 0-based internal ids and the id map
  is persisted alongside the input as ``<path>.idmap.json``; the timestamp
  column is dropped.
* ``genotype-dense``: one row per site, space-separated ``{0, 1, .}``
  where ``.`` is missing; values are remapped 0 -> 1 and 1 -> 2 so that a
  stored 0 never collides with "missing" downstream.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .rng import stream

FORMATS = ("coo-text", "movielens-csv", "genotype-dense")


@dataclass(frozen=True)
class ObservedMatrix:
    """Sparse triplet store of the observed entries of an n x d matrix.

    Arrays are read-only after construction; the object is safe to share
    across threads.  Indices are uint64, values float64.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for arr in (self.rows, self.cols, self.values):
            arr.setflags(write=False)

    @property
    def m(self):
        """Number of observed entries."""
        return int(self.values.size)

    def to_dense(self):
        """Dense value matrix with 0.0 at missing cells (mask lost; use
        :meth:`mask_dense` alongside when the distinction matters)."""
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.values
        return out

    def mask_dense(self):
        """Dense boolean mask of observed cells."""
        out = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def with_values(self, values):
        """Copy with the same mask but new values (used by noise injection)."""
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise DataError("replacement values must match the observation count")
        return ObservedMatrix(self.n_rows, self.n_cols, self.rows, self.cols, values)


@dataclass(frozen=True)
class SplitSpec:
    """Record of a train/holdout partition of an ObservedMatrix."""

    train_fraction: float
    seed: int
    holdout: np.ndarray = field(repr=False)  # (k, 3) array of (row, col, value)


def from_triplets(n_rows, n_cols, rows, cols, values):
    """Validate and assemble an :class:`ObservedMatrix`.

    Raises :class:`DataError` on duplicate (row, col) pairs or indices
    outside ``[0, n) x [0, d)``.
    """
    rows = np.ascontiguousarray(rows, dtype=np.uint64)
    cols = np.ascontiguousarray(cols, dtype=np.uint64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
        raise DataError("rows, cols, values must be 1-d arrays of equal length")
    if n_rows < 0 or n_cols < 0:
        raise DataError("matrix dimensions must be nonnegative")
    if rows.size:
        if rows.max() >= n_rows or cols.max() >= n_cols:
            k = int(np.argmax((rows >= n_rows) | (cols >= n_cols)))
            raise DataError(
                f"index ({int(rows[k])}, {int(cols[k])}) out of range for "
                f"a {n_rows} x {n_cols} matrix"
            )
        keys = rows * np.uint64(n_cols) + cols
        uniq, counts = np.unique(keys, return_counts=True)
        if uniq.size != keys.size:
            dup = int(uniq[np.argmax(counts > 1)])
            raise DataError(
                f"duplicate entry at ({dup // n_cols}, {dup % n_cols}); "
                "the estimators assume at most one observation per cell"
            )
    return ObservedMatrix(int(n_rows), int(n_cols), rows, cols, values)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_triplets(path, format="coo-text", n_rows=None, n_cols=None):
    """Load an :class:`ObservedMatrix` from ``path`` in the named format.

    ``n_rows`` / ``n_cols`` override the dimensions when the file itself
    does not carry them (otherwise they are inferred as max index + 1).
    """
    if format == "coo-text":
        return _load_coo_text(path, n_rows, n_cols)
    if format == "movielens-csv":
        return _load_movielens(path)
    if format == "genotype-dense":
        return _load_genotype(path)
    raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")


def _load_coo_text(path, n_rows=None, n_cols=None):
    rows, cols, values = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                header = _parse_header(text)
                n_rows = n_rows if n_rows is not None else header.get("n")
                n_cols = n_cols if n_cols is not None else header.get("d")
                continue
            parts = text.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'row col value', got {text!r}")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if r < 0 or c < 0:
                raise DataError(f"{path}:{lineno}: negative index")
            rows.append(r)
            cols.append(c)
            values.append(v)
    if n_rows is None:
        n_rows = max(rows, default=-1) + 1
    if n_cols is None:
        n_cols = max(cols, default=-1) + 1
    return from_triplets(int(n_rows), int(n_cols), rows, cols, values)


def _parse_header(text):
    out = {}
    for token in text.lstrip("#").split():
        if "=" in token:
            key, _, val = token.partition("=")
            try:
                out[key] = int(val)
            except ValueError:
                pass
    return out


def _load_movielens(path):
    users, movies, ratings = [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expect = ["userId", "movieId", "rating", "timestamp"]
        if [h.strip() for h in header[:4]] != expect:
            raise DataError(f"{path}: expected header {','.join(expect)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                users.append(int(row[0]))
                movies.append(int(row[1]))
                ratings.append(float(row[2]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    users = np.asarray(users, dtype=np.int64)
    movies = np.asarray(movies, dtype=np.int64)
    user_ids, rows = np.unique(users, return_inverse=True)
    movie_ids, cols = np.unique(movies, return_inverse=True)
    with open(f"{path}.idmap.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"user_ids": user_ids.tolist(), "movie_ids": movie_ids.tolist()},
            fh,
        )
    return from_triplets(user_ids.size, movie_ids.size, rows, cols, ratings)


def _load_genotype(path):
    rows, cols, values = [], [], []
    width = None
    n_lines = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise DataError(f"{path}:{lineno}: ragged row ({len(tokens)} vs {width})")
            for c, tok in enumerate(tokens):
                if tok == ".":
                    continue
                if tok == "0":
                    values.append(1.0)  # genotype 0 maps to 1
                elif tok == "1":
                    values.append(2.0)  # genotype 1 maps to 2
                else:
                    raise DataError(f"{path}:{lineno}: genotype must be 0, 1, or '.', got {tok!r}")
                rows.append(n_lines)
                cols.append(c)
            n_lines += 1
    return from_triplets(n_lines, width or 0, rows, cols, values)


# ---------------------------------------------------------------------------
# Saving and splitting
# ---------------------------------------------------------------------------

def save_triplets(m, path):
    """Write ``m`` as coo-text; round-trips bit-exactly through ``load_triplets``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={m.n_rows} d={m.n_cols}\n")
        for r, c, v in zip(m.rows, m.cols, m.values):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def split(m, fraction, seed):
    """Partition the triplets uniformly at random into train and holdout.

    Deterministic given ``seed``; the train part holds exactly
    ``round(fraction * m.m)`` triplets and the two parts are disjoint.
    Returns ``(train, holdout)``, both :class:`ObservedMatrix` over the
    original dimensions.
    """
    if not 0 < fraction <= 1:
        raise DataError("train fraction must lie in (0, 1]")
    n_train = int(round(fraction * m.m))
    perm = stream(seed, 0x5911).permutation(m.m)
    take = np.sort(perm[:n_train])
    drop = np.sort(perm[n_train:])
    train = ObservedMatrix(m.n_rows, m.n_cols, m.rows[take], m.cols[take], m.values[take])
    holdout = ObservedMatrix(m.n_rows, m.n_cols, m.rows[drop], m.cols[drop], m.values[drop])
    return train, holdout


def split_spec(m, fraction, seed):
    """Like :func:`split` but returns ``(train, SplitSpec)`` for persistence."""
    train, holdout = split(m, fraction, seed)
    triples = np.column_stack(
        [holdout.rows.astype(np.float64), holdout.cols.astype(np.float64), holdout.values]
    )
    return train, SplitSpec(train_fraction=float(fraction), seed=int(seed), holdout=triples)
