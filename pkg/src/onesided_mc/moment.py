"""Second-moment estimation on the observed co-occurrence set.

Given a sparse observation matrix, the empirical second moment is only
defined on the index set Omega where columns co-occur within at least one
row.  Two normalizations are implemented:

* the self-normalized estimator (``hajek``), which divides each entry of
  the empirical second moment by its realized co-occurrence count and is
  exactly unbiased on Omega for any sampling probability;
* the inverse-probability estimator (``horvitz_thompson``), which divides
  by the expected counts n*p (diagonal) and n*p^2 (off-diagonal).

The module also carries the variance approximations for both estimators,
a first-order-expansion diagnostic for the ratio statistic, and a
spectral concentration diagnostic for the weighted projection onto Omega.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import DataError, NumericalError
from .rng import stream
from .sparse_io import ObservedMatrix

#: Abort co-occurrence construction when the projected number of
#: within-row pairs exceeds this cap (dense rows blow up quadratically).
DEFAULT_PAIR_CAP = 2_000_000_000


@dataclass(frozen=True)
class Cooccurrence:
    """Per-column and per-pair observation counts of an ObservedMatrix.

    ``diag_counts[i]`` is the number of observed entries in column ``i``.
    The off-diagonal counts are stored for pairs ``i < j`` only (the
    structure is symmetric); ``off_counts[k]`` is the number of rows in
    which both columns ``off_i[k]`` and ``off_j[k]`` are observed.
    """

    d: int
    diag_counts: np.ndarray
    off_i: np.ndarray
    off_j: np.ndarray
    off_counts: np.ndarray

    def __post_init__(self):
        for arr in (self.diag_counts, self.off_i, self.off_j, self.off_counts):
            arr.setflags(write=False)

    @property
    def omega_size(self):
        """Number of Omega entries, counting each unordered pair once."""
        return int(np.count_nonzero(self.diag_counts)) + int(self.off_i.size)

    def pair_count(self, i, j):
        """Co-occurrence count for columns (i, j); 0 when outside Omega."""
        if i == j:
            return int(self.diag_counts[i])
        a, b = min(i, j), max(i, j)
        keys = self.off_i * np.uint64(self.d) + self.off_j
        k = np.searchsorted(keys, np.uint64(a) * np.uint64(self.d) + np.uint64(b))
        if k < keys.size and keys[k] == a * self.d + b:
            return int(self.off_counts[k])
        return 0


@dataclass(frozen=True)
class SecondMomentEstimate:
    """A second-moment estimate restricted to Omega.

    ``diag[i]`` is NaN when column ``i`` was never observed (outside
    Omega); off-diagonal values exist exactly for the stored ``i < j``
    pairs.  ``q`` is the off-diagonal observation probability
    ``1 - (1 - p^2)^n`` implied by ``(p, n_rows)``.
    """

    d: int
    diag: np.ndarray
    off_i: np.ndarray
    off_j: np.ndarray
    off_values: np.ndarray
    estimator_kind: str
    p: float
    q: float
    n_rows: Optional[int] = None

    def __post_init__(self):
        for arr in (self.diag, self.off_i, self.off_j, self.off_values):
            arr.setflags(write=False)
        if self.estimator_kind not in ("hajek", "horvitz-thompson"):
            raise DataError(f"unknown estimator kind {self.estimator_kind!r}")
        if self.n_rows is not None:
            expected = omega_probabilities(self.n_rows, self.d, self.p)[1]
            if abs(expected - self.q) > 1e-12:
                raise DataError(
                    f"stored q={self.q!r} inconsistent with p={self.p!r}, n={self.n_rows}"
                )

    @property
    def diag_observed(self):
        return ~np.isnan(self.diag)

    def to_dense(self):
        """Dense symmetric matrix with 0.0 outside Omega (pair mask lost)."""
        out = np.zeros((self.d, self.d))
        obs = self.diag_observed
        out[np.flatnonzero(obs), np.flatnonzero(obs)] = self.diag[obs]
        out[self.off_i, self.off_j] = self.off_values
        out[self.off_j, self.off_i] = self.off_values
        return out

    def omega_mask(self):
        """Dense boolean Omega membership (symmetric)."""
        out = np.zeros((self.d, self.d), dtype=bool)
        idx = np.flatnonzero(self.diag_observed)
        out[idx, idx] = True
        out[self.off_i, self.off_j] = True
        out[self.off_j, self.off_i] = True
        return out


@dataclass(frozen=True)
class BiasReport:
    """Squared deviation of an estimate from a reference T, split over Omega."""

    sum_sq_bias_diag: float
    sum_sq_bias_offdiag: float
    n_diag: int
    n_offdiag: int
    per_entry: Optional[dict] = None
    reference: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def total(self):
        return self.sum_sq_bias_diag + self.sum_sq_bias_offdiag

    @property
    def mean_sq_bias(self):
        count = self.n_diag + self.n_offdiag
        return self.total / count if count else 0.0

    def to_json_dict(self):
        out = {
            "sum_sq_bias_diag": self.sum_sq_bias_diag,
            "sum_sq_bias_offdiag": self.sum_sq_bias_offdiag,
            "n_diag": self.n_diag,
            "n_offdiag": self.n_offdiag,
            "mean_sq_bias": self.mean_sq_bias,
        }
        if self.per_entry is not None:
            out["per_entry"] = [[int(i), int(j), float(v)] for (i, j), v in self.per_entry.items()]
        return out


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _row_pairs(m, pair_cap=DEFAULT_PAIR_CAP):
    """All within-row column pairs of ``m`` as (lo, hi, value product) arrays.

    Rows with k observed entries contribute k*(k-1)/2 pairs; the projected
    total is checked against ``pair_cap`` before any allocation.
    """
    order = np.argsort(m.rows, kind="stable")
    cols_s = m.cols[order]
    vals_s = m.values[order]
    _, starts, counts = np.unique(m.rows[order], return_index=True, return_counts=True)
    projected = float(np.sum(counts * (counts - 1) // 2))
    if projected > pair_cap:
        raise DataError(
            f"co-occurrence would produce ~{projected:.2e} pairs, above the cap "
            f"{pair_cap:.0e}; raise pair_cap explicitly if this is intended"
        )
    lo_parts, hi_parts, prod_parts = [], [], []
    for k in np.unique(counts):
        if k < 2:
            continue
        sel = counts == k
        idx = starts[sel][:, None] + np.arange(k)[None, :]
        cmat = cols_s[idx]
        vmat = vals_s[idx]
        pa, pb = np.triu_indices(int(k), 1)
        a = cmat[:, pa].ravel()
        b = cmat[:, pb].ravel()
        lo_parts.append(np.minimum(a, b))
        hi_parts.append(np.maximum(a, b))
        prod_parts.append((vmat[:, pa] * vmat[:, pb]).ravel())
    if not lo_parts:
        empty_u = np.empty(0, dtype=np.uint64)
        return empty_u, empty_u.copy(), np.empty(0)
    return (
        np.concatenate(lo_parts),
        np.concatenate(hi_parts),
        np.concatenate(prod_parts),
    )


def cooccurrence(m, pair_cap=DEFAULT_PAIR_CAP):
    """Build the co-occurrence counts of ``m`` from its within-row pairs."""
    d = m.n_cols
    diag_counts = np.bincount(m.cols.astype(np.int64), minlength=d)
    lo, hi, _ = _row_pairs(m, pair_cap)
    keys = lo * np.uint64(d) + hi
    uniq, counts = np.unique(keys, return_counts=True)
    return Cooccurrence(
        d=d,
        diag_counts=diag_counts,
        off_i=(uniq // np.uint64(d)).astype(np.uint64),
        off_j=(uniq % np.uint64(d)).astype(np.uint64),
        off_counts=counts.astype(np.int64),
    )


def estimate_p(m):
    """Empirical sampling probability m / (n*d), clamped into (0, 1)."""
    cells = m.n_rows * m.n_cols
    if cells == 0:
        raise DataError("cannot estimate p for an empty matrix shape")
    if m.m == 0:
        raise DataError("cannot estimate p with zero observations")
    return float(min(max(m.m / cells, np.finfo(float).tiny), 1.0 - 1e-12))


def omega_probabilities(n, d, p):
    """Closed-form membership probabilities (diagonal, off-diagonal).

    Diagonal entries of the co-occurrence structure are nonzero with
    probability 1 - (1-p)^n, off-diagonal with 1 - (1-p^2)^n; both are
    evaluated in log space so tiny p does not lose precision.
    """
    if not 0 < p <= 1:
        raise DataError("sampling probability must lie in (0, 1]")
    if n == 0:
        return 0.0, 0.0
    if p == 1:
        return 1.0, 1.0
    diag = -math.expm1(n * math.log1p(-p))
    off = -math.expm1(n * math.log1p(-p * p))
    return diag, off


def hajek(m, co=None, p=None, pair_cap=DEFAULT_PAIR_CAP):
    """Self-normalized second-moment estimate of ``m`` on Omega.

    Each diagonal entry is the column's mean of squared observed values;
    each off-diagonal entry is the mean of the within-row value products
    over the rows where both columns are observed.  Entries with zero
    count are absent (outside Omega), never stored as 0.

    ``p`` is only metadata here (it fixes the stored ``q``); when omitted
    it defaults to :func:`estimate_p`.
    """
    if co is None:
        co = cooccurrence(m, pair_cap)
    if p is None:
        p = estimate_p(m)
    d = m.n_cols
    diag_sums = np.bincount(m.cols.astype(np.int64), weights=m.values**2, minlength=d)
    with np.errstate(invalid="ignore"):
        diag = np.where(co.diag_counts > 0, diag_sums / np.maximum(co.diag_counts, 1), np.nan)
    off_sums = _pair_sums(m, co, pair_cap)
    off_values = off_sums / co.off_counts
    q = omega_probabilities(m.n_rows, d, p)[1]
    return SecondMomentEstimate(
        d=d, diag=diag, off_i=co.off_i, off_j=co.off_j, off_values=off_values,
        estimator_kind="hajek", p=float(p), q=float(q), n_rows=m.n_rows,
    )


def horvitz_thompson(m, co=None, p=0.5, pair_cap=DEFAULT_PAIR_CAP):
    """Inverse-probability second-moment estimate on Omega.

    Divides column sums of squares by n*p and pair product sums by n*p^2.
    Entries are restricted to Omega so the two estimators are comparable
    on the same support.
    """
    if not 0 < p <= 1:
        raise DataError("sampling probability must lie in (0, 1]")
    if co is None:
        co = cooccurrence(m, pair_cap)
    d = m.n_cols
    n = m.n_rows
    diag_sums = np.bincount(m.cols.astype(np.int64), weights=m.values**2, minlength=d)
    diag = np.where(co.diag_counts > 0, diag_sums / (n * p), np.nan)
    off_sums = _pair_sums(m, co, pair_cap)
    off_values = off_sums / (n * p * p)
    q = omega_probabilities(n, d, p)[1]
    return SecondMomentEstimate(
        d=d, diag=diag, off_i=co.off_i, off_j=co.off_j, off_values=off_values,
        estimator_kind="horvitz-thompson", p=float(p), q=float(q), n_rows=n,
    )


def _pair_sums(m, co, pair_cap):
    """Sum of within-row value products per (i < j) pair of ``co``."""
    d = m.n_cols
    lo, hi, prod = _row_pairs(m, pair_cap)
    if lo.size == 0:
        return np.zeros(co.off_i.size)
    keys = lo * np.uint64(d) + hi
    co_keys = co.off_i * np.uint64(d) + co.off_j
    slot = np.searchsorted(co_keys, keys)
    if np.any(slot >= co_keys.size) or np.any(co_keys[slot] != keys):
        raise DataError("co-occurrence structure was not built from this matrix")
    return np.bincount(slot, weights=prod, minlength=co_keys.size)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def bias_on_omega(est, truth, per_entry=False):
    """Sum of squared deviations between ``est`` and ``truth`` over Omega.

    Diagonal and off-diagonal contributions are reported separately;
    each unordered off-diagonal pair is counted once.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != (est.d, est.d):
        raise DataError(f"truth must be {est.d} x {est.d}, got {truth.shape}")
    obs = est.diag_observed
    idx = np.flatnonzero(obs)
    diag_diff = est.diag[idx] - truth[idx, idx]
    off_diff = est.off_values - truth[est.off_i, est.off_j]
    entries = None
    if per_entry:
        entries = {(int(i), int(i)): float(b) for i, b in zip(idx, diag_diff)}
        entries.update(
            {(int(i), int(j)): float(b) for i, j, b in zip(est.off_i, est.off_j, off_diff)}
        )
    return BiasReport(
        sum_sq_bias_diag=float(np.sum(diag_diff**2)),
        sum_sq_bias_offdiag=float(np.sum(off_diff**2)),
        n_diag=int(idx.size),
        n_offdiag=int(est.off_i.size),
        per_entry=entries,
        reference=truth,
    )


def variance_approx_diag(m_true, p, i):
    """Leading terms of the diagonal variance of the self-normalized estimator.

    Returns (1-p)/(n p) * (mean of M_{k,i}^4) - (1-p)/(n p) * T_ii^2; the
    O(1/(n p)) remainder is excluded.
    """
    if not 0 < p <= 1:
        raise DataError("sampling probability must lie in (0, 1]")
    col = np.asarray(m_true, dtype=np.float64)[:, i]
    n = col.size
    t_ii = np.mean(col**2)
    return float((1 - p) / (n * p) * (np.mean(col**4) - t_ii**2))


def variance_approx_offdiag(m_true, i, j):
    """Leading terms of the off-diagonal conditional variance.

    Returns (1/n) * sum_k M_{k,i}^2 M_{k,j}^2 - T_ij^2 (remainder of
    order (log d)^2 / d excluded).  The value does not depend on p.
    """
    if i == j:
        raise DataError("off-diagonal variance requires i != j")
    m_true = np.asarray(m_true, dtype=np.float64)
    a, b = m_true[:, i], m_true[:, j]
    t_ij = np.mean(a * b)
    return float(np.mean(a**2 * b**2) - t_ij**2)


def variance_ht(m_true, p, i, j):
    """Exact variance of the inverse-probability estimator at entry (i, j)."""
    if not 0 < p <= 1:
        raise DataError("sampling probability must lie in (0, 1]")
    m_true = np.asarray(m_true, dtype=np.float64)
    n = m_true.shape[0]
    if i == j:
        return float((1 - p) / (n * n * p) * np.sum(m_true[:, i] ** 4))
    s = np.sum(m_true[:, i] ** 2 * m_true[:, j] ** 2)
    return float((1 - p * p) / (n * n * p * p) * s)


class TaylorCheck(NamedTuple):
    """Result of :func:`taylor_expansion_check`.

    ``mean_abs_err`` is the mean absolute gap between the ratio statistic
    and its first-order expansion; ``var_abs_err`` the absolute gap
    between the Monte-Carlo variance and the closed-form approximation;
    ``skipped`` counts mask draws with an empty column, excluded from
    both averages.
    """

    mean_abs_err: float
    var_abs_err: float
    skipped: int


def _expansion_terms(t_ii, a, b, n, p):
    # zeroth term plus the two partial-derivative terms of the ratio A/B
    # around (E[A], E[B]) = (n p t_ii, n p)
    eb = n * p
    return t_ii + (a - eb * t_ii) / eb - t_ii * (b - eb) / eb


def taylor_expansion_check(m_true, p, i, trials, seed=0):
    """Monte-Carlo check of the first-order expansion of a diagonal entry.

    Each trial draws a fresh Bernoulli(p) mask for column ``i`` from its
    own counter-based stream, compares the realized ratio statistic
    against the expansion (remainder term excluded), and accumulates the
    variance of the ratio for comparison with
    :func:`variance_approx_diag`.
    """
    if trials < 1:
        raise DataError("need at least one trial")
    if not 0 < p <= 1:
        raise DataError("sampling probability must lie in (0, 1]")
    col = np.asarray(m_true, dtype=np.float64)[:, i]
    n = col.size
    m2 = col**2
    t_ii = np.mean(m2)
    err_sum = 0.0
    ratios = []
    skipped = 0
    for t in range(trials):
        mask = stream(seed, 0x7A11, t).random(n) < p
        b = int(mask.sum())
        if b == 0:
            skipped += 1
            continue
        a = float(m2[mask].sum())
        ratio = a / b
        err_sum += abs(ratio - _expansion_terms(t_ii, a, b, n, p))
        ratios.append(ratio)
    if not ratios:
        raise NumericalError(f"all {trials} mask draws left column {i} empty")
    mc_var = float(np.var(ratios, ddof=1)) if len(ratios) > 1 else 0.0
    return TaylorCheck(
        mean_abs_err=err_sum / len(ratios),
        var_abs_err=abs(mc_var - variance_approx_diag(m_true, p, i)),
        skipped=skipped,
    )


def taylor_expansion_profile(m_true, p, trials, seed=0):
    """Vectorized :func:`taylor_expansion_check` over every diagonal entry.

    Draws one full mask per trial and returns a :class:`TaylorCheck`
    whose fields are means across all columns (skipped counts empty
    column/trial combinations).
    """
    if trials < 1:
        raise DataError("need at least one trial")
    m_true = np.asarray(m_true, dtype=np.float64)
    n, d = m_true.shape
    m2 = m_true**2
    t_diag = m2.mean(axis=0)
    err_sum = np.zeros(d)
    valid = np.zeros(d, dtype=np.int64)
    r_sum = np.zeros(d)
    r_sumsq = np.zeros(d)
    for t in range(trials):
        mask = stream(seed, 0x7A11, t).random((n, d)) < p
        b = mask.sum(axis=0)
        a = np.einsum("kd,kd->d", m2, mask)
        ok = b > 0
        ratio = np.where(ok, a / np.maximum(b, 1), 0.0)
        exp = _expansion_terms(t_diag, a, b, n, p)
        err_sum[ok] += np.abs(ratio - exp)[ok]
        valid += ok
        r_sum[ok] += ratio[ok]
        r_sumsq[ok] += ratio[ok] ** 2
    if np.any(valid == 0):
        raise NumericalError("some column never had a nonzero count; raise trials or p")
    mean_err = err_sum / valid
    mc_var = (r_sumsq - r_sum**2 / valid) / np.maximum(valid - 1, 1)
    approx = (1 - p) / (n * p) * (m2**2).mean(axis=0) - (1 - p) / (n * p) * t_diag**2
    return TaylorCheck(
        mean_abs_err=float(mean_err.mean()),
        var_abs_err=float(np.abs(mc_var - approx).mean()),
        skipped=int(trials * d - valid.sum()),
    )


def concentration_diagnostic(co, w, q, nu, tol=1e-8, max_iters=1000):
    """Spectral-norm check of the weighted projection against q * W.

    Requires ``w`` symmetric with max |entry| <= nu / d.  Returns the
    observed spectral norm of P_Omega(W) - q W (by power iteration) and
    the high-probability bound q * nu * sqrt(16 log(2d) / (d q)).
    """
    w = np.asarray(w, dtype=np.float64)
    d = co.d
    if w.shape != (d, d):
        raise DataError(f"W must be {d} x {d}")
    if not np.allclose(w, w.T, atol=1e-12):
        raise DataError("W must be symmetric")
    if np.max(np.abs(w)) > nu / d + 1e-12:
        raise DataError("W violates the max-entry bound nu / d")
    diff = -q * w
    obs = np.flatnonzero(co.diag_counts > 0)
    diff[obs, obs] += q * w[obs, obs]
    diff[co.off_i, co.off_j] += w[co.off_i, co.off_j]
    diff[co.off_j, co.off_i] += w[co.off_j, co.off_i]
    lhs = _power_iteration_sym(diff, tol, max_iters)
    bound = q * nu * math.sqrt(16.0 * math.log(2 * d) / (d * q))
    return lhs, bound


def _power_iteration_sym(a, tol, max_iters):
    d = a.shape[0]
    v = stream(0xD1A6, d).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        av = a @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0
        v = av / norm
        new_lam = float(v @ (a @ v))
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            return abs(new_lam)
        lam = new_lam
    raise NumericalError(f"power iteration did not converge in {max_iters} iterations")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_KIND_TOKEN = {"hajek": "hajek", "horvitz-thompson": "ht"}
_TOKEN_KIND = {v: k for k, v in _KIND_TOKEN.items()}


def save_estimate(est, path):
    """Write a SecondMomentEstimate as coo-text with its parameter header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# d={est.d} kind={_KIND_TOKEN[est.estimator_kind]} p={est.p!r} q={est.q!r}\n"
        )
        for i in np.flatnonzero(est.diag_observed):
            fh.write(f"{int(i)} {int(i)} {float(est.diag[i])!r}\n")
        for i, j, v in zip(est.off_i, est.off_j, est.off_values):
            fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")


def load_estimate(path):
    """Inverse of :func:`save_estimate`; n_rows is not recoverable and is None."""
    d = kind = p = q = None
    diag_idx, diag_val = [], []
    oi, oj, ov = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                for token in text.lstrip("#").split():
                    key, _, val = token.partition("=")
                    if key == "d":
                        d = int(val)
                    elif key == "kind":
                        kind = _TOKEN_KIND.get(val)
                    elif key == "p":
                        p = float(val)
                    elif key == "q":
                        q = float(val)
                continue
            parts = text.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'i j value'")
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            if i == j:
                diag_idx.append(i)
                diag_val.append(v)
            else:
                a, b = min(i, j), max(i, j)
                oi.append(a)
                oj.append(b)
                ov.append(v)
    if d is None or kind is None or p is None or q is None:
        raise DataError(f"{path}: missing or incomplete estimate header")
    diag = np.full(d, np.nan)
    diag[np.asarray(diag_idx, dtype=np.int64)] = diag_val
    order = np.argsort(np.asarray(oi, dtype=np.uint64) * np.uint64(d) + np.asarray(oj, dtype=np.uint64))
    return SecondMomentEstimate(
        d=d,
        diag=diag,
        off_i=np.asarray(oi, dtype=np.uint64)[order],
        off_j=np.asarray(oj, dtype=np.uint64)[order],
        off_values=np.asarray(ov, dtype=np.float64)[order],
        estimator_kind=kind,
        p=p,
        q=q,
        n_rows=None,
    )
