"""Row imputation by projection onto the recovered second-moment subspace.

The pipeline recovers T, extracts its dominant rank-r eigenspace, and
solves one small least-squares problem per row: the observed entries of
the row are regressed onto the corresponding rows of the basis, and the
fitted coefficients reconstruct the full row.  Rows with too few
observations are handled by a small ridge (they are under-determined by
design in the ultra-sparse regime).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DataError, NumericalError
from .landscape import GdConfig, hajek_gd
from .rng import stream

#: Above this dimension the dense symmetric eigensolver gives way to
#: randomized subspace iteration.
DENSE_EIG_CUTOFF = 2048

#: Normal equations are used up to this rank, QR factorization above.
NORMAL_EQ_MAX_RANK = 64


@dataclass(frozen=True)
class Subspace:
    """Top-r eigenspace of a symmetric matrix, ordered by |eigenvalue|.

    ``singular_values`` are the magnitudes (descending); ``eigenvalues``
    keep the signs, and ``has_negative`` flags an indefinite input, which
    happens when estimation noise pushes the recovered T off the PSD cone.
    """

    d: int
    r: int
    basis: np.ndarray
    singular_values: np.ndarray
    eigenvalues: np.ndarray
    has_negative: bool

    def __post_init__(self):
        for arr in (self.basis, self.singular_values, self.eigenvalues):
            arr.setflags(write=False)


@dataclass(frozen=True)
class ImputedRows:
    """Per-row regression output: coefficients and full reconstructions.

    ``reconstruction`` equals ``coefficients @ basis.T`` by construction.
    ``empty_rows`` lists requested rows that had no observations (their
    coefficients are zero).
    """

    row_ids: np.ndarray
    coefficients: np.ndarray
    reconstruction: np.ndarray
    empty_rows: np.ndarray

    def __post_init__(self):
        for arr in (self.row_ids, self.coefficients, self.reconstruction, self.empty_rows):
            arr.setflags(write=False)


@dataclass(frozen=True)
class ImputationResult:
    imputed: ImputedRows
    rmse: Optional[float]
    recovered: object = field(repr=False)
    subspace: Subspace = field(repr=False)


def top_r_svd(z, r, dense_cutoff=DENSE_EIG_CUTOFF, tol=1e-10, max_sweeps=1000, seed=0):
    """Top-r eigenpairs of a symmetric matrix, by absolute eigenvalue."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[0]
    if z.shape != (d, d):
        raise DataError("input must be square")
    if not np.allclose(z, z.T, atol=1e-10):
        raise DataError("input must be symmetric")
    if not 1 <= r <= d:
        raise DataError(f"rank must lie in [1, {d}]")
    if d <= dense_cutoff or r >= d - 2:
        evals, evecs = np.linalg.eigh(z)
    else:
        evals, evecs = _subspace_iteration(z, r, tol, max_sweeps, seed)
    order = np.argsort(np.abs(evals))[::-1][:r]
    eigenvalues = evals[order]
    basis = evecs[:, order]
    return Subspace(
        d=d, r=r, basis=basis,
        singular_values=np.abs(eigenvalues),
        eigenvalues=eigenvalues,
        has_negative=bool(np.any(eigenvalues < 0)),
    )


def _subspace_iteration(z, r, tol, max_sweeps, seed):
    d = z.shape[0]
    k = min(d, r + 8)
    q, _ = np.linalg.qr(stream(seed, 0x54D5).standard_normal((d, k)))
    prev = None
    for _ in range(max_sweeps):
        q, _ = np.linalg.qr(z @ q)
        h = q.T @ (z @ q)
        ritz, vecs = np.linalg.eigh(h)
        order = np.argsort(np.abs(ritz))[::-1][:r]
        vals = ritz[order]
        if prev is not None and np.max(np.abs(vals - prev)) <= tol * max(1.0, float(np.max(np.abs(vals)))):
            return ritz, q @ vecs
        prev = vals
    raise NumericalError(f"subspace iteration did not converge in {max_sweeps} sweeps")


def least_squares_rows(m, sub, rows=None, ridge=1e-8, pinv_fallback=False):
    """Fit each requested row's observed entries against the subspace rows.

    Solves min_q sum_j (<q, basis_j> - value_ij)^2 + ridge ||q||^2 per
    row.  With ridge = 0 an under-determined row raises unless
    ``pinv_fallback`` accepts the minimum-norm solution instead.
    """
    if ridge < 0:
        raise DataError("ridge must be nonnegative")
    if sub.d != m.n_cols:
        raise DataError("subspace dimension does not match the matrix")
    row_ids = np.arange(m.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    order = np.argsort(m.rows, kind="stable")
    sorted_rows = m.rows[order].astype(np.int64)
    sorted_cols = m.cols[order].astype(np.int64)
    sorted_vals = m.values[order]
    starts = np.searchsorted(sorted_rows, row_ids, side="left")
    stops = np.searchsorted(sorted_rows, row_ids, side="right")
    r = sub.r
    coeffs = np.zeros((row_ids.size, r))
    empty = []
    use_normal = r <= NORMAL_EQ_MAX_RANK
    for k, (lo, hi) in enumerate(zip(starts, stops)):
        if lo == hi:
            empty.append(int(row_ids[k]))
            continue
        a = sub.basis[sorted_cols[lo:hi]]
        b = sorted_vals[lo:hi]
        if use_normal:
            gram = a.T @ a + ridge * np.eye(r)
            rhs = a.T @ b
            if ridge == 0.0:
                evals = np.linalg.eigvalsh(gram)
                if evals[0] <= evals[-1] * r * np.finfo(float).eps:
                    if not pinv_fallback:
                        raise NumericalError(
                            f"row {int(row_ids[k])} is under-determined with ridge=0; "
                            "raise ridge or pass pinv_fallback=True for the "
                            "minimum-norm solution"
                        )
                    coeffs[k] = np.linalg.lstsq(a, b, rcond=None)[0]
                    continue
            coeffs[k] = np.linalg.solve(gram, rhs)
        else:
            # stability guard for large r: QR on the ridge-augmented system
            a_aug = np.vstack([a, np.sqrt(ridge) * np.eye(r)]) if ridge > 0 else a
            b_aug = np.concatenate([b, np.zeros(r)]) if ridge > 0 else b
            coeffs[k] = np.linalg.lstsq(a_aug, b_aug, rcond=None)[0]
    return ImputedRows(
        row_ids=row_ids,
        coefficients=coeffs,
        reconstruction=coeffs @ sub.basis.T,
        empty_rows=np.asarray(empty, dtype=np.int64),
    )


def impute_pipeline(m, rank, gd, ridge=1e-8, dp_sigma=None, holdout=None, cfg=None,
                    noise_seed=None):
    """Recover T, extract its subspace, and impute every row of M.

    ``dp_sigma`` optionally perturbs the observed values with Gaussian
    noise before estimation (sigma = 0 leaves the input untouched).
    When ``holdout`` is given, the root mean squared error of the
    reconstruction on the held-out cells is reported.
    """
    if rank < 1:
        raise DataError("rank must be at least 1")
    m_in = m
    if dp_sigma:
        from .privacy import add_gaussian_noise

        m_in = add_gaussian_noise(m, dp_sigma, seed=gd.seed if noise_seed is None else noise_seed)
    recovered, _, _ = hajek_gd(m_in, rank, gd, cfg)
    sub = top_r_svd(recovered.values, rank, seed=gd.seed)
    imputed = least_squares_rows(m_in, sub, rows=None, ridge=ridge)
    rmse = None
    if holdout is not None and holdout.m > 0:
        pred = imputed.reconstruction[holdout.rows.astype(np.int64), holdout.cols.astype(np.int64)]
        rmse = float(np.sqrt(np.mean((pred - holdout.values) ** 2)))
    return ImputationResult(imputed=imputed, rmse=rmse, recovered=recovered, subspace=sub)
