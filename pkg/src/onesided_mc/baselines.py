"""Reference completion methods for desk-scale comparisons.

Three baselines are implemented:

* ``alternating_gd``: two-factor completion of M itself, minimizing
  ||P(X Y^T - M)||_F^2 on the observed cells with Adam (learning rate
  0.1, 300 epochs by default);
* ``soft_impute_als``: fill-impute / truncated SVD / soft-threshold
  iterations until successive reconstructions agree;
* ``nuclear_gd``: symmetric factor descent on the same weighted
  quadratic objective as the main recovery, with a nuclear-norm
  subgradient penalty instead of the row-norm one (plain fixed-step
  subgradient descent; lam 0.01, learning rate 0.1, 1000 steps by
  default).

For one-sided evaluation the two matrix-space baselines first complete M
and then form ``M^T M / n`` via the helpers at the bottom, so every
method feeds the same error metric.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import svds

from .exceptions import DataError, GdDivergence
from .landscape import DIVERGENCE_CEILING, _OmegaQuadratic, initial_factors
from .rng import stream

#: Dense fill-ins above this column count are refused outright.
SOFTIMPUTE_MAX_COLS = 5000

_DEFAULT_ITERS = {"alt-gd": 300, "softimpute-als": 500, "nuclear-gd": 1000}


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    rank: int
    learning_rate: float = 0.1
    lam: float = 0.01
    max_iters: Optional[int] = None
    conv_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.method not in _DEFAULT_ITERS:
            raise DataError(f"unknown baseline {self.method!r}")
        if self.rank < 1:
            raise DataError("rank must be at least 1")
        if self.conv_tol <= 0:
            raise DataError("conv_tol must be positive")

    @property
    def iters(self):
        return _DEFAULT_ITERS[self.method] if self.max_iters is None else self.max_iters


@dataclass(frozen=True)
class SoftImputeResult:
    matrix: np.ndarray
    converged: bool
    iterations: int


def alternating_gd(m, cfg):
    """Two-sided factor completion of M on the observed cells.

    Gaussian-initialized X (n x r) and Y (d x r) are updated with Adam;
    deterministic given ``cfg.seed``.  Returns the pair (X, Y).
    """
    if cfg.rank > min(m.n_rows, m.n_cols):
        raise DataError("rank cannot exceed min(n, d)")
    n, d, r = m.n_rows, m.n_cols, cfg.rank
    x = stream(cfg.seed, 0xA17A).normal(0.0, 1.0, size=(n, r))
    y = stream(cfg.seed, 0xA17B).normal(0.0, 1.0, size=(d, r))
    rows = m.rows.astype(np.int64)
    cols = m.cols.astype(np.int64)
    tags = np.arange(1, rows.size + 1, dtype=np.float64)
    scatter = sparse.coo_matrix((tags, (rows, cols)), shape=(n, d)).tocsr()
    perm = scatter.data.astype(np.int64) - 1
    adam = _AdamState(x.shape), _AdamState(y.shape)
    prev_loss = np.inf
    for epoch in range(1, cfg.iters + 1):
        err = np.einsum("ij,ij->i", x[rows], y[cols]) - m.values
        loss_val = float(err @ err)
        if not np.isfinite(loss_val) or loss_val > DIVERGENCE_CEILING:
            raise GdDivergence(epoch - 1, loss_val)
        scatter.data = err[perm]
        gx = 2.0 * (scatter @ y)
        gy = 2.0 * (scatter.T @ x)
        x = adam[0].step(x, gx, cfg.learning_rate, epoch)
        y = adam[1].step(y, gy, cfg.learning_rate, epoch)
        if abs(prev_loss - loss_val) < cfg.conv_tol * max(1.0, loss_val):
            break
        prev_loss = loss_val
    return x, y


class _AdamState:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, param, grad, lr, t):
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**t)
        vhat = self.v / (1 - self.beta2**t)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)


def soft_impute_als(m, cfg):
    """Fill-impute / SVD / soft-threshold iterations on a dense working copy.

    Converged when successive low-rank reconstructions differ by less
    than ``cfg.conv_tol`` in Frobenius norm; otherwise the last iterate
    is returned flagged as non-converged.
    """
    if m.n_cols > SOFTIMPUTE_MAX_COLS:
        raise DataError(
            f"soft-impute operates on dense fill-ins and is capped at "
            f"{SOFTIMPUTE_MAX_COLS} columns; got {m.n_cols}"
        )
    observed = m.to_dense()
    mask = m.mask_dense()
    z_hat = np.zeros_like(observed)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.iters + 1):
        work = np.where(mask, observed, z_hat)
        u, s, vt = _truncated_svd(work, cfg.rank, cfg.seed)
        s = np.maximum(s - cfg.lam, 0.0)
        z_new = (u * s) @ vt
        delta = float(np.linalg.norm(z_new - z_hat))
        z_hat = z_new
        if delta < cfg.conv_tol:
            converged = True
            break
    return SoftImputeResult(matrix=z_hat, converged=converged, iterations=iterations)


def _truncated_svd(a, k, seed):
    mn = min(a.shape)
    if k >= mn - 1 or mn <= 200:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        return u[:, :k], s[:k], vt[:k]
    v0 = stream(seed, 0x51D5).standard_normal(mn)
    u, s, vt = svds(a, k=k, v0=v0)
    order = np.argsort(s)[::-1]
    return u[:, order], s[order], vt[order]


def nuclear_gd(t_hat, cfg, variable="matrix"):
    """Nuclear-norm-penalized fit to the estimate by plain subgradient steps.

    With ``variable="matrix"`` (the comparison baseline) the optimization
    runs over a full symmetric d x d matrix, the convex relaxation whose
    implicit rank is controlled only by the penalty; the subgradient of
    the nuclear norm is U sign(L) U^T from the eigendecomposition of the
    iterate.  With ``variable="factor"`` the variable is a d x r factor
    matrix sharing the weighted quadratic term and the Gaussian
    initialization with the main recovery, so lam = 0 reproduces the
    unregularized recovery run exactly; there the subgradient is U V^T
    from the thin SVD of the factor.
    """
    if variable == "factor":
        return _nuclear_gd_factor(t_hat, cfg)
    if variable == "matrix":
        return _nuclear_gd_matrix(t_hat, cfg)
    raise DataError(f"unknown variable {variable!r}; expected 'matrix' or 'factor'")


def _nuclear_gd_factor(t_hat, cfg):
    quad = _OmegaQuadratic(t_hat, t_hat.q)
    x = initial_factors(t_hat.d, cfg.rank, cfg.seed)
    for t in range(cfg.iters):
        rd, ro = quad.residuals(x)
        val = quad.loss_from(rd, ro)
        if cfg.lam > 0:
            val += cfg.lam * float(np.linalg.svd(x, compute_uv=False).sum())
        if not np.isfinite(val) or val > DIVERGENCE_CEILING:
            raise GdDivergence(t, val)
        g = quad.gradient_from(x, rd, ro)
        if cfg.lam > 0:
            u, _, vt = np.linalg.svd(x, full_matrices=False)
            g = g + cfg.lam * (u @ vt)
        x = x - cfg.learning_rate * g
    return x


def _nuclear_gd_matrix(t_hat, cfg):
    d = t_hat.d
    q = t_hat.q
    diag_idx = np.flatnonzero(t_hat.diag_observed)
    z = np.zeros((d, d))
    for t in range(cfg.iters):
        resid = np.zeros((d, d))
        resid[diag_idx, diag_idx] = q * (z[diag_idx, diag_idx] - t_hat.diag[diag_idx])
        ro = z[t_hat.off_i, t_hat.off_j] - t_hat.off_values
        resid[t_hat.off_i, t_hat.off_j] = ro
        resid[t_hat.off_j, t_hat.off_i] = ro
        val = float(np.sum(resid * resid))
        if not np.isfinite(val) or val > DIVERGENCE_CEILING:
            raise GdDivergence(t, val)
        g = 2.0 * resid
        if cfg.lam > 0:
            evals, evecs = np.linalg.eigh(z)
            g = g + cfg.lam * (evecs * np.sign(evals)) @ evecs.T
        z = z - cfg.learning_rate * g
        z = 0.5 * (z + z.T)
    return z


def nuclear_norm(x):
    """Sum of singular values."""
    return float(np.linalg.svd(np.asarray(x, dtype=np.float64), compute_uv=False).sum())


# ---------------------------------------------------------------------------
# One-sided adapters
# ---------------------------------------------------------------------------

def second_moment_from_matrix(completed, n=None):
    """T estimate from a completed M: M^T M / n."""
    completed = np.asarray(completed, dtype=np.float64)
    n = completed.shape[0] if n is None else n
    return completed.T @ completed / n


def second_moment_from_factors(x, y):
    """T estimate from a factored completion X Y^T without forming it."""
    n = x.shape[0]
    return y @ (x.T @ x) @ y.T / n
