"""Ground-truth generators and sampling schemes for simulation experiments.

Two generators are provided:

* ``gaussian-truncated``: every entry i.i.d. N(1/sqrt(d), 1/d), then the
  matrix is truncated to its top-r singular directions;
* ``common-means``: r factor vectors are drawn once and every row of M is
  a uniformly random factor, optionally plus N(0, sigma^2 / d) entrywise
  noise.

Masks come in three flavors: independent Bernoulli(p) cells, exactly C
distinct columns per row, and a heavy-tailed "snowball" scheme where a
row's per-entry probability scales with its activity level.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import svds

from .exceptions import DataError
from .rng import stream
from .sparse_io import ObservedMatrix, from_triplets

SCHEME_KINDS = ("uniform-p", "fixed-c-per-row", "snowball")


@dataclass(frozen=True)
class SyntheticModel:
    """Ground-truth state for one synthetic experiment.

    ``factors`` is a d x r matrix with T ~= factors @ factors.T when the
    noise level is zero; ``T`` always equals M.T @ M / n for the realized
    M.  ``mu`` and ``kappa`` are the realized row-spikiness and condition
    number of ``factors``.
    """

    kind: str
    n: int
    d: int
    r: int
    noise_sigma: float
    seed: int
    factors: np.ndarray = field(repr=False)
    M: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)
    mu: float
    kappa: float

    def __post_init__(self):
        for arr in (self.factors, self.M, self.T):
            arr.setflags(write=False)


@dataclass(frozen=True)
class SamplingScheme:
    """Mask-generation recipe; ``p`` for uniform, ``c`` for the others.

    ``source_counts`` optionally supplies real per-row activity levels for
    the snowball scheme; without it a Zipf(1.1) profile is drawn, which
    reproduces heavy-tailed row activity.
    """

    kind: str
    p: Optional[float] = None
    c: Optional[int] = None
    seed: int = 0
    source_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise DataError(f"unknown sampling scheme {self.kind!r}")
        if self.kind == "uniform-p" and not (self.p and 0 < self.p < 1):
            raise DataError("uniform-p requires 0 < p < 1")
        if self.kind in ("fixed-c-per-row", "snowball") and not (self.c and self.c >= 1):
            raise DataError(f"{self.kind} requires c >= 1")


def coherence(u):
    """Row-spikiness of a d x r factor matrix.

    Defined as d * max_i ||U_i||^2 / ||U||_F^2, the largest squared row
    norm relative to the average one.  Equals 1 exactly when all rows
    share the same norm and d when a single row carries all the mass;
    always >= 1 since the max dominates the mean.
    """
    u = np.asarray(u, dtype=np.float64)
    total = float(np.sum(u * u))
    if total == 0.0:
        raise DataError("coherence of the zero matrix is undefined")
    row_sq = np.sum(u * u, axis=1)
    return float(u.shape[0] * row_sq.max() / total)


def condition_number(u):
    s = np.linalg.svd(np.asarray(u, dtype=np.float64), compute_uv=False)
    if s[-1] == 0:
        return float(np.inf)
    return float(s[0] / s[-1])


def generate_gaussian_truncated(n, d, r, seed=0):
    """Rank-r truncation of an i.i.d. N(1/sqrt(d), 1/d) matrix."""
    if r > min(n, d):
        raise DataError("rank cannot exceed min(n, d)")
    rng = stream(seed, 0x6A55)
    g = rng.normal(1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(n, d))
    if r >= min(n, d) - 1:
        u, s, vt = np.linalg.svd(g, full_matrices=False)
        u, s, vt = u[:, :r], s[:r], vt[:r]
    else:
        # deterministic ARPACK start vector; svds returns ascending order
        v0 = stream(seed, 0x6A56).standard_normal(min(n, d))
        u, s, vt = svds(g, k=r, v0=v0)
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]
    m_low = (u * s) @ vt
    factors = vt.T * (s / np.sqrt(n))
    return SyntheticModel(
        kind="gaussian-truncated", n=n, d=d, r=r, noise_sigma=0.0, seed=seed,
        factors=factors, M=m_low, T=factors @ factors.T,
        mu=coherence(factors), kappa=condition_number(factors),
    )


def generate_common_means(n, d, r, mu_target=None, noise_sigma=0.0, seed=0):
    """Mixture-of-factors model: each row of M is one of r common vectors.

    When ``mu_target`` is set, the spikiest factor rows are rescaled
    (best effort, then re-measured) so the realized coherence does not
    exceed it by much; the realized value is what gets stored.
    """
    if r > d:
        raise DataError("rank cannot exceed d")
    if mu_target is not None and mu_target < 1:
        raise DataError("coherence targets below 1 are infeasible")
    rng = stream(seed, 0xC033)
    u = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r))  # columns are factors / sqrt(r)
    if mu_target is not None:
        for _ in range(3):
            row_norm = np.linalg.norm(u, axis=1)
            cap = np.sqrt(mu_target / d) * np.linalg.norm(u)
            over = row_norm > cap
            if not np.any(over):
                break
            scale = np.ones(d)
            scale[over] = cap / row_norm[over]
            u = u * scale[:, None]
    factor_vectors = u * np.sqrt(r)  # length-d mixture components
    assign = stream(seed, 0xC034).integers(0, r, size=n)
    m = factor_vectors.T[assign]
    if noise_sigma > 0:
        m = m + stream(seed, 0xC035).normal(0.0, noise_sigma / np.sqrt(d), size=(n, d))
    return SyntheticModel(
        kind="common-means", n=n, d=d, r=r, noise_sigma=float(noise_sigma), seed=seed,
        factors=u, M=m, T=m.T @ m / n,
        mu=coherence(u), kappa=condition_number(u),
    )


def sample_mask(model, scheme):
    """Draw an observation mask over ``model.M`` under ``scheme``.

    Returns an :class:`ObservedMatrix`; deterministic given the scheme's
    seed.  Mask semantics are explicit, so entries of M that happen to be
    exactly zero stay distinguishable from missing cells.
    """
    n, d = model.n, model.d
    if scheme.kind == "uniform-p":
        mask = stream(scheme.seed, 0x3A5C).random((n, d)) < scheme.p
        rows, cols = np.nonzero(mask)
    elif scheme.kind == "fixed-c-per-row":
        c = int(scheme.c)
        if c > d:
            raise DataError(f"cannot pick {c} distinct columns out of {d}")
        keys = stream(scheme.seed, 0x3A5D).random((n, d))
        picked = np.argpartition(keys, min(c, d) - 1, axis=1)[:, :c]
        rows = np.repeat(np.arange(n), c)
        cols = picked.ravel()
    elif scheme.kind == "snowball":
        c = int(scheme.c)
        if scheme.source_counts is not None:
            activity = np.asarray(scheme.source_counts, dtype=np.float64)
            if activity.shape != (n,):
                raise DataError("source_counts must have one activity level per row")
        else:
            activity = stream(scheme.seed, 0x3A5E).zipf(1.1, size=n).astype(np.float64)
        p_row = np.minimum(c / d * activity, 1.0)
        mask = stream(scheme.seed, 0x3A5F).random((n, d)) < p_row[:, None]
        rows, cols = np.nonzero(mask)
    else:  # pragma: no cover - guarded in SamplingScheme
        raise DataError(f"unknown sampling scheme {scheme.kind!r}")
    return from_triplets(n, d, rows, cols, model.M[rows, cols])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model, directory, prefix="model"):
    """Persist a model as JSON config plus .npy arrays; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "config": os.path.join(directory, f"{prefix}.json"),
        "m": os.path.join(directory, f"{prefix}_m.npy"),
        "factors": os.path.join(directory, f"{prefix}_factors.npy"),
    }
    np.save(paths["m"], model.M)
    np.save(paths["factors"], model.factors)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(
            {
                "kind": model.kind, "n": model.n, "d": model.d, "r": model.r,
                "noise_sigma": model.noise_sigma, "seed": model.seed,
                "mu": model.mu, "kappa": model.kappa,
            },
            fh, indent=2, sort_keys=True,
        )
    return paths


def load_model(config_path):
    with open(config_path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    base = config_path[: -len(".json")]
    m = np.load(base + "_m.npy")
    factors = np.load(base + "_factors.npy")
    return SyntheticModel(
        kind=cfg["kind"], n=cfg["n"], d=cfg["d"], r=cfg["r"],
        noise_sigma=cfg["noise_sigma"], seed=cfg["seed"],
        factors=factors, M=m, T=m.T @ m / cfg["n"],
        mu=cfg["mu"], kappa=cfg["kappa"],
    )
