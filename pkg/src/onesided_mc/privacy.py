"""Gaussian-mechanism noise and empirical sensitivity for the recovery pipeline.

The noise scale for (epsilon, delta) privacy follows the standard
calibration sigma = 2 sqrt(ln(1.25 / delta)) * Delta2 / epsilon, where
Delta2 is the l2-sensitivity of the map from observations to the
recovered T.  Sensitivity is estimated empirically by replaying the
recovery on neighbors that differ from the input in one row's observed
values (same mask, values redrawn from the empirical value
distribution).  The estimate is a max over sampled neighbors and
therefore a lower bound on the true worst case; every report carries
that caveat.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .landscape import hajek_gd
from .rng import stream

SENSITIVITY_CAVEAT = (
    "empirical max over sampled one-row neighbors; a lower bound on the "
    "worst-case l2-sensitivity, not a formal privacy guarantee"
)


@dataclass(frozen=True)
class DpParams:
    """(epsilon, delta) target with the calibrated noise scale."""

    epsilon: float
    delta: float
    sigma: float

    @classmethod
    def from_sensitivity(cls, sensitivity, epsilon, delta):
        return cls(epsilon=epsilon, delta=delta,
                   sigma=calibrate_sigma(sensitivity, epsilon, delta))


@dataclass(frozen=True)
class SensitivityReport:
    """Empirical sensitivity estimate with its per-trial gaps."""

    max_gap: float
    per_trial_gaps: list
    trials: int
    gd_config: dict
    caveat: str = SENSITIVITY_CAVEAT

    def to_json_dict(self):
        return {
            "trials": self.trials,
            "max_gap": self.max_gap,
            "per_trial_gaps": self.per_trial_gaps,
            "gd_config": self.gd_config,
            "caveat": self.caveat,
        }


def add_gaussian_noise(m, sigma, seed=0):
    """Perturb every observed value with independent N(0, sigma^2) noise.

    The mask is untouched; sigma = 0 returns the input unchanged.
    """
    if sigma < 0:
        raise DataError("noise scale must be nonnegative")
    if sigma == 0:
        return m
    noise = stream(seed, 0xD9).normal(0.0, sigma, size=m.m)
    return m.with_values(m.values + noise)


def calibrate_sigma(sensitivity, epsilon, delta):
    """Gaussian-mechanism noise scale for an (epsilon, delta) target."""
    if epsilon <= 0:
        raise DataError("epsilon must be positive")
    if not 0 < delta < 1:
        raise DataError("delta must lie in (0, 1)")
    if sensitivity < 0:
        raise DataError("sensitivity must be nonnegative")
    return 2.0 * math.sqrt(math.log(1.25 / delta)) * sensitivity / epsilon


def estimate_sensitivity(m, rank, gd, trials, seed=0, cfg=None):
    """Empirical l2-sensitivity of the recovery under one-row value swaps.

    Each trial picks a random observed row, redraws its values from the
    global empirical value distribution (mask unchanged), reruns the
    recovery with the same initialization seed, and records the Frobenius
    gap between the recovered matrices.  Per-trial streams make the max
    non-decreasing in ``trials`` for a fixed seed.
    """
    if trials < 1:
        raise DataError("need at least one trial")
    base, _, _ = hajek_gd(m, rank, gd, cfg)
    observed_rows = np.unique(m.rows)
    if observed_rows.size == 0:
        raise DataError("matrix has no observations")
    gaps = []
    for t in range(trials):
        rng = stream(seed, 0x5E45, t)
        row = observed_rows[int(rng.integers(observed_rows.size))]
        sel = m.rows == row
        replacement = rng.choice(m.values, size=int(sel.sum()), replace=True)
        values = m.values.copy()
        values[sel] = replacement
        neighbor, _, _ = hajek_gd(m.with_values(values), rank, gd, cfg)
        gaps.append(float(np.linalg.norm(neighbor.values - base.values)))
    return SensitivityReport(
        max_gap=max(gaps),
        per_trial_gaps=gaps,
        trials=trials,
        gd_config={
            "iterations": gd.iterations,
            "learning_rate": gd.learning_rate,
            "seed": gd.seed,
            "rank": rank,
        },
    )
