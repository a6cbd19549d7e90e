"""Exact transductive conformal prediction for the manifold GP.

For a candidate test label p, every leave-one-out nonconformity score is
|a_i + p * b_i|: an affine function of p obtained by splitting the joint
label vector into its fixed part (the observed labels) and the unit
vector carrying the candidate.  The p-value is therefore piecewise
constant in p and changes only where a labeled score ties the test
score; sweeping those breakpoints yields the exact solution set of
"p-value > delta" without scanning candidates.

Scores can be sharpened by dividing each LOO residual by its LOO
variance raised to 1/gamma; gamma = inf recovers the unnormalized
scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IllConditionedKernelError, InputError
from .gpr import LooTable, MmgpModel, loo_table, posterior
from .intervals import PredictionInterval

DEFAULT_GAMMA = 32.0
TIE_RTOL = 1e-12


@dataclass
class NonconformityProfile:
    """Affine decomposition of the score vector: score_i(p) = |a_i + p*b_i|.

    The last entry belongs to the test sample; gamma records the
    variance-normalization exponent used (inf = unnormalized).
    """

    a: np.ndarray
    b: np.ndarray
    gamma: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.shape != self.b.shape or self.a.ndim != 1 or self.a.size < 2:
            raise InputError("profile vectors must be equal-length, length >= 2")

    @property
    def n_labeled(self):
        return self.a.size - 1

    def scores(self, p_tilde):
        return np.abs(self.a + p_tilde * self.b)


@dataclass
class PValue:
    """Conformal p-value stored as the exact fraction (count+1)/(n_L+1)."""

    numerator: int
    denominator: int

    @property
    def value(self):
        return self.numerator / self.denominator


def build_profile(loo: LooTable, coord=0, gamma=DEFAULT_GAMMA) -> NonconformityProfile:
    """Profile for one coordinate from the closed-form LOO table.

    a and b are the inverse applied to [labels; 0] and to the last unit
    vector, each divided elementwise by diag^(1 - 1/gamma).
    """
    if not gamma > 0:
        raise ConfigError("gamma must be positive (inf = unnormalized)")
    d = loo.inv_diag
    if np.any(d <= 0):
        raise IllConditionedKernelError("LOO table has non-positive diagonal")
    exponent = 1.0 if math.isinf(gamma) else 1.0 - 1.0 / gamma
    denom = d**exponent
    return NonconformityProfile(
        a=loo.inv_labels[:, coord] / denom,
        b=loo.inv_unit / denom,
        gamma=float(gamma),
    )


def p_value(profile: NonconformityProfile, p_tilde) -> PValue:
    """Rank of the test score among all scores at candidate p_tilde.

    Ties count toward the p-value; comparisons use a tiny relative
    tolerance so candidates sitting exactly on a breakpoint keep their
    ties under floating-point evaluation.
    """
    scores = profile.scores(p_tilde)
    ref = scores[-1]
    count = int(np.sum(scores[:-1] >= ref - TIE_RTOL * max(1.0, ref)))
    return PValue(count + 1, profile.n_labeled + 1)


def _breakpoints(profile: NonconformityProfile):
    """Candidates where some labeled score ties the test score."""
    a, b = profile.a, profile.b
    a_t, b_t = a[-1], b[-1]
    pts = []
    for a_i, b_i in zip(a[:-1], b[:-1]):
        db = b_i - b_t
        if db != 0.0:
            pts.append((a_t - a_i) / db)
        sb = b_i + b_t
        if sb != 0.0:
            pts.append(-(a_i + a_t) / sb)
    return np.unique(np.asarray(pts, dtype=float))


def predict_interval(profile: NonconformityProfile, delta) -> PredictionInterval:
    """Exact solution set of p-value(p) > delta as closed intervals.

    The p-value is piecewise constant between breakpoints, so midpoint
    evaluation per region plus direct evaluation at each breakpoint
    determines membership everywhere.  Pieces reaching past the extreme
    breakpoints are returned with infinite endpoints; callers may clip.
    """
    if not 0 < delta < 1:
        raise InputError("delta must be in (0, 1)")
    inside = lambda x: p_value(profile, x).value > delta
    bps = _breakpoints(profile)
    if bps.size == 0:
        if inside(0.0):
            return PredictionInterval([(-math.inf, math.inf)], delta)
        return PredictionInterval([], delta)

    # Region representatives: left tail, each breakpoint, gaps, right tail.
    regions = [(-math.inf, bps[0], bps[0] - 1.0)]
    for k in range(bps.size):
        regions.append((bps[k], bps[k], bps[k]))
        if k + 1 < bps.size:
            regions.append((bps[k], bps[k + 1], 0.5 * (bps[k] + bps[k + 1])))
    regions.append((bps[-1], math.inf, bps[-1] + 1.0))

    pieces = []
    run = None
    for lo, hi, probe in regions:
        if inside(probe):
            run = (lo, hi) if run is None else (run[0], hi)
        elif run is not None:
            pieces.append(run)
            run = None
    if run is not None:
        pieces.append(run)
    return PredictionInterval(pieces, delta)


@dataclass
class LocalizationResult:
    point: np.ndarray          # (n_coords,) posterior means
    intervals: tuple           # one PredictionInterval per coordinate


def localize_with_pi(
    model: MmgpModel, h_t, delta, gamma=DEFAULT_GAMMA
) -> LocalizationResult:
    """Point estimate plus an exact conformal interval per coordinate."""
    summary = posterior(model, h_t)
    table = loo_table(model, h_t)
    intervals = tuple(
        predict_interval(build_profile(table, coord=c, gamma=gamma), delta)
        for c in range(model.n_coords)
    )
    return LocalizationResult(point=summary.mean, intervals=intervals)


def jackknife_loo(model: MmgpModel, test_features):
    """Leave-one-out refit predictions and residuals for Jackknife+.

    Refits drop one labeled sample at a time while keeping the fitted
    kernel (reference set and scales) unchanged.  Returns
    (preds (n_L, p, n_coords), residuals (n_L, n_coords)).
    """
    from scipy.linalg import cho_factor, cho_solve

    n_l = model.n_labeled
    a_full = model.k_labeled + model.sigma_p2 * np.eye(n_l)
    k_test = model.base_rows(test_features) @ model.base_labeled.T  # (p, n_L)
    preds = np.empty((n_l, k_test.shape[0], model.n_coords))
    residuals = np.empty((n_l, model.n_coords))
    for i in range(n_l):
        keep = np.arange(n_l) != i
        chol = cho_factor(a_full[np.ix_(keep, keep)], lower=True)
        alpha = cho_solve(chol, model.labels[keep])
        preds[i] = k_test[:, keep] @ alpha
        residuals[i] = np.abs(model.labels[i] - model.k_labeled[i, keep] @ alpha)
    return preds, residuals


def jackknife_plus_from_loo(test_preds, residuals, delta) -> PredictionInterval:
    """Order-statistic interval from LOO predictions at one test point.

    Lower edge: floor(delta*(n_L+1))-th smallest of pred - residual;
    upper edge: ceil((1-delta)*(n_L+1))-th smallest of pred + residual.
    """
    if not 0 < delta < 1:
        raise InputError("delta must be in (0, 1)")
    test_preds = np.asarray(test_preds, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    n_l = test_preds.size
    k_lo = math.floor(delta * (n_l + 1))
    k_hi = math.ceil((1.0 - delta) * (n_l + 1))
    if k_lo < 1 or k_hi > n_l:
        raise ConfigError(
            f"n_L={n_l} is too small for a finite Jackknife+ interval at delta={delta}"
        )
    lo = np.sort(test_preds - residuals)[k_lo - 1]
    hi = np.sort(test_preds + residuals)[k_hi - 1]
    return PredictionInterval([(float(lo), float(hi))], delta)


def jackknife_plus_interval(model: MmgpModel, h_t, delta):
    """Jackknife+ interval per coordinate for a single test feature."""
    preds, residuals = jackknife_loo(model, [h_t])
    return tuple(
        jackknife_plus_from_loo(preds[:, 0, c], residuals[:, c], delta)
        for c in range(model.n_coords)
    )
