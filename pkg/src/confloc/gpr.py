"""GP regression on the fused manifold kernel.

Position coordinates are two independent scalar regressions sharing one
kernel, so a fitted model carries labels with shape (n_L, n_coords) and
every posterior variance is label-free and shared across coordinates.
The closed-form leave-one-out table is built from the joint system over
the labeled samples plus one test feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from .errors import IllConditionedKernelError, InputError
from .features import AggregatedRtf
from .intervals import PredictionInterval
from .kernel import KernelConfig, ReferenceSet, base_matrix, select_scales

DEFAULT_SIGMA_P2 = 1e-4   # 1 cm labeling-noise std, squared
VARIANCE_TOL = 1e-10
JITTER_FACTOR = 1e-8


def _spd_factor(a):
    """Cholesky with one jitter retry (JITTER_FACTOR * trace / n)."""
    try:
        return cho_factor(a, lower=True)
    except LinAlgError:
        jitter = JITTER_FACTOR * np.trace(a) / a.shape[0]
        try:
            return cho_factor(a + jitter * np.eye(a.shape[0]), lower=True)
        except LinAlgError as exc:
            raise IllConditionedKernelError(
                "kernel matrix is not positive definite even after jitter; "
                "increase sigma_p2 or check for duplicate features"
            ) from exc


@dataclass
class PosteriorSummary:
    mean: np.ndarray      # (n_coords,) meters
    variance: float       # m^2, shared across coordinates


@dataclass
class LooTable:
    """Closed-form leave-one-out pieces for labeled samples + one test.

    Everything derives from the inverse of K* + sigma_p^2 I over the
    joint (n_L + 1)-point system; the candidate test label enters only
    through the affine combination inv_labels + p_tilde * inv_unit.
    """

    inv_diag: np.ndarray      # diag of the inverse, (n_L+1,)
    inv_labels: np.ndarray    # inverse applied to [labels; 0], (n_L+1, n_coords)
    inv_unit: np.ndarray      # last column of the inverse, (n_L+1,)
    labels: np.ndarray        # (n_L, n_coords)

    @property
    def n_labeled(self):
        return self.inv_diag.size - 1

    @property
    def loo_var(self):
        return 1.0 / self.inv_diag

    def loo_means(self, p_tilde, coord=0):
        """LOO predictions at candidate test label p_tilde, length n_L+1.

        The last entry is the prediction for the test sample itself and
        does not depend on p_tilde.
        """
        p_star = np.append(self.labels[:, coord], p_tilde)
        resid = (self.inv_labels[:, coord] + p_tilde * self.inv_unit) / self.inv_diag
        return p_star - resid


@dataclass
class MmgpModel:
    refs: ReferenceSet
    kernel_cfg: KernelConfig
    sigma_p2: float
    labels: np.ndarray            # (n_L, n_coords)
    base_labeled: np.ndarray      # profile rows of labeled features, (n_L, n)
    k_labeled: np.ndarray         # kernel over labeled samples, (n_L, n_L)
    _chol: tuple
    _alpha: np.ndarray            # (K_L + sigma_p2 I)^-1 labels

    @property
    def n_labeled(self):
        return self.labels.shape[0]

    @property
    def n_coords(self):
        return self.labels.shape[1]

    def base_rows(self, features):
        """Affinity profiles of arbitrary features against the reference set."""
        return base_matrix(features, self.refs, self.kernel_cfg)


def fit(
    features,
    labels,
    unlabeled=(),
    kernel_cfg: KernelConfig | None = None,
    sigma_p2: float = DEFAULT_SIGMA_P2,
) -> MmgpModel:
    """Fit the manifold GP on labeled features plus unlabeled references.

    kernel_cfg=None selects per-node scales with the median heuristic
    over the combined reference set.  The returned model is immutable.
    """
    features = list(features)
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels[:, None]
    if len(features) != labels.shape[0]:
        raise InputError("label count does not match labeled feature count")
    if len(features) < 1:
        raise InputError("need at least one labeled sample")
    if sigma_p2 <= 0:
        raise InputError("sigma_p2 must be positive")
    refs = ReferenceSet(features + list(unlabeled), n_labeled=len(features))
    if kernel_cfg is None:
        kernel_cfg = select_scales(refs)
    base_l = base_matrix(features, refs, kernel_cfg)
    k_l = base_l @ base_l.T
    chol = _spd_factor(k_l + sigma_p2 * np.eye(len(features)))
    alpha = cho_solve(chol, labels)
    return MmgpModel(
        refs=refs,
        kernel_cfg=kernel_cfg,
        sigma_p2=sigma_p2,
        labels=labels,
        base_labeled=base_l,
        k_labeled=k_l,
        _chol=chol,
        _alpha=alpha,
    )


def posterior_batch(model: MmgpModel, features):
    """Posterior means and variances for many test features at once.

    Returns (means (p, n_coords), variances (p,)).
    """
    c_t = model.base_rows(features)               # (p, n)
    k_lt = model.base_labeled @ c_t.T             # (n_L, p)
    k_tt = np.sum(c_t * c_t, axis=1)              # (p,)
    means = k_lt.T @ model._alpha
    v = cho_solve(model._chol, k_lt)
    variances = k_tt - np.sum(k_lt * v, axis=0)
    if np.any(variances < -VARIANCE_TOL * np.maximum(1.0, k_tt)):
        raise IllConditionedKernelError("posterior variance below tolerance")
    return means, np.maximum(variances, 0.0)


def posterior(model: MmgpModel, h_t: AggregatedRtf) -> PosteriorSummary:
    """Posterior mean (per coordinate) and shared variance at one feature."""
    means, variances = posterior_batch(model, [h_t])
    return PosteriorSummary(mean=means[0], variance=float(variances[0]))


def loo_table_from_kernel(k_star, sigma_p2, labels) -> LooTable:
    """LOO table from an explicit joint kernel matrix over labeled + test."""
    k_star = np.asarray(k_star, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels[:, None]
    n1 = k_star.shape[0]
    if k_star.shape != (n1, n1) or labels.shape[0] != n1 - 1:
        raise InputError("joint kernel must be (n_L+1) square with n_L labels")
    chol = _spd_factor(k_star + sigma_p2 * np.eye(n1))
    inv = cho_solve(chol, np.eye(n1))
    d = np.diag(inv).copy()
    if np.any(d <= 0):
        raise IllConditionedKernelError("inverse diagonal is not positive")
    p_a = np.vstack([labels, np.zeros((1, labels.shape[1]))])
    return LooTable(
        inv_diag=d,
        inv_labels=inv @ p_a,
        inv_unit=inv[:, -1].copy(),
        labels=labels,
    )


def loo_table(model: MmgpModel, h_t: AggregatedRtf) -> LooTable:
    """Closed-form LOO pieces over the labeled samples joined with h_t."""
    c_t = model.base_rows([h_t])
    k_lt = model.base_labeled @ c_t.T
    k_tt = float(np.sum(c_t * c_t))
    k_star = np.block([[model.k_labeled, k_lt], [k_lt.T, np.array([[k_tt]])]])
    return loo_table_from_kernel(k_star, model.sigma_p2, model.labels)


def gpr_baseline_interval(
    model: MmgpModel, h_t: AggregatedRtf, delta, include_label_noise=True
):
    """Symmetric Gaussian intervals from the posterior variance.

    Returns one PredictionInterval per coordinate.  The predictive
    variance includes sigma_p2 by default (the target is observed under
    label noise); include_label_noise=False drops it.
    """
    if not 0 < delta < 1:
        raise InputError("delta must be in (0, 1)")
    summary = posterior(model, h_t)
    var = summary.variance + (model.sigma_p2 if include_label_noise else 0.0)
    half = norm.ppf(1.0 - delta / 2.0) * np.sqrt(var)
    return tuple(
        PredictionInterval([(float(mu - half), float(mu + half))], delta)
        for mu in summary.mean
    )


def save_model(path, model: MmgpModel):
    """Serialize a fitted model to one self-describing .npz file."""
    feats = model.refs.features
    matrix = np.stack([f.flat for f in feats])
    meta = {
        "n_nodes": feats[0].n_nodes,
        "bins_per_node": feats[0].n_bins,
        "n_labeled": model.refs.n_labeled,
        "sigma_p2": model.sigma_p2,
        "scale_rule": model.kernel_cfg.scale_rule,
    }
    np.savez(
        path,
        ref_matrix=matrix,
        labels=model.labels,
        sigma=model.kernel_cfg.sigma,
        meta=json.dumps(meta),
    )


def load_model(path) -> MmgpModel:
    with np.load(path, allow_pickle=False) as data:
        matrix = data["ref_matrix"]
        labels = data["labels"]
        sigma = data["sigma"]
        meta = json.loads(str(data["meta"]))
    m, f = meta["n_nodes"], meta["bins_per_node"]
    feats = [
        AggregatedRtf(tuple(row[i * f : (i + 1) * f] for i in range(m)))
        for row in matrix
    ]
    n_l = meta["n_labeled"]
    cfg = KernelConfig(sigma, scale_rule=meta["scale_rule"])
    return fit(
        feats[:n_l],
        labels,
        unlabeled=feats[n_l:],
        kernel_cfg=cfg,
        sigma_p2=meta["sigma_p2"],
    )
