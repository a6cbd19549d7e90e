"""Manifold-based covariance over aggregated RTF features.

Each node compares two samples through their Gaussian-kernel affinities
to every training sample (labeled + unlabeled), and the fused covariance
averages those profiles across nodes: with C[i, r] the (1/M)-averaged
affinity of sample i to reference r, the covariance matrix is C @ C.T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateManifoldError, InputError


@dataclass
class KernelConfig:
    sigma: np.ndarray              # (M,) per-node squared-distance scales
    scale_rule: str = "median-heuristic"

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise ConfigError("kernel scales must be positive and finite")
        if self.scale_rule not in ("fixed", "median-heuristic"):
            raise ConfigError(f"unknown scale rule {self.scale_rule!r}")


@dataclass
class ReferenceSet:
    """Training features (labeled first) that span the manifolds."""

    features: list
    n_labeled: int

    def __post_init__(self):
        self.features = list(self.features)
        if not 1 <= self.n_labeled <= len(self.features):
            raise InputError("need 1 <= n_labeled <= number of reference features")
        stack_nodes(self.features)  # shape consistency check

    @property
    def n(self):
        return len(self.features)

    @property
    def n_unlabeled(self):
        return self.n - self.n_labeled

    @property
    def labeled(self):
        return self.features[: self.n_labeled]


def stack_nodes(features):
    """Stack aggregated features into M arrays of shape (n, F)."""
    feats = list(features)
    if not feats:
        raise InputError("empty feature list")
    m = feats[0].n_nodes
    f = feats[0].n_bins
    if any(x.n_nodes != m or x.n_bins != f for x in feats):
        raise InputError("features disagree on node count or band size")
    return [np.stack([x.per_node[node] for x in feats]) for node in range(m)]


def _sq_distances(a, b):
    """Pairwise squared complex Euclidean distances, shape (p, q)."""
    na = np.sum(np.abs(a) ** 2, axis=1)
    nb = np.sum(np.abs(b) ** 2, axis=1)
    cross = np.real(a @ b.conj().T)
    return np.maximum(na[:, None] + nb[None, :] - 2.0 * cross, 0.0)


def node_kernel(u, v, sigma):
    """Gaussian kernel exp(-||u - v||^2 / sigma) on complex vectors."""
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    if u.shape != v.shape:
        raise InputError("node kernel inputs must have matching length")
    if sigma <= 0:
        raise ConfigError("kernel scale must be positive")
    return float(np.exp(-np.sum(np.abs(u - v) ** 2) / sigma))


def base_matrix(features, refs: ReferenceSet, cfg: KernelConfig):
    """Node-averaged affinity profiles against the reference set.

    Returns C with C[i, r] = (1/M) * sum_m k_m(features[i]^m, refs[r]^m);
    entries lie in (0, 1].
    """
    q_nodes = stack_nodes(features)
    r_nodes = stack_nodes(refs.features)
    if len(q_nodes) != len(r_nodes) or q_nodes[0].shape[1] != r_nodes[0].shape[1]:
        raise InputError("query and reference features disagree on (M, F)")
    m = len(q_nodes)
    if cfg.sigma.size != m:
        raise ConfigError(f"kernel config has {cfg.sigma.size} scales for {m} nodes")
    c = np.zeros((q_nodes[0].shape[0], r_nodes[0].shape[0]))
    for node in range(m):
        c += np.exp(-_sq_distances(q_nodes[node], r_nodes[node]) / cfg.sigma[node])
    return c / m


def manifold_kernel(i, j, node, refs: ReferenceSet, cfg: KernelConfig):
    """Single-node manifold covariance between reference samples i and j."""
    if refs.n == 0:
        raise InputError("reference set is empty")
    u = refs.features[i].per_node[node]
    v = refs.features[j].per_node[node]
    r = stack_nodes(refs.features)[node]
    sigma = cfg.sigma[node]
    ki = np.exp(-_sq_distances(u[None, :], r) / sigma)[0]
    kj = np.exp(-_sq_distances(v[None, :], r) / sigma)[0]
    return float(ki @ kj)


def combined_kernel_matrix(queries, refs: ReferenceSet, cfg: KernelConfig, second=None):
    """Fused manifold covariance between two feature sets.

    K[i, j] = sum_r C_q[i, r] * C_s[j, r], with profiles taken against the
    reference set; `second` defaults to the reference features themselves.
    Square matrices over one set are symmetric positive semidefinite by
    construction.
    """
    c_q = base_matrix(queries, refs, cfg)
    if second is None:
        c_s = base_matrix(refs.features, refs, cfg)
    else:
        c_s = base_matrix(second, refs, cfg)
    return c_q @ c_s.T


def select_scales(refs: ReferenceSet, rule="median-heuristic", fixed=None) -> KernelConfig:
    """Per-node kernel scales.

    median-heuristic: median over reference pairs of the squared distance.
    fixed: pass through `fixed` unchanged.
    """
    if rule == "fixed":
        if fixed is None:
            raise ConfigError("fixed scale rule requires explicit values")
        return KernelConfig(np.asarray(fixed, dtype=float), scale_rule="fixed")
    if rule != "median-heuristic":
        raise ConfigError(f"unknown scale rule {rule!r}")
    if refs.n < 2:
        raise InputError("median heuristic needs at least two reference samples")
    nodes = stack_nodes(refs.features)
    iu = np.triu_indices(refs.n, k=1)
    sigma = np.empty(len(nodes))
    for m, mat in enumerate(nodes):
        d = _sq_distances(mat, mat)[iu]
        med = float(np.median(d))
        if med <= 0:
            raise DegenerateManifoldError(
                f"node {m}: median pairwise feature distance is zero"
            )
        sigma[m] = med
    return KernelConfig(sigma, scale_rule="median-heuristic")
