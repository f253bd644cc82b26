"""Per-client distribution fingerprints.

A client's fingerprint is the vector of top-l eigenvalues of the sample
covariance of its augmented feature-label matrix: each row concatenates the
extracted features of one training sample with the one-hot encoding of its
label. Columns are mean-centered and the covariance uses the unbiased n-1
divisor; eigenvalues are reported in nonincreasing order, zero-padded to
length l when the matrix rank falls short.

Two routes compute the spectrum: a dense symmetric eigendecomposition of the
explicit covariance (reference), and blocked subspace iteration that only
touches the data through matrix-vector products (fast path, linear in the
number of samples). They agree to 1e-6 relative per retained eigenvalue.
"""

from __future__ import annotations

import numpy as np

from .data import FeatureExtractor
from .heterogeneity import ClientShard

DEFAULT_STATS_DIM = 32


def one_hot(y: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((y.shape[0], class_count))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def build_augmented(X: np.ndarray, y: np.ndarray, extractor: FeatureExtractor,
                    class_count: int) -> np.ndarray:
    """Rows [phi(x) || onehot(y)]; one row per training sample."""
    if X.shape[0] == 0:
        raise ValueError("cannot fingerprint an empty shard")
    y = np.asarray(y)
    if y.min() < 0 or y.max() >= class_count:
        raise ValueError(f"label outside [0, {class_count})")
    feats = extractor.apply(X)
    return np.hstack([feats, one_hot(y, class_count)])


def _centered(Z: np.ndarray) -> np.ndarray:
    return Z - Z.mean(axis=0, keepdims=True)


def _noise_floor(Z: np.ndarray) -> float:
    """Eigenvalues at the level of centering round-off are exact zeros."""
    n = Z.shape[0]
    scale = np.abs(Z).max(initial=0.0)
    return n * (scale * np.finfo(np.float64).eps) ** 2


def pca_eigenvalues_dense(Z: np.ndarray, l: int) -> np.ndarray:
    """Reference path: eigenvalues of the explicit d x d sample covariance."""
    if l < 1:
        raise ValueError("l must be >= 1")
    n, d = Z.shape
    if n < 2:
        return np.zeros(l)
    Zc = _centered(Z)
    cov = (Zc.T @ Zc) / (n - 1)
    vals = np.linalg.eigvalsh(cov)[::-1]
    vals[vals <= _noise_floor(Z)] = 0.0
    out = np.zeros(l)
    out[:min(l, d)] = vals[:min(l, d)]
    return out


def pca_eigenvalues_iterative(Z: np.ndarray, l: int, max_iter: int = 500,
                              tol: float = 1e-10, seed: int = 0) -> np.ndarray:
    """Fast path: blocked subspace iteration with Rayleigh-Ritz extraction.

    Never forms the covariance matrix; each sweep costs O(n*d*b) through the
    products Zc.T @ (Zc @ Q). The block is oversampled beyond l to speed up
    convergence of the trailing retained eigenvalues.
    """
    if l < 1:
        raise ValueError("l must be >= 1")
    n, d = Z.shape
    if n < 2:
        return np.zeros(l)
    Zc = _centered(Z)
    k = min(l, d)
    block = min(d, k + 8)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, block)))
    scale = 1.0 / (n - 1)

    def apply_cov(V: np.ndarray) -> np.ndarray:
        return (Zc.T @ (Zc @ V)) * scale

    prev = None
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(apply_cov(Q))
        # Rayleigh-Ritz estimate on the current subspace
        B = Q.T @ apply_cov(Q)
        ritz = np.sort(np.linalg.eigvalsh((B + B.T) / 2.0))[::-1][:k]
        if prev is not None:
            denom = max(np.abs(ritz).max(), 1e-300)
            if np.abs(ritz - prev).max() <= tol * denom:
                break
        prev = ritz
    ritz = np.where(ritz <= _noise_floor(Z), 0.0, ritz)
    out = np.zeros(l)
    out[:k] = ritz
    return out


def pca_eigenvalues(Z: np.ndarray, l: int, method: str = "dense") -> np.ndarray:
    """Top-l covariance eigenvalues, sorted descending, zero-padded to l."""
    if method == "dense":
        return pca_eigenvalues_dense(Z, l)
    if method == "iterative":
        return pca_eigenvalues_iterative(Z, l)
    raise ValueError(f"unknown method {method!r}")


def fingerprint_client(shard: ClientShard, extractor: FeatureExtractor,
                       class_count: int, l: int = DEFAULT_STATS_DIM,
                       method: str = "dense") -> np.ndarray:
    """Compute and attach a client's fingerprint from its training shard.

    Computed once before training; the same vector is reused at inference, so
    no test-time label information enters the pipeline.
    """
    Z = build_augmented(shard.train.X, shard.train.y, extractor, class_count)
    stats = pca_eigenvalues(Z, l, method=method)
    shard.stats = stats
    return stats


def fingerprint_all(shards: list[ClientShard], extractor: FeatureExtractor,
                    class_count: int, l: int = DEFAULT_STATS_DIM,
                    method: str = "dense") -> np.ndarray:
    """Fingerprints for every shard, stacked (n_clients, l)."""
    return np.vstack([fingerprint_client(s, extractor, class_count, l, method=method)
                      for s in shards])
