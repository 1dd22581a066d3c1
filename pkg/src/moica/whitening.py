"""PCA whitening of vectorized patches and the inverse map.

Fitting subtracts the sample mean, eigendecomposes the (population,
1/T-normalized) covariance and keeps the top ``d`` eigenpairs. The forward
map is

    whiten(x) = diag(1/sqrt(lambda + eps)) . basis^T . (x - mean)

so the whitened training set has zero mean and identity covariance on the
retained subspace when eps = 0. ``dewhiten`` inverts the map on that
subspace, which makes learned feature columns renderable as image patches.

When the ambient dimension exceeds the sample count the covariance
eigenpairs are recovered from the T x T Gram matrix instead; both routes
agree to high accuracy and use a deterministic sign convention.

Transforms are frozen after fitting; whiten/dewhiten are pure functions of
their inputs and safe to share across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

ORTHONORMAL_TOL = 1e-10

# Relative eigenvalue cutoff below which a direction counts as rank-deficient.
RANK_TOL = 1e-12

DEFAULT_EPS_SCALE = 1e-5


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray         # (D,)
    basis: np.ndarray        # (D, d), orthonormal columns
    eigenvalues: np.ndarray  # (d,), descending, all > 0
    eps: float
    captured_variance: float = 1.0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, copy=True)
        basis = np.array(self.basis, dtype=np.float64, copy=True)
        eig = np.array(self.eigenvalues, dtype=np.float64, copy=True)
        if basis.ndim != 2 or mean.shape != (basis.shape[0],):
            raise ValueError("mean/basis shapes are inconsistent")
        D, d = basis.shape
        if d > D:
            raise ValueError("cannot retain more directions than the ambient dimension")
        if eig.shape != (d,):
            raise ValueError("need one eigenvalue per retained direction")
        gram_err = np.abs(basis.T @ basis - np.eye(d)).max()
        if gram_err > ORTHONORMAL_TOL:
            raise ValueError(f"basis columns are not orthonormal (error {gram_err:.3e})")
        if np.any(eig <= 0) or np.any(np.diff(eig) > 0):
            raise ValueError("eigenvalues must be positive and sorted descending")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        for name, arr in [("mean", mean), ("basis", basis), ("eigenvalues", eig)]:
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues + self.eps)


def _canonical_signs(basis: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Eigenvector signs are arbitrary; fixing them makes fits reproducible
    across LAPACK builds and lets the Gram and direct routes agree exactly.
    """
    idx = np.abs(basis).argmax(axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def fit_whitening(X, d: int, eps_scale: float = DEFAULT_EPS_SCALE) -> WhiteningTransform:
    """Fit a whitening transform to rows of ``X``, retaining ``d`` directions.

    ``eps_scale`` sets the variance regularizer relative to the largest
    eigenvalue; the stored ``eps`` is absolute. If the covariance has rank
    r < d, the transform is reduced to r directions with a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d dataset (rows are observations)")
    T, D = X.shape
    if d < 1:
        raise ValueError("d must be at least 1")
    if T <= d:
        raise DataError(f"need more samples than retained dimensions (T={T}, d={d})")
    if eps_scale < 0:
        raise ValueError("eps_scale must be nonnegative")

    mean = X.mean(axis=0)
    Z = X - mean

    if D <= T:
        cov = (Z.T @ Z) / T
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals, eigvecs = eigvals[order], eigvecs[:, order]
        total_variance = float(np.sum(np.maximum(eigvals, 0.0)))
    else:
        gram = (Z @ Z.T) / T
        gvals, gvecs = np.linalg.eigh(gram)
        order = np.argsort(gvals)[::-1]
        gvals, gvecs = gvals[order], gvecs[:, order]
        total_variance = float(np.sum(np.maximum(gvals, 0.0)))
        keep = min(D, T)
        eigvals = gvals[:keep]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(eigvals > 0, 1.0 / np.sqrt(T * np.maximum(eigvals, 1e-300)), 0.0)
        eigvecs = Z.T @ gvecs[:, :keep] * scale

    lead = max(eigvals[0], 0.0)
    rank = int(np.sum(eigvals > RANK_TOL * max(lead, 1e-300)))
    if rank < d:
        warnings.warn(
            f"covariance rank {rank} is below the requested dimension {d}; reducing",
            stacklevel=2,
        )
        d = max(rank, 1)

    basis = _canonical_signs(eigvecs[:, :d])
    eigvals = eigvals[:d]
    captured = float(eigvals.sum() / total_variance) if total_variance > 0 else 1.0

    return WhiteningTransform(
        mean=mean,
        basis=basis,
        eigenvalues=eigvals,
        eps=float(eps_scale * lead),
        captured_variance=captured,
    )


def whiten(tf: WhiteningTransform, x) -> np.ndarray:
    """Map raw vectors (..., D) to whitened coordinates (..., d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != tf.ambient_dim:
        raise ValueError(f"expected trailing dimension {tf.ambient_dim}, got {x.shape[-1]}")
    return (x - tf.mean) @ tf.basis / tf.scales


def dewhiten(tf: WhiteningTransform, y) -> np.ndarray:
    """Map whitened coordinates (..., d) back to the ambient space (..., D)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != tf.reduced_dim:
        raise ValueError(f"expected trailing dimension {tf.reduced_dim}, got {y.shape[-1]}")
    return y * tf.scales @ tf.basis.T + tf.mean


def feature_to_image(tf: WhiteningTransform, column, patch_size: int) -> np.ndarray:
    """Render one learned feature column as an (p, p, 3) image in [0, 1].

    The column lives in whitened space; it is mapped back through the
    transform and affinely rescaled so its extremes hit 0 and 1.
    """
    from .patches import unvectorize_patch

    raw = dewhiten(tf, np.asarray(column, dtype=np.float64))
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        raw = (raw - lo) / (hi - lo)
    else:
        raw = np.full_like(raw, 0.5)
    return unvectorize_patch(raw, patch_size)
