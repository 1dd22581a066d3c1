"""Mixture of independent-component analyzers with mixture-of-Gaussians sources.

Each mixture component is a square, noiseless linear model x = A s where the
mixing matrix A has unit-norm columns and the sources s are independent
one-dimensional mixtures of Gaussians. The density of one component is

    p(x | A, theta) = |det A|^{-1} * prod_i f_i((A^{-1} x)_i)

with f_i a MoG density, and the full model is a convex combination of K such
components. All likelihood computations run in the log domain with
log-sum-exp stabilization and are exact in the square invertible case.

Gradients returned by :func:`objective_and_gradient` are plain Euclidean
derivatives of the negative log-likelihood: the mixing gradient is valid off
the unit-column manifold (callers project it), mixture weights and component
priors are differentiated with respect to softmax logits, and standard
deviations with respect to their logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DataError, NumericalError
from .manifold import ObliqueMatrix

# Lower bound on MoG standard deviations: keeps single-point variance
# collapse out of reach of the optimizer.
SIGMA_FLOOR = 1e-4

# |det A| below this is treated as singular.
DET_FLOOR = 1e-12

SIMPLEX_TOL = 1e-12

LOG_2PI = float(np.log(2.0 * np.pi))

# Rows of data processed per block when evaluating likelihoods/gradients;
# bounds peak memory at roughly CHUNK_ROWS * L * max(m_i) floats per array.
CHUNK_ROWS = 65536


def _lock(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MoGSource:
    """One-dimensional mixture of Gaussians: weights, means, stdevs."""

    weights: np.ndarray
    means: np.ndarray
    stdevs: np.ndarray

    def __post_init__(self):
        w, mu, sd = _lock(self.weights), _lock(self.means), _lock(self.stdevs)
        if w.ndim != 1 or w.shape != mu.shape or w.shape != sd.shape or w.size < 1:
            raise ValueError("weights, means and stdevs must be 1-d arrays of equal length >= 1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(sd < SIGMA_FLOOR):
            raise ValueError(f"stdevs must all be >= {SIGMA_FLOOR}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stdevs", sd)

    @property
    def m(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class IcaComponent:
    """A single square noiseless analyzer: mixing matrix plus source bank."""

    mixing: ObliqueMatrix
    sources: tuple[MoGSource, ...]

    def __post_init__(self):
        sources = tuple(self.sources)
        if self.mixing.m != self.mixing.l:
            raise ValueError("mixing matrix must be square (noiseless square model)")
        if len(sources) != self.mixing.l:
            raise ValueError(f"expected {self.mixing.l} sources, got {len(sources)}")
        object.__setattr__(self, "sources", sources)
        if abs(self.det) < DET_FLOOR:
            raise NumericalError(f"mixing matrix is numerically singular (|det| = {abs(self.det):.3e})")

    @cached_property
    def det(self) -> float:
        sign, logabs = np.linalg.slogdet(self.mixing.data)
        return float(sign * np.exp(logabs))

    @cached_property
    def log_abs_det(self) -> float:
        _, logabs = np.linalg.slogdet(self.mixing.data)
        return float(logabs)

    @cached_property
    def unmixing(self) -> np.ndarray:
        return np.linalg.inv(self.mixing.data)

    @cached_property
    def _stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(log-weights, means, stdevs, normalizer) as (m_max, L) arrays.

        The leading axis indexes the Gaussian within each source, so hot
        loops run over contiguous (T, L) slabs. Sources with fewer Gaussians
        are padded with log-weight -inf (the padded terms vanish under
        log-sum-exp) and stdev 1 (to keep the arithmetic finite).
        ``normalizer`` pre-folds log w - log sd - log(2 pi)/2.
        """
        L = len(self.sources)
        m_max = max(s.m for s in self.sources)
        logw = np.full((m_max, L), -np.inf)
        mu = np.zeros((m_max, L))
        sd = np.ones((m_max, L))
        for i, s in enumerate(self.sources):
            with np.errstate(divide="ignore"):
                logw[: s.m, i] = np.log(s.weights)
            mu[: s.m, i] = s.means
            sd[: s.m, i] = s.stdevs
        norm = logw - np.log(sd) - 0.5 * LOG_2PI
        return logw, mu, sd, norm

    @property
    def dim(self) -> int:
        return self.mixing.m


@dataclass(frozen=True)
class MoicaModel:
    """K analyzers plus component prior weights. ``trace`` carries training
    history when the model came out of :func:`moica.training.train`; it is
    ignored by equality-sensitive consumers and never serialized."""

    components: tuple[IcaComponent, ...]
    priors: np.ndarray
    trace: Optional[object] = field(default=None, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("model needs at least one component")
        dims = {(c.mixing.m, c.mixing.l) for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share the same dimensions")
        pri = _lock(self.priors)
        if pri.shape != (len(comps),):
            raise ValueError("priors length must match the component count")
        if np.any(pri < 0) or abs(pri.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("priors must be nonnegative and sum to 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "priors", pri)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].mixing.m

    @property
    def n_features(self) -> int:
        return self.components[0].mixing.l


@dataclass(frozen=True)
class Responsibilities:
    """Posterior over mixture components and, per component and source,
    over the Gaussians inside each source's mixture."""

    component_post: np.ndarray                      # (T, K)
    gaussian_post: tuple[tuple[np.ndarray, ...], ...]  # [k][i] -> (T, m_i)


# ---------------------------------------------------------------------------
# densities


def logsumexp(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Stable log(sum(exp(a))) along one axis; tolerates -inf entries."""
    mx = np.max(a, axis=axis, keepdims=True)
    mx_safe = np.where(np.isfinite(mx), mx, 0.0)
    out = np.log(np.sum(np.exp(a - mx_safe), axis=axis, keepdims=True)) + mx_safe
    return out if keepdims else np.squeeze(out, axis=axis)


def _mog_crunch(comp: IcaComponent, s_coords: np.ndarray, want_gamma: bool):
    """Shared per-source MoG evaluation on source coordinates (T, L).

    Returns (per_source_loglik (T, L), z (m, T, L), gamma (m, T, L) | None).
    Loops run per Gaussian index over contiguous (T, L) slabs, and the
    exponentials of the log-sum-exp pass double as the (unnormalized)
    per-Gaussian posteriors, so gamma costs no second exp.
    """
    _, mu, sd, norm = comp._stacked
    m_max = mu.shape[0]
    n, L = s_coords.shape
    z = np.empty((m_max, n, L))
    lt = np.empty((m_max, n, L))
    for q in range(m_max):
        np.subtract(s_coords, mu[q], out=z[q])
        z[q] /= sd[q]
        np.multiply(z[q], z[q], out=lt[q])
        lt[q] *= -0.5
        lt[q] += norm[q]
    mx = lt[0].copy()
    for q in range(1, m_max):
        np.maximum(mx, lt[q], out=mx)
    total = np.zeros((n, L))
    e = np.empty_like(lt) if want_gamma else None
    buf = np.empty((n, L))
    for q in range(m_max):
        target = e[q] if want_gamma else buf
        np.subtract(lt[q], mx, out=target)
        np.exp(target, out=target)
        total += target
    per_source = np.log(total)
    per_source += mx
    if want_gamma:
        for q in range(m_max):
            e[q] /= total
    return per_source, z, e


def mog_logpdf(src: MoGSource, s: float) -> float:
    """Log-density of a scalar under the source's Gaussian mixture."""
    return float(mog_logpdfs(src, np.array([s]))[0])


def mog_logpdfs(src: MoGSource, s: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mog_logpdf` over an array of points."""
    s = np.asarray(s, dtype=np.float64)
    z = (s[..., None] - src.means) / src.stdevs
    with np.errstate(divide="ignore"):
        log_terms = np.log(src.weights) - 0.5 * z**2 - np.log(src.stdevs) - 0.5 * LOG_2PI
    return logsumexp(log_terms, axis=-1)


def source_vector_logpdf(comp: IcaComponent, s) -> float:
    """Joint log-density of a source vector: independent sources add."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (len(comp.sources),):
        raise ValueError(f"expected a length-{len(comp.sources)} vector, got shape {s.shape}")
    per_source, _, _ = _mog_crunch(comp, s[None, :], want_gamma=False)
    return float(per_source.sum())


def component_logliks(comp: IcaComponent, X: np.ndarray) -> np.ndarray:
    """log p(x | A, theta) for each row of X, via s = A^{-1} x."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], CHUNK_ROWS):
        block = X[start : start + CHUNK_ROWS]
        s = block @ comp.unmixing.T
        per_source, _, _ = _mog_crunch(comp, s, want_gamma=False)
        out[start : start + block.shape[0]] = per_source.sum(axis=1) - comp.log_abs_det
    return out


def component_loglik(comp: IcaComponent, x) -> float:
    """Log-density of a single observed vector under one analyzer."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (comp.dim,):
        raise ValueError(f"expected a length-{comp.dim} vector, got shape {x.shape}")
    return float(component_logliks(comp, x[None, :])[0])


def _log_joint(model: MoicaModel, X: np.ndarray, uniform_priors: bool = False) -> np.ndarray:
    """(T, K) matrix of log prior_k + log p(x_t | component k)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    if X.shape[1] != model.dim:
        raise ValueError(f"data dimension {X.shape[1]} != model dimension {model.dim}")
    priors = np.full(model.k, 1.0 / model.k) if uniform_priors else model.priors
    with np.errstate(divide="ignore"):
        log_priors = np.log(priors)
    cols = [log_priors[k] + component_logliks(c, X) for k, c in enumerate(model.components)]
    return np.stack(cols, axis=1)


def model_loglik(model: MoicaModel, X) -> float:
    """Log-likelihood of an i.i.d. dataset under the mixture."""
    return float(logsumexp(_log_joint(model, X), axis=1).sum())


class _RawMixingView:
    """Duck-typed stand-in for IcaComponent with an arbitrary square mixing.

    The mixture density is well-defined for any invertible mixing matrix;
    the model types pin columns to unit norm, so derivative checks and
    change-of-variable diagnostics go through this view instead.
    """

    def __init__(self, mixing: np.ndarray, template: IcaComponent):
        mixing = np.asarray(mixing, dtype=np.float64)
        sign, logabs = np.linalg.slogdet(mixing)
        if sign == 0 or np.exp(logabs) < DET_FLOOR:
            raise NumericalError("raw mixing matrix is numerically singular")
        self.log_abs_det = float(logabs)
        self.unmixing = np.linalg.inv(mixing)
        self._stacked = template._stacked
        self.sources = template.sources
        self.dim = mixing.shape[0]


def model_loglik_raw(model: MoicaModel, mixings, X) -> float:
    """Dataset log-likelihood with every mixing matrix replaced by an
    arbitrary (possibly non-unit-column) square matrix from ``mixings``,
    keeping sources and priors from ``model``."""
    if len(mixings) != model.k:
        raise ValueError("need one raw mixing matrix per component")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    with np.errstate(divide="ignore"):
        log_priors = np.log(model.priors)
    views = [_RawMixingView(a, c) for a, c in zip(mixings, model.components)]
    cols = [log_priors[k] + component_logliks(v, X) for k, v in enumerate(views)]
    return float(logsumexp(np.stack(cols, axis=1), axis=1).sum())


def component_posteriors(model: MoicaModel, X, uniform_priors: bool = False) -> np.ndarray:
    """(T, K) posterior over components per datum; rows sum to 1."""
    lj = _log_joint(model, X, uniform_priors=uniform_priors)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def e_step(model: MoicaModel, X) -> Responsibilities:
    """Posteriors over both latent layers: component index and, within each
    component's sources, the contributing Gaussian."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    comp_post = component_posteriors(model, X)
    gauss = []
    for comp in model.components:
        s = X @ comp.unmixing.T
        _, _, gamma = _mog_crunch(comp, s, want_gamma=True)
        gauss.append(tuple(np.ascontiguousarray(gamma[: src.m, :, i].T)
                           for i, src in enumerate(comp.sources)))
    return Responsibilities(component_post=comp_post, gaussian_post=tuple(gauss))


# ---------------------------------------------------------------------------
# objective and gradient


@dataclass
class ModelGradient:
    """Euclidean gradients of the negative log-likelihood.

    ``mixing[k]`` is the raw gradient for component k's mixing matrix.
    The MoG arrays are stacked (L, m_max) per component, zero in padded
    slots; weight and prior entries differentiate softmax logits, stdev
    entries differentiate log-sigma.
    """

    mixing: list[np.ndarray]
    mog_weight_logits: list[np.ndarray]
    mog_means: list[np.ndarray]
    mog_log_stdevs: list[np.ndarray]
    prior_logits: np.ndarray


def objective_and_gradient(model: MoicaModel, X) -> tuple[float, ModelGradient]:
    """Negative log-likelihood and its exact gradient for every parameter.

    Evaluation streams over the dataset in fixed-size row blocks (an
    associative sum of per-datum terms), so memory stays bounded and the
    model object is never mutated; duplicating every datum doubles both the
    value and the gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    if X.shape[1] != model.dim:
        raise ValueError(f"data dimension {X.shape[1]} != model dimension {model.dim}")

    K, L = model.k, model.n_features
    unmix = [c.unmixing for c in model.components]
    with np.errstate(divide="ignore"):
        log_priors = np.log(model.priors)

    value = 0.0
    g_mix = [np.zeros((model.dim, L)) for _ in range(K)]
    g_w = [np.zeros((L, max(s.m for s in c.sources))) for c in model.components]
    g_mu = [np.zeros_like(a) for a in g_w]
    g_ls = [np.zeros_like(a) for a in g_w]
    resp_total = np.zeros(K)
    n_total = 0

    eye = np.eye(L)
    for start in range(0, X.shape[0], CHUNK_ROWS):
        block = X[start : start + CHUNK_ROWS]
        n = block.shape[0]
        n_total += n

        per_comp = []  # (s, z, gamma) per component
        log_joint = np.empty((n, K))
        for k, comp in enumerate(model.components):
            s = block @ unmix[k].T
            per_source, z, gamma = _mog_crunch(comp, s, want_gamma=True)
            log_joint[:, k] = log_priors[k] + per_source.sum(axis=1) - comp.log_abs_det
            per_comp.append((s, z, gamma))

        log_norm = logsumexp(log_joint, axis=1)
        value -= float(log_norm.sum())
        resp = np.exp(log_joint - log_norm[:, None])
        resp_total += resp.sum(axis=0)

        for k, comp in enumerate(model.components):
            s, z, gamma = per_comp[k]
            sd = comp._stacked[2]
            m_max = gamma.shape[0]
            r = resp[:, k]
            # data sums of r-weighted posteriors; the sigma division factors
            # out of the t-sum, so three matvecs per Gaussian cover all MoG
            # gradients, and psi accumulates the source score d/ds log f_i(s)
            sum_g = np.empty((m_max, L))
            sum_gz = np.empty((m_max, L))
            sum_gzz = np.empty((m_max, L))
            psi = np.zeros((n, L))
            for q in range(m_max):
                gz = gamma[q] * z[q]
                sum_g[q] = r @ gamma[q]
                sum_gz[q] = r @ gz
                sum_gzz[q] = r @ (gz * z[q])
                psi -= gz / sd[q]
            outer = psi.T @ (r[:, None] * s)
            g_mix[k] += unmix[k].T @ (r.sum() * eye + outer)
            g_mu[k] -= (sum_gz / sd).T
            g_ls[k] -= (sum_gzz - sum_g).T
            g_w[k] -= sum_g.T

    if not np.isfinite(value):
        raise NumericalError("negative log-likelihood is non-finite")

    # finish the weight-logit gradient: softmax pulls back a -pi_q * sum(r) term
    for k, comp in enumerate(model.components):
        pi = np.exp(comp._stacked[0]).T  # (L, m_max); padded slots -> 0
        g_w[k] += resp_total[k] * pi

    g_priors = n_total * model.priors - resp_total

    grad = ModelGradient(
        mixing=g_mix,
        mog_weight_logits=g_w,
        mog_means=g_mu,
        mog_log_stdevs=g_ls,
        prior_logits=g_priors,
    )
    return value, grad
