"""Training loop for the mixture-of-analyzers model.

Optimization alternates two blocks, each holding the other's parameters
fixed:

* a Riemannian L-BFGS step over all mixing matrices jointly -- the K
  unit-column matrices are stacked columnwise into one point on a larger
  oblique manifold, so the product geometry comes for free;
* a bounded Euclidean L-BFGS step (scipy) over source parameters and
  component priors, parameterized by softmax logits for the weight vectors,
  raw means, and log standard deviations with a floor bound.

Minibatch epochs run first: each batch gets one pair of short blocks, and
the quasi-Newton history never crosses a batch boundary because curvature
pairs from different sub-objectives are inconsistent. A full-batch
refinement phase follows, with a guard that never accepts a block whose
exit objective is worse than its entry, so the refinement trace is
non-increasing.

Training works on a private copy of the parameters; the returned model is
immutable and safe to share.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
from scipy.special import ndtri

from .errors import NumericalError
from .manifold import LbfgsConfig, ObliqueMatrix, minimize, project_tangent
from .model import (
    SIGMA_FLOOR,
    IcaComponent,
    MoGSource,
    MoicaModel,
    objective_and_gradient,
)
from .patches import minibatches


@dataclass(frozen=True)
class TrainConfig:
    n_components: int = 2
    n_gaussians: int = 3
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    batch_size: int = 10_000
    epochs: int = 2
    refine_rounds: int = 50
    block_iters: int = 5
    refine_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1 or self.n_gaussians < 1:
            raise ValueError("component and Gaussian counts must be positive")
        if self.batch_size < 1 or self.block_iters < 1:
            raise ValueError("batch_size and block_iters must be positive")
        if self.epochs < 0 or self.refine_rounds < 0:
            raise ValueError("epochs and refine_rounds cannot be negative")


@dataclass
class TrainingTrace:
    """Objective history of a training run.

    ``minibatch_values`` holds the sub-objective after each minibatch block
    pair (not comparable across batches); ``refine_values`` holds the
    full-batch objective after every refinement block and is non-increasing
    by construction.
    """

    minibatch_values: list[float] = field(default_factory=list)
    refine_values: list[float] = field(default_factory=list)
    initial_value: float = np.nan
    final_value: float = np.nan
    initial_grad_norm: float = np.nan
    final_grad_norm: float = np.nan
    max_column_norm_error: float = 0.0
    line_search_failures: int = 0


def init_model(dim: int, config: TrainConfig) -> MoicaModel:
    """Seeded starting point: normalized Gaussian mixing matrices (a distinct
    substream per component), equally weighted unit-variance Gaussians with
    means at standard-normal quantiles, uniform priors."""
    rng = np.random.default_rng(config.seed)
    streams = rng.spawn(config.n_components)
    m = config.n_gaussians
    means = ndtri((np.arange(m) + 0.5) / m)
    comps = []
    for stream in streams:
        mixing = ObliqueMatrix.random(dim, dim, stream)
        sources = tuple(
            MoGSource(np.full(m, 1.0 / m), means.copy(), np.ones(m))
            for _ in range(dim)
        )
        comps.append(IcaComponent(mixing, sources))
    priors = np.full(config.n_components, 1.0 / config.n_components)
    return MoicaModel(tuple(comps), priors)


# ---------------------------------------------------------------------------
# mixing-matrix block (oblique manifold)


def _stack_mixings(model: MoicaModel) -> ObliqueMatrix:
    return ObliqueMatrix(np.hstack([c.mixing.data for c in model.components]))


def _with_mixings(model: MoicaModel, stacked: np.ndarray) -> MoicaModel:
    L = model.n_features
    comps = tuple(
        IcaComponent(ObliqueMatrix(stacked[:, k * L : (k + 1) * L]), c.sources)
        for k, c in enumerate(model.components)
    )
    return MoicaModel(comps, model.priors)


def _mixing_block(model: MoicaModel, X: np.ndarray, cfg: LbfgsConfig, trace: TrainingTrace):
    L = model.n_features

    def objective(point: ObliqueMatrix):
        trial = _with_mixings(model, point.data)
        value, grad = objective_and_gradient(trial, X)
        return value, np.hstack(grad.mixing)

    result = minimize(objective, _stack_mixings(model), cfg)
    trace.max_column_norm_error = max(trace.max_column_norm_error,
                                      result.max_column_norm_error)
    trace.line_search_failures += int(result.line_search_failed)
    return _with_mixings(model, result.point.data), result.values[-1], result.grad_norm


# ---------------------------------------------------------------------------
# source/prior block (Euclidean with a stdev floor bound)


def _pack_euclidean(model: MoicaModel) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """Flatten per-component (weight logits, means, log stdevs) plus prior
    logits; bounds keep log-sigma above the collapse floor."""
    parts, bounds = [], []
    free = (-np.inf, np.inf)
    floor = (np.log(SIGMA_FLOOR), np.inf)
    for comp in model.components:
        for src in comp.sources:
            parts.append(np.log(src.weights))
            bounds += [free] * src.m
            parts.append(src.means)
            bounds += [free] * src.m
            parts.append(np.log(src.stdevs))
            bounds += [floor] * src.m
    parts.append(np.log(model.priors))
    bounds += [free] * model.k
    return np.concatenate(parts), bounds


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _unpack_euclidean(model: MoicaModel, vec: np.ndarray) -> MoicaModel:
    pos = 0
    comps = []
    for comp in model.components:
        sources = []
        for src in comp.sources:
            m = src.m
            logits = vec[pos : pos + m]; pos += m
            means = vec[pos : pos + m]; pos += m
            log_sd = vec[pos : pos + m]; pos += m
            sources.append(MoGSource(_softmax(logits), means,
                                     np.maximum(np.exp(log_sd), SIGMA_FLOOR)))
        comps.append(IcaComponent(comp.mixing, tuple(sources)))
    priors = _softmax(vec[pos : pos + model.k])
    return MoicaModel(tuple(comps), priors)


def _grad_euclidean(model: MoicaModel, grad) -> np.ndarray:
    parts = []
    for k, comp in enumerate(model.components):
        for i, src in enumerate(comp.sources):
            parts.append(grad.mog_weight_logits[k][i, : src.m])
            parts.append(grad.mog_means[k][i, : src.m])
            parts.append(grad.mog_log_stdevs[k][i, : src.m])
    parts.append(grad.prior_logits)
    return np.concatenate(parts)


def _euclid_block(model: MoicaModel, X: np.ndarray, iters: int):
    v0, bounds = _pack_euclidean(model)

    def fun(v):
        trial = _unpack_euclidean(model, v)
        value, grad = objective_and_gradient(trial, X)
        return value, _grad_euclidean(trial, grad)

    f0, _ = fun(v0)
    res = scipy.optimize.minimize(
        fun, v0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": iters, "maxls": 40},
    )
    if not np.isfinite(res.fun):
        raise NumericalError("source-parameter block produced a non-finite objective")
    if res.fun > f0:  # never accept a worse point than the block entry
        return model, f0
    return _unpack_euclidean(model, res.x), float(res.fun)


# ---------------------------------------------------------------------------
# the full schedule


def _riemannian_grad_norm(model: MoicaModel, grad) -> float:
    total = 0.0
    for comp, g in zip(model.components, grad.mixing):
        t = project_tangent(comp.mixing, g).data
        total += float(np.sum(t * t))
    return float(np.sqrt(total))


def train(X, config: TrainConfig | None = None) -> MoicaModel:
    """Fit a mixture of analyzers to (already whitened) data rows.

    Runs ``config.epochs`` minibatch epochs followed by full-batch
    refinement, alternating the mixing-matrix and source-parameter blocks.
    The returned model carries a :class:`TrainingTrace` in ``model.trace``.
    Raises :class:`NumericalError` if the objective leaves the finite range.
    """
    if config is None:
        config = TrainConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T, dim = X.shape
    if T < 10 * config.n_components * dim:
        warnings.warn(
            f"only {T} samples for {config.n_components} components in dimension "
            f"{dim}; training will run but estimates may be poor",
            stacklevel=2,
        )

    trace = TrainingTrace()
    model = init_model(dim, config)
    block_cfg = replace(config.lbfgs, max_iters=config.block_iters)

    value, grad = objective_and_gradient(model, X)
    trace.initial_value = value
    trace.initial_grad_norm = _riemannian_grad_norm(model, grad)

    # Minibatch phase: fresh quasi-Newton state per batch, short blocks.
    for epoch in range(config.epochs):
        for batch in minibatches(T, config.batch_size, config.seed, epoch):
            model, _, _ = _mixing_block(model, X[batch], block_cfg, trace)
            model, fb = _euclid_block(model, X[batch], config.block_iters)
            trace.minibatch_values.append(fb)

    # Full-batch refinement with a monotonic-acceptance guard.
    prev, _ = objective_and_gradient(model, X)
    for _ in range(config.refine_rounds):
        cand, f_mix, _ = _mixing_block(model, X, block_cfg, trace)
        if f_mix <= prev:
            model = cand
        else:
            f_mix = prev
        trace.refine_values.append(f_mix)

        cand, f_src = _euclid_block(model, X, config.block_iters)
        if f_src <= f_mix:
            model = cand
        else:
            f_src = f_mix
        trace.refine_values.append(f_src)

        if not np.isfinite(f_src):
            raise NumericalError("training objective is non-finite")
        if prev - f_src <= config.refine_tol * max(1.0, abs(prev)):
            prev = f_src
            break
        prev = f_src

    trace.final_value = prev
    _, grad = objective_and_gradient(model, X)
    trace.final_grad_norm = _riemannian_grad_norm(model, grad)
    return MoicaModel(model.components, model.priors, trace=trace)
