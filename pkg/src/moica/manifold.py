"""Oblique-manifold geometry and a Riemannian limited-memory BFGS minimizer.

The oblique manifold is the set of real M x L matrices whose columns each
have unit Euclidean norm -- a product of L unit spheres, treated as a
Riemannian submanifold of R^{M x L} with the Frobenius inner product.
Points stay exactly on the manifold throughout optimization:

* tangent projection removes the radial part of each column,
* the retraction renormalizes columns after a tangent step,
* vector transport re-projects stored vectors at the new base point.

The minimizer is a limited-memory BFGS with a strong Wolfe line search
performed along the retraction curve. Curvature pairs are transported
between iterates by projection and discarded when the curvature condition
degrades past a guard threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError

COLUMN_NORM_TOL = 1e-12
TANGENT_TOL = 1e-10

# Discard an (s, y) pair when <s, y> <= CURVATURE_GUARD * |s| * |y|.
CURVATURE_GUARD = 1e-10

# A retraction column with norm below this is treated as degenerate.
DEGENERATE_NORM = 1e-12


class DegenerateStepError(NumericalError):
    """A retraction step sent some column (numerically) to the zero vector."""


def _as_locked_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ObliqueMatrix:
    """A matrix with unit-norm columns; the manifold point type.

    The wrapped array is copied and made read-only so iterates can be
    shared safely. Construction validates the column norms.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_locked_array(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected a nonempty 2-d matrix, got shape {np.shape(self.data)}")
        dev = column_norm_error(arr)
        if not np.isfinite(arr).all():
            raise ValueError("matrix contains non-finite entries")
        if dev > COLUMN_NORM_TOL:
            raise ValueError(f"columns are not unit-norm (max deviation {dev:.3e})")
        object.__setattr__(self, "data", arr)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def l(self) -> int:
        return self.data.shape[1]

    @classmethod
    def normalize(cls, matrix) -> "ObliqueMatrix":
        """Project an arbitrary matrix onto the manifold by column scaling."""
        arr = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(arr, axis=0)
        if np.any(norms < DEGENERATE_NORM):
            raise DegenerateStepError("cannot normalize a (near-)zero column")
        return cls(arr / norms)

    @classmethod
    def random(cls, m: int, l: int, rng: np.random.Generator) -> "ObliqueMatrix":
        """Gaussian matrix with columns normalized to the manifold."""
        return cls.normalize(rng.standard_normal((m, l)))


@dataclass(frozen=True)
class TangentVector:
    """A matrix whose columns are orthogonal to the base point's columns."""

    data: np.ndarray
    base: ObliqueMatrix

    def __post_init__(self):
        arr = _as_locked_array(self.data)
        if arr.shape != self.base.data.shape:
            raise ValueError(f"tangent shape {arr.shape} != base shape {self.base.data.shape}")
        radial = np.abs(np.einsum("ij,ij->j", self.base.data, arr))
        # tolerance scales with the column magnitude (float error is relative)
        limit = TANGENT_TOL * np.maximum(1.0, np.linalg.norm(arr, axis=0))
        if radial.size and np.any(radial > limit):
            raise ValueError(f"vector is not tangent (max radial component {radial.max():.3e})")
        object.__setattr__(self, "data", arr)


def column_norm_error(matrix: np.ndarray) -> float:
    """max_j | ||col_j|| - 1 |, the distance from the manifold."""
    return float(np.abs(np.linalg.norm(matrix, axis=0) - 1.0).max())


def _project(base: np.ndarray, raw: np.ndarray) -> np.ndarray:
    return raw - base * np.einsum("ij,ij->j", base, raw)


def project_tangent(x: ObliqueMatrix, v) -> TangentVector:
    """Project a raw matrix onto the tangent space at ``x``.

    Columnwise: v_j - <x_j, v_j> x_j. Projecting twice squares the rounding
    residual away, so the result is orthogonal to machine precision even for
    large-magnitude inputs.
    """
    raw = np.asarray(v, dtype=np.float64)
    if raw.shape != x.data.shape:
        raise ValueError(f"shape mismatch: point {x.data.shape}, vector {raw.shape}")
    return TangentVector(_project(x.data, _project(x.data, raw)), x)


def retract(x: ObliqueMatrix, v: TangentVector, step: float) -> ObliqueMatrix:
    """Step along ``v`` and renormalize each column back onto the manifold."""
    if step == 0.0:
        return x
    w = x.data + step * v.data
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateStepError(f"retraction produced a zero column at step {step}")
    return ObliqueMatrix(w / norms)


def transport(x_old: ObliqueMatrix, x_new: ObliqueMatrix, v: TangentVector) -> TangentVector:
    """Move a tangent vector at ``x_old`` to the tangent space at ``x_new``."""
    if x_old.data.shape != x_new.data.shape:
        raise ValueError("transport endpoints have different shapes")
    return project_tangent(x_new, v.data)


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-6
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_linesearch: int = 25

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be a positive integer")
        if self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValueError("Wolfe constants must satisfy 0 < c1 < c2 < 1")
        if self.max_linesearch < 1:
            raise ValueError("max_linesearch must be a positive integer")


@dataclass
class MinimizeResult:
    """Outcome of a Riemannian L-BFGS run.

    ``values`` holds the objective at the start point followed by every
    accepted iterate; the Wolfe line search makes this sequence
    non-increasing. ``max_column_norm_error`` is the worst manifold
    violation observed over all accepted iterates.
    """

    point: ObliqueMatrix
    values: list[float]
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool
    max_column_norm_error: float
    points: Optional[list[ObliqueMatrix]] = None


Objective = Callable[[ObliqueMatrix], tuple[float, np.ndarray]]


def _frob(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.tensordot(a, b))


class _CurveEval:
    """Objective evaluation along the retraction curve t -> R_x(t d).

    Exposes phi(t) = f(R_x(t d)) and its exact derivative. Per column,
    with w = x_j + t d_j:

        dR/dt = d_j / |w|  -  w <w, d_j> / |w|^3

    so phi'(t) is the Frobenius pairing of the raw Euclidean gradient with
    that curve velocity. Degenerate or non-finite trial points evaluate to
    +inf, which the line search treats as an overlong step.
    """

    def __init__(self, objective: Objective, x: np.ndarray, d: np.ndarray):
        self.objective = objective
        self.x = x
        self.d = d
        self.evals = 0

    def __call__(self, t: float):
        self.evals += 1
        w = self.x + t * self.d
        norms = np.linalg.norm(w, axis=0)
        if np.any(norms < DEGENERATE_NORM):
            return math.inf, math.nan, None, None
        point = ObliqueMatrix(w / norms)
        try:
            f, raw = self.objective(point)
        except NumericalError:
            return math.inf, math.nan, None, None
        raw = np.asarray(raw, dtype=np.float64)
        if not math.isfinite(f) or not np.isfinite(raw).all():
            return math.inf, math.nan, None, None
        velocity = self.d / norms - w * (np.einsum("ij,ij->j", w, self.d) / norms**3)
        return f, _frob(raw, velocity), point, raw


def _wolfe_search(curve: _CurveEval, f0: float, dphi0: float, cfg: LbfgsConfig):
    """Strong Wolfe bracketing line search along the retraction curve.

    Returns (t, f, point, raw_grad) or None when no acceptable step was
    found within cfg.max_linesearch objective evaluations.
    """
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2

    def zoom(lo, f_lo, dphi_lo, hi, f_hi, best):
        # Bisection zoom; keeps the invariant that lo satisfies Armijo and
        # the minimizer lies between lo and hi.
        while curve.evals < cfg.max_linesearch:
            t = 0.5 * (lo + hi)
            f, dphi, point, raw = curve(t)
            if f > f0 + c1 * t * dphi0 or f >= f_lo:
                hi, f_hi = t, f
            else:
                if abs(dphi) <= -c2 * dphi0:
                    return t, f, point, raw
                if dphi * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, dphi_lo = t, f, dphi
                best = (t, f, point, raw)
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        return None

    t_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    t = 1.0
    first = True
    while curve.evals < cfg.max_linesearch:
        f, dphi, point, raw = curve(t)
        if f > f0 + c1 * t * dphi0 or (not first and f >= f_prev):
            return zoom(t_prev, f_prev, dphi_prev, t, f, None)
        if abs(dphi) <= -c2 * dphi0:
            return t, f, point, raw
        if dphi >= 0:
            return zoom(t, f, dphi, t_prev, f_prev, None)
        t_prev, f_prev, dphi_prev = t, f, dphi
        t *= 2.0
        first = False
    return None


def minimize(objective: Objective, x0: ObliqueMatrix, cfg: LbfgsConfig,
             record_points: bool = False) -> MinimizeResult:
    """Minimize a smooth function over matrices with unit-norm columns.

    ``objective`` maps a manifold point to (value, raw Euclidean gradient);
    the raw gradient is projected internally. Every accepted step satisfies
    the strong Wolfe conditions in the manifold metric, so the trace of
    accepted objective values is non-increasing. Iteration stops when the
    projected gradient norm falls to ``cfg.grad_tol`` or after
    ``cfg.max_iters`` accepted steps.

    A failed line search terminates the run at the best iterate found, with
    ``line_search_failed`` set. The optimizer holds no global state and is
    safe to call concurrently with distinct arguments.
    """
    x = x0
    f, raw = objective(x)
    raw = np.asarray(raw, dtype=np.float64)
    if not math.isfinite(f) or not np.isfinite(raw).all():
        raise NumericalError("objective or gradient is non-finite at the start point")

    g = _project(x.data, raw)
    grad_norm = math.sqrt(_frob(g, g))
    values = [f]
    points = [x] if record_points else None
    max_dev = column_norm_error(x.data)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    iterations = 0
    converged = grad_norm <= cfg.grad_tol
    ls_failed = False

    while not converged and iterations < cfg.max_iters:
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        dphi0 = _frob(g, d)
        if not (dphi0 < 0):
            # Stale curvature produced a non-descent direction; fall back.
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            dphi0 = -grad_norm**2
            if not (dphi0 < 0):
                break

        curve = _CurveEval(objective, x.data, d)
        hit = _wolfe_search(curve, f, dphi0, cfg)
        if hit is None and s_hist:
            # Retry once along steepest descent with a fresh budget.
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            curve = _CurveEval(objective, x.data, d)
            hit = _wolfe_search(curve, f, -grad_norm**2, cfg)
        if hit is None:
            ls_failed = True
            break

        t, f_new, x_new, raw_new = hit
        g_new = _project(x_new.data, raw_new)

        # Transport history to the new tangent space, dropping pairs whose
        # curvature no longer passes the guard.
        s_hist = [_project(x_new.data, s) for s in s_hist]
        y_hist = [_project(x_new.data, y) for y in y_hist]
        kept = [(s, y, _frob(s, y)) for s, y in zip(s_hist, y_hist)]
        s_hist, y_hist, rho_hist = [], [], []
        for s, y, sy in kept:
            if sy > CURVATURE_GUARD * math.sqrt(_frob(s, s) * _frob(y, y)):
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)

        s_new = _project(x_new.data, t * d)
        y_new = g_new - _project(x_new.data, g)
        sy = _frob(s_new, y_new)
        if sy > CURVATURE_GUARD * math.sqrt(_frob(s_new, s_new) * _frob(y_new, y_new)):
            s_hist.append(s_new)
            y_hist.append(y_new)
            rho_hist.append(1.0 / sy)
        if len(s_hist) > cfg.memory:
            s_hist = s_hist[-cfg.memory:]
            y_hist = y_hist[-cfg.memory:]
            rho_hist = rho_hist[-cfg.memory:]

        x, f, g = x_new, f_new, g_new
        grad_norm = math.sqrt(_frob(g, g))
        iterations += 1
        values.append(f)
        if points is not None:
            points.append(x)
        max_dev = max(max_dev, column_norm_error(x.data))
        converged = grad_norm <= cfg.grad_tol

    return MinimizeResult(
        point=x,
        values=values,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        line_search_failed=ls_failed,
        max_column_norm_error=max_dev,
        points=points,
    )


def _two_loop(g: np.ndarray, s_hist, y_hist, rho_hist) -> np.ndarray:
    """Inverse-Hessian application via the standard two-loop recursion."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * _frob(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        gamma = _frob(s_hist[-1], y_hist[-1]) / _frob(y_hist[-1], y_hist[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * _frob(y, q)
        q += (a - b) * s
    return -q
