"""Synthetic ground truth and evaluation oracles.

Real stained blood-smear data is not shippable, so tests and fixtures run
against data generated from known models: i.i.d. draws from a mixture of
analyzers, tiled texture images with per-pixel region truth, and island
fixtures whose foreground patches carry subspace-restricted coefficients.
All generators are pure functions of their seed.

Gaussian sources make the mixing matrix unidentifiable, so the bundled
presets are deliberately non-Gaussian: a heavy-tailed "sparse" source and a
two-bump "bimodal" source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .manifold import ObliqueMatrix
from .model import IcaComponent, MoGSource, MoicaModel
from .patches import Image, unvectorize_patch


def sparse_source() -> MoGSource:
    """Heavy-tailed source: mostly small values, occasional large ones."""
    return MoGSource(
        weights=np.array([0.8, 0.2]),
        means=np.array([0.0, 0.0]),
        stdevs=np.array([0.3, 2.0]),
    )


def bimodal_source() -> MoGSource:
    """Two well-separated bumps at +-1."""
    return MoGSource(
        weights=np.array([0.5, 0.5]),
        means=np.array([-1.0, 1.0]),
        stdevs=np.array([0.4, 0.4]),
    )


def shifted_bimodal_source() -> MoGSource:
    """Bimodal source with a positive mean offset.

    A component built from these is linearly separated from the zero-mean
    presets in observation space, which is what mixture-separation fixtures
    need to count as well-separated.
    """
    return MoGSource(
        weights=np.array([0.5, 0.5]),
        means=np.array([1.5, 3.5]),
        stdevs=np.array([0.4, 0.4]),
    )


PRESETS = {
    "sparse": sparse_source,
    "bimodal": bimodal_source,
    "shifted_bimodal": shifted_bimodal_source,
}


@dataclass(frozen=True)
class SynthSpec:
    """A fully known generating model plus the seed that drives sampling."""

    model: MoicaModel
    seed: int


def random_spec(dim: int, presets, seed: int, priors=None) -> SynthSpec:
    """Build a spec with one component per preset name and random unit-column
    mixing matrices (a distinct substream per component)."""
    presets = list(presets)
    if not presets:
        raise ValueError("need at least one source preset")
    rng = np.random.default_rng(seed)
    streams = rng.spawn(len(presets))
    comps = []
    for name, stream in zip(presets, streams):
        make = PRESETS[name] if isinstance(name, str) else name
        mixing = ObliqueMatrix.random(dim, dim, stream)
        comps.append(IcaComponent(mixing, tuple(make() for _ in range(dim))))
    if priors is None:
        priors = np.full(len(comps), 1.0 / len(comps))
    return SynthSpec(model=MoicaModel(tuple(comps), np.asarray(priors, dtype=np.float64)),
                     seed=seed)


def _draw_sources(comp: IcaComponent, n: int, rng: np.random.Generator) -> np.ndarray:
    s = np.empty((n, len(comp.sources)))
    for i, src in enumerate(comp.sources):
        which = rng.choice(src.m, size=n, p=src.weights)
        s[:, i] = rng.normal(src.means[which], src.stdevs[which])
    return s


def gen_moica_samples(spec: SynthSpec, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample T observations and their true component labels."""
    if T < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(spec.seed)
    model = spec.model
    labels = rng.choice(model.k, size=T, p=model.priors)
    X = np.empty((T, model.dim))
    for k, comp in enumerate(model.components):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            X[idx] = _draw_sources(comp, idx.size, rng) @ comp.mixing.data.T
    return X, labels


def gen_texture_image(spec: SynthSpec, region_mask: np.ndarray,
                      patch_size: int) -> tuple[Image, np.ndarray]:
    """Tile an image with patches drawn from per-region components.

    ``region_mask`` is an (h, w) integer map of component indices; each
    patch-sized tile is synthesized from the component covering the majority
    of it. Pixel values are squashed to [0, 1] by one global affine map, and
    the mask itself is returned as the per-pixel ground truth.
    """
    mask = np.asarray(region_mask)
    if mask.ndim != 2:
        raise DataError("region mask must be a 2-d integer map")
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise DataError("mask dimensions must be multiples of the patch size")
    if mask.min() < 0 or mask.max() >= spec.model.k:
        raise DataError("mask values must index the spec's components")
    if spec.model.dim != 3 * patch_size * patch_size:
        raise DataError("spec dimension must equal the vectorized patch size")

    rng = np.random.default_rng(spec.seed)
    raw = np.empty((h, w, 3))
    for ty in range(0, h, patch_size):
        for tx in range(0, w, patch_size):
            tile_mask = mask[ty : ty + patch_size, tx : tx + patch_size]
            region = int(np.bincount(tile_mask.ravel()).argmax())
            comp = spec.model.components[region]
            s = _draw_sources(comp, 1, rng)[0]
            raw[ty : ty + patch_size, tx : tx + patch_size] = unvectorize_patch(
                comp.mixing.data @ s, patch_size)

    lo, hi = raw.min(), raw.max()
    squashed = (raw - lo) / (hi - lo) if hi > lo else np.full_like(raw, 0.5)
    return Image(squashed), mask.copy()


def gen_subspace_patches(mixing: np.ndarray, feature_sets, class_idx: int, n: int,
                         rng: np.random.Generator, on_scale: float = 3.0,
                         off_scale: float = 0.3) -> np.ndarray:
    """Raw patch vectors whose coefficients concentrate on one feature set.

    Coefficients on the marked features of ``feature_sets[class_idx]`` are
    drawn at ``on_scale``, all others at ``off_scale``; rows are mixed
    through ``mixing``.
    """
    mixing = np.asarray(mixing, dtype=np.float64)
    L = mixing.shape[1]
    s = rng.normal(0.0, off_scale, size=(n, L))
    on = sorted(feature_sets[class_idx])
    s[:, on] = rng.normal(0.0, on_scale, size=(n, len(on)))
    return s @ mixing.T


def amari_distance(A, B) -> float:
    """Permutation/scale-invariant mismatch between two mixing matrices.

    Based on P = A^{-1} B: zero exactly when B equals A up to column
    permutation and scaling, normalized so the worst case is of order 1.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected two square matrices of equal size")
    m = A.shape[0]
    if m == 1:
        return 0.0
    try:
        P = np.abs(np.linalg.solve(A, B))
    except np.linalg.LinAlgError:
        raise DataError("amari distance needs invertible inputs")
    if not np.isfinite(P).all():
        raise DataError("amari distance needs invertible inputs")
    col_max = P.max(axis=0)
    if np.any(col_max == 0):
        raise DataError("amari distance needs invertible inputs")
    # Normalizing each column by its peak makes the index exactly invariant
    # under column permutation and rescaling of B.
    Q = P / col_max
    row = (Q.sum(axis=1) / Q.max(axis=1) - 1.0).sum()
    col = (Q.sum(axis=0) - 1.0).sum()
    return float((row + col) / (2 * m * (m - 1)))


def match_labels(true_labels, pred_labels, k: int) -> tuple[float, np.ndarray]:
    """Best label-permutation accuracy via Hungarian assignment.

    Returns (accuracy, perm) with perm[j] = true class assigned to predicted
    class j.
    """
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    confusion = np.zeros((k, k))
    for t, p in zip(true_labels, pred_labels):
        confusion[p, t] += 1
    rows, cols = linear_sum_assignment(-confusion)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    return float(confusion[rows, cols].sum() / len(true_labels)), perm
