"""Stained-object detection and life-stage classification over patch grids.

The pipeline scores every grid patch under the mixture model (posterior
over components), designates one component as foreground, groups
foreground patches into islands by 8-adjacency, drops oversized islands
(white blood cells), and classifies the rest by projecting member patches
onto operator-marked feature subspaces: a patch's energy in a subspace is
the root-sum-square of its recovered source coefficients over that
subspace's features, each patch votes for its highest-energy subspace, and
the island takes the plurality. Shape statistics (area, perimeter,
compactness) of each island's pixel mask are reported alongside.

Patch scoring and projection are independent per patch; island formation
walks the (small) patch grid sequentially.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .model import IcaComponent, MoicaModel, component_posteriors
from .patches import Image, PatchGrid, grid_patches
from .whitening import WhiteningTransform, whiten

POSTERIOR_TOL = 1e-10

# Compactness of a digitized shape may dip slightly below the continuous
# isoperimetric bound of 1.
COMPACTNESS_SLACK = 0.1


@dataclass(frozen=True)
class SubspaceMarking:
    """Operator-supplied assignment of 1-based feature indices to named
    subspaces. Subspaces may overlap; each must be non-empty."""

    subspaces: tuple[tuple[str, frozenset[int]], ...]

    def __post_init__(self):
        subs = tuple((str(name), frozenset(int(i) for i in idx))
                     for name, idx in self.subspaces)
        if not subs:
            raise ValueError("marking needs at least one subspace")
        names = [name for name, _ in subs]
        if len(set(names)) != len(names):
            raise ValueError("subspace names must be unique")
        for name, idx in subs:
            if not idx:
                raise ValueError(f"subspace {name!r} is empty")
            if min(idx) < 1:
                raise ValueError(f"subspace {name!r} has a non-positive feature index")
        object.__setattr__(self, "subspaces", subs)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.subspaces]

    @property
    def count(self) -> int:
        return len(self.subspaces)

    def max_index(self) -> int:
        return max(max(idx) for _, idx in self.subspaces)

    def zero_based_sets(self) -> list[np.ndarray]:
        return [np.array(sorted(i - 1 for i in idx), dtype=np.int64)
                for _, idx in self.subspaces]


def parse_marking(text: str) -> SubspaceMarking:
    """Parse the marking file format: one ``name: i1 i2 ...`` line per
    subspace, 1-based indices, ``#`` comments and blank lines ignored."""
    subs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"marking line {lineno}: expected 'name: indices'")
        name, _, rest = line.partition(":")
        name = name.strip()
        try:
            indices = [int(tok) for tok in rest.split()]
        except ValueError:
            raise DataError(f"marking line {lineno}: indices must be integers")
        if not name or not indices:
            raise DataError(f"marking line {lineno}: need a name and at least one index")
        subs.append((name, frozenset(indices)))
    if not subs:
        raise DataError("marking file defines no subspaces")
    return SubspaceMarking(tuple(subs))


def load_marking(path) -> SubspaceMarking:
    return parse_marking(Path(path).read_text())


@dataclass(frozen=True)
class PatchLabelMap:
    """Per-patch mixture posteriors and hard labels over a grid."""

    grid: PatchGrid
    posterior: np.ndarray  # (n_patches, K)
    label: np.ndarray      # (n_patches,), argmax with ties to lower index
    foreground_component: int

    def __post_init__(self):
        sums = self.posterior.sum(axis=1)
        if np.abs(sums - 1.0).max() > POSTERIOR_TOL:
            raise ValueError("posterior rows must sum to 1")
        if not np.array_equal(self.label, self.posterior.argmax(axis=1)):
            raise ValueError("labels must be the posterior argmax")

    @property
    def foreground_mask(self) -> np.ndarray:
        """(ny, nx) boolean grid of foreground-labeled patches."""
        return (self.label == self.foreground_component).reshape(
            self.grid.ny, self.grid.nx)


def pick_foreground(posterior: np.ndarray) -> int:
    """Heuristic default: the component with the smallest total posterior
    mass -- stained objects are the minority of any slide."""
    return int(posterior.sum(axis=0).argmin())


def label_patches(model: MoicaModel, tf: WhiteningTransform, image: Image,
                  patch_size: int, stride: int,
                  foreground: Optional[int] = None,
                  uniform_priors: bool = False) -> PatchLabelMap:
    """Score a strided patch grid under the model.

    Patches are whitened through ``tf`` and given a posterior over the
    model's components (learned priors by default, uniform on request).
    ``foreground`` overrides the minority-mass heuristic.
    """
    if tf.reduced_dim != model.dim:
        raise DataError(
            f"whitening produces {tf.reduced_dim}-d vectors but the model expects {model.dim}")
    grid, raw = grid_patches(image, patch_size, stride)
    if raw.shape[1] != tf.ambient_dim:
        raise DataError(
            f"patch vectors are {raw.shape[1]}-d but the whitening expects {tf.ambient_dim}")
    posterior = component_posteriors(model, whiten(tf, raw), uniform_priors=uniform_priors)
    label = posterior.argmax(axis=1)
    fg = pick_foreground(posterior) if foreground is None else int(foreground)
    if not 0 <= fg < model.k:
        raise ValueError(f"foreground component {fg} out of range")
    return PatchLabelMap(grid=grid, posterior=posterior, label=label,
                         foreground_component=fg)


@dataclass
class ShapeFeatures:
    area: int          # pixels^2
    perimeter: int     # exposed unit edges
    compactness: float  # perimeter^2 / (4 pi area)

    def __post_init__(self):
        if self.area <= 0:
            raise ValueError("shape area must be positive")
        if self.compactness < 1.0 - COMPACTNESS_SLACK:
            raise ValueError(f"implausible compactness {self.compactness}")


@dataclass
class Island:
    """A connected group of foreground patches and everything later stages
    attach to it: per-patch subspace energies, votes, class, shape."""

    id: int
    members: np.ndarray               # flat patch indices into the grid
    bbox: tuple[int, int, int, int]   # pixel (x0, y0, x1, y1), exclusive
    energies: Optional[np.ndarray] = None    # (n_members, n_subspaces)
    votes: Optional[dict[str, int]] = None
    class_name: Optional[str] = None
    shape: Optional[ShapeFeatures] = None
    wbc_removed: bool = False

    @property
    def bbox_area(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


def form_islands(label_map: PatchLabelMap) -> list[Island]:
    """Group foreground patches into 8-adjacent connected components.

    Islands come back in scan order (top-left first); every foreground
    patch belongs to exactly one island. Bounding boxes are the pixel
    union of the member patch rectangles.
    """
    grid = label_map.grid
    mask = label_map.foreground_mask
    ny, nx = mask.shape
    seen = np.zeros_like(mask)
    islands: list[Island] = []

    for sy in range(ny):
        for sx in range(nx):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            cells = []
            while stack:
                cy, cx = stack.pop()
                cells.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        qy, qx = cy + dy, cx + dx
                        if 0 <= qy < ny and 0 <= qx < nx and mask[qy, qx] and not seen[qy, qx]:
                            seen[qy, qx] = True
                            stack.append((qy, qx))
            members = np.array(sorted(cy * nx + cx for cy, cx in cells), dtype=np.int64)
            rects = np.array([grid.rect(p) for p in members])
            bbox = (int(rects[:, 0].min()), int(rects[:, 1].min()),
                    int(rects[:, 2].max()), int(rects[:, 3].max()))
            islands.append(Island(id=len(islands) + 1, members=members, bbox=bbox))
    return islands


def remove_wbc(islands: list[Island], area_threshold: float) -> tuple[list[Island], list[Island]]:
    """Split islands by bounding-box area; order preserved on both sides.

    A zero threshold removes everything (all areas are positive); negative
    thresholds are rejected.
    """
    if area_threshold < 0:
        raise ValueError("area threshold cannot be negative")
    kept, removed = [], []
    for isl in islands:
        if isl.bbox_area > area_threshold:
            isl.wbc_removed = True
            removed.append(isl)
        else:
            kept.append(isl)
    return kept, removed


def default_wbc_threshold(islands: list[Island], factor: float = 4.0) -> float:
    """4x the median island bounding-box area on this slide, by default."""
    if not islands:
        return np.inf
    return factor * float(np.median([isl.bbox_area for isl in islands]))


def project_subspaces(component: IcaComponent, tf: WhiteningTransform,
                      patch_vectors: np.ndarray,
                      marking: SubspaceMarking) -> np.ndarray:
    """Subspace energies of raw patch vectors under the foreground analyzer.

    Each patch is whitened, its source coefficients recovered through the
    inverse mixing, and for every marked subspace the root-sum-square of the
    coefficients on that subspace's features is returned: an
    (n_patches, n_subspaces) array.
    """
    if marking.max_index() > component.mixing.l:
        raise DataError(
            f"marking references feature {marking.max_index()} but the model has "
            f"{component.mixing.l}")
    coords = whiten(tf, np.atleast_2d(patch_vectors))
    coeffs = coords @ component.unmixing.T
    energies = np.empty((coeffs.shape[0], marking.count))
    for j, idx in enumerate(marking.zero_based_sets()):
        energies[:, j] = np.sqrt(np.sum(coeffs[:, idx] ** 2, axis=1))
    return energies


def classify_island(island: Island, marking: SubspaceMarking) -> tuple[str, dict[str, int]]:
    """Plurality vote over per-patch argmax subspaces.

    Vote ties break toward the larger summed energy, then the lower
    subspace index; per-patch ties already resolve to the lower index via
    argmax. The result is stored on the island and returned.
    """
    if island.energies is None or len(island.energies) == 0:
        raise ValueError("island has no projected energies")
    per_patch = island.energies.argmax(axis=1)
    counts = np.bincount(per_patch, minlength=marking.count)
    totals = island.energies.sum(axis=0)
    best = max(range(marking.count), key=lambda j: (counts[j], totals[j], -j))
    names = marking.names
    tally = {names[j]: int(counts[j]) for j in range(marking.count)}
    island.votes = tally
    island.class_name = names[best]
    return names[best], tally


def island_pixel_mask(island: Island, grid: PatchGrid) -> tuple[np.ndarray, int, int]:
    """Boolean mask of the union of member patch rectangles, plus the
    (x0, y0) offset of the mask's origin in image coordinates."""
    x0, y0, x1, y1 = island.bbox
    mask = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    for p in island.members:
        px0, py0, px1, py1 = grid.rect(int(p))
        mask[py0 - y0 : py1 - y0, px0 - x0 : px1 - x0] = True
    return mask, x0, y0


def shape_features(island: Island, grid: PatchGrid) -> ShapeFeatures:
    """Area, perimeter and compactness of the island's pixel mask.

    Area counts mask pixels; the perimeter counts unit edges between a mask
    pixel and a non-mask (or outside) pixel; compactness is the
    isoperimetric ratio perimeter^2 / (4 pi area).
    """
    mask, _, _ = island_pixel_mask(island, grid)
    area = int(mask.sum())
    padded = np.pad(mask, 1)
    perimeter = int(
        (padded[1:, :] != padded[:-1, :]).sum() + (padded[:, 1:] != padded[:, :-1]).sum())
    compactness = perimeter**2 / (4.0 * np.pi * area)
    feats = ShapeFeatures(area=area, perimeter=perimeter, compactness=float(compactness))
    island.shape = feats
    return feats


# ---------------------------------------------------------------------------
# the full image pipeline and its report


@dataclass
class ImageAnalysis:
    label_map: PatchLabelMap
    islands: list[Island]          # classified, size filter passed
    removed: list[Island]          # dropped by the size filter
    wbc_threshold: float
    marking: SubspaceMarking


def analyze_image(model: MoicaModel, tf: WhiteningTransform, image: Image,
                  marking: SubspaceMarking, patch_size: int, stride: int,
                  foreground: Optional[int] = None,
                  uniform_priors: bool = False,
                  wbc_area: Optional[float] = None,
                  artefact_compactness: Optional[float] = None,
                  artefact_class: str = "artefact") -> ImageAnalysis:
    """Run labeling, island formation, size filtering, projection, voting
    and shape analysis on one image.

    ``wbc_area`` overrides the median-based size threshold. When
    ``artefact_compactness`` is set, islands whose compactness exceeds it
    are reassigned to ``artefact_class`` after voting.
    """
    label_map = label_patches(model, tf, image, patch_size, stride,
                              foreground=foreground, uniform_priors=uniform_priors)
    islands = form_islands(label_map)
    threshold = default_wbc_threshold(islands) if wbc_area is None else wbc_area
    kept, removed = remove_wbc(islands, threshold)

    component = model.components[label_map.foreground_component]
    _, raw = grid_patches(image, patch_size, stride)
    for isl in kept:
        isl.energies = project_subspaces(component, tf, raw[isl.members], marking)
        classify_island(isl, marking)
        shape_features(isl, label_map.grid)
        if artefact_compactness is not None and isl.shape.compactness > artefact_compactness:
            isl.class_name = artefact_class
    for isl in removed:
        shape_features(isl, label_map.grid)
    return ImageAnalysis(label_map=label_map, islands=kept, removed=removed,
                         wbc_threshold=threshold, marking=marking)


def format_report(analysis: ImageAnalysis, header: Optional[dict] = None) -> str:
    """Deterministic plain-text report: one record per island.

    Records carry id, pixel bounding box, class, the vote tally, mean
    per-subspace energy over member patches, shape features and the
    wbc_removed flag. Islands removed by the size filter keep their shape
    record but carry class ``wbc``.
    """
    lines = ["# island report"]
    for key in sorted(header or {}):
        lines.append(f"# {key}: {header[key]}")
    lines.append(f"# subspaces: {' '.join(analysis.marking.names)}")
    lines.append(f"# wbc_area_threshold: {analysis.wbc_threshold:.9g}")
    lines.append(f"# islands: {len(analysis.islands)} kept, {len(analysis.removed)} removed")

    def record(isl: Island):
        x0, y0, x1, y1 = isl.bbox
        lines.append(f"island {isl.id}")
        lines.append(f"  bbox: {x0} {y0} {x1} {y1}")
        lines.append(f"  patches: {len(isl.members)}")
        lines.append(f"  class: {isl.class_name if isl.class_name else 'wbc'}")
        lines.append(f"  wbc_removed: {'true' if isl.wbc_removed else 'false'}")
        if isl.votes is not None:
            tally = " ".join(f"{name}={isl.votes[name]}" for name in analysis.marking.names)
            lines.append(f"  votes: {tally}")
        if isl.energies is not None:
            means = isl.energies.mean(axis=0)
            pairs = " ".join(f"{name}={means[j]:.9g}"
                             for j, name in enumerate(analysis.marking.names))
            lines.append(f"  mean_energy: {pairs}")
        if isl.shape is not None:
            lines.append(
                f"  shape: area={isl.shape.area} perimeter={isl.shape.perimeter} "
                f"compactness={isl.shape.compactness:.9g}")

    for isl in sorted(analysis.islands + analysis.removed, key=lambda i: i.id):
        record(isl)
    return "\n".join(lines) + "\n"
