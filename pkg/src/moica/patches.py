"""Image ingestion and patch extraction.

Images are float64 RGB arrays in [0, 1]; 8-bit inputs are divided by 255
exactly. Patches vectorize channel-major -- all red values row-major, then
green, then blue -- so a p x p x 3 patch becomes a length 3p^2 vector.

Binary PPM (P6, maxval 255) is the baseline format and round-trips
bit-exactly. Other raster formats are accepted through Pillow when it is
installed.

All functions here are pure and seed-deterministic; extracted datasets are
plain arrays that can be processed in parallel by callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Image:
    """RGB raster with values in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# PPM I/O


def _read_ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DataError("truncated PPM header")
        tokens.append(buf[start:i])
    return tokens, i + 1  # skip the single whitespace after maxval


def load_ppm(path) -> Image:
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), offset = _read_ppm_tokens(buf, 4)
    except DataError:
        raise DataError(f"{path}: truncated PPM header")
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    raw = buf[offset : offset + need]
    if len(raw) < need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels.astype(np.float64) / 255.0)


def save_ppm(image: Image, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    pixels = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(header + pixels.tobytes())


def load_image(path) -> Image:
    """Load a raster image; PPM natively, anything else through Pillow."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return load_ppm(path)
    try:
        from PIL import Image as PilImage
    except ImportError:
        raise DataError(f"{path}: only PPM is supported without Pillow installed")
    with PilImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


# ---------------------------------------------------------------------------
# vectorization


def vectorize_patch(patch: np.ndarray) -> np.ndarray:
    """Flatten (p, p, 3) to length 3p^2, cascading the color channels."""
    patch = np.asarray(patch)
    return patch.transpose(2, 0, 1).reshape(-1).astype(np.float64)


def unvectorize_patch(vec: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of :func:`vectorize_patch`."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != 3 * patch_size * patch_size:
        raise ValueError(f"vector length {vec.size} != 3*{patch_size}^2")
    return vec.reshape(3, patch_size, patch_size).transpose(1, 2, 0)


def patch_dim(patch_size: int) -> int:
    return 3 * patch_size * patch_size


# ---------------------------------------------------------------------------
# sampling and grids


def sample_random_patches(images, n: int, patch_size: int, seed: int) -> np.ndarray:
    """Draw ``n`` patches uniformly over (image, x, y); rows are vectors.

    Deterministic for a fixed seed: identical calls produce bit-identical
    datasets.
    """
    images = list(images)
    if not images:
        raise DataError("no input images")
    if n < 1:
        raise ValueError("need at least one patch")
    for img in images:
        if img.height < patch_size or img.width < patch_size:
            raise DataError(
                f"image {img.width}x{img.height} is smaller than the patch size {patch_size}")

    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(images), size=n)
    out = np.empty((n, patch_dim(patch_size)))
    for t in range(n):
        img = images[which[t]]
        x = int(rng.integers(0, img.width - patch_size + 1))
        y = int(rng.integers(0, img.height - patch_size + 1))
        out[t] = vectorize_patch(img.data[y : y + patch_size, x : x + patch_size])
    return out


def _axis_offsets(extent: int, patch_size: int, stride: int) -> np.ndarray:
    offsets = list(range(0, extent - patch_size + 1, stride))
    last = extent - patch_size
    if offsets[-1] != last:
        offsets.append(last)
    return np.asarray(offsets, dtype=np.int64)


@dataclass(frozen=True)
class PatchGrid:
    """Strided patch placement covering an image, borders clamped inward."""

    patch_size: int
    stride: int
    x_offsets: np.ndarray
    y_offsets: np.ndarray

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        for name in ("x_offsets", "y_offsets"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def nx(self) -> int:
        return len(self.x_offsets)

    @property
    def ny(self) -> int:
        return len(self.y_offsets)

    @property
    def patch_count(self) -> int:
        return self.nx * self.ny

    def rect(self, index: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (x0, y0, x1, y1), exclusive upper bounds."""
        iy, ix = divmod(index, self.nx)
        x0 = int(self.x_offsets[ix])
        y0 = int(self.y_offsets[iy])
        return x0, y0, x0 + self.patch_size, y0 + self.patch_size

    def cell(self, index: int) -> tuple[int, int]:
        """(row, column) position of a flat patch index."""
        return divmod(index, self.nx)


def grid_patches(image: Image, patch_size: int, stride: int) -> tuple[PatchGrid, np.ndarray]:
    """Extract a strided grid of patches; patches are row-major over (y, x)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if image.height < patch_size or image.width < patch_size:
        raise DataError(
            f"image {image.width}x{image.height} is smaller than the patch size {patch_size}")
    grid = PatchGrid(
        patch_size=patch_size,
        stride=stride,
        x_offsets=_axis_offsets(image.width, patch_size, stride),
        y_offsets=_axis_offsets(image.height, patch_size, stride),
    )
    data = np.empty((grid.patch_count, patch_dim(patch_size)))
    p = 0
    for y0 in grid.y_offsets:
        for x0 in grid.x_offsets:
            data[p] = vectorize_patch(image.data[y0 : y0 + patch_size, x0 : x0 + patch_size])
            p += 1
    return grid, data


def minibatches(n: int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Split 0..n-1 into shuffled contiguous blocks; the last may be short.

    The permutation is a pure function of (seed, epoch), so repeated calls
    for the same epoch reproduce the same blocks while successive epochs
    reshuffle.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
