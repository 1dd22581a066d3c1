import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moica.errors import DataError
from moica.patches import (
    Image,
    grid_patches,
    load_ppm,
    minibatches,
    sample_random_patches,
    save_ppm,
    unvectorize_patch,
    vectorize_patch,
)


def checker_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return Image(rng.random((h, w, 3)))


class TestImage:
    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ValueError):
            Image(np.zeros((4, 4, 1)))

    def test_rejects_out_of_range_values(self):
        with pytest.raises(ValueError):
            Image(np.full((2, 2, 3), 1.5))


class TestPpmRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, (11, 7, 3), dtype=np.uint8)
        img = Image(pixels.astype(np.float64) / 255.0)
        path = tmp_path / "img.ppm"
        save_ppm(img, path)
        back = load_ppm(path)
        np.testing.assert_array_equal(back.data, img.data)

    def test_header_comments_are_skipped(self, tmp_path):
        body = bytes(range(12))
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 2\n# another\n255\n" + body)
        img = load_ppm(path)
        assert img.width == 2 and img.height == 2
        np.testing.assert_array_equal((img.data * 255).astype(np.uint8).ravel(), list(body))

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(DataError):
            load_ppm(path)

    def test_rejects_truncated_pixels(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(DataError):
            load_ppm(path)


class TestVectorization:
    def test_channel_major_layout(self):
        patch = np.zeros((2, 2, 3))
        patch[:, :, 0] = 1.0  # red everywhere
        vec = vectorize_patch(patch)
        np.testing.assert_array_equal(vec, [1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0])

    def test_row_major_within_channel(self):
        patch = np.arange(12).reshape(2, 2, 3).astype(float)
        vec = vectorize_patch(patch)
        # red channel entries are 0, 3, 6, 9 in row-major order
        np.testing.assert_array_equal(vec[:4], [0, 3, 6, 9])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), p=st.integers(1, 8))
    def test_round_trip_exact(self, seed, p):
        rng = np.random.default_rng(seed)
        patch = rng.random((p, p, 3))
        np.testing.assert_array_equal(unvectorize_patch(vectorize_patch(patch), p), patch)


class TestSampleRandomPatches:
    def test_whole_image_when_patch_fills_it(self):
        img = checker_image(4, 4)
        X = sample_random_patches([img], 5, patch_size=4, seed=0)
        expected = vectorize_patch(img.data)
        for row in X:
            np.testing.assert_array_equal(row, expected)

    def test_deterministic_for_fixed_seed(self):
        imgs = [checker_image(16, 16, s) for s in range(3)]
        a = sample_random_patches(imgs, 50, patch_size=5, seed=42)
        b = sample_random_patches(imgs, 50, patch_size=5, seed=42)
        np.testing.assert_array_equal(a, b)
        c = sample_random_patches(imgs, 50, patch_size=5, seed=43)
        assert not np.array_equal(a, c)

    def test_empty_image_list_rejected(self):
        with pytest.raises(DataError):
            sample_random_patches([], 5, patch_size=4, seed=0)

    def test_too_small_image_rejected(self):
        with pytest.raises(DataError):
            sample_random_patches([checker_image(3, 8)], 2, patch_size=4, seed=0)

    def test_image_selection_is_uniform(self):
        # Mark each image with a constant so samples identify their origin;
        # frequencies should match a fair choice within 4 sigma.
        n_images, n = 4, 8000
        imgs = [Image(np.full((2, 2, 3), i / 10.0)) for i in range(n_images)]
        X = sample_random_patches(imgs, n, patch_size=2, seed=7)
        origins = np.rint(X[:, 0] * 10).astype(int)
        counts = np.bincount(origins, minlength=n_images)
        p = 1.0 / n_images
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 4 * sigma)


class TestGridPatches:
    def test_exact_tiling(self):
        grid, data = grid_patches(checker_image(64, 64), patch_size=32, stride=32)
        assert (grid.ny, grid.nx) == (2, 2)
        assert data.shape == (4, 32 * 32 * 3)

    def test_clamped_last_column(self):
        grid, _ = grid_patches(checker_image(64, 65), patch_size=32, stride=32)
        assert (grid.ny, grid.nx) == (2, 3)
        np.testing.assert_array_equal(grid.x_offsets, [0, 32, 33])

    def test_rect_indexing_row_major(self):
        img = checker_image(10, 12)
        grid, data = grid_patches(img, patch_size=4, stride=4)
        for p in range(grid.patch_count):
            x0, y0, x1, y1 = grid.rect(p)
            np.testing.assert_array_equal(
                data[p], vectorize_patch(img.data[y0:y1, x0:x1]))

    def test_union_of_rects_covers_image(self):
        img = checker_image(37, 23)
        grid, _ = grid_patches(img, patch_size=8, stride=5)
        covered = np.zeros((37, 23), dtype=bool)
        for p in range(grid.patch_count):
            x0, y0, x1, y1 = grid.rect(p)
            covered[y0:y1, x0:x1] = True
        assert covered.all()

    def test_image_smaller_than_patch_rejected(self):
        with pytest.raises(DataError):
            grid_patches(checker_image(5, 5), patch_size=8, stride=4)


class TestMinibatches:
    def test_single_block_when_batch_covers_all(self):
        blocks = minibatches(10, 10, seed=0)
        assert len(blocks) == 1
        assert sorted(blocks[0]) == list(range(10))

    def test_block_sizes_and_coverage(self):
        blocks = minibatches(10, 4, seed=1)
        assert [len(b) for b in blocks] == [4, 4, 2]
        assert sorted(np.concatenate(blocks)) == list(range(10))

    def test_deterministic_per_seed_and_epoch(self):
        a = minibatches(20, 6, seed=3, epoch=2)
        b = minibatches(20, 6, seed=3, epoch=2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        c = minibatches(20, 6, seed=3, epoch=3)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 200), batch=st.integers(1, 50), seed=st.integers(0, 1000))
    def test_partition_property(self, n, batch, seed):
        blocks = minibatches(n, batch, seed)
        allidx = np.concatenate(blocks)
        assert len(allidx) == n
        assert sorted(allidx) == list(range(n))
