import numpy as np
import pytest

from mtscan.data import (
    SceneSample,
    boundary_from_labels,
    crop_sample,
    dataset_iter,
    flip_sample,
    generate_scene,
    load_manifest,
    load_sample,
    read_tensor,
    read_tensor_raw,
    save_sample,
    write_tensor,
)
from mtscan.errors import DataError, FormatError
from mtscan.tensor import Tensor


def roll_boundary_oracle(semseg):
    """Independent 4-neighbour change mask via shifted comparisons."""
    b = np.zeros(semseg.shape, dtype=bool)
    for axis, shift in [(0, 1), (0, -1), (1, 1), (1, -1)]:
        rolled = np.roll(semseg, shift, axis=axis)
        diff = semseg != rolled
        # mask out the wrap-around row/column
        if axis == 0:
            sl = slice(0, 1) if shift == 1 else slice(-1, None)
            diff[sl, :] = False
        else:
            sl = slice(0, 1) if shift == 1 else slice(-1, None)
            diff[:, sl] = False
        b |= diff
    return b


class TestGenerateScene:
    def test_empty_scene_degenerates(self):
        s = generate_scene(0, 32, 32, n_objects=0)
        assert set(np.unique(s.semseg)) == {0}
        assert not s.boundary.any()
        np.testing.assert_allclose(np.diff(s.depth, axis=1),
                                   s.depth[0, 1] - s.depth[0, 0], atol=1e-9)
        spread = np.ptp(s.normals.reshape(3, -1), axis=1)
        np.testing.assert_allclose(spread, 0.0, atol=1e-12)

    def test_deterministic(self):
        a = generate_scene(7, 32, 64, n_objects=4)
        b = generate_scene(7, 32, 64, n_objects=4)
        for f in ("image", "semseg", "depth", "normals", "boundary"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_boundary_matches_independent_oracle(self):
        s = generate_scene(3, 64, 64, n_objects=6)
        np.testing.assert_array_equal(s.boundary.astype(bool),
                                      roll_boundary_oracle(s.semseg))

    def test_normals_unit_norm(self):
        s = generate_scene(4, 32, 32, n_objects=5)
        norms = np.linalg.norm(s.normals, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_depth_positive_and_finite(self):
        s = generate_scene(5, 64, 32, n_objects=8)
        assert np.isfinite(s.depth).all() and (s.depth > 0).all()

    def test_normals_consistent_with_depth_gradient(self):
        # central differences of the rendered depth vs the analytic normals,
        # away from class edges where the surface switches
        s = generate_scene(6, 64, 64, n_objects=4)
        interior = ~boundary_from_labels(s.semseg).astype(bool)
        interior[[0, -1], :] = False
        interior[:, [0, -1]] = False
        # a neighbour on a different surface invalidates the stencil
        for shift, axis in [(1, 0), (-1, 0), (1, 1), (-1, 1)]:
            interior &= np.roll(~s.boundary.astype(bool), shift, axis=axis)
        dzdx = (np.roll(s.depth, -1, axis=1) - np.roll(s.depth, 1, axis=1)) / 2
        dzdy = (np.roll(s.depth, -1, axis=0) - np.roll(s.depth, 1, axis=0)) / 2
        nx, ny, nz = s.normals
        np.testing.assert_allclose((-nx / nz)[interior], dzdx[interior], atol=5e-2)
        np.testing.assert_allclose((-ny / nz)[interior], dzdy[interior], atol=5e-2)

    def test_rejects_bad_extent(self):
        with pytest.raises(DataError):
            generate_scene(0, 30, 32)


class TestAugment:
    def test_flip_is_involution(self):
        s = generate_scene(8, 32, 32, n_objects=3)
        t = flip_sample(flip_sample(s))
        for f in ("image", "semseg", "depth", "normals", "boundary"):
            np.testing.assert_array_equal(getattr(t, f), getattr(s, f))

    def test_flip_preserves_unit_normals_and_negates_x(self):
        s = generate_scene(9, 32, 32, n_objects=3)
        t = flip_sample(s)
        np.testing.assert_allclose(np.linalg.norm(t.normals, axis=0), 1.0, atol=1e-6)
        np.testing.assert_array_equal(t.normals[0], -s.normals[0, :, ::-1])

    def test_flip_keeps_labels_consistent(self):
        s = generate_scene(10, 32, 32, n_objects=4)
        t = flip_sample(s)
        np.testing.assert_array_equal(t.boundary.astype(bool),
                                      roll_boundary_oracle(t.semseg))

    def test_crop_boundary_consistent_away_from_ring(self):
        s = generate_scene(11, 64, 64, n_objects=5)
        c = crop_sample(s, 8, 16, 32, 32)
        recomputed = boundary_from_labels(c.semseg).astype(bool)
        stored = c.boundary.astype(bool)
        np.testing.assert_array_equal(recomputed[1:-1, 1:-1], stored[1:-1, 1:-1])

    def test_crop_out_of_range_rejected(self):
        s = generate_scene(12, 32, 32)
        with pytest.raises(DataError):
            crop_sample(s, 30, 0, 16, 16)

    def test_iter_deterministic(self):
        samples = [generate_scene(20 + i, 32, 32, 2) for i in range(6)]
        a = dataset_iter(samples, 2, seed=5)
        b = dataset_iter(samples, 2, seed=5)
        for _ in range(7):
            batch_a, batch_b = next(a), next(b)
            for x, y in zip(batch_a, batch_b):
                np.testing.assert_array_equal(x.image, y.image)

    def test_iter_crop_shapes(self):
        samples = [generate_scene(30, 64, 64, 2)]
        batch = next(dataset_iter(samples, 1, seed=1, crop_hw=(32, 32)))
        assert batch[0].hw == (32, 32)


class TestTensorFile:
    def test_float_roundtrip_bit_exact(self, tmp_path):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 4)))
        p = tmp_path / "x.mtsn"
        write_tensor(p, x)
        np.testing.assert_array_equal(read_tensor(p).data, x.data)

    def test_u16_roundtrip(self, tmp_path):
        labels = np.random.default_rng(1).integers(0, 5, (8, 8))
        p = tmp_path / "y.mtsn"
        write_tensor(p, labels)
        raw = read_tensor_raw(p)
        assert raw.dtype == np.uint16
        np.testing.assert_array_equal(raw, labels)

    def test_zero_extent_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_tensor(tmp_path / "z.mtsn", np.zeros((0, 3)))

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.mtsn"
        p.write_bytes(b"WRONG" + b"\x00" * 32)
        with pytest.raises(FormatError):
            read_tensor_raw(p)

    def test_truncation_rejected(self, tmp_path):
        p = tmp_path / "t.mtsn"
        write_tensor(p, np.ones((4, 4)))
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(FormatError):
            read_tensor_raw(p)

    def test_sample_roundtrip(self, tmp_path):
        s = generate_scene(13, 32, 32, n_objects=3)
        save_sample(tmp_path / "sample0", s)
        t = load_sample(tmp_path / "sample0")
        for f in ("image", "semseg", "depth", "normals", "boundary"):
            np.testing.assert_array_equal(getattr(t, f), getattr(s, f))


class TestManifest:
    def test_generator_manifest(self, tmp_path):
        m = tmp_path / "train.json"
        m.write_text('{"generator": {"seed_start": 0, "count": 3, '
                     '"height": 32, "width": 32, "n_objects": 2}}')
        samples = load_manifest(m)
        assert len(samples) == 3
        np.testing.assert_array_equal(samples[0].image,
                                      generate_scene(0, 32, 32, 2).image)

    def test_files_manifest(self, tmp_path):
        s = generate_scene(14, 32, 32, 2)
        save_sample(tmp_path / "s0", s)
        m = tmp_path / "val.json"
        m.write_text('{"files": ["s0"]}')
        (loaded,) = load_manifest(m)
        np.testing.assert_array_equal(loaded.depth, s.depth)

    def test_missing_file_raises(self, tmp_path):
        m = tmp_path / "val.json"
        m.write_text('{"files": ["nope"]}')
        with pytest.raises(DataError):
            load_manifest(m)

    def test_unknown_generator_key_rejected(self, tmp_path):
        m = tmp_path / "bad.json"
        m.write_text('{"generator": {"seed_start": 0, "count": 1, '
                     '"height": 32, "width": 32, "zoom": 2}}')
        with pytest.raises(DataError):
            load_manifest(m)
