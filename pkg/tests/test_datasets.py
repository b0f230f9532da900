"""Data sources: exact laws, walk validity, IDX container."""

import numpy as np
import pytest
from scipy.stats import chi2

from fldd.datasets import (GmmGrid, IdxImages, RandomWalk, load_idx,
                           make_digits_idx, write_idx_images, write_idx_labels)


class TestGmmGrid:
    def test_law_sums_to_one(self):
        g = GmmGrid(grid=50)
        assert abs(g.law2d.sum() - 1.0) < 1e-12

    def test_single_component_peaks_at_center(self):
        g = GmmGrid(grid=21, mu1=(10, 10), mu2=(10, 10), weight=1.0, sigma=2.0)
        assert np.unravel_index(np.argmax(g.law2d), (21, 21)) == (10, 10)

    def test_symmetric_mixture_invariant_under_component_swap(self):
        g = GmmGrid(grid=30, mu1=(8, 8), mu2=(21, 21), weight=0.5, sigma=1.5)
        # reflection through the grid center maps component 1 onto component 2
        flipped = g.law2d[::-1, ::-1]
        np.testing.assert_allclose(g.law2d, flipped, atol=1e-15)

    def test_matches_independent_normalization(self):
        g = GmmGrid(grid=50, mu1=(15, 15), mu2=(35, 35), weight=0.5, sigma=1.0)
        # independent summation path with explicit loops
        dens = np.zeros((50, 50))
        for i in range(50):
            for j in range(50):
                d1 = np.exp(-((i - 15) ** 2 + (j - 15) ** 2) / 2.0)
                d2 = np.exp(-((i - 35) ** 2 + (j - 35) ** 2) / 2.0)
                dens[i, j] = 0.5 * d1 + 0.5 * d2
        np.testing.assert_allclose(g.law2d, dens / dens.sum(), atol=1e-15)

    def test_sampler_follows_law(self):
        g = GmmGrid(grid=10, mu1=(2, 2), mu2=(7, 7), sigma=1.5)
        rng = np.random.default_rng(0)
        xs = g.sample(200000, rng)
        idx = xs[:, 0] * 10 + xs[:, 1]
        hist = np.bincount(idx, minlength=100) / len(xs)
        tv = 0.5 * np.abs(hist - g.law2d.ravel()).sum()
        assert tv < 0.01

    def test_law_object(self):
        g = GmmGrid(grid=10)
        law = g.law()
        assert law.K == 10 and law.D == 2
        assert abs(law.probs.sum() - 1.0) < 1e-12

    def test_bad_weight_rejected(self):
        with pytest.raises(ValueError):
            GmmGrid(weight=1.5)


class TestRandomWalk:
    def test_d2_has_two_equally_likely_sequences(self):
        w = RandomWalk(D=2)
        assert w.K == 3
        rng = np.random.default_rng(1)
        xs = w.sample(20000, rng)
        seqs = {tuple(r) for r in xs}
        assert seqs == {(1, 0), (1, 2)}
        frac = (xs[:, 1] == 0).mean()
        assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 20000)

    def test_every_sample_is_valid(self):
        w = RandomWalk(D=8)
        xs = w.sample(5000, np.random.default_rng(2))
        assert w.is_valid(xs).all()
        assert np.all(xs[:, 0] == w.offset)

    def test_uniform_over_enumerated_paths_chi2(self):
        w = RandomWalk(D=4)
        paths = w.enumerate_paths()
        assert paths.shape == (8, 4)
        assert w.is_valid(paths).all()
        rng = np.random.default_rng(3)
        n = 100000
        xs = w.sample(n, rng)
        keys = {tuple(p): i for i, p in enumerate(paths)}
        counts = np.zeros(8)
        for row in xs:
            counts[keys[tuple(row)]] += 1
        stat = float(((counts - n / 8) ** 2 / (n / 8)).sum())
        assert stat < chi2.ppf(0.999, df=7)

    def test_validity_predicate_rejects_bad_sequences(self):
        w = RandomWalk(D=4)
        assert not w.is_valid(np.array([[3, 4, 5, 7]]))[0]  # step of +2
        assert not w.is_valid(np.array([[2, 3, 4, 5]]))[0]  # wrong start
        assert w.is_valid(np.array([[3, 4, 5, 6]]))[0]

    def test_needs_two_coordinates(self):
        with pytest.raises(ValueError):
            RandomWalk(D=1)


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        imgs = rng.integers(0, 256, size=(7, 5, 5)).astype(np.uint8)
        path = tmp_path / "imgs.idx"
        write_idx_images(path, imgs)
        data, labels = load_idx(path, threshold=0.5)
        want = (imgs > 127.5).astype(int).reshape(7, 25)
        np.testing.assert_array_equal(data, want)
        assert labels is None

    def test_threshold_fixture(self, tmp_path):
        # pixels [0, 255, 128, 200] at threshold 0.5 -> categories [0,1,1,1]
        imgs = np.array([[[0, 255], [128, 200]]], dtype=np.uint8)
        path = tmp_path / "t.idx"
        write_idx_images(path, imgs)
        data, _ = load_idx(path, threshold=0.5)
        np.testing.assert_array_equal(data[0], [0, 1, 1, 1])

    def test_all_zero_image_is_all_category_zero(self, tmp_path):
        path = tmp_path / "z.idx"
        write_idx_images(path, np.zeros((1, 3, 3), dtype=np.uint8))
        data, _ = load_idx(path)
        assert np.all(data == 0)

    def test_labels_round_trip(self, tmp_path):
        imgs = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.array([1, 0, 7], dtype=np.uint8)
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        write_idx_images(ip, imgs)
        write_idx_labels(lp, labels)
        _, got = load_idx(ip, lp)
        np.testing.assert_array_equal(got, labels)

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic.*offset 0"):
            load_idx(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.idx"
        import struct
        path.write_bytes(struct.pack(">IIII", 0x803, 2, 3, 3) + b"\x00" * 10)
        with pytest.raises(ValueError, match="truncated"):
            load_idx(path)

    def test_label_count_mismatch_rejected(self, tmp_path):
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        write_idx_images(ip, np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx_labels(lp, np.zeros(5, dtype=np.uint8))
        with pytest.raises(ValueError, match="labels for"):
            load_idx(ip, lp)

    def test_downscale_center_crop(self, tmp_path):
        imgs = np.zeros((1, 8, 8), dtype=np.uint8)
        imgs[0, :4, :4] = 255  # top-left quadrant bright
        path = tmp_path / "d.idx"
        write_idx_images(path, imgs)
        data, _ = load_idx(path, side=4)
        got = np.asarray(data[0]).reshape(4, 4)
        np.testing.assert_array_equal(got, (np.arange(4)[:, None] < 2)
                                      * (np.arange(4)[None, :] < 2))

    def test_upscale_rejected(self, tmp_path):
        path = tmp_path / "u.idx"
        write_idx_images(path, np.zeros((1, 4, 4), dtype=np.uint8))
        with pytest.raises(ValueError, match="upscale"):
            load_idx(path, side=8)


class TestDigitsFixture:
    def test_produces_requested_side_and_binarizes(self, tmp_path):
        path = tmp_path / "digits.idx"
        make_digits_idx(path, side=14)
        data, _ = load_idx(path, threshold=0.5)
        assert data.shape[1] == 196
        assert set(np.unique(data)) <= {0, 1}
        assert data.shape[0] >= 1000
        ds = IdxImages(data=data, side=14)
        assert ds.K == 2 and ds.D == 196
        xs = ds.sample(16, np.random.default_rng(0))
        assert xs.shape == (16, 196)
        # digits have ink: a nontrivial fraction of bright pixels
        assert 0.05 < data.mean() < 0.6
