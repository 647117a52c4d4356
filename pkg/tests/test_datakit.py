import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vtm import datakit as dk
from vtm.errors import DataError


def random_image(rng, size=16):
    return rng.random((3, size, size)).astype(np.float32)


class TestSobelChannels:
    def test_default_params_pinned(self):
        assert dk.SOBEL_DEFAULT_PARAMS == ((3, 1.0), (11, 2.0), (19, 3.0))
        img = random_image(np.random.default_rng(0), size=64)
        out = dk.sobel_channels(img)
        assert out.shape == (64, 64, 3)
        assert out.dtype == np.float32

    def test_constant_image_is_zero(self):
        img = np.full((3, 16, 16), 0.37, np.float32)
        out = dk.sobel_channels(img, params=((3, 1.0), (5, 2.0)))
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_matches_oracle_on_random_images(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            img = random_image(rng, size=20)
            out = dk.sobel_channels(img, params=((3, 1.0), (5, 2.0)))
            for ci, (size, sigma) in enumerate(((3, 1.0), (5, 2.0))):
                want = oracles.sobel_channel(np.asarray(img, np.float64),
                                             size, sigma)
                np.testing.assert_allclose(out[:, :, ci], want, atol=1e-6)

    def test_default_params_match_oracle(self):
        img = random_image(np.random.default_rng(7), size=64)
        out = dk.sobel_channels(img)
        for ci, (size, sigma) in enumerate(dk.SOBEL_DEFAULT_PARAMS):
            want = oracles.sobel_channel(np.asarray(img, np.float64),
                                         size, sigma)
            np.testing.assert_allclose(out[:, :, ci], want, atol=1e-6)

    def test_vertical_step_edge(self):
        img = np.zeros((3, 16, 16), np.float32)
        img[:, :, 8:] = 1.0
        out = dk.sobel_channels(img, params=((3, 1.0),))
        want = oracles.sobel_channel(np.asarray(img, np.float64), 3, 1.0)
        np.testing.assert_allclose(out[:, :, 0], want, atol=1e-6)
        # response concentrates at the step, none far away
        assert out[8, 8, 0] > 0.1
        assert out[8, 0, 0] < 1e-6

    def test_even_kernel_rejected(self):
        img = random_image(np.random.default_rng(0))
        with pytest.raises(DataError):
            dk.sobel_channels(img, params=((4, 1.0),))
        with pytest.raises(DataError):
            dk.sobel_channels(img, params=((3, 0.0),))

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(3)
        img = (rng.random((3, 16, 16)) > 0.5).astype(np.float32)  # harsh edges
        out = dk.sobel_channels(img, params=((3, 1.0),))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestQuantileChannels:
    CUTS = (0.2, 0.4, 0.6, 0.8)

    def test_bin_endpoints(self):
        edges = [0.0, *self.CUTS, 1.0]
        depth = np.array([[lo for lo in edges[:-1]],
                          [hi for hi in edges[1:]]])
        out = dk.quantile_channels(depth, self.CUTS)
        for p in range(5):
            assert out[0, p, p] == 0.0   # v = q_{p-1}
            assert out[1, p, p] == 1.0   # v = q_p

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        depth = rng.random((9, 7))
        cuts = (0.15, 0.35, 0.62, 0.9)
        out = dk.quantile_channels(depth, cuts)
        want = oracles.quantile_bins(depth, [0.0, *cuts, 1.0])
        assert out.shape == (9, 7, 5)
        np.testing.assert_allclose(out, np.moveaxis(want, 0, -1), atol=1e-6)

    def test_bad_cuts_rejected(self):
        depth = np.zeros((4, 4))
        for cuts in [(0.4, 0.2, 0.6, 0.8), (0.0, 0.2, 0.4, 0.6),
                     (0.2, 0.4, 0.6, 1.0), (0.2, 0.4, 0.6)]:
            with pytest.raises(DataError):
                dk.quantile_channels(depth, cuts)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_output_in_unit_range(self, seed):
        depth = np.random.default_rng(seed).random((6, 6))
        out = dk.quantile_channels(depth, self.CUTS)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSceneGeneration:
    def test_deterministic(self):
        fams = dk.default_families()[:3]
        a = dk.gen_synthetic(fams, seed=3, count=2)
        b = dk.gen_synthetic(fams, seed=3, count=2)
        for image_id in a.ids:
            np.testing.assert_array_equal(a.image(image_id), b.image(image_id))
            for s in a.specs:
                np.testing.assert_array_equal(
                    a.label(s.task, s.channel, image_id),
                    b.label(s.task, s.channel, image_id))

    def test_seed_changes_content(self):
        fams = dk.default_families()[:1]
        a = dk.gen_synthetic(fams, seed=3, count=1)
        b = dk.gen_synthetic(fams, seed=4, count=1)
        assert not np.array_equal(a.image("img00000"), b.image("img00000"))

    def test_images_are_8bit_quantized(self):
        ds = dk.gen_synthetic(dk.default_families()[:1], seed=0, count=3)
        for image_id in ds.ids:
            scaled = ds.image(image_id) * 255.0
            np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-4)

    def test_all_labels_in_range(self):
        ds = dk.gen_synthetic(dk.default_families(), seed=1, count=2)
        for s in ds.specs:
            for image_id in ds.ids:
                lab = ds.label(s.task, s.channel, image_id)
                assert lab.shape == (dk.CANVAS, dk.CANVAS)
                assert lab.min() >= 0.0 and lab.max() <= 1.0
                if s.label_kind == "binary":
                    assert set(np.unique(lab)) <= {0.0, 1.0}

    def test_blur_family_matches_oracle(self):
        fam = dk.SyntheticFamily("b", "blur", {"size": 5, "sigma": 1.0})
        ds = dk.gen_synthetic([fam], seed=2, count=1)
        img = np.asarray(ds.image("img00000"), np.float64)
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        k1 = oracles.gaussian_kernel_1d(5, 1.0)
        want = oracles.correlate2d_symmetric(gray, np.outer(k1, k1))
        np.testing.assert_allclose(ds.label("b", 1, "img00000"), want,
                                   atol=1e-6)

    def test_distance_zero_on_boundary(self):
        mask = np.zeros((16, 16), bool)
        mask[4:9, 5:11] = True
        dist = dk.boundary_distance(mask)
        assert dist[4, 5] == 0.0 and dist[8, 10] == 0.0
        assert dist[6, 7] > 0.0          # interior
        assert dist[0, 0] > 0.0          # far outside
        assert dist.max() <= 1.0

    def test_distance_empty_mask(self):
        dist = dk.boundary_distance(np.zeros((8, 8), bool))
        np.testing.assert_array_equal(dist, 1.0)

    def test_default_family_roster(self):
        fams = dk.default_families()
        assert len(fams) == 8
        assert sum(f.fold == "train" for f in fams) == 6
        assert sum(f.fold == "test" for f in fams) == 2
        # held-out parameter sets differ from every training parameter set
        train = [(f.kind, tuple(sorted(f.params.items())))
                 for f in fams if f.fold == "train"]
        for f in fams:
            if f.fold == "test":
                key = (f.kind, tuple(sorted(f.params.items())))
                assert key not in train
        ds = dk.gen_synthetic(fams, seed=0, count=1)
        assert len(ds.channel_specs("train")) == 9
        assert len(ds.channel_specs("test")) == 2
        assert ds.tasks("test") == ["blur_mid", "blur_band"]

    def test_duplicate_family_names_rejected(self):
        fam = dk.default_families()[0]
        with pytest.raises(DataError):
            dk.gen_synthetic([fam, fam], seed=0, count=1)


class TestLabelFile:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        label = rng.random((7, 5)).astype(np.float32)
        path = tmp_path / "x.bin"
        dk.write_label_file(path, label)
        got = dk.read_label_file(path)
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, label)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.bin"
        dk.write_label_file(path, np.zeros((2, 3), np.float32))
        data = path.read_bytes()
        assert data.startswith(b"VTM1\n2 3\n")
        assert len(data) == len(b"VTM1\n2 3\n") + 6 * 4

    def test_bad_magic_names_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE\n2 2\n" + b"\x00" * 16)
        with pytest.raises(DataError, match="bad.bin"):
            dk.read_label_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"VTM1\n2 2\n" + b"\x00" * 8)
        with pytest.raises(DataError, match="short.bin"):
            dk.read_label_file(path)

    def test_out_of_range_names_file(self, tmp_path):
        path = tmp_path / "range.bin"
        arr = np.array([[0.5, 1.5]], np.float32)
        payload = dk.LABEL_MAGIC + b"1 2\n" + arr.astype("<f4").tobytes()
        path.write_bytes(payload)
        with pytest.raises(DataError, match="range.bin"):
            dk.read_label_file(path)


class TestDatasetIO:
    @pytest.fixture()
    def small_ds(self):
        fams = [dk.SyntheticFamily("blur_soft", "blur",
                                   {"size": 5, "sigma": 1.0}),
                dk.SyntheticFamily("mask_any", "mask", {"shape": "any"},
                                   fold="test")]
        return dk.gen_synthetic(fams, seed=9, count=3)

    def test_roundtrip(self, tmp_path, small_ds):
        small_ds.quantiles["blur_soft"] = (0.2, 0.4, 0.6, 0.8)
        dk.save_dataset(small_ds, tmp_path)
        back = dk.load_dataset(tmp_path)
        assert back.ids == small_ds.ids
        assert back.specs == small_ds.specs
        assert back.folds == small_ds.folds
        assert back.quantiles == {"blur_soft": (0.2, 0.4, 0.6, 0.8)}
        for image_id in small_ds.ids:
            np.testing.assert_array_equal(back.image(image_id),
                                          small_ds.image(image_id))
            for s in small_ds.specs:
                np.testing.assert_array_equal(
                    back.label(s.task, s.channel, image_id),
                    small_ds.label(s.task, s.channel, image_id))

    def test_missing_label_file(self, tmp_path, small_ds):
        dk.save_dataset(small_ds, tmp_path)
        victim = tmp_path / "labels" / "mask_any" / "1" / "img00001.bin"
        victim.unlink()
        with pytest.raises(DataError, match="img00001.bin"):
            dk.load_dataset(tmp_path)

    def test_missing_image_file(self, tmp_path, small_ds):
        dk.save_dataset(small_ds, tmp_path)
        (tmp_path / "images" / "img00002.png").unlink()
        with pytest.raises(DataError, match="img00002.png"):
            dk.load_dataset(tmp_path)

    def test_corrupt_label_detected_on_access(self, tmp_path, small_ds):
        dk.save_dataset(small_ds, tmp_path)
        victim = tmp_path / "labels" / "blur_soft" / "1" / "img00000.bin"
        bad = np.full((dk.CANVAS, dk.CANVAS), 1.5, np.float32)
        victim.write_bytes(dk.LABEL_MAGIC
                           + f"{dk.CANVAS} {dk.CANVAS}\n".encode()
                           + bad.astype("<f4").tobytes())
        back = dk.load_dataset(tmp_path)   # lazy: load itself succeeds
        with pytest.raises(DataError, match="img00000.bin"):
            back.label("blur_soft", 1, "img00000")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            dk.load_dataset(tmp_path)

    def test_unknown_directive(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("vtm-dataset 1\nbogus x\n")
        with pytest.raises(DataError, match="bogus"):
            dk.load_dataset(tmp_path)

    def test_binary_task_kind_survives_roundtrip(self, tmp_path, small_ds):
        dk.save_dataset(small_ds, tmp_path)
        back = dk.load_dataset(tmp_path)
        spec = [s for s in back.specs if s.task == "mask_any"][0]
        assert spec.label_kind == "binary"
        assert spec.loss_kind == "cross_entropy"
