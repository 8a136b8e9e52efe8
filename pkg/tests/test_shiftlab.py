import numpy as np
import pytest

from avucal.shiftlab import (INTENSITIES, OOD_LABEL, SHIFT_KINDS, Dataset, ShiftSpec, apply_shift, make_blobs,
                             make_dataset, make_ood, make_two_moons, shift_features)


class TestGenerators:
    def test_noiseless_moons_lie_on_half_circles(self):
        ds = make_two_moons(400, noise=0.0, seed=1)
        outer = ds.features[ds.labels == 0]
        inner = ds.features[ds.labels == 1]
        np.testing.assert_allclose(np.linalg.norm(outer, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(inner - [1.0, 0.5], axis=1), 1.0, atol=1e-9)
        assert np.all(outer[:, 1] >= -1e-12) and np.all(inner[:, 1] <= 0.5 + 1e-12)

    def test_same_seed_gives_identical_bytes(self):
        a, b = make_two_moons(300, seed=4), make_two_moons(300, seed=4)
        assert a.to_csv() == b.to_csv()
        assert make_blobs(90, seed=2).to_csv() == make_blobs(90, seed=2).to_csv()
        assert a.to_csv() != make_two_moons(300, seed=5).to_csv()

    def test_tight_blobs_are_nearest_centroid_separable(self):
        ds = make_blobs(300, K=4, d=3, spread=1e-6, seed=3)
        cents = np.array([ds.features[ds.labels == k].mean(axis=0) for k in range(4)])
        pred = np.argmin(np.linalg.norm(ds.features[:, None] - cents[None], axis=2), axis=1)
        assert np.mean(pred == ds.labels) == 1.0

    def test_splits_and_class_coverage(self):
        ds = make_two_moons(500, seed=0)
        assert [int(np.sum(ds.split == s)) for s in ("train", "val", "test")] == [300, 100, 100]
        assert set(ds.subset("train").labels) == {0, 1}
        assert ds.class_count == 2

    def test_descriptor_regenerates(self):
        ds = make_blobs(120, K=3, d=4, spread=0.5, seed=9)
        assert make_dataset(ds.descriptor).to_csv() == ds.to_csv()
        moons = make_two_moons(100, noise=0.2, seed=3)
        assert make_dataset(moons.descriptor).to_csv() == moons.to_csv()
        with pytest.raises(ValueError):
            make_dataset({"generator": "spirals"})

    def test_csv_round_trip(self, tmp_path):
        ds = make_blobs(50, K=2, d=3, seed=1)
        ds.save(tmp_path / "d.csv")
        back = Dataset.load(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert list(back.split) == list(ds.split)
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "f0,f1,f2,label,split"

    def test_bad_header(self, tmp_path):
        (tmp_path / "bad.csv").write_text("x,y,label,split\n1,2,0,train\n")
        with pytest.raises(ValueError):
            Dataset.load(tmp_path / "bad.csv")


class TestShifts:
    @pytest.mark.parametrize("kind", SHIFT_KINDS)
    def test_severity_is_strictly_monotone(self, kind):
        ds = make_blobs(1000, K=3, d=4, seed=0)
        disp = [np.mean(np.linalg.norm(apply_shift(ds, ShiftSpec(kind, i, 7)).features - ds.features, axis=1))
                for i in INTENSITIES]
        assert all(b > a for a, b in zip(disp, disp[1:])), disp

    @pytest.mark.parametrize("kind", SHIFT_KINDS)
    def test_label_and_size_preserving(self, kind):
        ds = make_two_moons(200, seed=1)
        out = apply_shift(ds, ShiftSpec(kind, 3, 2))
        assert out.features.shape == ds.features.shape
        np.testing.assert_array_equal(out.labels, ds.labels)
        assert out.descriptor["shift"] == {"kind": kind, "intensity": 3, "seed": 2}

    def test_mean_shift_is_exact(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        d1 = shift_features(x, ShiftSpec("mean_shift", 1, 5)) - x
        d4 = shift_features(x, ShiftSpec("mean_shift", 4, 5)) - x
        np.testing.assert_allclose(np.linalg.norm(d1, axis=1), 0.2, atol=1e-12)
        np.testing.assert_allclose(d4, 4 * d1, atol=1e-12)
        np.testing.assert_allclose(d1, np.tile(d1[0], (20, 1)), atol=1e-15)

    def test_rotation_preserves_norm(self):
        x = np.random.default_rng(1).normal(size=(50, 4))
        for i in INTENSITIES:
            out = shift_features(x, ShiftSpec("rotation", i))
            np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), atol=1e-9)

    def test_deterministic_noise(self):
        x = np.zeros((5, 2))
        a = shift_features(x, ShiftSpec("gauss_noise", 2, 11))
        np.testing.assert_array_equal(a, shift_features(x, ShiftSpec("gauss_noise", 2, 11)))
        assert not np.array_equal(a, shift_features(x, ShiftSpec("gauss_noise", 2, 12)))

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            ShiftSpec("fog", 1)
        with pytest.raises(ValueError):
            ShiftSpec("scale", 6)


class TestOod:
    def test_far_from_training_support(self):
        ds = make_two_moons(600, seed=2)
        train = ds.subset("train").features
        ood = make_ood(ds, seed=3)
        radius = np.linalg.norm(train, axis=1).max()
        dists = np.linalg.norm(ood.features[:, None] - train[None], axis=2)
        assert dists.min() > 2 * radius
        assert np.all(ood.labels == OOD_LABEL)
        assert len(ood) == len(ds.subset("test"))

    def test_deterministic(self):
        ds = make_blobs(100, seed=0)
        assert make_ood(ds, seed=1).to_csv() == make_ood(ds, seed=1).to_csv()
        assert make_ood(ds, seed=1).to_csv() != make_ood(ds, seed=2).to_csv()
