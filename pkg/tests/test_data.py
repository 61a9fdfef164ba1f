"""Procedural domains, augmentation alignment, mixing-stream statistics."""

import math

import numpy as np
import pytest

from spirit import data as D


def small_domain(role="target", n=8, res=32, seed=5):
    return D.generate_domain(seed, D.default_domain_params(role), n, res, domain=role)


class TestGenerator:
    def test_deterministic_regeneration(self):
        a = D.generate_domain(11, D.default_domain_params("target"), 5, 64)
        b = D.generate_domain(11, D.default_domain_params("target"), 5, 64)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert sa.mask.tobytes() == sb.mask.tobytes()

    def test_different_seeds_differ(self):
        a = D.generate_domain(11, D.default_domain_params("target"), 1, 64)
        b = D.generate_domain(12, D.default_domain_params("target"), 1, 64)
        assert a.samples[0].image.tobytes() != b.samples[0].image.tobytes()

    @pytest.mark.parametrize("role", ["source", "target", "proximity"])
    def test_mask_properties_over_100_samples(self, role):
        ds = D.generate_domain(3, D.default_domain_params(role), 100, 64, domain=role)
        for s in ds.samples:
            values = set(np.unique(s.mask))
            assert values == {0, 1}
            fraction = s.mask.mean()
            assert 0.1 <= fraction <= 0.6
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_proximity_closer_than_source(self):
        def channel_means(role):
            ds = D.generate_domain(21, D.default_domain_params(role), 100, 64, domain=role)
            return np.mean([s.image.mean(axis=(1, 2)) for s in ds.samples], axis=0)

        target = channel_means("target")
        proximity = channel_means("proximity")
        source = channel_means("source")
        d_tp = np.linalg.norm(target - proximity)
        d_ts = np.linalg.norm(target - source)
        assert d_tp < d_ts

    def test_invalid_resolution_rejected(self):
        params = D.default_domain_params("target")
        with pytest.raises(ValueError, match="power of two"):
            D.generate_domain(0, params, 1, 48)
        with pytest.raises(ValueError, match="power of two"):
            D.generate_domain(0, params, 1, 16)
        with pytest.raises(ValueError, match="n must"):
            D.generate_domain(0, params, 0, 64)


class TestAugment:
    def test_flip_is_involution(self):
        s = small_domain(n=1).samples[0]
        spec = D.AugmentSpec(crop=32, flip_prob=1.0, pool=False)
        rng = np.random.default_rng(0)
        once = D.augment(s, spec, rng)
        twice = D.augment(once, spec, rng)
        assert twice.image.tobytes() == s.image.tobytes()
        assert twice.mask.tobytes() == s.mask.tobytes()

    def test_crop_offsets_shared_by_image_and_mask(self):
        s = small_domain(n=1, res=64).samples[0]
        aligned = D.Sample(
            image=np.repeat(s.mask[None].astype(np.float32), 3, axis=0),
            mask=s.mask, domain=s.domain,
        )
        spec = D.AugmentSpec(crop=32, flip_prob=0.5, pool=False)
        rng = np.random.default_rng(4)
        for _ in range(20):
            out = D.augment(aligned, spec, rng)
            np.testing.assert_array_equal(out.image[0], out.mask.astype(np.float32))

    def test_pool_halves_and_mask_ids_shrink_or_stay(self):
        ds = small_domain(n=100, res=64)
        spec = D.AugmentSpec(crop=64, flip_prob=0.5, pool=True)
        rng = np.random.default_rng(9)
        for s in ds.samples:
            out = D.augment(s, spec, rng)
            assert out.image.shape == (3, 32, 32)
            assert out.mask.shape == (32, 32)
            assert set(np.unique(out.mask)) <= set(np.unique(s.mask))
            assert np.issubdtype(out.mask.dtype, np.integer)

    def test_crop_larger_than_image_raises(self):
        s = small_domain(n=1).samples[0]
        with pytest.raises(ValueError, match="crop"):
            D.augment(s, D.AugmentSpec(crop=64, pool=False), np.random.default_rng(0))

    def test_resize_then_crop(self):
        s = small_domain(n=1, res=64).samples[0]
        spec = D.AugmentSpec(resize_to=128, crop=64, flip_prob=0.0, pool=True)
        out = D.augment(s, spec, np.random.default_rng(0))
        assert out.image.shape == (3, 32, 32)
        assert set(np.unique(out.mask)) <= {0, 1}

    def test_resize_constant_image_stays_constant(self):
        s = D.Sample(image=np.full((3, 32, 32), 0.25, np.float32),
                     mask=np.zeros((32, 32), np.int64), domain="target")
        spec = D.AugmentSpec(resize_to=64, crop=64, flip_prob=0.0, pool=False)
        out = D.augment(s, spec, np.random.default_rng(0))
        np.testing.assert_allclose(out.image, 0.25, atol=1e-6)

    def test_augmented_shape_helper(self):
        spec = D.AugmentSpec(resize_to=128, crop=64, pool=True)
        assert D.augmented_shape(spec, 64) == (3, 32, 32)
        spec = D.AugmentSpec(crop=32, pool=False)
        assert D.augmented_shape(spec, 64) == (3, 32, 32)

    def test_eval_transform_deterministic(self):
        s = small_domain(n=1, res=64).samples[0]
        t = D.eval_transform(D.AugmentSpec(crop=64, flip_prob=0.0, pool=True))
        a, b = t(s), t(s)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.image.shape == (3, 32, 32)


class TestMixStream:
    def _stream(self, r, batch=4, seed=0):
        target = small_domain("target", n=6)
        proximity = small_domain("proximity", n=6)
        return D.MixStream(target, proximity, r, seed=seed, batch_size=batch)

    def test_infinite_r_draws_only_target(self):
        stream = self._stream(math.inf)
        for s in stream.next_batch():
            assert s.domain == "target"

    def test_zero_r_draws_only_proximity(self):
        stream = self._stream(0.0)
        domains = {s.domain for _ in range(5) for s in D.shuffle_select(stream)}
        assert domains == {"proximity"}

    @pytest.mark.parametrize("r", [0.0, 0.2, 0.5, 1.0, 3.0, 5.0, 10.0, math.inf])
    def test_target_fraction_within_3_sigma(self, r):
        stream = self._stream(r, batch=100, seed=123)
        n = 10_000
        draws = [s for _ in range(n // 100) for s in stream.next_batch()]
        fraction = np.mean([s.domain == "target" for s in draws])
        p = 1.0 if math.isinf(r) else r / (1.0 + r)
        sigma = math.sqrt(p * (1.0 - p) / n)
        assert abs(fraction - p) <= 3.0 * sigma + 1e-12

    def test_deterministic_under_seed(self):
        a = self._stream(0.5, seed=9).next_batch()
        b = self._stream(0.5, seed=9).next_batch()
        for sa, sb in zip(a, b):
            assert sa.image.tobytes() == sb.image.tobytes()

    def test_empty_target_with_positive_r_raises(self):
        proximity = small_domain("proximity", n=4)
        empty = D.DomainDataset([], "target", 0, D.default_domain_params("target"), 32)
        with pytest.raises(ValueError, match="target"):
            D.MixStream(empty, proximity, 1.0, seed=0, batch_size=2)

    def test_empty_proximity_with_finite_r_raises(self):
        target = small_domain("target", n=4)
        empty = D.DomainDataset([], "proximity", 0, D.default_domain_params("proximity"), 32)
        with pytest.raises(ValueError, match="proximity"):
            D.MixStream(target, empty, 1.0, seed=0, batch_size=2)
        # but r = inf never touches proximity
        D.MixStream(target, None, math.inf, seed=0, batch_size=2).next_batch()

    def test_negative_r_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            self._stream(-0.5)


class TestRandomChoice:
    def test_single_sample_dataset(self):
        ds = small_domain(n=1)
        out = D.random_choice(ds, np.random.default_rng(0), 1)
        assert out[0] is ds.samples[0]

    def test_seeded_draws_identical(self):
        ds = small_domain(n=10)
        a = D.random_choice(ds, np.random.default_rng(3), 20)
        b = D.random_choice(ds, np.random.default_rng(3), 20)
        assert [id(s) for s in a] == [id(s) for s in b]

    def test_uniform_frequencies_within_3_sigma(self):
        ds = small_domain(n=64)
        rng = np.random.default_rng(17)
        n = 10_000
        draws = D.random_choice(ds, rng, n)
        ids = {id(s): i for i, s in enumerate(ds.samples)}
        counts = np.zeros(64)
        for s in draws:
            counts[ids[id(s)]] += 1
        p = 1.0 / 64.0
        sigma = math.sqrt(p * (1.0 - p) / n)
        np.testing.assert_array_less(np.abs(counts / n - p), 3.0 * sigma)

    def test_empty_dataset_raises(self):
        empty = D.DomainDataset([], "target", 0, D.default_domain_params("target"), 32)
        with pytest.raises(ValueError, match="empty"):
            D.random_choice(empty, np.random.default_rng(0), 1)


class TestDatasetFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = small_domain(n=5, res=64)
        path = tmp_path / "target.tensors"
        D.save_dataset(ds, path)
        entry = D.manifest_entry(ds, "target.tensors")
        back = D.load_dataset(path, entry)
        assert len(back) == len(ds)
        assert back.domain == ds.domain and back.seed == ds.seed
        assert back.params == ds.params
        for sa, sb in zip(ds.samples, back.samples):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert np.array_equal(sa.mask, sb.mask)

    def test_manifest_round_trip(self, tmp_path):
        ds = small_domain(n=2)
        entry = D.manifest_entry(ds, "target.tensors")
        path = tmp_path / "manifest.json"
        D.write_manifest(path, [entry])
        assert D.read_manifest(path) == [entry]
